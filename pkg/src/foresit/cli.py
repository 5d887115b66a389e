"""Command-line entry point: train / eval / ablate / dump-layouts /
export-states, with an INI config file, flag overrides, and a frozen
run manifest.

Exit codes: 0 ok, 2 bad config, 3 corrupt artifact, 4 runtime failure.
"""

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import signal
import sys
import threading
import time
from dataclasses import fields
from multiprocessing import get_context

import numpy as np

from . import ndgrad as nd
from .agent import action_one_hot, select_subgoal
from .evaluation import evaluate
from .gridhome import NUM_ACTIONS, layout_to_text, make_splits, reset, step
from .imagination import imagine
from .trainer import (ConfigError, TrainConfig, make_agent, make_imagination,
                      split_store, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CORRUPT = 3
EXIT_RUNTIME = 4

SECTION_FIELDS = {
    "run": ("seed", "workers", "max_episode", "mode", "ckpt_every"),
    "env": ("size_min", "size_max", "k_window", "t_max", "radius",
            "layout_seed", "n_train", "n_val", "n_test"),
    "model": ("hidden", "bottleneck"),
    "train": ("gamma", "beta_h", "lr", "beta_im", "m_max", "sigma2_max",
              "sr_window", "epoch_max", "int_interval"),
}
REQUIRED_FIELDS = ("mode", "max_episode", "seed")


def _field_types():
    return {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name, raw):
    kind = _field_types()[name]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}")


def config_to_ini(cfg):
    """Serialize every field, sectioned; parse(serialize(cfg)) == cfg."""
    out = io.StringIO()
    parser = configparser.ConfigParser()
    for section, names in SECTION_FIELDS.items():
        parser[section] = {name: repr(getattr(cfg, name)) if isinstance(getattr(cfg, name), float)
                           else str(getattr(cfg, name)) for name in names}
    parser.write(out)
    return out.getvalue()


def config_from_ini(text, base=None):
    """Parse an INI config; unknown keys are config errors.  Returns
    (config, set of provided field names)."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file: {exc}")
    cfg = base or TrainConfig()
    known = _field_types()
    provided = set()
    for section in parser.sections():
        if section not in SECTION_FIELDS:
            raise ConfigError(f"config section [{section}] is not recognised")
        for name, raw in parser[section].items():
            if name not in known or name not in SECTION_FIELDS[section]:
                raise ConfigError(f"config key {section}.{name} is not recognised")
            setattr(cfg, name, _coerce(name, raw))
            provided.add(name)
    return cfg, provided


def config_hash(cfg):
    return hashlib.sha256(config_to_ini(cfg).encode()).hexdigest()[:12]


def load_config(args, require=REQUIRED_FIELDS):
    """Merge file + flag overrides + FORESIT_SEED; validate presence of the
    required fields and the config invariants."""
    cfg = TrainConfig()
    provided = set()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}")
        cfg, provided = config_from_ini(text)
    for name in _field_types():
        flag = getattr(args, f"opt_{name}", None)
        if flag is not None:
            setattr(cfg, name, flag)
            provided.add(name)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        name, raw = item.split("=", 1)
        name = name.strip()
        if name not in _field_types():
            raise ConfigError(f"--set {name}: unknown config field")
        setattr(cfg, name, _coerce(name, raw.strip()))
        provided.add(name)
    env_seed = os.environ.get("FORESIT_SEED")
    if env_seed is not None:
        cfg.seed = _coerce("seed", env_seed)
        provided.add("seed")
    for name in require:
        if name not in provided:
            raise ConfigError(f"{name}: required but not provided "
                              f"(set it in the config file or by flag)")
    cfg.validate()
    return cfg


def write_manifest(run_dir, cfg, started, ended=None):
    manifest = {
        "config": {section: {name: getattr(cfg, name) for name in names}
                   for section, names in SECTION_FIELDS.items()},
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "started": started,
        "ended": ended,
        "outputs": {"metrics": "metrics.jsonl", "checkpoints": "ckpt",
                    "eval": "eval", "config": "config.ini"},
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def make_run_dir(base, cfg):
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    root = os.path.join(base, f"{stamp}-{config_hash(cfg)}")
    run_dir = root
    n = 1
    while os.path.exists(run_dir):
        run_dir = f"{root}-{n}"
        n += 1
    os.makedirs(os.path.join(run_dir, "ckpt"))
    os.makedirs(os.path.join(run_dir, "eval"))
    return run_dir


def split_layouts(cfg, name):
    splits = make_splits(cfg.layout_seed, cfg.n_train, cfg.n_val, cfg.n_test,
                         (cfg.size_min, cfg.size_max))
    return splits[name]


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    cfg = load_config(args)
    run_dir = make_run_dir(args.out, cfg)
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    write_manifest(run_dir, cfg, started)
    with open(os.path.join(run_dir, "config.ini"), "w") as fh:
        fh.write(config_to_ini(cfg))

    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    try:
        with open(metrics_path, "w") as fh:
            train(cfg, emit=lambda rec: fh.write(json.dumps(rec) + "\n"),
                  ckpt_path=os.path.join(run_dir, "ckpt"), stop=stop)
    finally:
        signal.signal(signal.SIGINT, previous)
        ended = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        write_manifest(run_dir, cfg, started, ended)
    if stop.is_set():
        print(f"interrupted; final checkpoint flushed to {run_dir}/ckpt/final.ckpt",
              file=sys.stderr)
        print(run_dir)
        return EXIT_RUNTIME
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def find_config_for_checkpoint(args):
    if args.config:
        return load_config(args, require=())
    ckpt_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    for cand in (os.path.join(ckpt_dir, "..", "config.ini"),
                 os.path.join(ckpt_dir, "config.ini")):
        if os.path.exists(cand):
            ns = argparse.Namespace(**vars(args))
            ns.config = cand
            return load_config(ns, require=())
    return load_config(args, require=())


def cmd_eval(args):
    cfg = find_config_for_checkpoint(args)
    store = nd.load_checkpoint(args.checkpoint)
    policy_arrays, imag_arrays = split_store(store)
    layouts = split_layouts(cfg, args.split)
    seeds = tuple(range(args.eval_seeds))
    report = evaluate(cfg, policy_arrays, imag_arrays, layouts,
                      seeds=seeds, greedy=args.greedy,
                      long_split_on=args.long_split_on)
    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                       "..", "eval")
    os.makedirs(out_dir, exist_ok=True)
    suffix = f"{args.split}_greedy" if args.greedy else args.split
    report_path = os.path.join(out_dir, f"report_{suffix}.json")
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    csv_path = args.csv or os.path.join(out_dir, f"episodes_{suffix}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layout_id", "family", "target", "success",
                         "length", "oracle_length", "seed"])
        for row in report.rows:
            writer.writerow([row["layout_id"], row["family"], row["target"],
                             int(row["success"]), row["length"],
                             row["oracle_length"], row["seed"]])
    print(report.table())
    print(f"report: {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def _ablate_cell(job):
    """Train one (mode, seed) cell and evaluate it on the validation split;
    runs in a worker process."""
    cfg_kwargs, mode, seed, run_base, eval_seeds = job
    cfg = TrainConfig(**cfg_kwargs)
    cfg.mode = mode
    cfg.seed = seed
    cell_dir = os.path.join(run_base, f"{mode}-s{seed}")
    os.makedirs(os.path.join(cell_dir, "ckpt"), exist_ok=True)
    with open(os.path.join(cell_dir, "metrics.jsonl"), "w") as fh:
        shared = train(cfg, emit=lambda rec: fh.write(json.dumps(rec) + "\n"),
                       ckpt_path=os.path.join(cell_dir, "ckpt"))
    layouts = split_layouts(cfg, "val")
    policy_arrays = shared.policy_store.export()
    imag_arrays = shared.imag_store.export()
    report = evaluate(cfg, policy_arrays, imag_arrays, layouts,
                      seeds=tuple(range(eval_seeds)))
    return {"mode": mode, "seed": seed, "status": "ok",
            "sr": report.sr, "spl": report.spl,
            "sr_gt5": report.sr_gt5, "spl_gt5": report.spl_gt5}


def mean_stderr(values):
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def ablation_table(cells, modes):
    lines = [f"{'mode':10s} {'SR%':>16s} {'SPL%':>16s} {'cells':>7s}"]
    for mode in modes:
        rows = [c for c in cells if c["mode"] == mode]
        ok = [c for c in rows if c["status"] == "ok"]
        if not ok:
            lines.append(f"{mode:10s} {'incomplete':>16s} {'incomplete':>16s} "
                         f"{len(ok)}/{len(rows):>4}")
            continue
        sr_m, sr_e = mean_stderr([100 * c["sr"] for c in ok])
        spl_m, spl_e = mean_stderr([100 * c["spl"] for c in ok])
        note = "" if len(ok) == len(rows) else " (incomplete)"
        lines.append(f"{mode:10s} {sr_m:8.2f} ± {sr_e:5.2f} {spl_m:8.2f} ± {spl_e:5.2f} "
                     f"{len(ok)}/{len(rows):>4}{note}")
    return "\n".join(lines)


def cmd_ablate(args):
    cfg = load_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not modes or not seeds:
        raise ConfigError("ablate: need at least one mode and one seed")
    run_base = make_run_dir(args.out, cfg)
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    write_manifest(run_base, cfg, started)
    cfg_kwargs = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    jobs = [(cfg_kwargs, mode, seed, run_base, args.eval_seeds)
            for mode in modes for seed in seeds]
    cells = []
    try:
        if args.jobs > 1:
            with get_context("fork").Pool(args.jobs) as pool:
                for cell in pool.imap(_ablate_cell, jobs):
                    cells.append(cell)
                    print(f"cell done: {cell['mode']} seed={cell['seed']} "
                          f"sr={cell['sr']:.3f}", file=sys.stderr)
        else:
            for job in jobs:
                try:
                    cell = _ablate_cell(job)
                except Exception as exc:
                    cell = {"mode": job[1], "seed": job[2], "status": f"failed: {exc}"}
                cells.append(cell)
    except KeyboardInterrupt:
        pass
    done = {(c["mode"], c["seed"]) for c in cells}
    for _, mode, seed, _, _ in jobs:
        if (mode, seed) not in done:
            cells.append({"mode": mode, "seed": seed, "status": "incomplete"})
    table = ablation_table(cells, modes)
    with open(os.path.join(run_base, "ablation.json"), "w") as fh:
        json.dump({"cells": cells, "modes": modes, "seeds": seeds}, fh, indent=2)
        fh.write("\n")
    write_manifest(run_base, cfg, started,
                   time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    print(table)
    print(run_base)
    return EXIT_OK


# ---------------------------------------------------------------------------
# dump-layouts / export-states


def cmd_dump_layouts(args):
    cfg = load_config(args, require=())
    splits = make_splits(cfg.layout_seed, cfg.n_train, cfg.n_val, cfg.n_test,
                         (cfg.size_min, cfg.size_max))
    for name, layouts in splits.items():
        os.makedirs(os.path.join(args.out, name), exist_ok=True)
        for layout in layouts:
            path = os.path.join(args.out, name, f"layout_{layout.layout_id:04d}.txt")
            with open(path, "w") as fh:
                fh.write(layout_to_text(layout))
    total = sum(len(v) for v in splits.values())
    print(f"wrote {total} layouts under {args.out}")
    return EXIT_OK


def cmd_export_states(args):
    cfg = find_config_for_checkpoint(args)
    store = nd.load_checkpoint(args.checkpoint)
    policy_arrays, imag_arrays = split_store(store)
    agent = make_agent(cfg)
    net = make_imagination(cfg)
    params = {k: nd.Tensor(v) for k, v in policy_arrays.items()}
    imag_params = {k: nd.Tensor(v) for k, v in imag_arrays.items()}
    layouts = split_layouts(cfg, args.split)
    rng = np.random.default_rng(cfg.seed)
    exported = 0
    attempts = 0
    with open(args.out, "w") as fh, nd.untaped():
        while exported < args.episodes and attempts < args.episodes * 200:
            attempts += 1
            layout = layouts[int(rng.integers(len(layouts)))]
            obs, target, state = reset(layout, int(rng.integers(2 ** 63)),
                                       k_window=cfg.k_window, t_max=cfg.t_max,
                                       radius=cfg.radius)
            g = target.embedding
            st = agent.encode_step(params, obs.features, g,
                                   action_one_hot(None, NUM_ACTIONS),
                                   agent.zero_state())
            imagined = imagine(net, imag_params, st.h.data, g, 0.0, rng)
            states = [st.h]
            success = False
            while True:
                probs = agent.policy_forward(params, states[-1], g, imagined)
                u = rng.random()
                action = min(int(np.searchsorted(np.cumsum(probs.data), u, side="right")),
                             NUM_ACTIONS - 1)
                obs, _, done, success = step(state, action)
                if done:
                    break
                st = agent.encode_step(params, obs.features, g,
                                       action_one_hot(action, NUM_ACTIONS), st)
                states.append(st.h)
            if not success:
                continue
            alpha, _ = agent.attend(params, states)
            t_star = int(np.argmax(alpha.data))
            s_hat = states[t_star].data
            for t, s in enumerate(states):
                fh.write(json.dumps({
                    "episode": exported, "t": t, "t_star": t_star,
                    "layout_id": layout.layout_id, "target": target.object_id,
                    "s": [round(v, 8) for v in s.data.tolist()],
                    "s_hat": [round(v, 8) for v in s_hat.tolist()],
                    "i": [round(v, 8) for v in imagined.tolist()],
                }) + "\n")
            exported += 1
    print(f"exported {exported} successful episodes to {args.out}")
    return EXIT_OK if exported else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p, with_overrides=True):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field")
    if with_overrides:
        p.add_argument("--mode", dest="opt_mode")
        p.add_argument("--workers", dest="opt_workers", type=int)
        p.add_argument("--episodes", dest="opt_max_episode", type=int)
        p.add_argument("--seed", dest="opt_seed", type=int)
        p.add_argument("--ckpt-every", dest="opt_ckpt_every", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="foresit",
                                     description="Sub-goal imagination navigation agents")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_config_flags(p)
    p.add_argument("--out", default="runs", help="base directory for run folders")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a layout split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.add_argument("--greedy", action="store_true", help="argmax actions")
    p.add_argument("--eval-seeds", type=int, default=5,
                   help="seeds per (layout, target) pair")
    p.add_argument("--long-split-on", choices=("oracle", "agent"), default="oracle",
                   help="define the >5 split on oracle or agent path length")
    p.add_argument("--csv", help="write per-episode rows to this file")
    p.add_argument("--out", help="directory for report files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare run modes")
    _add_config_flags(p)
    p.add_argument("--modes", default="baseline,foresit,rnd,int,att")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p.add_argument("--eval-seeds", type=int, default=5)
    p.add_argument("--out", default="runs", help="base directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-layouts", help="write the layout splits as text")
    _add_config_flags(p, with_overrides=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_layouts)

    p = sub.add_parser("export-states",
                       help="dump (state, sub-goal, imagination) triples")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--episodes", type=int, default=20,
                   help="successful episodes to export")
    _add_config_flags(p, with_overrides=False)
    p.set_defaults(func=cmd_export_states)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except nd.CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
