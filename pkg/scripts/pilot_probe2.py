"""Probe wave 2: isolate the attention-critic effect and test width 128."""
import os
import sys
import tempfile
import time
from multiprocessing import Pool

import numpy as np

from foresit import ndgrad as nd
from foresit.evaluation import evaluate
from foresit.gridhome import make_splits
from foresit.trainer import TrainConfig, split_store, train


def run(args):
    label, mode, seed, hidden, sigma2_max, attn_only = args
    cfg = TrainConfig(workers=1, max_episode=30000, mode=mode, seed=seed, hidden=hidden,
                      t_max=50, layout_seed=1234, lr=1e-3, beta_h=0.01,
                      sigma2_max=sigma2_max, ckpt_every=6000)
    if attn_only:
        import foresit.trainer as tr
        real = tr.imagine
        tr.imagine = lambda net, params, s0, g, s2, rng: np.zeros(cfg.hidden)
    tdir = tempfile.mkdtemp(prefix=f"probe-{label}-{seed}-")
    t0 = time.time()
    shared = train(cfg, ckpt_path=tdir)
    dt = time.time() - t0
    splits = make_splits(cfg.layout_seed, cfg.n_train, cfg.n_val, cfg.n_test,
                         (cfg.size_min, cfg.size_max))
    best, best_val = None, -1.0
    for name in sorted(os.listdir(tdir)):
        store = nd.load_checkpoint(os.path.join(tdir, name))
        pol, im = split_store(store)
        rep = evaluate(cfg, pol, im, splits["val"], seeds=(0, 1))
        if rep.sr > best_val:
            best_val, best = rep.sr, (pol, im, name)
    pol, im, name = best
    rep = evaluate(cfg, pol, im, splits["test"], seeds=(0, 1, 2, 3, 4))
    return (f"{label} s{seed} h{hidden}: {dt:.0f}s best={name} val={best_val:.3f} | "
            f"test SR={rep.sr:.3f} SPL={rep.spl:.3f} SR>5={rep.sr_gt5:.3f}")


if __name__ == "__main__":
    jobs = [
        ("attnonly", "foresit", 21, 64, 0.4, True),
        ("attnonly", "foresit", 22, 64, 0.4, True),
        ("baseline", "baseline", 23, 64, 0.9, False),
        ("baseline128", "baseline", 21, 128, 0.9, False),
        ("foresit128", "foresit", 21, 128, 0.4, False),
    ]
    with Pool(2) as pool:
        for line in pool.imap_unordered(run, jobs):
            print(line, flush=True)
