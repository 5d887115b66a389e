"""Pilot: sigma2_max calibration for the desk-scale headline experiment."""
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
    mode, seed, sigma2_max = args
    cfg = TrainConfig(workers=1, max_episode=30000, mode=mode, seed=seed, hidden=64,
                      t_max=50, layout_seed=1234, lr=1e-3, beta_h=0.01,
                      sigma2_max=sigma2_max, ckpt_every=6000)
    tdir = tempfile.mkdtemp(prefix=f"pilot-{mode}-{seed}-")
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
    return (f"{mode}(s2max={sigma2_max}) s{seed}: {dt:.0f}s best={name} val={best_val:.3f} | "
            f"test SR={rep.sr:.3f} SPL={rep.spl:.3f} SR>5={rep.sr_gt5:.3f}")


if __name__ == "__main__":
    jobs = []
    for seed in (21, 22):
        jobs.append(("foresit", seed, 0.4))
        jobs.append(("foresit", seed, 0.05))
        if seed != 21:
            jobs.append(("baseline", seed, 0.9))
    with Pool(2) as pool:
        for line in pool.imap_unordered(run, jobs):
            print(line, flush=True)
