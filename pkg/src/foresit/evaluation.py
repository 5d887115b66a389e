"""Frozen-policy evaluation: success rate and success-weighted inverse
path length over held-out layouts, with per-family and long-path splits.

At test time only the encoder, the imagination net, and the policy head
run; the value function and its attention are never consulted.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .agent import action_one_hot
from .gridhome import (DELTAS, FAMILY_NAMES, FREE, NUM_ACTIONS, Pose,
                       _success_here, reset, step)
from .imagination import imagine, rnd_imagination
from .trainer import make_agent, make_imagination

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
LONG_PATH_CUTOFF = 5


def spl(successes, oracle_lengths, agent_lengths):
    """(1/n) * sum s_i * Lg_i / max(L_i, Lg_i); an optimal-length success
    counts 1, as does a success on an already-satisfied start (Lg = 0)."""
    if not (len(successes) == len(oracle_lengths) == len(agent_lengths)):
        raise ValueError(
            f"spl: length mismatch successes={len(successes)} "
            f"oracle={len(oracle_lengths)} agent={len(agent_lengths)}"
        )
    if not successes:
        return 0.0
    total = 0.0
    for s, lg, l in zip(successes, oracle_lengths, agent_lengths):
        if not s:
            continue
        if lg == 0:
            total += 1.0
        else:
            total += lg / max(l, lg)
    return total / len(successes)


@dataclass
class EvalReport:
    sr: float
    spl: float
    sr_gt5: float
    spl_gt5: float
    per_family: dict
    episodes: int
    episodes_gt5: int
    seeds: tuple
    greedy: bool
    mode: str
    rows: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "sr": round(self.sr, 10),
            "spl": round(self.spl, 10),
            "sr_gt5": round(self.sr_gt5, 10),
            "spl_gt5": round(self.spl_gt5, 10),
            "per_family": self.per_family,
            "episodes": self.episodes,
            "episodes_gt5": self.episodes_gt5,
            "seeds": list(self.seeds),
            "greedy": self.greedy,
            "mode": self.mode,
        }

    def table(self):
        lines = [
            f"mode={self.mode} greedy={self.greedy} episodes={self.episodes} "
            f"(long-path episodes: {self.episodes_gt5})",
            f"{'':10s} {'SR':>7s} {'SPL':>7s} {'SR>5':>7s} {'SPL>5':>7s} {'n':>5s}",
            f"{'overall':10s} {100 * self.sr:7.2f} {100 * self.spl:7.2f} "
            f"{100 * self.sr_gt5:7.2f} {100 * self.spl_gt5:7.2f} {self.episodes:5d}",
        ]
        for name, row in self.per_family.items():
            lines.append(
                f"{name:10s} {100 * row['sr']:7.2f} {100 * row['spl']:7.2f} "
                f"{'':7s} {'':7s} {row['episodes']:5d}"
            )
        return "\n".join(lines)


def oracle_distance_table(layout, target_id, k_window, radius):
    """Min actions from every pose to a success pose, by one reverse BFS
    from all goal poses (rotations are symmetric; a move into (x, y) is
    reversed as a move out of (x - dx, y - dy))."""
    dist = {}
    queue = deque()
    for x, y in layout.free_cells():
        for h in range(4):
            if _success_here(layout, Pose(x, y, h), target_id, k_window, radius):
                dist[(x, y, h)] = 0
                queue.append((x, y, h))
    while queue:
        x, y, h = key = queue.popleft()
        d = dist[key]
        preds = [(x, y, (h - 1) % 4), (x, y, (h + 1) % 4)]
        dx, dy = DELTAS[h]
        px, py = x - dx, y - dy
        if 0 <= py < layout.height and 0 <= px < layout.width \
                and layout.cells[py, px] == FREE:
            preds.append((px, py, h))
        for p in preds:
            if p not in dist:
                dist[p] = d + 1
                queue.append(p)
    return dist


def _episode_conditioning(cfg, agent_dims_hidden, net, imag_params, s0, g, rng):
    if cfg.mode == "baseline":
        return np.zeros(agent_dims_hidden)
    if cfg.mode == "rnd":
        return rnd_imagination(agent_dims_hidden, rng)
    return imagine(net, imag_params, s0, g, 0.0, rng)


def run_policy_episode(cfg, agent, net, params, imag_params, layout, target_id,
                       reset_seed, stream_seed, greedy, policy_hook=None):
    """One conditioning-noise-free rollout; returns a per-episode row."""
    obs, target, state = reset(layout, reset_seed, k_window=cfg.k_window,
                               t_max=cfg.t_max, radius=cfg.radius,
                               target_id=target_id)
    start = Pose(state.pose.x, state.pose.y, state.pose.heading)
    rng = np.random.default_rng(stream_seed)
    g = target.embedding
    with nd.untaped():
        st = agent.encode_step(params, obs.features, g,
                               action_one_hot(None, NUM_ACTIONS), agent.zero_state())
        imagined = _episode_conditioning(cfg, cfg.hidden, net, imag_params,
                                         st.h.data, g, rng)
        moves = 0
        while True:
            t = state.t
            if cfg.mode == "int" and t > 0 and t % cfg.int_interval == 0:
                imagined = imagine(net, imag_params, st.h.data, g, 0.0, rng)
            probs = agent.policy_forward(params, st.h, g, imagined)
            action = policy_hook(state, t) if policy_hook is not None else None
            if action is None:
                if greedy:
                    action = int(np.argmax(probs.data))
                else:
                    u = rng.random()
                    action = min(int(np.searchsorted(np.cumsum(probs.data), u, side="right")),
                                 NUM_ACTIONS - 1)
            obs, _, done, success = step(state, action)
            if action != 3:
                moves += 1
            if done:
                break
            st = agent.encode_step(params, obs.features, g,
                                   action_one_hot(action, NUM_ACTIONS), st)
    return start, bool(success), moves


def evaluate(cfg, policy_arrays, imag_arrays, layouts, seeds=DEFAULT_SEEDS,
             greedy=False, policy_hook=None, long_split_on="oracle"):
    """Roll the frozen policy over every (layout, target, seed) triple with
    imagination noise off; aggregates SR/SPL overall, per family, and over
    long-path episodes (oracle length > cutoff by default; pass
    long_split_on="agent" to split on the agent's own path length)."""
    if not layouts:
        raise ValueError("evaluate: no layouts given")
    agent = make_agent(cfg)
    net = make_imagination(cfg)
    params = {k: nd.Tensor(v, name=k) for k, v in policy_arrays.items()}
    imag_params = {k: nd.Tensor(v, name=k) for k, v in imag_arrays.items()}
    rows = []
    for layout in layouts:
        for target_id in sorted(layout.object_cells):
            table = oracle_distance_table(layout, target_id, cfg.k_window, cfg.radius)
            for s in seeds:
                ss = np.random.SeedSequence((layout.layout_id, target_id, s))
                reset_seed, stream_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
                start, success, moves = run_policy_episode(
                    cfg, agent, net, params, imag_params, layout, target_id,
                    reset_seed, stream_seed, greedy, policy_hook)
                lg = table[(start.x, start.y, start.heading)]
                rows.append({
                    "layout_id": layout.layout_id,
                    "family": FAMILY_NAMES[layout.family],
                    "target": target_id,
                    "success": success,
                    "length": moves,
                    "oracle_length": lg,
                    "seed": s,
                })
    return _aggregate(cfg, rows, seeds, greedy, long_split_on)


def _metrics(rows):
    if not rows:
        return 0.0, 0.0
    succ = [r["success"] for r in rows]
    sr = sum(succ) / len(rows)
    s = spl(succ, [r["oracle_length"] for r in rows], [r["length"] for r in rows])
    return sr, s


def _aggregate(cfg, rows, seeds, greedy, long_split_on="oracle"):
    sr, spl_all = _metrics(rows)
    key = "oracle_length" if long_split_on == "oracle" else "length"
    long_rows = [r for r in rows if r[key] > LONG_PATH_CUTOFF]
    sr5, spl5 = _metrics(long_rows)
    per_family = {}
    for fam_id, name in enumerate(FAMILY_NAMES):
        fam_rows = [r for r in rows if r["family"] == name]
        if not fam_rows:
            continue
        fsr, fspl = _metrics(fam_rows)
        per_family[name] = {"sr": round(fsr, 10), "spl": round(fspl, 10),
                            "episodes": len(fam_rows)}
    return EvalReport(sr=sr, spl=spl_all, sr_gt5=sr5, spl_gt5=spl5,
                      per_family=per_family, episodes=len(rows),
                      episodes_gt5=len(long_rows), seeds=tuple(seeds),
                      greedy=greedy, mode=cfg.mode, rows=rows)
