"""Asynchronous multi-worker actor-critic training with optional sub-goal
imagination conditioning: the full method, the plain baseline, and the
random / interval / attention-target ablation modes."""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import ndgrad as nd
from .agent import (Agent, AttentionCache, TrajectoryLog, action_one_hot,
                    select_subgoal)
from .gridhome import NUM_ACTIONS, VOCAB_SIZE, make_splits, obs_dim, reset, step
from .imagination import (ImaginationNet, NoiseSchedule, ReplayBuffer,
                          SubgoalRecord, imagine, rnd_imagination, sync_shared,
                          train_imagination)

log = logging.getLogger(__name__)

MODES = ("baseline", "foresit", "rnd", "int", "att")
ATTENTION_MODES = ("foresit", "int", "att")  # modes that keep a replay buffer


class ConfigError(ValueError):
    """Invalid training configuration; the message names the field."""


@dataclass
class TrainConfig:
    # run
    workers: int = 1
    max_episode: int = 1000
    mode: str = "foresit"
    seed: int = 0
    ckpt_every: int = 0  # 0 disables periodic checkpoints
    # environment
    size_min: int = 8
    size_max: int = 14
    k_window: int = 5
    t_max: int = 50
    radius: int = 1
    layout_seed: int = 1234
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    # model
    hidden: int = 128
    bottleneck: int = 0  # 0 -> hidden // 4
    # optimisation
    gamma: float = 0.99
    beta_h: float = 0.01
    lr: float = 1e-4
    beta_im: float = 1e-4
    m_max: int = 32
    sigma2_max: float = 0.9
    sr_window: int = 100
    epoch_max: int = 10
    int_interval: int = 10

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: {self.mode!r} not one of {MODES}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma: {self.gamma} outside (0, 1]")
        positive = ("workers", "max_episode", "t_max", "m_max", "sr_window",
                    "epoch_max", "int_interval", "hidden", "k_window",
                    "n_train", "n_val", "n_test", "radius")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        nonneg = ("beta_h", "lr", "beta_im", "sigma2_max", "ckpt_every", "bottleneck")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.size_min < 5 or self.size_max < self.size_min:
            raise ConfigError(f"size range: invalid ({self.size_min}, {self.size_max})")
        return self

    @staticmethod
    def field_names():
        return [f.name for f in fields(TrainConfig)]


@dataclass
class EpisodeResult:
    episode: int
    worker: int
    mode: str
    success: bool
    length: int
    ret: float
    sr: float
    sr_global: float
    sigma2: float
    t_star: int | None
    losses: dict
    n_imaginations: int = 1


@dataclass
class FlushEvent:
    episode: int
    worker: int
    final_loss: float
    epochs: int
    buffer_size: int


def episode_record(res):
    return {
        "episode": res.episode,
        "worker": res.worker,
        "mode": res.mode,
        "success": res.success,
        "length": res.length,
        "return": round(res.ret, 10),
        "sr": round(res.sr, 10),
        "sr_global": round(res.sr_global, 10),
        "sigma2": round(res.sigma2, 10),
        "t_star": res.t_star,
        "losses": {k: round(v, 10) for k, v in res.losses.items()},
    }


def flush_record(ev):
    return {
        "episode": ev.episode,
        "worker": ev.worker,
        "final_loss": round(ev.final_loss, 10),
        "epochs": ev.epochs,
        "buffer_size": ev.buffer_size,
    }


class SuccessTracker:
    """Moving average of the last `window` episode outcomes."""

    def __init__(self, window=100):
        self._ring = deque(maxlen=window)

    def update(self, success):
        self._ring.append(1.0 if success else 0.0)

    def __len__(self):
        return len(self._ring)

    @property
    def sr(self):
        if not self._ring:
            return 0.0
        return sum(self._ring) / len(self._ring)


def make_agent(cfg):
    return Agent(obs_dim(cfg.k_window), VOCAB_SIZE, cfg.hidden, NUM_ACTIONS)


def make_imagination(cfg):
    return ImaginationNet(cfg.hidden, VOCAB_SIZE, cfg.bottleneck or None)


class SharedState:
    """Everything the workers share: parameter stores, the global success
    tracker, and the episode counter."""

    def __init__(self, cfg, stop=None):
        cfg.validate()
        self.cfg = cfg
        self.agent = make_agent(cfg)
        self.imagination = make_imagination(cfg)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA11CE)))
        self.policy_store = nd.ParamStore()
        for name, arr in self.agent.init_params(rng).items():
            self.policy_store.add(name, arr)
        self.imag_store = nd.ParamStore()
        for name, arr in self.imagination.init_params(rng).items():
            self.imag_store.add(name, arr)
        self.tracker = SuccessTracker(cfg.sr_window)
        self.stop = stop if stop is not None else threading.Event()
        self._count = 0
        self._lock = threading.Lock()

    def next_episode(self):
        with self._lock:
            if self.stop.is_set() or self._count >= self.cfg.max_episode:
                return None
            idx = self._count
            self._count += 1
            return idx


def merged_store(policy_store, imag_store):
    """One store with both parameter sets (slot names are disjoint), for
    checkpointing; version is the policy store's update count."""
    out = nd.ParamStore()
    for src in (policy_store, imag_store):
        for name in src.names():
            out.add(name, src.get(name).copy())
            out._m[name] = src._m[name].copy()
            out._v[name] = src._v[name].copy()
    out.version = policy_store.version
    return out


def split_store(store):
    """Split a merged checkpoint back into (policy arrays, imagination arrays)."""
    policy, imag = {}, {}
    for name in store.names():
        (imag if name.startswith("img.") else policy)[name] = store.get(name).copy()
    return policy, imag


# ---------------------------------------------------------------------------
# losses


def compute_returns(rewards, gamma, v_boot=0.0):
    """Discounted returns R_t = r_t + gamma * R_{t+1}, seeded with v_boot."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"compute_returns: gamma {gamma} outside (0, 1]")
    out = [0.0] * len(rewards)
    acc = v_boot
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def actor_critic_losses(log_, returns, gamma, beta_h, advantages=None):
    """Policy and value losses over a finished trajectory.

    The TD advantage r_t + gamma V(s*_{t+1}) - V(s*_t) is a constant in
    the policy term (no gradient through V there); the terminal bootstrap
    is zero because episodes always finish done.  Explicit `advantages`
    override the TD computation (gradient checks need them frozen across
    perturbations).
    """
    T1 = len(log_.states)
    if not (len(log_.rewards) == len(log_.values) == len(log_.log_probs)
            == len(log_.entropies) == len(returns) == T1):
        raise ValueError(
            f"actor_critic_losses: length mismatch states={T1} rewards={len(log_.rewards)} "
            f"values={len(log_.values)} returns={len(returns)}"
        )
    j_pi = None
    j_v = None
    for t in range(T1):
        v_t = log_.values[t]
        if advantages is None:
            v_next = float(log_.values[t + 1].data) if t + 1 < T1 else 0.0
            adv = log_.rewards[t] + gamma * v_next - float(v_t.data)
        else:
            adv = advantages[t]
        term = nd.add(nd.scale(log_.log_probs[t], -adv),
                      nd.scale(log_.entropies[t], beta_h))
        j_pi = term if j_pi is None else nd.add(j_pi, term)
        diff = nd.sub(v_t, nd.Tensor(np.float64(returns[t])))
        sq = nd.scale(nd.mul(diff, diff), 0.5)
        j_v = sq if j_v is None else nd.add(j_v, sq)
    return j_pi, j_v


def mode_att_target(agent, params, log_):
    """Ablation target: the attended mixture at the final step instead of
    the argmax sub-goal state."""
    if not log_.success:
        raise ValueError("mode_att_target: episode was not successful")
    with nd.untaped():
        _, s_star = agent.attend(params, log_.states)
    return s_star.data.copy()


def int_reimagine_steps(total_steps, k):
    """Step indices at which interval mode re-imagines; k=None means once."""
    if k is None:
        return [0]
    return [t for t in range(total_steps) if t % k == 0]


# ---------------------------------------------------------------------------
# the worker loop


def run_worker(worker_id, shared, train_layouts, policy_hook=None):
    """Run episodes until the shared counter is exhausted, yielding an
    EpisodeResult per episode and a FlushEvent per imagination flush.

    policy_hook(episode_state, t) may force actions (tests use it to
    script an oracle policy); None falls back to sampling.
    """
    cfg = shared.cfg
    agent = shared.agent
    net = shared.imagination
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, worker_id)))
    schedule = NoiseSchedule(cfg.sigma2_max, cfg.sr_window)
    buffer = ReplayBuffer(cfg.m_max)
    mode = cfg.mode
    uses_attention = mode != "baseline"
    uses_buffer = mode in ATTENTION_MODES
    zero_i = np.zeros(cfg.hidden)

    while True:
        episode = shared.next_episode()
        if episode is None:
            return
        try:
            result, flush = _run_episode(episode, worker_id, shared, agent, net,
                                         rng, schedule, buffer, train_layouts,
                                         zero_i, uses_attention, uses_buffer,
                                         policy_hook)
        except Exception:
            log.exception("worker %d: episode %d failed; counted as failure",
                          worker_id, episode)
            schedule.update(False)
            shared.tracker.update(False)
            result = EpisodeResult(episode, worker_id, mode, False, 0, 0.0,
                                   schedule.sr, shared.tracker.sr, 0.0, None,
                                   {"policy": 0.0, "value": 0.0}, 0)
            flush = None
        yield result
        if flush is not None:
            yield flush


def _run_episode(episode, worker_id, shared, agent, net, rng, schedule, buffer,
                 train_layouts, zero_i, uses_attention, uses_buffer, policy_hook):
    cfg = shared.cfg
    mode = cfg.mode
    layout = train_layouts[int(rng.integers(len(train_layouts)))]
    obs, target, state = reset(layout, int(rng.integers(2 ** 63)),
                               k_window=cfg.k_window, t_max=cfg.t_max,
                               radius=cfg.radius)
    g = target.embedding
    params = shared.policy_store.snapshot()
    imag_params = shared.imag_store.snapshot() if uses_buffer else None
    sigma2 = schedule.sigma2 if uses_buffer else 0.0
    traj = TrajectoryLog()
    cache = AttentionCache()
    tape = nd.Tape()
    n_imaginations = 0
    success = False

    with tape:
        st = agent.encode_step(params, obs.features, g,
                               action_one_hot(None, NUM_ACTIONS),
                               agent.zero_state())
        if mode == "rnd":
            imagined = rnd_imagination(cfg.hidden, rng)
            n_imaginations = 1
        elif uses_buffer:
            imagined = imagine(net, imag_params, st.h.data, g, sigma2, rng)
            n_imaginations = 1
        else:
            imagined = zero_i

        while True:
            t = len(traj.actions)
            if mode == "int" and t > 0 and t % cfg.int_interval == 0:
                imagined = imagine(net, imag_params, st.h.data, g, sigma2, rng)
                n_imaginations += 1
            traj.states.append(st.h)
            if uses_attention:
                alpha, s_star = agent.attend(params, traj.states, cache)
                traj.attn_weights.append(alpha.data.copy())
            else:
                s_star = st.h
                traj.attn_weights.append(None)
            traj.values.append(agent.value_forward(params, s_star))
            logits = agent.policy_logits(params, st.h, g, imagined)
            lsm = nd.log_softmax(logits)
            probs = nd.softmax(logits)
            action = None
            if policy_hook is not None:
                action = policy_hook(state, t)
            if action is None:
                u = rng.random()
                action = min(int(np.searchsorted(np.cumsum(probs.data), u, side="right")),
                             NUM_ACTIONS - 1)
            traj.log_probs.append(nd.pick(lsm, action))
            traj.entropies.append(nd.scale(nd.total(nd.mul(probs, lsm)), -1.0))
            obs, reward, done, success = step(state, action)
            traj.actions.append(action)
            traj.rewards.append(reward)
            if done:
                break
            st = agent.encode_step(params, obs.features, g,
                                   action_one_hot(action, NUM_ACTIONS), st)

        traj.success = success
        returns = compute_returns(traj.rewards, cfg.gamma, 0.0)
        j_pi, j_v = actor_critic_losses(traj, returns, cfg.gamma, cfg.beta_h)
        total_loss = nd.add(j_pi, j_v)

    grads = nd.backward(total_loss, tape, params)
    shared.policy_store.apply_gradients(grads, cfg.lr)

    t_star = None
    flush = None
    if success and uses_buffer:
        t_star, s_hat = select_subgoal(traj)
        if mode == "att":
            s_hat = mode_att_target(agent, params, traj)
        full = buffer.push(SubgoalRecord(traj.states[0].data.copy(), g.copy(), s_hat))
        if full:
            local = shared.imag_store.clone()
            final_loss = train_imagination(net, local, buffer, cfg.epoch_max, cfg.beta_im)
            sync_shared(shared.imag_store, local)
            buffer.clear()
            flush = FlushEvent(episode, worker_id, final_loss, cfg.epoch_max, cfg.m_max)
    schedule.update(success)
    shared.tracker.update(success)

    result = EpisodeResult(
        episode=episode, worker=worker_id, mode=mode, success=success,
        length=len(traj.actions), ret=float(sum(traj.rewards)),
        sr=schedule.sr, sr_global=shared.tracker.sr, sigma2=sigma2,
        t_star=t_star, losses={"policy": float(j_pi.data), "value": float(j_v.data)},
        n_imaginations=n_imaginations,
    )
    return result, flush


# ---------------------------------------------------------------------------
# orchestration


def train(cfg, emit=None, ckpt_path=None, layouts=None, policy_hook=None, stop=None):
    """Run the full training loop; returns the SharedState.

    emit(record_dict) receives one dict per episode/flush in completion
    order.  With workers == 1 the stream is bit-reproducible for a fixed
    seed.  ckpt_path (a directory) enables periodic + final checkpoints.
    A set `stop` event drains the workers and still writes the final
    checkpoint.
    """
    cfg.validate()
    if layouts is None:
        layouts = make_splits(cfg.layout_seed, cfg.n_train, cfg.n_val, cfg.n_test,
                              (cfg.size_min, cfg.size_max))["train"]
    shared = SharedState(cfg, stop=stop)
    emit_lock = threading.Lock()
    done_episodes = [0]

    def consume(stream):
        for item in stream:
            if isinstance(item, EpisodeResult):
                rec = episode_record(item)
                done_episodes[0] += 1
                count = done_episodes[0]
            else:
                rec = flush_record(item)
                count = None
            with emit_lock:
                if emit is not None:
                    emit(rec)
            if (count and ckpt_path and cfg.ckpt_every
                    and count % cfg.ckpt_every == 0):
                save_training_checkpoint(shared, f"{ckpt_path}/ep{count:06d}.ckpt")

    if cfg.workers == 1:
        consume(run_worker(0, shared, layouts, policy_hook))
    else:
        threads = [
            threading.Thread(target=consume,
                             args=(run_worker(i, shared, layouts, policy_hook),))
            for i in range(cfg.workers)
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if ckpt_path:
        save_training_checkpoint(shared, f"{ckpt_path}/final.ckpt")
    return shared


def save_training_checkpoint(shared, path):
    nd.save_checkpoint(path, merged_store(shared.policy_store, shared.imag_store))
