"""The sub-goal imagination network, its replay buffer of successful
episodes, and the success-rate-driven conditioning noise schedule."""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd


@dataclass
class SubgoalRecord:
    """(initial state, target embedding, reached sub-goal) from one
    successful episode; all detached numpy vectors."""
    s0: np.ndarray
    g: np.ndarray
    subgoal: np.ndarray


class ImaginationNet:
    """6-layer tanh MLP from [s0 : g] to a sub-goal latent, squeezed
    through a low-dimensional bottleneck in the middle."""

    def __init__(self, state_dim, goal_dim, bottleneck=None):
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        h = state_dim
        b = bottleneck or max(h // 4, 1)
        self.widths = [h + goal_dim, h, max(h // 2, 1), b, max(h // 2, 1), h, h]

    def param_shapes(self):
        out = {}
        for i in range(6):
            out[f"img.l{i}.W"] = (self.widths[i + 1], self.widths[i])
            out[f"img.l{i}.b"] = (self.widths[i + 1],)
        return out

    def init_params(self, rng):
        # gain 2 keeps signal alive through the six tanh layers
        out = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                out[name] = np.zeros(shape)
            else:
                bound = 2.0 / math.sqrt(shape[1])
                out[name] = rng.uniform(-bound, bound, size=shape)
        return out

    def forward(self, params, s0, g):
        """tanh after every layer, so the output lives in (-1, 1) like the
        LSTM states it must imitate."""
        x = nd.Tensor(np.concatenate([s0, g]))
        for i in range(6):
            x = nd.tanh(nd.linear(x, params[f"img.l{i}.W"], params[f"img.l{i}.b"]))
        return x


def imagine(net, params, s0, g, sigma2, rng):
    """Imagined sub-goal I = f([s0:g]) + N(0, sigma2 * identity), detached.

    Computed once per episode and held fixed by the caller; sigma2 = 0 is
    exactly the deterministic network output.
    """
    if sigma2 < 0:
        raise ValueError(f"imagine: negative noise variance {sigma2}")
    with nd.untaped():
        base = net.forward(params, s0, g)
    out = base.data
    if sigma2 > 0:
        out = out + rng.normal(0.0, math.sqrt(sigma2), size=out.shape)
    return out


def rnd_imagination(dim, rng, variance=0.5):
    """Random-conditioning ablation: tanh of a Gaussian draw, fresh each
    episode, matched in range to real imagined states."""
    return np.tanh(rng.normal(0.0, math.sqrt(variance), size=dim))


def noise_variance(sigma2_max, sr):
    """Conditioning-noise variance max(sigma2_max - sr, 0)."""
    return max(sigma2_max - sr, 0.0)


class NoiseSchedule:
    """Noise variance driven by a moving success-rate average: full noise
    while the agent fails, none once sr reaches sigma2_max."""

    def __init__(self, sigma2_max, window):
        if sigma2_max < 0 or window < 1:
            raise ValueError("NoiseSchedule: sigma2_max must be >= 0, window >= 1")
        self.sigma2_max = sigma2_max
        self.window = window
        self._ring = deque(maxlen=window)

    def update(self, success):
        self._ring.append(1.0 if success else 0.0)

    @property
    def sr(self):
        if not self._ring:
            return 0.0
        return sum(self._ring) / len(self._ring)

    @property
    def sigma2(self):
        return noise_variance(self.sigma2_max, self.sr)


class ReplayBuffer:
    """Fixed-capacity store of SubgoalRecords, emptied right after each
    training flush."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("ReplayBuffer: capacity must be >= 1")
        self.capacity = capacity
        self.records = []

    def __len__(self):
        return len(self.records)

    @property
    def full(self):
        return len(self.records) >= self.capacity

    def push(self, record):
        """Append a record; returns True when capacity is now reached."""
        if self.full:
            raise ValueError("ReplayBuffer: push beyond capacity; flush first")
        self.records.append(record)
        return self.full

    def clear(self):
        self.records = []


def train_imagination(net, store, buffer, epochs, lr):
    """Per-record gradient steps over the whole buffer for `epochs` passes;
    returns the mean loss of the final epoch.  The caller owns emptying
    the buffer and syncing the trained weights."""
    if len(buffer) == 0:
        raise ValueError("train_imagination: empty buffer")
    final = 0.0
    for _ in range(epochs):
        losses = []
        for rec in buffer.records:
            with nd.Tape() as tape:
                params = store.snapshot()
                pred = net.forward(params, rec.s0, rec.g)
                loss = nd.smooth_l1(pred, nd.Tensor(rec.subgoal))
            grads = nd.backward(loss, tape, params)
            store.apply_gradients(grads, lr)
            losses.append(float(loss.data))
        final = sum(losses) / len(losses)
    return final


def sync_shared(shared_store, local_store):
    """Publish locally trained weights: whole-slot atomic replacement, so
    concurrent readers see the old or the new set, never a mix."""
    shared_store.replace(local_store.export())
