"""Recurrent actor-critic networks: an LSTM state encoder shared by the
policy head, an attention-residual value function over the trajectory's
past states, and argmax-attention sub-goal selection."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd


@dataclass
class AgentState:
    h: nd.Tensor  # latent state s_t, tanh-bounded
    c: nd.Tensor


@dataclass
class TrajectoryLog:
    """Per-episode record; all per-step lists share length T+1."""
    states: list = field(default_factory=list)       # Tensor s_t
    actions: list = field(default_factory=list)      # int
    rewards: list = field(default_factory=list)      # float
    log_probs: list = field(default_factory=list)    # Tensor, log pi(a_t)
    entropies: list = field(default_factory=list)    # Tensor
    attn_weights: list = field(default_factory=list)  # np array per step, or None
    values: list = field(default_factory=list)       # Tensor V(s*_t)
    success: bool = False

    def __len__(self):
        return len(self.states)


class AttentionCache:
    """Per-episode cache of key/value projections of already-seen states."""

    def __init__(self):
        self.ks = []
        self.vs = []


def action_one_hot(action, n_actions):
    v = np.zeros(n_actions)
    if action is not None:
        v[action] = 1.0
    return v


class Agent:
    """Holds the architecture dimensions; parameters live in a ParamStore
    and are passed in per call as a {name: Tensor} snapshot."""

    def __init__(self, obs_dim, goal_dim, hidden, n_actions=4, value_hidden=None):
        self.obs_dim = obs_dim
        self.goal_dim = goal_dim
        self.hidden = hidden
        self.n_actions = n_actions
        self.value_hidden = value_hidden or max(hidden // 2, 1)
        self.enc_in = obs_dim + goal_dim + n_actions
        self.pol_in = hidden + goal_dim + hidden

    def param_shapes(self):
        H, VH = self.hidden, self.value_hidden
        return {
            "enc.W": (4 * H, self.enc_in + H),
            "enc.b": (4 * H,),
            "att.q.W": (H, H), "att.q.b": (H,),
            "att.k.W": (H, H), "att.k.b": (H,),
            "att.v.W": (H, H), "att.v.b": (H,),
            "val.h.W": (VH, H), "val.h.b": (VH,),
            "val.o.W": (1, VH), "val.o.b": (1,),
            "pol.W": (self.n_actions, self.pol_in),
            "pol.b": (self.n_actions,),
        }

    def init_params(self, rng):
        """Uniform +-1/sqrt(fan_in) weights, zero biases."""
        out = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                out[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[1])
                out[name] = rng.uniform(-bound, bound, size=shape)
        return out

    def zero_state(self):
        return AgentState(nd.Tensor(np.zeros(self.hidden)),
                          nd.Tensor(np.zeros(self.hidden)))

    def encode_step(self, params, obs_features, g, a_prev, prev):
        """One LSTM step over [obs : g : a_prev]; returns the new AgentState."""
        x = nd.Tensor(np.concatenate([obs_features, g, a_prev]))
        if x.data.shape[0] != self.enc_in:
            raise ValueError(
                f"encode_step: input dim {x.data.shape[0]} != expected {self.enc_in}"
            )
        h, c = nd.lstm_cell(x, prev.h, prev.c, params["enc.W"], params["enc.b"])
        return AgentState(h, c)

    def attend(self, params, states, cache=None):
        """Scaled dot-product attention of s_t over s_0..s_t with a residual
        add of the raw s_t; returns (alpha, s_star)."""
        if not states:
            raise ValueError("attend: empty state list")
        if cache is None:
            cache = AttentionCache()
        for s in states[len(cache.ks):]:
            cache.ks.append(nd.linear(s, params["att.k.W"], params["att.k.b"]))
            cache.vs.append(nd.linear(s, params["att.v.W"], params["att.v.b"]))
        t1 = len(states)
        s_t = states[-1]
        q = nd.linear(s_t, params["att.q.W"], params["att.q.b"])
        K = nd.stack_rows(cache.ks[:t1])
        logits = nd.scale(nd.matvec(K, q), 1.0 / math.sqrt(t1))
        alpha = nd.softmax(logits)
        V = nd.stack_rows(cache.vs[:t1])
        s_star = nd.add(nd.tmatvec(V, alpha), s_t)
        return alpha, s_star

    def policy_logits(self, params, s, g, imagined):
        if imagined.shape[0] != self.hidden:
            raise ValueError(
                f"policy_logits: imagined sub-goal dim {imagined.shape[0]} "
                f"!= hidden {self.hidden}"
            )
        x = nd.concat([s, nd.Tensor(g), nd.Tensor(imagined)])
        return nd.linear(x, params["pol.W"], params["pol.b"])

    def policy_forward(self, params, s, g, imagined):
        """Action distribution pi(a | s_t, g, I)."""
        return nd.softmax(self.policy_logits(params, s, g, imagined))

    def value_forward(self, params, s_star):
        h = nd.tanh(nd.linear(s_star, params["val.h.W"], params["val.h.b"]))
        return nd.pick(nd.linear(h, params["val.o.W"], params["val.o.b"]), 0)


def select_subgoal(log):
    """Sub-goal of a finished successful episode: the state with maximum
    final-step attention weight (earliest index on ties), detached."""
    if not log.success:
        raise ValueError("select_subgoal: episode was not successful")
    alpha = log.attn_weights[-1]
    if alpha is None or len(alpha) != len(log.states):
        raise ValueError("select_subgoal: final attention weights missing or wrong length")
    t_star = int(np.argmax(alpha))
    return t_star, log.states[t_star].data.copy()
