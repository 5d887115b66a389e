import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresit import gridhome as gh
from foresit import ndgrad as nd
from foresit.agent import TrajectoryLog
from foresit.trainer import (
    ConfigError, EpisodeResult, FlushEvent, SuccessTracker, TrainConfig,
    actor_critic_losses, compute_returns, episode_record, int_reimagine_steps,
    make_agent, merged_store, mode_att_target, run_worker, split_store, train,
)

from _oracles import bfs_actions, discounted_returns


def tiny_config(**kw):
    base = dict(workers=1, max_episode=20, mode="foresit", seed=1,
                size_min=6, size_max=8, k_window=5, t_max=20, hidden=12,
                n_train=2, n_val=1, n_test=1, sr_window=10, m_max=4,
                layout_seed=77)
    base.update(kw)
    return TrainConfig(**base)


def fixture_layouts(n=2):
    return [gh.generate_layout(50 + i, family=i % 4, size_range=(6, 8)) for i in range(n)]


# ---------------------------------------------------------------------------
# compute_returns


def test_returns_undiscounted_terminal_reward():
    assert compute_returns([0.0, 0.0, 5.0], 1.0) == [5.0, 5.0, 5.0]


def test_returns_two_step_recursion():
    out = compute_returns([-0.01, -0.01], 0.99)
    assert out[1] == pytest.approx(-0.01, abs=1e-15)
    assert out[0] == pytest.approx(-0.0199, abs=1e-15)


def test_returns_match_double_loop_oracle():
    rng = np.random.default_rng(0)
    rewards = rng.normal(size=37).tolist()
    for gamma, boot in ((0.99, 0.0), (0.9, 1.3), (1.0, -0.4)):
        fast = compute_returns(rewards, gamma, boot)
        slow = discounted_returns(rewards, gamma, boot)
        assert max(abs(a - b) for a, b in zip(fast, slow)) < 1e-10


# ---------------------------------------------------------------------------
# losses


def fabricated_log(T1, n_actions=4, seed=0, uniform=False):
    rng = np.random.default_rng(seed)
    log_ = TrajectoryLog()
    for _ in range(T1):
        log_.states.append(nd.Tensor(rng.normal(size=3)))
        logits = np.zeros(n_actions) if uniform else rng.normal(size=n_actions)
        lsm = nd.log_softmax(nd.Tensor(logits))
        probs = nd.softmax(nd.Tensor(logits))
        a = int(rng.integers(n_actions))
        log_.actions.append(a)
        log_.log_probs.append(nd.pick(lsm, a))
        log_.entropies.append(nd.scale(nd.total(nd.mul(probs, lsm)), -1.0))
        log_.rewards.append(float(rng.normal()))
        log_.values.append(nd.Tensor(np.float64(rng.normal())))
        log_.attn_weights.append(None)
    return log_


def test_uniform_policy_entropy_is_log4():
    log_ = fabricated_log(3, uniform=True)
    for h in log_.entropies:
        assert abs(float(h.data) - math.log(4)) < 1e-12


def test_entropy_bounded_by_log_action_count():
    rng = np.random.default_rng(5)
    for _ in range(200):
        logits = nd.Tensor(rng.normal(size=4) * rng.uniform(0, 10))
        probs = nd.softmax(logits)
        lsm = nd.log_softmax(logits)
        h = float(nd.scale(nd.total(nd.mul(probs, lsm)), -1.0).data)
        assert -1e-12 <= h <= math.log(4) + 1e-12


def test_value_loss_zero_when_v_equals_returns():
    log_ = fabricated_log(5, seed=2)
    returns = compute_returns(log_.rewards, 0.99)
    for t, r in enumerate(returns):
        log_.values[t] = nd.Tensor(np.float64(r))
    _, j_v = actor_critic_losses(log_, returns, 0.99, beta_h=0.01)
    assert float(j_v.data) == 0.0


def test_zero_advantage_leaves_only_entropy_term():
    log_ = fabricated_log(4, seed=3)
    # force r_t + gamma*V_{t+1} - V_t == 0 at every step
    gamma = 0.99
    for t in range(4):
        v_next = float(log_.values[t + 1].data) if t + 1 < 4 else 0.0
        log_.rewards[t] = float(log_.values[t].data) - gamma * v_next
    returns = compute_returns(log_.rewards, gamma)
    beta_h = 0.01
    j_pi, _ = actor_critic_losses(log_, returns, gamma, beta_h)
    entropy_sum = sum(float(h.data) for h in log_.entropies)
    assert float(j_pi.data) == pytest.approx(beta_h * entropy_sum, abs=1e-12)


def test_losses_match_hand_computation():
    log_ = fabricated_log(6, seed=4)
    gamma, beta_h = 0.95, 0.02
    returns = compute_returns(log_.rewards, gamma)
    j_pi, j_v = actor_critic_losses(log_, returns, gamma, beta_h)
    expect_pi, expect_v = 0.0, 0.0
    for t in range(6):
        v_t = float(log_.values[t].data)
        v_n = float(log_.values[t + 1].data) if t < 5 else 0.0
        adv = log_.rewards[t] + gamma * v_n - v_t
        expect_pi += -float(log_.log_probs[t].data) * adv \
            + beta_h * float(log_.entropies[t].data)
        expect_v += 0.5 * (v_t - returns[t]) ** 2
    assert float(j_pi.data) == pytest.approx(expect_pi, abs=1e-12)
    assert float(j_v.data) == pytest.approx(expect_v, abs=1e-12)


def test_losses_length_mismatch_diagnostic():
    log_ = fabricated_log(3)
    with pytest.raises(ValueError, match="length mismatch"):
        actor_critic_losses(log_, [0.0, 0.0], 0.99, 0.01)


# ---------------------------------------------------------------------------
# trackers / config


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), max_size=40), st.integers(min_value=1, max_value=10))
def test_success_tracker_matches_windowed_mean(outcomes, window):
    tracker = SuccessTracker(window)
    for o in outcomes:
        tracker.update(o)
    if outcomes:
        tail = outcomes[-min(window, len(outcomes)):]
        assert tracker.sr == pytest.approx(sum(tail) / len(tail))
    else:
        assert tracker.sr == 0.0


def test_config_validation_names_field():
    with pytest.raises(ConfigError, match="gamma"):
        TrainConfig(gamma=0.0).validate()
    with pytest.raises(ConfigError, match="mode"):
        TrainConfig(mode="nope").validate()
    with pytest.raises(ConfigError, match="m_max"):
        TrainConfig(m_max=0).validate()


def test_int_reimagine_steps():
    assert int_reimagine_steps(13, None) == [0]          # k = infinity
    assert int_reimagine_steps(13, 5) == [0, 5, 10]
    assert int_reimagine_steps(4, 1) == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# mode_att_target


def test_att_target_uniform_alpha_identical_states():
    cfg = tiny_config(hidden=4)
    agent = make_agent(cfg)
    agent_small = agent
    rng = np.random.default_rng(9)
    arrays = {n: rng.normal(size=s) * 0.3 for n, s in agent_small.param_shapes().items()}
    arrays["att.q.W"][:] = 0.0
    arrays["att.q.b"][:] = 0.0
    params = {n: nd.Tensor(v) for n, v in arrays.items()}
    s = rng.normal(size=cfg.hidden)
    log_ = TrajectoryLog(success=True)
    for _ in range(4):
        log_.states.append(nd.Tensor(s.copy()))
    target = mode_att_target(agent_small, params, log_)
    v = arrays["att.v.W"] @ s + arrays["att.v.b"]
    np.testing.assert_allclose(target, v + s, atol=1e-12)


def test_att_target_equals_attend_output_bitwise():
    cfg = tiny_config(hidden=6)
    agent = make_agent(cfg)
    rng = np.random.default_rng(10)
    params = {n: nd.Tensor(rng.normal(size=s) * 0.2)
              for n, s in agent.param_shapes().items()}
    log_ = TrajectoryLog(success=True)
    for _ in range(5):
        log_.states.append(nd.Tensor(rng.normal(size=cfg.hidden)))
    target = mode_att_target(agent, params, log_)
    with nd.untaped():
        _, s_star = agent.attend(params, log_.states)
    assert target.tobytes() == s_star.data.tobytes()
    # T=0 coincides with the single-state attend output
    single = TrajectoryLog(success=True)
    single.states.append(log_.states[0])
    t0 = mode_att_target(agent, params, single)
    with nd.untaped():
        _, s0 = agent.attend(params, [log_.states[0]])
    assert t0.tobytes() == s0.data.tobytes()


def test_att_target_requires_success():
    cfg = tiny_config(hidden=4)
    agent = make_agent(cfg)
    params = {n: nd.Tensor(np.zeros(s)) for n, s in agent.param_shapes().items()}
    with pytest.raises(ValueError, match="successful"):
        mode_att_target(agent, params, TrajectoryLog(success=False))


# ---------------------------------------------------------------------------
# run_worker / train


def collect(cfg, layouts=None, policy_hook=None):
    records = []
    shared = train(cfg, emit=records.append, layouts=layouts, policy_hook=policy_hook)
    return shared, records


def test_baseline_runs_to_completion_on_fixture():
    cfg = tiny_config(mode="baseline", max_episode=15)
    shared, records = collect(cfg, layouts=fixture_layouts())
    episodes = [r for r in records if "success" in r and "mode" in r]
    assert len(episodes) == 15
    assert all(r["mode"] == "baseline" for r in episodes)
    assert all(r["t_star"] is None for r in episodes)
    assert shared.policy_store.version == 15
    assert shared.imag_store.version == 0


def test_deterministic_metrics_stream_for_fixed_seed():
    cfg = tiny_config(mode="foresit", max_episode=200, seed=5, m_max=4)
    _, first = collect(cfg)
    _, second = collect(tiny_config(mode="foresit", max_episode=200, seed=5, m_max=4))
    assert json.dumps(first) == json.dumps(second)


def test_different_seed_changes_stream():
    cfg_a = tiny_config(max_episode=30, seed=5)
    cfg_b = tiny_config(max_episode=30, seed=6)
    _, a = collect(cfg_a)
    _, b = collect(cfg_b)
    assert json.dumps(a) != json.dumps(b)


def oracle_hook(state, t):
    """Optimal scripted policy: follow BFS actions, then Stop."""
    if t == 0:
        state._script = bfs_actions(state.layout, state.pose, state.target.object_id,
                                    state.k_window, state.radius) + [gh.STOP]
    return state._script[t] if t < len(state._script) else gh.STOP


def test_scripted_policy_flushes_every_m_max_successes():
    cfg = tiny_config(mode="foresit", max_episode=40, m_max=8, t_max=50)
    shared, records = collect(cfg, policy_hook=oracle_hook)
    episodes = [r for r in records if "success" in r and "mode" in r]
    flushes = [r for r in records if "final_loss" in r]
    assert all(r["success"] for r in episodes)
    assert len(flushes) == 40 // 8
    assert shared.imag_store.version == len(flushes)
    # flush fires exactly on every 8th success
    success_count = 0
    expect_at = []
    for r in records:
        if "success" in r and "mode" in r:
            success_count += r["success"]
        elif "final_loss" in r:
            expect_at.append(success_count)
    assert expect_at == [8, 16, 24, 32, 40]
    assert all(r["buffer_size"] == 8 for r in flushes)


def test_subgoal_records_only_on_success():
    # a hopeless policy: always stop immediately; never a success, never a flush
    cfg = tiny_config(mode="foresit", max_episode=30, m_max=2)
    shared, records = collect(cfg, policy_hook=lambda state, t: gh.STOP)
    episodes = [r for r in records if "success" in r and "mode" in r]
    flushes = [r for r in records if "final_loss" in r]
    successes = [r for r in episodes if r["success"]]
    assert len(successes) == 0 or len(flushes) <= len(successes) // 2
    lucky = sum(1 for r in episodes if r["success"])
    assert len(flushes) == lucky // 2
    assert shared.imag_store.version == len(flushes)


def test_baseline_attention_gradients_are_zero():
    cfg = tiny_config(mode="baseline", max_episode=5)
    shared, _ = collect(cfg, layouts=fixture_layouts())
    # attention params never touched by baseline updates: Adam moments stay 0
    for name in shared.policy_store.names():
        if name.startswith("att."):
            assert np.all(shared.policy_store._m[name] == 0.0)
            assert np.all(shared.policy_store._v[name] == 0.0)


def test_multi_worker_updates_are_not_lost():
    cfg = tiny_config(workers=3, max_episode=30, mode="baseline", hidden=8)
    shared, records = collect(cfg, layouts=fixture_layouts())
    episodes = [r for r in records if "success" in r and "mode" in r]
    assert len(episodes) == 30
    assert shared.policy_store.version == 30
    assert sorted(r["episode"] for r in episodes) == list(range(30))


def test_sigma2_follows_worker_success_rate():
    cfg = tiny_config(mode="foresit", max_episode=30, sr_window=5, m_max=32)
    _, records = collect(cfg, policy_hook=oracle_hook)
    episodes = [r for r in records if "success" in r and "mode" in r]
    # all successes with window 5: after 5 episodes sr = 1 -> sigma2 = 0
    for r in episodes:
        if r["episode"] >= 5:
            assert r["sigma2"] == 0.0
    assert episodes[0]["sigma2"] == pytest.approx(0.9)


def test_int_mode_reimagines_on_interval():
    cfg = tiny_config(mode="int", int_interval=3, max_episode=6, t_max=20)
    results = []
    shared = None
    from foresit.trainer import SharedState
    shared = SharedState(cfg)
    layouts = fixture_layouts()
    for item in run_worker(0, shared, layouts, policy_hook=oracle_hook):
        if isinstance(item, EpisodeResult):
            results.append(item)
    for res in results:
        expect = len(int_reimagine_steps(res.length, cfg.int_interval))
        assert res.n_imaginations == expect


def test_int_mode_interval_one_reimagines_every_step():
    cfg = tiny_config(mode="int", int_interval=1, max_episode=4, t_max=15)
    from foresit.trainer import SharedState
    shared = SharedState(cfg)
    for item in run_worker(0, shared, fixture_layouts(), policy_hook=oracle_hook):
        if isinstance(item, EpisodeResult):
            assert item.n_imaginations == item.length


def test_rnd_mode_runs_without_buffer():
    cfg = tiny_config(mode="rnd", max_episode=20)
    shared, records = collect(cfg, policy_hook=oracle_hook)
    flushes = [r for r in records if "final_loss" in r]
    assert flushes == []
    assert shared.imag_store.version == 0
    episodes = [r for r in records if "success" in r and "mode" in r]
    assert len(episodes) == 20


def test_metrics_record_schema():
    cfg = tiny_config(max_episode=3)
    _, records = collect(cfg)
    ep = [r for r in records if "mode" in r][0]
    assert list(ep) == ["episode", "worker", "mode", "success", "length", "return",
                        "sr", "sr_global", "sigma2", "t_star", "losses"]
    assert set(ep["losses"]) == {"policy", "value"}


def test_merged_store_round_trip(tmp_path):
    cfg = tiny_config(max_episode=4, hidden=8)
    shared, _ = collect(cfg)
    merged = merged_store(shared.policy_store, shared.imag_store)
    path = tmp_path / "ck.ckpt"
    nd.save_checkpoint(path, merged)
    loaded = nd.load_checkpoint(path)
    policy, imag = split_store(loaded)
    assert set(policy) == set(shared.policy_store.names())
    assert set(imag) == set(shared.imag_store.names())
    for name, arr in policy.items():
        assert arr.tobytes() == shared.policy_store.get(name).tobytes()
    assert loaded.version == shared.policy_store.version
