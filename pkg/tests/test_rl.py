"""Learning stack: encoding, backprop vs finite differences, training loop."""

import threading

import numpy as np
import pytest

from qstream.abr import Observation
from qstream.player import Representation, VideoManifest
from qstream.rl import (
    ENCODING_VERSION,
    CheckpointError,
    ParameterServer,
    SessionEnv,
    TrainConfig,
    TrainResult,
    actor_gradients,
    actor_probs,
    advantages,
    critic_gradients,
    critic_value,
    encode_state,
    init_mlp,
    learned_policy,
    load_checkpoint,
    save_checkpoint,
    state_dim,
    train,
    write_curve,
)


def obs_fixture():
    return Observation(
        buffer_s=15.0,
        chunk_index=4,
        chunks_remaining=16,
        last_quality=42.0,
        throughput_bps=(1e6, 2e6, 3e6),
        download_time_s=(2.0, 1.0, 0.5),
        next_sizes_bits=(0.6e6, 1.5e6, 2.4e6, 3.7e6, 5.7e6, 6.4e6),
        next_qualities=(30.0, 33.0, 36.0, 39.0, 42.0, 45.0),
        bitrates_bps=(0.3e6, 0.75e6, 1.2e6, 1.85e6, 2.85e6, 3.2e6),
    )


def easy_manifest(n_chunks=10, q_low=1.0, q_high=3.0):
    return VideoManifest(
        2.0,
        (
            Representation(0.5e6, np.full(n_chunks, 1e6), np.full(n_chunks, q_low)),
            Representation(2e6, np.full(n_chunks, 4e6), np.full(n_chunks, q_high)),
        ),
    )


# --- encoding ---------------------------------------------------------------


def test_encoding_version_and_dim():
    assert ENCODING_VERSION == 1
    assert state_dim(8, 6) == 31


def test_encode_state_layout():
    s = encode_state(obs_fixture())
    assert s.shape == (31,)
    # histories are right-aligned with zero padding on the old side
    np.testing.assert_allclose(s[:8], [0, 0, 0, 0, 0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(s[8:16], [0, 0, 0, 0, 0, 0.2, 0.1, 0.05])
    np.testing.assert_allclose(s[16:22], np.array([30, 33, 36, 39, 42, 45]) / 60.0)
    np.testing.assert_allclose(
        s[22:28], np.array([0.6, 1.5, 2.4, 3.7, 5.7, 6.4]) / 2.0
    )
    assert s[28] == pytest.approx(0.5)  # buffer 15 of 30
    assert s[29] == pytest.approx(16.0 / 20.0)
    assert s[30] == pytest.approx(42.0 / 60.0)


def test_encode_state_truncates_long_history():
    obs = obs_fixture()
    obs = Observation(
        **{
            **obs.__dict__,
            "throughput_bps": tuple(float(i) * 1e6 for i in range(1, 13)),
            "download_time_s": tuple(float(i) for i in range(1, 13)),
        }
    )
    s = encode_state(obs)
    np.testing.assert_allclose(s[:8], np.arange(5.0, 13.0))
    np.testing.assert_allclose(s[8:16], np.arange(5.0, 13.0) * 0.1)


# --- forward pass vs naive oracle --------------------------------------------


def naive_forward(params, x, leak=0.01):
    h = list(x)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        out = []
        for j in range(w.shape[1]):
            z = b[j]
            for i in range(w.shape[0]):
                z += h[i] * w[i, j]
            if layer < n_layers - 1:
                z = z if z > 0 else leak * z
            out.append(z)
        h = out
    return np.array(h)


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(5)
    params = init_mlp((7, 5, 4, 3), rng)
    for _ in range(10):
        x = rng.standard_normal(7)
        logits = naive_forward(params, x)
        shifted = np.exp(logits - logits.max())
        want = shifted / shifted.sum()
        np.testing.assert_allclose(actor_probs(params, x), want, rtol=1e-12)
    critic = init_mlp((7, 5, 4, 1), rng)
    for _ in range(10):
        x = rng.standard_normal(7)
        assert critic_value(critic, x) == pytest.approx(
            float(naive_forward(critic, x)[0]), rel=1e-12
        )


def test_init_mlp_deterministic_and_shaped():
    a = init_mlp((4, 3, 2), np.random.default_rng(1))
    b = init_mlp((4, 3, 2), np.random.default_rng(1))
    assert [p.shape for p in a] == [(4, 3), (3,), (3, 2), (2,)]
    for pa, pb in zip(a, b):
        assert np.array_equal(pa, pb)
    assert np.array_equal(a[1], np.zeros(3))


# --- advantages ---------------------------------------------------------------


def test_advantage_two_step_example():
    # reward 1 then terminal reward 2, V(s0) = 2.5:
    # A0 = 1 + 0.99*2 + 0 - 2.5 = 0.48
    adv = advantages([1.0, 2.0], [2.5, 1.0], 0.0, gamma=0.99, span=8)
    assert adv[0] == pytest.approx(0.48)
    assert adv[1] == pytest.approx(2.0 - 1.0)


def test_advantage_bootstrap_and_span():
    # span 1 reduces to the TD error r + gamma*V(next) - V(s)
    adv = advantages([1.0, 1.0], [0.5, 0.25], 2.0, gamma=0.5, span=1)
    assert adv[0] == pytest.approx(1.0 + 0.5 * 0.25 - 0.5)
    assert adv[1] == pytest.approx(1.0 + 0.5 * 2.0 - 0.25)


def test_advantage_brute_force_sweep():
    rng = np.random.default_rng(17)
    for _ in range(50):
        t_len = int(rng.integers(1, 12))
        span = int(rng.integers(1, 10))
        gamma = rng.uniform(0.5, 1.0)
        rewards = rng.standard_normal(t_len)
        values = rng.standard_normal(t_len)
        boot = float(rng.standard_normal())
        got = advantages(rewards, values, boot, gamma=gamma, span=span)
        for t in range(t_len):
            acc = 0.0
            for k in range(t, min(t + span, t_len)):
                acc += gamma ** (k - t) * rewards[k]
            end = min(t + span, t_len)
            tail = values[end] if end < t_len else boot
            acc += gamma ** (end - t) * tail
            assert got[t] == pytest.approx(acc - values[t], rel=1e-12, abs=1e-12)


def test_advantage_validation():
    with pytest.raises(ValueError):
        advantages([1.0], [1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        advantages([1.0], [1.0], 0.0, span=0)


# --- gradients vs finite differences -------------------------------------------


def actor_objective(params, states, actions, advs, phi):
    tot = 0.0
    for s, a, adv in zip(states, actions, advs):
        p = actor_probs(params, s)
        tot += np.log(p[a]) * adv + phi * float(-(p * np.log(p)).sum())
    return tot


def critic_objective(params, states, advs):
    return sum(2.0 * adv * critic_value(params, s) for s, adv in zip(states, advs))


def central_diff(fn, params, i, j, h=1e-6):
    orig = params[i].flat[j]
    params[i].flat[j] = orig + h
    up = fn(params)
    params[i].flat[j] = orig - h
    down = fn(params)
    params[i].flat[j] = orig
    return (up - down) / (2.0 * h)


def test_actor_gradients_match_finite_differences():
    rng = np.random.default_rng(19)
    params = init_mlp((5, 4, 4, 3), rng)
    states = [rng.standard_normal(5) for _ in range(4)]
    actions = [int(rng.integers(3)) for _ in range(4)]
    advs = rng.standard_normal(4)
    phi = 0.37
    grads = actor_gradients(params, states, actions, advs, phi)
    fn = lambda p: actor_objective(p, states, actions, advs, phi)
    for i in range(len(params)):
        for j in range(params[i].size):
            want = central_diff(fn, params, i, j)
            got = grads[i].flat[j]
            assert got == pytest.approx(want, rel=1e-4, abs=1e-7)


def test_critic_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    params = init_mlp((5, 4, 4, 1), rng)
    states = [rng.standard_normal(5) for _ in range(5)]
    advs = rng.standard_normal(5)
    grads = critic_gradients(params, states, advs)
    fn = lambda p: critic_objective(p, states, advs)
    for i in range(len(params)):
        for j in range(params[i].size):
            want = central_diff(fn, params, i, j)
            got = grads[i].flat[j]
            assert got == pytest.approx(want, rel=1e-4, abs=1e-7)


def test_default_shape_gradients_spot_check():
    rng = np.random.default_rng(29)
    params = init_mlp((31, 64, 64, 6), rng)
    states = [rng.standard_normal(31) for _ in range(3)]
    actions = [int(rng.integers(6)) for _ in range(3)]
    advs = rng.standard_normal(3)
    grads = actor_gradients(params, states, actions, advs, 0.1)
    fn = lambda p: actor_objective(p, states, actions, advs, 0.1)
    for _ in range(25):
        i = int(rng.integers(len(params)))
        j = int(rng.integers(params[i].size))
        want = central_diff(fn, params, i, j)
        assert grads[i].flat[j] == pytest.approx(want, rel=1e-4, abs=1e-7)


def test_entropy_bonus_gradient_raises_entropy():
    # following only the entropy term must flatten the policy
    rng = np.random.default_rng(31)
    params = init_mlp((6, 5, 5, 4), rng)
    # sharpen the head first so there is entropy to gain
    params[-2] *= 3.0
    s = rng.standard_normal(6)
    before = actor_probs(params, s)
    h_before = float(-(before * np.log(before)).sum())
    grads = actor_gradients(params, [s], [0], np.array([0.0]), entropy_weight=1.0)
    stepped = [p + 0.05 * g for p, g in zip(params, grads)]
    after = actor_probs(stepped, s)
    h_after = float(-(after * np.log(after)).sum())
    assert h_after > h_before


# --- parameter server ------------------------------------------------------------


def test_server_snapshot_isolation_and_apply():
    actor = [np.zeros((2, 2)), np.zeros(2)]
    critic = [np.ones((2, 1)), np.zeros(1)]
    srv = ParameterServer(actor, critic)
    a, c = srv.snapshot()
    a[0][0, 0] = 99.0
    a2, _ = srv.snapshot()
    assert a2[0][0, 0] == 0.0  # snapshots are copies
    srv.apply([np.ones((2, 2)), np.ones(2)], [np.ones((2, 1)), np.ones(1)], 0.5, 0.1)
    a3, c3 = srv.snapshot()
    assert np.all(a3[0] == 0.5)
    assert np.all(c3[0] == 1.1)
    assert srv.updates == 1


def test_server_episode_counter_exhausts():
    srv = ParameterServer([np.zeros(1)], [np.zeros(1)])
    got = [srv.next_episode(3) for _ in range(5)]
    assert got == [0, 1, 2, -1, -1]


def test_server_episode_counter_thread_safe():
    srv = ParameterServer([np.zeros(1)], [np.zeros(1)])
    claimed = []
    lock = threading.Lock()

    def grab():
        while True:
            idx = srv.next_episode(400)
            if idx < 0:
                return
            with lock:
                claimed.append(idx)

    threads = [threading.Thread(target=grab) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(claimed) == list(range(400))


# --- environment -------------------------------------------------------------------


def test_session_env_matches_batch_player():
    from qstream.player import run_session

    manifest = easy_manifest(n_chunks=8, q_low=30.0, q_high=40.0)
    trace = np.array([1.2e6, 0.8e6, 2.5e6, 1.8e6])
    actions = [0, 1, 0, 0, 1, 1, 0, 1]
    out = run_session(manifest, trace, lambda obs: actions[obs.chunk_index])
    env = SessionEnv(manifest, trace)
    env.reset()
    rewards = []
    for a in actions:
        _, r, done = env.step(a)
        rewards.append(r)
    assert done
    np.testing.assert_allclose(rewards, out.qoe_per_chunk, rtol=1e-12)
    with pytest.raises(RuntimeError):
        env.step(0)


def test_session_env_rejects_bad_action():
    env = SessionEnv(easy_manifest(), np.array([1e6]))
    with pytest.raises(ValueError):
        env.step(5)


# --- training ----------------------------------------------------------------------


def quick_cfg(**kw):
    base = dict(
        n_reps=2,
        episodes=40,
        hidden=16,
        history=4,
        rollout=8,
        lr_actor=1e-3,
        lr_critic=1e-3,
        workers=1,
        seed=7,
    )
    base.update(kw)
    return TrainConfig(**base)


def make_factory(manifest, trace):
    def factory(idx, rng):
        return SessionEnv(manifest, trace)

    return factory


def test_train_serial_reproducible():
    manifest = easy_manifest()
    trace = np.array([10e6])
    factory = make_factory(manifest, trace)
    r1 = train(factory, quick_cfg())
    r2 = train(factory, quick_cfg())
    for pa, pb in zip(r1.actor + r1.critic, r2.actor + r2.critic):
        assert np.array_equal(pa, pb)
    assert np.array_equal(r1.curve, r2.curve)
    r3 = train(factory, quick_cfg(seed=8))
    assert not np.array_equal(r1.curve, r3.curve)


def test_reward_scale_changes_gradient_path_not_curve_units():
    manifest = easy_manifest()
    trace = np.array([10e6])
    factory = make_factory(manifest, trace)
    raw = train(factory, quick_cfg())
    scaled = train(factory, quick_cfg(reward_scale=50.0))
    # curves report raw QoE sums in both cases: same magnitude band
    assert np.max(np.abs(scaled.curve)) < 10 * max(np.max(np.abs(raw.curve)), 1.0)
    # but the parameter trajectories differ (gradients saw scaled rewards)
    assert any(
        not np.array_equal(pa, pb) for pa, pb in zip(raw.actor, scaled.actor)
    )
    with pytest.raises(ValueError):
        quick_cfg(reward_scale=0.0)


def test_center_advantages_is_deterministic_and_distinct():
    manifest = easy_manifest()
    trace = np.array([10e6])
    factory = make_factory(manifest, trace)
    a = train(factory, quick_cfg(center_advantages=True))
    b = train(factory, quick_cfg(center_advantages=True))
    assert np.array_equal(a.curve, b.curve)
    plain = train(factory, quick_cfg())
    assert any(
        not np.array_equal(pa, pb) for pa, pb in zip(a.actor, plain.actor)
    )


def test_train_learns_easy_preference():
    # two rungs, ample constant bandwidth: always-top is clearly optimal
    manifest = easy_manifest(n_chunks=12, q_low=1.0, q_high=3.0)
    trace = np.array([20e6])
    factory = make_factory(manifest, trace)
    cfg = quick_cfg(episodes=800, lr_actor=3e-3, lr_critic=3e-3)
    out = train(factory, cfg)
    assert out.curve.shape == (800,)
    # learned greedy policy should now prefer the top rung almost always
    policy = learned_policy(out.actor, cfg)
    env = SessionEnv(manifest, trace)
    obs = env.reset()
    picks = []
    done = False
    while not done:
        a = policy(obs)
        picks.append(a)
        obs, _, done = env.step(a)
    assert np.mean(np.array(picks) == 1) >= 0.9
    # and the tail of the learning curve beats the head
    assert out.curve[-100:].mean() > out.curve[:100].mean()


def test_train_threaded_smoke():
    manifest = easy_manifest(n_chunks=6)
    trace = np.array([5e6])
    factory = make_factory(manifest, trace)
    out = train(factory, quick_cfg(episodes=24, workers=3))
    assert out.curve.shape == (24,)
    assert np.all(out.curve != 0.0)  # every episode index got played


def test_entropy_weight_schedule():
    cfg = quick_cfg(episodes=101, entropy_start=0.5, entropy_end=0.01)
    assert cfg.entropy_weight(0) == pytest.approx(0.5)
    assert cfg.entropy_weight(100) == pytest.approx(0.01)
    assert cfg.entropy_weight(50) == pytest.approx((0.5 + 0.01) / 2.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        quick_cfg(n_reps=1)
    with pytest.raises(ValueError):
        quick_cfg(episodes=0)
    with pytest.raises(ValueError):
        quick_cfg(gamma=1.5)


# --- persistence ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    manifest = easy_manifest()
    factory = make_factory(manifest, np.array([5e6]))
    out = train(factory, quick_cfg(episodes=3))
    p = tmp_path / "ckpt.json"
    save_checkpoint(p, out)
    back = load_checkpoint(p)
    assert back.config == out.config
    for pa, pb in zip(back.actor + back.critic, out.actor + out.critic):
        assert np.array_equal(pa, pb)
    assert np.array_equal(back.curve, out.curve)


def test_checkpoint_version_guard(tmp_path):
    import json

    manifest = easy_manifest()
    factory = make_factory(manifest, np.array([5e6]))
    out = train(factory, quick_cfg(episodes=2))
    p = tmp_path / "ckpt.json"
    save_checkpoint(p, out)
    blob = json.loads(p.read_text())
    blob["encoding_version"] = 999
    p.write_text(json.dumps(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_text("{broken")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_write_curve_format(tmp_path):
    p = tmp_path / "curve.csv"
    write_curve(p, np.array([1.5, -2.25]))
    assert p.read_text() == "episode,reward\n0,1.5\n1,-2.25\n"
