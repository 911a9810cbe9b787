import math

import numpy as np
import pytest

from rismrl.agents import (
    DdpgAgent,
    DdpgSettings,
    EmptyBufferError,
    FarmAgent,
    FarmSettings,
    ReplayBuffer,
    SacAgent,
    SacSettings,
    TaskMap,
    encoder_infer,
    farm_act,
    farm_train,
    rollout_episode,
)
from rismrl.agents.farm import (
    DecoderNets,
    EncoderNets,
    decoder_loss,
    elbo_loss,
    kl_categorical_uniform,
    kl_normal_std,
    relabel,
)
from rismrl.channel import desk_config
from rismrl.env import RisEnv, Transition, make_task_batch
from rismrl.neural import polyak_update


def tr(task_id, t, obs_dim=2, act_dim=1, r=0.0):
    return Transition(s=np.full(obs_dim, t, float), a=np.full(act_dim, 0.1 * t), r=r,
                      s_next=np.full(obs_dim, t + 1, float), task_id=task_id, t=t)


# -- replay buffer -----------------------------------------------------------------

def test_buffer_sample_full_batch_is_multiset_equal():
    buf = ReplayBuffer(10, 2, 1)
    for t in range(6):
        buf.add(tr(t % 2, t, r=float(t)))
    got = buf.sample(6, np.random.default_rng(0))
    assert sorted(got["r"].tolist()) == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_buffer_ring_eviction_and_index():
    buf = ReplayBuffer(2, 2, 1)
    for t in range(3):
        buf.add(tr(t, t, r=float(t)))
    assert len(buf) == 2
    assert sorted(buf.r.tolist()) == [1.0, 2.0]
    assert buf.task_ids() == [1, 2]
    with pytest.raises(EmptyBufferError):
        buf.task_indices(0)
    for tid in buf.task_ids():
        assert np.all(buf.task_id[buf.task_indices(tid)] == tid)


def test_buffer_context_recency_and_order():
    buf = ReplayBuffer(100, 2, 1)
    for t in range(20):
        buf.add(tr(t % 3, t))
    ctx = buf.context(1, 5)
    assert np.all(np.diff(ctx["t"]) > 0)
    assert ctx["t"].tolist() == [4, 7, 10, 13, 16, 19][-5:]


def test_buffer_empty_errors():
    buf = ReplayBuffer(4, 2, 1)
    with pytest.raises(EmptyBufferError):
        buf.sample(1, np.random.default_rng(0))
    with pytest.raises(EmptyBufferError):
        buf.context(0, 3)


# -- decoder, KL and ELBO ---------------------------------------------------------

def zero_decoder(obs_dim, act_dim, latent_dim, s_next, r):
    dec = DecoderNets(obs_dim, act_dim, latent_dim, np.random.default_rng(0), hidden=(4,))
    for p in dec.params():
        p.value[...] = 0
    dec.net.layers[-1].bias.value[...] = np.append(s_next, r)
    return dec


def test_decoder_loss_examples():
    s_next, r = np.array([1.0, -2.0]), 0.5
    dec = zero_decoder(2, 1, 1, s_next, r)
    s, a, z = np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 1))
    assert decoder_loss(dec, s, a, s_next[None], [r], z) == 0.0
    assert decoder_loss(dec, s, a, (s_next + [1.0, 0.0])[None], [r], z) == pytest.approx(0.5)
    # two samples: errors (1, 0 | 0) and (0, 2 | 1) -> (0.5 + 2.5) / 2
    targets = np.array([s_next - [1.0, 0.0], s_next - [0.0, 2.0]])
    loss = decoder_loss(dec, np.zeros((2, 2)), np.zeros((2, 1)), targets, [r, r - 1.0], np.zeros((2, 1)))
    assert loss == pytest.approx(1.5)


def test_kl_closed_forms():
    assert kl_normal_std(np.array([2.0]), np.array([0.0])) == pytest.approx(2.0)
    assert kl_normal_std(np.array([2.0, 2.0]), np.zeros(2)) == pytest.approx(4.0)
    assert kl_normal_std(np.zeros(3), np.zeros(3)) == 0.0
    assert kl_categorical_uniform(np.log(np.full(5, 0.2))) == pytest.approx(0.0, abs=1e-15)
    assert kl_categorical_uniform(np.log([1.0 - 1e-12, 1e-12])) == pytest.approx(math.log(2), abs=1e-9)


def _zero_mean_encoder(feature_dim, latent_dim):
    enc = EncoderNets(feature_dim, 1, latent_dim, np.random.default_rng(0), hidden=(4,), embed_dim=3)
    for p in enc.z_head.params():
        p.value[...] = 0
    return enc


def test_elbo_vanishes_for_prior_posterior_and_perfect_decoder():
    obs, act, lat = 2, 1, 2
    enc = _zero_mean_encoder(2 * obs + act + 1, lat)
    s_next, r = np.array([0.3, -0.1]), 0.7
    dec = zero_decoder(obs, act, lat, s_next, r)
    rng = np.random.default_rng(1)
    ctx = rng.standard_normal((3, 4, 2 * obs + act + 1))
    batch = {"s": rng.standard_normal((3, 5, obs)), "a": rng.standard_normal((3, 5, act)),
             "s_next": np.broadcast_to(s_next, (3, 5, obs)).copy(), "r": np.full((3, 5), r)}
    terms = elbo_loss(enc, dec, ctx, batch, 0.1, 0.1, rng.standard_normal((3, 1, lat)), backward=False)
    assert terms.elbo == pytest.approx(0.0, abs=1e-15)
    assert terms.kl_y == pytest.approx(0.0, abs=1e-15)


def _tiny_elbo_problem(seed=0, j=3, lat=2, obs=3, act=2):
    rng = np.random.default_rng(seed)
    f = 2 * obs + act + 1
    enc = EncoderNets(f, j, lat, rng, hidden=(5,), embed_dim=4, activation="tanh")
    dec = DecoderNets(obs, act, lat, rng, hidden=(6,), activation="tanh")
    ctx = rng.standard_normal((2, 4, f))
    batch = {"s": rng.standard_normal((2, 3, obs)), "a": rng.standard_normal((2, 3, act)),
             "s_next": rng.standard_normal((2, 3, obs)), "r": rng.standard_normal((2, 3))}
    eps = rng.standard_normal((2, j, lat))
    return enc, dec, ctx, batch, eps


def test_elbo_gradients_match_finite_differences():
    enc, dec, ctx, batch, eps = _tiny_elbo_problem()

    def loss():
        return elbo_loss(enc, dec, ctx, batch, 0.3, 0.2, eps, backward=False).loss

    params = enc.params() + dec.params()
    for p in params:
        p.zero_grad()
    elbo_loss(enc, dec, ctx, batch, 0.3, 0.2, eps)
    h = 1e-5
    for p in params:
        num = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + h
            fp = loss()
            p.value[idx] = old - h
            fm = loss()
            p.value[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        err = np.max(np.abs(p.grad - num)) / max(np.max(np.abs(num)), 1e-8)
        assert err <= 1e-4, p.name


def test_component_posterior_normalized():
    enc, _, ctx, _, _ = _tiny_elbo_problem(1, j=6)
    for i in range(5):
        c = np.random.default_rng(i).standard_normal(ctx.shape[1:]) * 5
        assert encoder_infer(enc, c).probs.sum() == pytest.approx(1.0, abs=1e-6)


# -- encoder inference ---------------------------------------------------------------

def test_encoder_single_component_and_determinism():
    enc, _, ctx, _, _ = _tiny_elbo_problem(2, j=1)
    rng = np.random.default_rng(0)
    assert all(encoder_infer(enc, ctx[0], rng, evaluate=False).y == 0 for _ in range(20))
    a, b = encoder_infer(enc, ctx[0]), encoder_infer(enc, ctx[0])
    np.testing.assert_array_equal(a.z, b.z)


@pytest.mark.parametrize("seed", range(10))
def test_encoder_permutation_invariant(seed):
    enc, _, _, _, _ = _tiny_elbo_problem(3)
    rng = np.random.default_rng(seed)
    ctx = rng.standard_normal((7, enc.feature_dim))
    a = encoder_infer(enc, ctx)
    b = encoder_infer(enc, ctx[rng.permutation(7)])
    assert a.y == b.y
    np.testing.assert_allclose(a.z, b.z, atol=1e-12)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_encoder_empty_context():
    enc, _, _, _, _ = _tiny_elbo_problem(4)
    with pytest.raises(ValueError):
        encoder_infer(enc, np.zeros((0, enc.feature_dim)))


# -- task map ----------------------------------------------------------------------

def test_task_map_lookup():
    tm = TaskMap()
    with pytest.raises(LookupError):
        tm.lookup([0.0, 0.0])
    tm.store("A", [0.0, 0.0])
    tm.store("B", [1.0, 1.0])
    np.testing.assert_array_equal(tm.lookup([0.9, 1.2]), [1.0, 1.0])
    np.testing.assert_array_equal(tm.lookup([0.0, 0.0]), [0.0, 0.0])
    assert tm.nearest([0.5, 0.5])[0] == 0
    with pytest.raises(ValueError):
        tm.store("C", [np.nan, 0.0])


def test_task_map_returns_stored_element():
    tm = TaskMap()
    rng = np.random.default_rng(0)
    stored = rng.standard_normal((6, 3))
    for i, z in enumerate(stored):
        tm.store(i, z)
    for q in rng.standard_normal((50, 3)) * 3:
        assert any(np.array_equal(tm.lookup(q), z) for z in stored)


# -- SAC and DDPG ------------------------------------------------------------------

def _batch(rng, n, obs, act, latent=0):
    out = {"s": rng.standard_normal((n, obs)), "a": rng.uniform(-1, 1, (n, act)),
           "r": rng.standard_normal(n), "s_next": rng.standard_normal((n, obs))}
    if latent:
        out["z"] = rng.standard_normal((n, latent))
    return out


def test_sac_gamma_zero_target_is_reward():
    agent = SacAgent(3, 2, settings=SacSettings(gamma=0.0, hidden=(8,), reward_scale=2.0), seed=0)
    r = np.array([0.1, -0.4])
    np.testing.assert_array_equal(agent.critic_targets(r, np.zeros((2, 3))), 2.0 * r)
    ddpg = DdpgAgent(3, 2, DdpgSettings(gamma=0.0, hidden=(8,)), seed=0)
    np.testing.assert_array_equal(ddpg.critic_targets(r, np.zeros((2, 3))), r)


def test_polyak_tau_one_copies():
    agent = SacAgent(3, 2, settings=SacSettings(hidden=(8,)), seed=0)
    agent.q1.layers[0].weight.value += 1.0
    polyak_update(agent.q1_target, agent.q1, 1.0)
    np.testing.assert_array_equal(agent.q1_target.layers[0].weight.value, agent.q1.layers[0].weight.value)


def test_sac_updates_finite_and_alpha_positive():
    rng = np.random.default_rng(0)
    agent = SacAgent(4, 2, latent_dim=3, settings=SacSettings(hidden=(16, 16)), seed=1)
    for _ in range(50):
        losses = agent.update(_batch(rng, 32, 4, 2, 3))
        assert np.isfinite(losses.critic) and np.isfinite(losses.actor)
        assert agent.alpha > 0


def test_sac_conditioning_empty_latent():
    obs = np.arange(4.0)
    np.testing.assert_array_equal(SacAgent.conditioning(obs, np.zeros(0)), obs)
    np.testing.assert_array_equal(SacAgent.conditioning(obs, None), obs)
    assert SacAgent.conditioning(obs, np.ones(2)).shape == (6,)


def test_ddpg_zero_noise_deterministic():
    a = DdpgAgent(3, 2, DdpgSettings(hidden=(8,), exploration_std=0.0), seed=0)
    b = DdpgAgent(3, 2, DdpgSettings(hidden=(8,), exploration_std=0.0), seed=0)
    x = np.ones(3)
    np.testing.assert_array_equal(a.act(x, explore=True), b.act(x, explore=True))
    np.testing.assert_array_equal(a.act(x, explore=True), a.act(x, explore=False))


# -- FARM --------------------------------------------------------------------------

SMALL = dict(encoder_hidden=(16,), embed_dim=8, decoder_hidden=(16,), context_len=8,
             tasks_per_batch=2, decoder_batch=4, sac_batch=16, elbo_steps=2, sac_steps=2,
             buffer_capacity=1000, sac=SacSettings(hidden=(16,), gamma=0.0))


@pytest.fixture(scope="module")
def trained_small():
    cfg = desk_config()
    tasks = make_task_batch(0, 3, cfg)
    agent, hist = farm_train(tasks, cfg, FarmSettings(**SMALL), epochs=2, episode_len=10, seed=0)
    return cfg, tasks, agent, hist


def test_farm_degenerates_to_plain_sac():
    cfg = desk_config()
    agent = FarmAgent(cfg, FarmSettings(**dict(SMALL, n_components=1, latent_dim=0)), seed=0)
    assert not agent.conditioned
    assert agent.sac.policy.in_dim == cfg.obs_dim
    assert agent.latent_for([], evaluate=True).size == 0


def test_farm_train_metrics_and_map(trained_small):
    cfg, tasks, agent, hist = trained_small
    assert len(hist) == 2
    assert all(np.isfinite(m.elbo) and np.isfinite(m.critic_loss) for m in hist)
    assert len(agent.task_map) == len(tasks)
    assert len(agent.buffer) == 2 * 3 * 10


def test_relabel_uses_current_encoder(trained_small):
    _, _, agent, _ = trained_small
    relabel(agent, agent.buffer)
    live = agent.buffer.recent_indices(len(agent.buffer))
    assert np.all(agent.buffer.z_version[live] == agent.encoder_version)
    assert np.all((agent.buffer.y[live] >= 0) & (agent.buffer.y[live] < agent.settings.n_components))


def test_farm_act_zero_shot(trained_small):
    cfg, tasks, agent, _ = trained_small
    history = agent.buffer.transitions(agent.buffer.task_indices(0)[-8:])
    obs = history[-1].s_next
    before = agent.checksum()
    a0 = farm_act(agent, history, obs)
    for _ in range(1000):
        a = farm_act(agent, history, obs)
    np.testing.assert_array_equal(a, a0)
    assert agent.checksum() == before
    assert a0.shape == (cfg.action_dim,)
    # cold start falls back to the map centroid
    assert np.all(np.isfinite(farm_act(agent, [], obs)))


def test_farm_map_fixed_point(trained_small):
    _, _, agent, _ = trained_small
    history = agent.buffer.transitions(agent.buffer.task_indices(1)[-8:])
    obs = history[-1].s_next
    z_raw = agent.infer({"s": np.stack([h.s for h in history]), "a": np.stack([h.a for h in history]),
                         "r": np.array([h.r for h in history]),
                         "s_next": np.stack([h.s_next for h in history])}).z
    saved = agent.task_map
    try:
        tm = TaskMap()
        tm.store("q", z_raw)
        agent.task_map = tm
        agent.settings.use_task_map = True
        on = farm_act(agent, history, obs)
        agent.settings.use_task_map = False
        off = farm_act(agent, history, obs)
    finally:
        agent.task_map = saved
        agent.settings.use_task_map = True
    np.testing.assert_array_equal(on, off)


def test_farm_rollout_deterministic_in_eval(trained_small):
    cfg, tasks, agent, _ = trained_small
    env = RisEnv(cfg, tasks[0], 5, True)
    before = agent.checksum()
    assert rollout_episode(agent, env, 0, None, explore=False) == rollout_episode(agent, env, 0, None, explore=False)
    assert agent.checksum() == before


def test_farm_training_improves_return():
    cfg = desk_config()
    tasks = make_task_batch(0, 4, cfg)
    settings = FarmSettings(encoder_hidden=(32,), embed_dim=16, decoder_hidden=(32,), context_len=8,
                            n_components=2, latent_dim=2, tasks_per_batch=4, elbo_steps=5, sac_steps=100,
                            sac=SacSettings(hidden=(64, 64), gamma=0.0, reward_scale=10.0))

    def score(agent):
        return np.mean([rollout_episode(agent, RisEnv(cfg, t, 20, True), 1, None, explore=False) for t in tasks])

    before = score(FarmAgent(cfg, settings, seed=0))
    agent, _ = farm_train(tasks, cfg, settings, epochs=8, episode_len=20, seed=0)
    assert score(agent) >= 1.5 * before
