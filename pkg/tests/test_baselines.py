import numpy as np
import pytest

from rismrl import _kernels_py, kernels
from rismrl.baselines import (
    SfpSettings,
    ZeroForcingError,
    sfp_policy,
    zf_beamformer,
    zf_sum_rate,
    zfr_policy,
)
from rismrl.channel import ChannelState, SystemConfig, desk_config, initial_state, table1_config
from rismrl.link import PhaseShift, effective_channel, evaluate, sinr_per_user, tx_power
from rismrl.numerics import Rng


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def offdiag_rel(h, w):
    g = h @ w
    off = g - np.diag(np.diag(g))
    return np.linalg.norm(off) / np.linalg.norm(np.diag(g))


def test_zf_identity():
    np.testing.assert_allclose(zf_beamformer(np.eye(2), 2.0), np.eye(2), atol=1e-12)


def test_zf_diagonal_channel():
    w = zf_beamformer(np.diag([1.0, 2.0]).astype(complex), 5.0)
    g = np.diag([1.0, 2.0]) @ w
    assert np.max(np.abs(g - np.diag(np.diag(g)))) <= 1e-12
    assert tx_power(w) == pytest.approx(5.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_zf_random_property(seed):
    h = crandn(np.random.default_rng(seed), 2, 4) * 1e-8
    w = zf_beamformer(h, 10.0)
    assert offdiag_rel(h, w) <= 1e-10
    assert tx_power(w) == pytest.approx(10.0, abs=1e-9)


def test_zf_rank_deficient():
    row = crandn(np.random.default_rng(0), 1, 3)
    with pytest.raises(ZeroForcingError):
        zf_beamformer(np.vstack([row, 2 * row]), 1.0)
    with pytest.raises(ZeroForcingError):
        zf_beamformer(crandn(np.random.default_rng(1), 3, 2), 1.0)


def test_zf_sinr_reduces_to_diagonal():
    rng = np.random.default_rng(2)
    h = crandn(rng, 3, 5)
    w = zf_beamformer(h, 4.0)
    d = np.diag(h @ w)
    np.testing.assert_allclose(sinr_per_user(h, w, 0.2), np.abs(d) ** 2 / 0.2, rtol=1e-9)
    # closed form via trace of the inverse Gram matrix
    tr = np.trace(np.linalg.inv(h @ h.conj().T)).real
    rate = evaluate(ChannelState(h1=np.eye(5, dtype=complex), h2=h), w, PhaseShift(np.zeros(5)), 0.2).sum_rate
    assert zf_sum_rate(tr, 3, 4.0, 0.2) == pytest.approx(rate, rel=1e-9)


def test_zfr_deterministic():
    cfg = desk_config()
    state = initial_state(cfg, Rng(0))
    w1, p1 = zfr_policy(state, Rng(3), cfg)
    w2, p2 = zfr_policy(state, Rng(3), cfg)
    np.testing.assert_array_equal(p1.theta, p2.theta)
    np.testing.assert_array_equal(w1, w2)


def test_zero_ris_elements_rejected_by_config():
    with pytest.raises(ValueError):
        SystemConfig(n_ris=0)


# -- kernels -------------------------------------------------------------------

def _random_problem(seed, k=3, m=4, n=10):
    rng = np.random.default_rng(seed)
    contrib = np.ascontiguousarray(np.einsum("kn,nm->nkm", crandn(rng, k, n), crandn(rng, n, m)))
    theta = rng.uniform(0, 2 * np.pi, n)
    h = np.ascontiguousarray(np.einsum("n,nkm->km", np.exp(1j * theta), contrib))
    return contrib, theta, h


def test_trace_inv_gram_matches_numpy():
    h = crandn(np.random.default_rng(3), 3, 5)
    expected = np.trace(np.linalg.inv(h @ h.conj().T)).real
    assert kernels.trace_inv_gram(h) == pytest.approx(expected, rel=1e-10)
    assert _kernels_py.trace_inv_gram(h) == pytest.approx(expected, rel=1e-10)
    row = h[:1]
    assert np.isinf(kernels.trace_inv_gram(np.vstack([row, row])))


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(5))
def test_compiled_sweep_matches_reference(seed):
    from rismrl import _kernels

    contrib, theta, h = _random_problem(seed)
    t1, h1 = theta.copy(), h.copy()
    t2, h2 = theta.copy(), h.copy()
    f1 = _kernels.sfp_sweep(contrib, t1, h1, 64, 20)
    f2 = _kernels_py.sfp_sweep(contrib, t2, h2, 64, 20)
    assert f1 == pytest.approx(f2, rel=1e-10)
    np.testing.assert_allclose(t1, t2, atol=1e-9)
    np.testing.assert_allclose(h1, h2, rtol=1e-9)


def test_sweep_keeps_h_consistent_and_improves():
    contrib, theta, h = _random_problem(7)
    f0 = kernels.trace_inv_gram(h)
    f1 = kernels.sfp_sweep(contrib, theta, h, 64, 20)
    np.testing.assert_allclose(h, np.einsum("n,nkm->km", np.exp(1j * theta), contrib), rtol=1e-10)
    assert f1 <= f0
    assert f1 == pytest.approx(kernels.trace_inv_gram(h), rel=1e-9)


# -- SFP -----------------------------------------------------------------------

def test_sfp_single_element_single_user_is_phase_invariant():
    cfg = SystemConfig(m_antennas=2, n_ris=1, k_users=1)
    state = initial_state(cfg, Rng(1))
    res = sfp_policy(state, SfpSettings(), cfg, Rng(2))
    # with one element and one user |h_eff| does not depend on theta
    h = state.h2[0, 0] * state.h1[0]
    optimum = np.log2(1 + cfg.p_max * np.sum(np.abs(h) ** 2) / cfg.noise_power)
    assert evaluate(state, res.w, res.phase, cfg.noise_power).sum_rate == pytest.approx(optimum, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_sfp_two_elements_matches_phase_alignment(seed):
    cfg = SystemConfig(m_antennas=3, n_ris=2, k_users=1)
    state = initial_state(cfg, Rng(seed))
    a = state.h2[0, 0] * state.h1[0]
    b = state.h2[0, 1] * state.h1[1]
    # |e1 a + e2 b|^2 is maximal when theta1 - theta2 = -arg(a . conj(b))
    best_diff = -np.angle(np.vdot(b, a))
    res = sfp_policy(state, SfpSettings(), cfg, Rng(100 + seed))
    diff = res.phase.theta[0] - res.phase.theta[1]
    err = np.angle(np.exp(1j * (diff - best_diff)))
    assert abs(err) <= 2 * np.pi / 64
    gain = np.linalg.norm(a) ** 2 + np.linalg.norm(b) ** 2 + 2 * abs(np.vdot(b, a))
    optimum = np.log2(1 + cfg.p_max * gain / cfg.noise_power)
    assert res.trace[-1] == pytest.approx(optimum, rel=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_sfp_trace_monotone_and_beats_paired_zfr(seed):
    cfg = desk_config(n_ris=16)
    state = initial_state(cfg, Rng(seed))
    res = sfp_policy(state, SfpSettings(), cfg, Rng(1000 + seed))
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    w, ph = zfr_policy(state, Rng(1000 + seed), cfg)
    zfr_rate = evaluate(state, w, ph, cfg.noise_power).sum_rate
    sfp_rate = evaluate(state, res.w, res.phase, cfg.noise_power).sum_rate
    assert res.trace[0] == pytest.approx(zfr_rate, rel=1e-9)
    assert sfp_rate >= zfr_rate
    assert sfp_rate == pytest.approx(res.trace[-1], rel=1e-9)
    assert tx_power(res.w) == pytest.approx(cfg.p_max, abs=1e-9)


def test_sfp_deterministic_and_prefix_property():
    cfg = desk_config(n_ris=16)
    state = initial_state(cfg, Rng(3))
    full = sfp_policy(state, SfpSettings(max_iters=6, tol=1e-12), cfg, Rng(4))
    again = sfp_policy(state, SfpSettings(max_iters=6, tol=1e-12), cfg, Rng(4))
    np.testing.assert_array_equal(full.phase.theta, again.phase.theta)
    for iters in range(1, 6):
        short = sfp_policy(state, SfpSettings(max_iters=iters, tol=1e-12), cfg, Rng(4))
        assert short.trace == full.trace[:len(short.trace)]
        assert short.trace[-1] <= full.trace[-1]


def test_sfp_restarts_exhausted():
    cfg = SystemConfig(m_antennas=2, n_ris=2, k_users=2)
    # rank-one effective channel for every phase: both users see the same h2 row
    row = np.array([[1.0 + 0j, 0.5j]])
    state = ChannelState(h1=np.ones((2, 2), dtype=complex), h2=np.vstack([row, row]) * 1e-6)
    with pytest.raises(ZeroForcingError):
        sfp_policy(state, SfpSettings(restarts=2), cfg, Rng(0))
