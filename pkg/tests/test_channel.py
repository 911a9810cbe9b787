import math

import numpy as np
import pytest

from rismrl.channel import (
    ChannelState,
    ConfigError,
    SystemConfig,
    ar_step,
    desk_config,
    draw_h1,
    draw_h2,
    h1_amplitude,
    initial_state,
    los_component,
    pathloss_bs_ris_db,
    pathloss_ris_user_db,
    steering_bs,
    steering_ris,
    table1_config,
)
from rismrl.numerics import Rng


def small(**kw):
    base = dict(m_antennas=2, n_ris=4, k_users=2)
    base.update(kw)
    return SystemConfig(**base)


# -- config --------------------------------------------------------------------

def test_table1_defaults():
    cfg = table1_config()
    assert (cfg.m_antennas, cfg.n_ris, cfg.k_users) == (8, 32, 4)
    assert cfg.p_max == 10.0 and cfg.rho == 0.95 and cfg.rician_k_db == 3.0
    assert (cfg.n_x, cfg.n_y) == (8, 4)
    assert cfg.d_a == pytest.approx(cfg.wavelength / 2)
    # -174 dBm/Hz over 10 MHz is -104 dBm
    assert cfg.noise_power == pytest.approx(3.98e-14, rel=1e-3)


def test_config_json_roundtrip_and_unknown_fields():
    cfg = table1_config(3)
    assert SystemConfig.from_json(cfg.to_json()) == cfg
    d = cfg.to_dict()
    d["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        SystemConfig.from_dict(d)


@pytest.mark.parametrize("kw", [
    dict(k_users=3, m_antennas=2),
    dict(rho=1.0),
    dict(rho=0.0),
    dict(p_max=0.0),
    dict(n_ris=6, n_x=4),
    dict(n_ris=0),
    dict(d_bs_ris=-1.0),
    dict(phi_a=7.0),
    dict(psi_a=math.pi / 2),
    dict(pathloss_mode="free"),
])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_replace_refactors_ris():
    cfg = table1_config().replace(n_ris=64)
    assert cfg.n_x * cfg.n_y == 64 and cfg.n_x == 8


# -- steering and LoS ------------------------------------------------------------

def test_steering_bs_examples():
    cfg = small(m_antennas=2, k_users=1, phi_d=math.pi / 2)
    np.testing.assert_allclose(steering_bs(cfg).ravel(), [1, -1], atol=1e-12)
    assert steering_bs(small(phi_d=0.0)).ravel().tolist() == [1, 1]
    assert steering_bs(table1_config(4))[0, 0] == 1


def test_steering_ris_examples():
    cfg = table1_config(1)
    assert steering_ris(cfg)[0, 0] == 1
    np.testing.assert_array_equal(steering_ris(cfg.replace(phi_a=0.0)), np.ones((32, 1)))
    # one row of elements and psi = 0 reduces to a ULA
    ula = cfg.replace(n_ris=8, n_x=8, psi_a=0.0)
    n = np.arange(8)
    expected = np.exp(2j * np.pi * ula.d_c * n * math.sin(ula.phi_a) / ula.wavelength)
    np.testing.assert_allclose(steering_ris(ula).ravel(), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_steering_unit_modulus(seed):
    cfg = table1_config(seed)
    for v in (steering_bs(cfg), steering_ris(cfg)):
        assert np.max(np.abs(np.abs(v) - 1)) <= 1e-12


def test_los_component_structure():
    zero = table1_config().replace(phi_a=0.0, phi_d=0.0, psi_a=0.0)
    np.testing.assert_allclose(los_component(zero), np.ones((32, 8)), atol=1e-12)
    los = los_component(table1_config(2))
    assert los.shape == (32, 8)
    assert np.max(np.abs(np.abs(los) - 1)) <= 1e-12
    assert np.linalg.svd(los, compute_uv=False)[1] <= 1e-10
    minors = los[:-1, :-1] * los[1:, 1:] - los[:-1, 1:] * los[1:, :-1]
    assert np.max(np.abs(minors)) <= 1e-10


# -- path loss -------------------------------------------------------------------

def test_pathloss_values():
    # 22 log10(100) + 28 + 20 log10(5) = 85.979
    assert pathloss_bs_ris_db(100, 5e9, "tr36873") == pytest.approx(85.98, abs=5e-3)
    # 22 log10(100) + 28 + log10(5) = 72.699
    assert pathloss_bs_ris_db(100, 5e9, "log_fc") == pytest.approx(72.70, abs=5e-3)
    for mode in ("tr36873", "log_fc"):
        assert pathloss_bs_ris_db(1, 1e9, mode) == pytest.approx(28.0)
    # 36.7 log10(20) + 22.7 + 26 log10(5) - 0.3 * 8.5 = 86.071
    assert pathloss_ris_user_db(20, 5e9, 10) == pytest.approx(86.07, abs=5e-3)
    assert pathloss_ris_user_db(1, 1e9, 1.5) == pytest.approx(22.7)
    assert pathloss_ris_user_db(20, 5e9, 11) - pathloss_ris_user_db(20, 5e9, 10) == pytest.approx(-0.3)


# -- random draws ----------------------------------------------------------------

def test_h1_rician_limit():
    cfg = table1_config(1, rician_k_db=300.0)
    h1 = draw_h1(cfg, Rng(0))
    np.testing.assert_allclose(h1 / h1_amplitude(cfg), los_component(cfg), atol=1e-6)


def test_h1_mixing_weights():
    cfg = table1_config(rician_k_db=3.0)
    assert cfg.rician_k == pytest.approx(1.995, abs=1e-3)
    assert math.sqrt(cfg.rician_k / (cfg.rician_k + 1)) == pytest.approx(0.816, abs=1e-3)


def test_h1_power():
    cfg = desk_config()
    rng = Rng(3)
    p = np.mean([np.sum(np.abs(draw_h1(cfg, rng.split(i))) ** 2) for i in range(10_000)])
    assert p / (cfg.n_ris * cfg.m_antennas) == pytest.approx(h1_amplitude(cfg) ** 2, rel=0.03)


def test_h2_power_and_equal_users():
    cfg = desk_config()
    rng = Rng(4)
    draws = np.stack([draw_h2(cfg, rng.split(i)) for i in range(10_000)])
    gain = 10 ** (-pathloss_ris_user_db(20.0, cfg.fc, cfg.z_r) / 10)
    power = np.mean(np.abs(draws) ** 2, axis=(0, 2))
    np.testing.assert_allclose(power, gain, rtol=0.03)
    assert 0.94 <= power[0] / power[1] <= 1.06
    np.testing.assert_array_equal(draw_h2(cfg, Rng(9)), draw_h2(cfg, Rng(9)))


# -- AR(1) ---------------------------------------------------------------------

def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_ar_step_limits():
    cfg = desk_config()
    s0 = initial_state(cfg, Rng(1))
    s1 = ar_step(s0, cfg.replace(rho=1 - 1e-12), Rng(2))
    assert s1.t == 1
    assert _rel(s1.h1, s0.h1) <= 1e-5 and _rel(s1.h2, s0.h2) <= 1e-5
    memoryless = cfg.replace(rho=1e-12)
    s1 = ar_step(s0, memoryless, Rng(2))
    fresh_rng = Rng(2)
    fresh1 = draw_h1(memoryless, fresh_rng)
    fresh2 = draw_h2(memoryless, fresh_rng)
    assert _rel(s1.h1, fresh1) <= 1e-5 and _rel(s1.h2, fresh2) <= 1e-5


def test_ar_step_stationary_power():
    cfg = desk_config(rho=0.95)
    state = initial_state(cfg, Rng(5))
    stream = Rng(6)
    ref = cfg.n_ris * cfg.m_antennas * h1_amplitude(cfg) ** 2
    powers = []
    for t in range(20_000):
        state = ar_step(state, cfg, stream.split(t))
        powers.append(np.sum(np.abs(state.h1) ** 2))
    assert np.mean(powers) == pytest.approx(ref, rel=0.03)


def test_ar_step_ensemble_power_at_t1000():
    cfg = SystemConfig(m_antennas=1, n_ris=2, k_users=1, rho=0.7)
    rng = Rng(7)
    streams = [rng.split(i) for i in range(1000)]
    states = [initial_state(cfg, s) for s in streams]
    p0 = np.mean([np.sum(np.abs(s.h1) ** 2) + np.sum(np.abs(s.h2) ** 2) for s in states])
    for _ in range(1000):
        states = [ar_step(s, cfg, r) for s, r in zip(states, streams)]
    p1000 = np.mean([np.sum(np.abs(s.h1) ** 2) + np.sum(np.abs(s.h2) ** 2) for s in states])
    assert p1000 == pytest.approx(p0, rel=0.05)


def lag1_autocorrelation(x):
    x = x - x.mean()
    return float(np.real(np.vdot(x[:-1], x[1:])) / np.real(np.vdot(x, x)))


@pytest.mark.parametrize("rho", [0.5, 0.95])
def test_ar_step_lag1_autocorrelation(rho):
    cfg = SystemConfig(m_antennas=1, n_ris=1, k_users=1, rho=rho)
    stream = Rng(8)
    state = initial_state(cfg, stream.split(0))
    h1, h2 = [], []
    for _ in range(100_000):
        state = ar_step(state, cfg, stream)
        h1.append(state.h1[0, 0])
        h2.append(state.h2[0, 0])
    assert lag1_autocorrelation(np.array(h1)) == pytest.approx(rho, abs=0.02)
    assert lag1_autocorrelation(np.array(h2)) == pytest.approx(rho, abs=0.02)


def test_reproducible_from_seed_and_stream():
    cfg = desk_config()
    a = ar_step(initial_state(cfg, Rng(1).split(4)), cfg, Rng(1).split(5))
    b = ar_step(initial_state(cfg, Rng(1).split(4)), cfg, Rng(1).split(5))
    np.testing.assert_array_equal(a.h1, b.h1)
    np.testing.assert_array_equal(a.h2, b.h2)


def test_channel_state_is_immutable():
    s = initial_state(desk_config(), Rng(0))
    assert isinstance(s, ChannelState)
    with pytest.raises(ValueError):
        s.h1[0, 0] = 0
