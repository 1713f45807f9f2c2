import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from tsaga.core import (
    ChainParams,
    RoundConfig,
    SeededRng,
    gauss_pdf,
    log_gauss_pdf,
    require_finite,
    spawn_stream,
    stable_hash64,
    stationary_p10,
    stationary_xi,
)


def test_spawn_stream_first_draw_is_frozen():
    g = spawn_stream(SeededRng(7), "channel").generator()
    assert g.random() == 0.43151083602784956


def test_spawn_stream_repeatable():
    a = spawn_stream(SeededRng(7), "channel").generator().random(100)
    b = spawn_stream(SeededRng(7), "channel").generator().random(100)
    assert np.array_equal(a, b)


def test_spawn_stream_labels_differ():
    a = spawn_stream(SeededRng(7), "channel").generator().random(1000)
    b = spawn_stream(SeededRng(7), "device-0").generator().random(1000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_spawn_stream_rejects_empty_label():
    with pytest.raises(ValueError):
        spawn_stream(SeededRng(1), "")


def test_stable_hash_is_frozen():
    assert stable_hash64(7, "op", 3) == 8592144332697229475


def test_gauss_pdf_values():
    assert gauss_pdf(0.0, 0.0, 1.0) == pytest.approx(0.3989422804, abs=1e-10)
    assert gauss_pdf(2.0, 2.0, 0.5) == pytest.approx((2 * math.pi * 0.5) ** -0.5, rel=1e-14)


def test_gauss_pdf_normalised():
    sd = math.sqrt(2.5)
    x = np.linspace(0.2 - 12 * sd, 0.2 + 12 * sd, 200001)
    assert integrate.trapezoid(gauss_pdf(x, 0.2, 2.5), x) == pytest.approx(1.0, abs=1e-9)


def test_log_gauss_pdf_far_tail_stays_finite():
    v = log_gauss_pdf(80.0, 0.0, 1.0)
    assert np.isfinite(v) and v == pytest.approx(-0.5 * (math.log(2 * math.pi) + 6400.0))


@pytest.mark.parametrize("var", [0.0, -1.0])
def test_gauss_pdf_rejects_bad_variance(var):
    with pytest.raises(ValueError):
        gauss_pdf(0.0, 0.0, var)


def test_require_finite():
    require_finite("ok", np.ones(3))
    with pytest.raises(FloatingPointError):
        require_finite("bad", np.array([1.0, np.nan]))


@given(
    lam=st.floats(0.01, 0.9),
    p01=st.floats(0.0, 1.0),
    p_start=st.floats(0.0, 1.0),
)
def test_coupled_chain_keeps_lambda(lam, p01, p_start):
    p = ChainParams.coupled(lam, 1.0, p01, 0.1)
    if p.p10 < 1.0:
        assert p.support_step(lam) == pytest.approx(lam, abs=1e-12)
    assert 0.0 <= p.support_step(p_start) <= 1.0


@given(beta=st.floats(1e-4, 1.0), gamma=st.floats(1e-3, 1e3))
def test_stationary_xi_keeps_amplitude_variance(beta, gamma):
    xi = stationary_xi(beta, gamma)
    assert (1 - beta) ** 2 * gamma + beta**2 * xi == pytest.approx(gamma, rel=1e-12)


def test_stationary_p10_formula():
    assert stationary_p10(0.2, 0.01) == pytest.approx(0.0025)


@pytest.mark.parametrize(
    "kw",
    [
        dict(lam=1.5, gamma=1, p01=0.1, p10=0.1, beta=0.1, xi=1),
        dict(lam=0.5, gamma=0, p01=0.1, p10=0.1, beta=0.1, xi=1),
        dict(lam=0.5, gamma=1, p01=0.1, p10=0.1, beta=0.1, xi=1, epsilon=0.1),
    ],
)
def test_chain_params_validation(kw):
    with pytest.raises(ValueError):
        ChainParams(**kw)


def test_round_config_allows_k_above_s():
    rc = RoundConfig(1000, 100, 200)
    assert rc.support_exceeds_measurements


@pytest.mark.parametrize(
    "kw",
    [dict(n_model=10, s_channel=11, k_sparsity=1), dict(n_model=10, s_channel=5, k_sparsity=0),
     dict(n_model=10, s_channel=5, k_sparsity=2, eta=0.0)],
)
def test_round_config_validation(kw):
    with pytest.raises(ValueError):
        RoundConfig(**kw)
