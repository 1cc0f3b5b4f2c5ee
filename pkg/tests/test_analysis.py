from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arzctl.analysis import (
    LyapunovSpec,
    admissibility_monitor,
    discrete_norms,
    embedding_constant,
    fit_decay,
    lyapunov_min_weight,
    lyapunov_value,
    settling_time,
    theory_constants,
)
from arzctl.model import admissible_bounds

from conftest import smooth_field


def test_constant_field_norms():
    h = 500 / 100
    n = discrete_norms(np.full(101, 2.0), h)
    assert n.l2 == pytest.approx(2 * math.sqrt(500))
    assert n.h1 == pytest.approx(2 * math.sqrt(500))
    assert n.linf == 2.0


def test_sine_norms_fine_grid():
    L, N = 500.0, 4000
    x = np.linspace(0, L, N + 1)
    n = discrete_norms(np.sin(2 * np.pi * x / L), L / N)
    assert n.l2 == pytest.approx(math.sqrt(L / 2), rel=1e-4)
    assert n.h1 == pytest.approx(math.sqrt(L / 2) * math.sqrt(1 + (2 * np.pi / L) ** 2), rel=1e-4)


def test_sobolev_embedding_on_sines():
    # the sharp discrete constant bounds every sine; the 1/sqrt(L) scaling does not
    L, N = 500.0, 400
    h = L / N
    x = np.linspace(0, L, N + 1)
    c = embedding_constant(N + 1, h)
    ratios = []
    for k in range(1, 30):
        f = np.sin(2 * np.pi * k * x / L)
        n = discrete_norms(f, h)
        assert n.linf <= c * n.h1 * (1 + 1e-12)
        ratios.append(n.linf / n.h1)
    assert max(ratios) > 1 / math.sqrt(L)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embedding_constant_is_sharp_bound(seed):
    L, N = 500.0, 100
    h = L / N
    f = np.random.default_rng(seed).normal(size=N + 1)
    n = discrete_norms(f, h)
    assert n.linf <= embedding_constant(N + 1, h) * n.h1 * (1 + 1e-10)


def test_lyapunov_basics(eq, grid400):
    spec = LyapunovSpec()
    z = np.zeros(grid400.N + 1)
    assert lyapunov_value(z, z, spec, eq, grid400.h) == 0
    rng = np.random.default_rng(5)
    mw = lyapunov_min_weight(spec, grid400.L)
    for _ in range(20):
        w, xi = smooth_field(rng, grid400), smooth_field(rng, grid400)
        V = lyapunov_value(w, xi, spec, eq, grid400.h)
        assert V >= mw * discrete_norms(w, grid400.h, xi).h1 ** 2 * (1 - 1e-12)
    with pytest.raises(ValueError):
        LyapunovSpec(d1=0.1).validate(eq)
    with pytest.raises(ValueError):
        LyapunovSpec(d2=1.0).validate(eq)
    with pytest.raises(ValueError):
        LyapunovSpec(delta3=0.0).validate(eq)


def test_theory_constants_equal_weights(eq):
    delta, d = 0.002, 2.5
    M1, rate = theory_constants(LyapunovSpec(delta, delta, delta, delta, d, d), eq)
    assert M1 == pytest.approx(math.exp(2 * delta * 500))
    assert rate == pytest.approx(delta / 4 * min(eq.v_star, d * eq.lambda_v))


def test_theory_rate_monotone_in_deltas(eq):
    base = theory_constants(LyapunovSpec(), eq)[1]
    for name in ("delta1", "delta2", "delta3", "delta4"):
        spec = LyapunovSpec(**{name: 0.003})
        assert theory_constants(spec, eq)[1] >= base


def test_fit_decay():
    t = np.linspace(0, 50, 51)
    fit = fit_decay(t, 3.0 * np.exp(-0.1 * t))
    assert fit.gamma == pytest.approx(0.1)
    assert fit.M == pytest.approx(1.0)
    assert fit_decay(t, np.full_like(t, 2.0)).gamma == pytest.approx(0.0, abs=1e-12)
    zero = fit_decay(t, np.zeros_like(t))
    assert zero.converged_to_zero and zero.gamma == math.inf
    with pytest.raises(ValueError):
        fit_decay(t[:5], t[:5])


def test_settling_time():
    t = np.arange(5.0)
    assert settling_time(t, [1.0, 0.5, 0.009, 0.0, 0.0]) == 2.0
    assert settling_time(t, [1.0] * 5) is None
    assert settling_time(t, [0.0] * 5) == 0.0


def test_admissibility_monitor(eq, grid400):
    adm = admissible_bounds(eq)
    z = np.zeros(grid400.N + 1)
    flags = admissibility_monitor(z, z, adm, eq, grid400.h)
    assert flags.admissible and flags.in_h1_ball and flags.in_embedded_ball
    spike = z.copy()
    spike[200] = 1.01 * adm.eps
    assert not admissibility_monitor(spike, z, adm, eq, grid400.h).in_box


def test_embedded_ball_implies_box(eq, grid400):
    adm = admissible_bounds(eq)
    rng = np.random.default_rng(6)
    hits = 0
    for _ in range(100):
        scale = 10 ** rng.uniform(-2.5, 0.5) * adm.eps
        v, w = smooth_field(rng, grid400, scale), smooth_field(rng, grid400, scale)
        flags = admissibility_monitor(v, w, adm, eq, grid400.h)
        if flags.in_embedded_ball:
            hits += 1
            assert flags.in_box
    assert 0 < hits < 100
