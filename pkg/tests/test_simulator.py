from __future__ import annotations

import math

import numpy as np
import pytest

from arzctl.grid import Grid
from arzctl.kernels import make_routing_gain
from arzctl.model import ModelParams, admissible_bounds, compute_equilibrium, riemann_map
from arzctl.simulator import (
    AdmissibilityError,
    InstabilityError,
    Plant,
    SimConfig,
    SimState,
    VacuumError,
    compute_control,
    find_destabilizing_gain,
    init_scenario,
    initial_profile,
    run_nonlinear_reference,
    run_simulation,
    settling_horizon,
    step_linear,
)
from arzctl.analysis import discrete_norms

from conftest import smooth_field


def zero_c(y):
    return np.zeros_like(np.asarray(y, dtype=float))


@pytest.fixture(scope="module")
def plant(eq, gauss_gain):
    return Plant.build(eq, gauss_gain)


def test_sim_config_validation(eq):
    for bad in ({"cfl": 0.0}, {"cfl": 1.5}, {"t_final": -1.0}, {"N": 1}, {"record_every": 0}, {"k3": 0.0}):
        with pytest.raises(ValueError):
            SimConfig(**bad)
    dt, steps = SimConfig(N=400, cfl=0.9, t_final=80.0).time_grid(eq, 500.0)
    assert steps * dt == pytest.approx(80.0)
    assert dt <= 0.9 * 1.25 / 20 + 1e-15


def test_zero_profile(eq, grid400, plant):
    adm = admissible_bounds(eq)
    s = init_scenario("zero", 1.0, eq, adm, grid400, plant)
    assert not s.v.any() and not s.w.any() and s.alpha == 0


def test_sine_profile_norm(eq, grid400):
    A, L = 0.004, grid400.L
    v0, w0 = initial_profile("sine", A, grid400)
    assert not v0.any()
    expected = A * math.sqrt(L / 2) * math.sqrt(1 + (2 * math.pi / L) ** 2)
    assert discrete_norms(v0, grid400.h, w0).h1 == pytest.approx(expected, rel=1e-4)


def test_amplitude_scaling(eq, grid400):
    v1, w1 = initial_profile("bump", 0.002, grid400)
    v2, w2 = initial_profile("bump", 0.004, grid400)
    a, b = discrete_norms(v1, grid400.h, w1), discrete_norms(v2, grid400.h, w2)
    assert np.allclose(np.array(b), 2 * np.array(a))
    with pytest.raises(ValueError):
        initial_profile("square", 1.0, grid400)


def test_strict_admissibility(eq, grid400):
    adm = admissible_bounds(eq)
    with pytest.raises(AdmissibilityError):
        init_scenario("bump", 2 * adm.eps, eq, adm, grid400)
    with pytest.warns(UserWarning):
        s = init_scenario("bump", 2 * adm.eps, eq, adm, grid400, strict=False)
    assert np.max(np.abs(s.w)) == pytest.approx(2 * adm.eps)


def test_alpha_makes_first_control_consistent(eq, grid400, plant):
    adm = admissible_bounds(eq)
    v0 = 0.3 * adm.eps * np.ones(grid400.N + 1)
    w0 = 0.3 * adm.eps * np.sin(grid400.x / 100)
    s = init_scenario((v0, w0), 0.0, eq, adm, grid400, plant)
    u = compute_control(s, plant.gains, plant.kernels, plant.gain, eq)
    assert v0[-1] == pytest.approx(eq.k2 * w0[-1] + u, abs=1e-15)


def test_control_zero_and_decoupled(eq, grid400, plant):
    z = np.zeros(grid400.N + 1)
    assert compute_control(SimState(z, z), plant.gains, plant.kernels, plant.gain, eq) == 0
    gain0 = make_routing_gain("zero", grid400, eq)
    p0 = Plant.build(eq, gain0, c_func=zero_c)
    rng = np.random.default_rng(0)
    w = smooth_field(rng, grid400)
    s = SimState(smooth_field(rng, grid400), w, alpha=0.01)
    for method in ("flat", "chain"):
        assert compute_control(s, p0.gains, p0.kernels, gain0, eq, method) == pytest.approx(0.01 - eq.k2 * w[-1])
    with pytest.raises(ValueError):
        compute_control(s, p0.gains, p0.kernels, gain0, eq, "spectral")


def test_flat_and_chain_agree(eq, grid400, plant):
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = SimState(smooth_field(rng, grid400), smooth_field(rng, grid400), alpha=rng.normal() * 1e-3)
        a = compute_control(s, plant.gains, plant.kernels, plant.gain, eq, "flat")
        b = compute_control(s, plant.gains, plant.kernels, plant.gain, eq, "chain")
        assert abs(a - b) <= 1e-4 * max(abs(a), abs(b))


def test_pure_transport(eq, params):
    errs = []
    for n in (200, 400):
        g = Grid(params.L, n)
        p0 = Plant.build(eq, make_routing_gain("zero", g, eq), with_controller=False, c_func=zero_c)
        x = g.x
        bump = lambda s: np.where((s >= 50) & (s <= 250), np.sin(np.pi * (s - 50) / 200) ** 2, 0.0)
        s0 = SimState(np.zeros_like(x), 1e-3 * bump(x))
        t_end = 10.0
        res = run_simulation(SimConfig(N=n, t_final=t_end, controller_on=False, routing_on=False), p0, s0)
        w_end = res.trajectory.w[-1]
        assert not res.trajectory.v.any()
        errs.append(np.max(np.abs(w_end - 1e-3 * bump(x - eq.v_star * t_end))))
    assert errs[1] < errs[0] and errs[0] / errs[1] > 1.5
    assert errs[1] < 1e-4


def test_zero_state_stays_zero(eq, grid400, plant):
    z = np.zeros(grid400.N + 1)
    res = run_simulation(SimConfig(N=400, t_final=10.0), plant, SimState(z, z))
    assert not res.trajectory.v.any() and not res.trajectory.w.any()


def test_one_step_consistency(eq, params):
    # residual of the discrete update against the PDE shrinks like O(dt + h)
    res = []
    for n in (200, 400):
        g = Grid(params.L, n)
        p0 = Plant.build(eq, make_routing_gain("zero", g, eq), with_controller=False)
        x = g.x
        k = 2 * np.pi / params.L
        v, w = 1e-3 * np.cos(k * x), 1e-3 * np.sin(k * x)
        dt = 0.9 * g.h / eq.lambda_v
        new, _, _ = step_linear(SimState(v, w), dt, p0, controller_on=False, routing_on=False)
        rw = (new.w - w) / dt + eq.v_star * 1e-3 * k * np.cos(k * x)
        rv = (new.v - v) / dt - eq.lambda_v * (-1e-3 * k * np.sin(k * x)) - p0.c * w
        res.append(max(np.max(np.abs(rw[1:])), np.max(np.abs(rv[:-1]))))
    assert 1.5 < res[0] / res[1] < 2.5


def test_cfl_guard(eq, grid400, plant):
    z = np.zeros(grid400.N + 1)
    with pytest.raises(ValueError):
        step_linear(SimState(z, z), 1.0, plant)


def test_record_count(eq, grid400, plant):
    adm = admissible_bounds(eq)
    cfg = SimConfig(N=400, t_final=20.0, record_every=7)
    res = run_simulation(cfg, plant, init_scenario("bump", 0.5 * adm.eps, eq, adm, grid400, plant))
    _, steps = cfg.time_grid(eq, grid400.L)
    assert len(res.trajectory.t) == steps // 7 + 1
    assert res.trajectory.steps == steps


def test_closed_loop_decays(eq, grid400, plant):
    adm = admissible_bounds(eq)
    assert settling_horizon(eq) == pytest.approx(75.0)
    s0 = init_scenario("bump", 0.5 * adm.eps, eq, adm, grid400, plant)
    res = run_simulation(SimConfig(N=400, t_final=80.0), plant, s0)
    rep = res.report
    assert rep.h1[-1] <= 0.01 * rep.h1[0]
    assert rep.fit.gamma > 0
    assert rep.fit.gamma >= 0.5 * rep.theory_gamma
    assert np.all(rep.admissible)
    assert res.trajectory.xi is not None


def test_open_loop_without_routing_is_bounded(eq, grid400):
    p0 = Plant.build(eq, make_routing_gain("zero", grid400, eq), with_controller=False)
    adm = admissible_bounds(eq)
    s0 = init_scenario("bump", 0.5 * adm.eps, eq, adm, grid400)
    rep = run_simulation(SimConfig(N=400, t_final=200.0, controller_on=False), p0, s0).report
    assert rep.h1[-1] < rep.h1[0]
    assert np.max(rep.growth) < 2.0


def test_blowup_is_detected(eq, params):
    g = Grid(params.L, 100)
    p0 = Plant.build(eq, make_routing_gain("constant", g, eq, amplitude=0.05), with_controller=False)
    s0 = init_scenario("bump", 0.004, eq, p0.adm, g)
    cfg = SimConfig(N=100, t_final=300.0, controller_on=False)
    with pytest.raises(InstabilityError):
        run_simulation(cfg, p0, s0)
    res = run_simulation(cfg, p0, s0, raise_on_blowup=False)
    assert res.trajectory.blowup is not None


def test_destabilizing_scan(eq, params):
    g = Grid(params.L, 100)
    amp, scan = find_destabilizing_gain(eq, g, [0.0005, 0.001, 0.002, 0.004])
    assert amp is not None
    assert scan[-1][1] > 1.0 and all(r <= 1.0 for _, r in scan[:-1])


def test_nonlinear_equilibrium_is_stationary(eq, grid400):
    z = np.zeros(grid400.N + 1)
    nl = run_nonlinear_reference(eq, grid400, z, z, 5.0)
    assert np.allclose(nl.q, eq.q_star, rtol=0, atol=1e-14)
    assert np.allclose(nl.v, eq.v_star, rtol=0, atol=1e-12)


def test_nonlinear_transport_speed():
    params = ModelParams(tau=1e7)
    eq = compute_equilibrium(params, 10.0)
    g = Grid(params.L, 800)
    x = g.x
    q_bump = 1e-4 * np.where((x >= 50) & (x <= 150), np.sin(np.pi * (x - 50) / 100) ** 2, 0.0)
    v, w = riemann_map("forward", np.zeros_like(x), q_bump, eq, x=x)
    nl = run_nonlinear_reference(eq, g, v, w, 20.0, record_every=1)
    assert nl.t[-1] == pytest.approx(20.0)
    peak = x[np.argmax(nl.q[-1] - eq.q_star)]
    assert peak == pytest.approx(100 + eq.v_star * 20.0, abs=5.0)


def test_nonlinear_vacuum_guard(eq, grid400):
    z = np.zeros(grid400.N + 1)
    with pytest.raises(VacuumError):
        run_nonlinear_reference(eq, grid400, z, np.full_like(z, 0.5), 1.0)
