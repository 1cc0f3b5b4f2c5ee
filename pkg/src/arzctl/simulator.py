"""Upwind simulation of the linear (v, w) road model, open or closed loop, plus a nonlinear ARZ reference."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .analysis import (
    LyapunovSpec,
    StabilityReport,
    admissibility_monitor,
    discrete_norms,
    embedding_constant,
    fit_decay,
    lyapunov_value,
    settling_time,
    theory_constants,
)
from .grid import Grid
from .kernels import ControllerGains, KernelSet, RoutingGain, compute_gains, synthesize
from .model import AdmissibilitySpec, Equilibrium, admissible_bounds, coeff_c, riemann_map
from .transforms import tfm_backstep, tfm_decouple, to_target

log = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e6


class InstabilityError(RuntimeError):
    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class AdmissibilityError(ValueError):
    pass


class VacuumError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimState:
    v: np.ndarray
    w: np.ndarray
    alpha: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    N: int = 400
    cfl: float = 0.9
    t_final: float = 80.0
    controller_on: bool = True
    routing_on: bool = True
    record_every: int = 10
    k3: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.cfl <= 1.0):
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.N < 2 or self.record_every < 1:
            raise ValueError("N must be >= 2 and record_every >= 1")
        if not self.k3 > 0:
            raise ValueError("k3 must be positive")

    def time_grid(self, eq: Equilibrium, L: float) -> tuple[float, int]:
        """(dt, steps) with dt <= cfl h / max speed and steps * dt = t_final."""
        dt = self.cfl * (L / self.N) / max(eq.lambda_w, eq.lambda_v)
        steps = max(1, math.ceil(self.t_final / dt - 1e-9))
        return self.t_final / steps, steps


@dataclass
class Plant:
    """Everything a run needs that does not change in time."""

    eq: Equilibrium
    grid: Grid
    gain: RoutingGain
    adm: AdmissibilitySpec
    kernels: KernelSet | None = None
    gains: ControllerGains | None = None
    c_func: Callable | None = None  # in-domain coupling; defaults to coeff_c

    @classmethod
    def build(cls, eq: Equilibrium, gain: RoutingGain, k3: float = 1.0, with_controller: bool = True,
              c_func: Callable | None = None) -> "Plant":
        ks = gains = None
        if with_controller:
            ks = synthesize(eq, gain, c=c_func)
            gains = compute_gains(ks, gain, eq, k3)
        return cls(eq=eq, grid=gain.grid, gain=gain, adm=admissible_bounds(eq), kernels=ks, gains=gains,
                   c_func=c_func)

    @property
    def c(self) -> np.ndarray:
        cached = self.__dict__.get("_c")
        if cached is None:
            func = self.c_func or (lambda x: coeff_c(x, self.eq))
            cached = self.__dict__["_c"] = np.asarray(func(self.grid.x), dtype=float)
        return cached

    @property
    def routing_weights(self) -> np.ndarray:
        cached = self.__dict__.get("_rw")
        if cached is None:
            cached = self.__dict__["_rw"] = self.grid.weights * self.gain.a
        return cached


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

PROFILES = ("zero", "sine", "bump")


def initial_profile(profile: str, amplitude: float, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """(v0, w0) for a named initial profile."""
    x, L = grid.x, grid.L
    if profile == "zero":
        return np.zeros_like(x), np.zeros_like(x)
    if profile == "sine":
        return np.zeros_like(x), amplitude * np.sin(2 * np.pi * x / L)
    if profile == "bump":
        # smooth bumps vanishing with their slopes at the ends of their supports
        def bump(lo, hi):
            inside = (x >= lo) & (x <= hi)
            return np.where(inside, np.sin(np.pi * (x - lo) / (hi - lo)) ** 2, 0.0)

        return 0.5 * amplitude * bump(0.5 * L, 0.9 * L), amplitude * bump(0.1 * L, 0.5 * L)
    raise ValueError(f"unknown initial profile {profile!r}; expected one of {PROFILES}")


def init_scenario(profile: str | tuple[np.ndarray, np.ndarray], amplitude: float, eq: Equilibrium,
                  spec: AdmissibilitySpec, grid: Grid, plant: Plant | None = None,
                  strict: bool = True) -> SimState:
    """Initial state; alpha(0) makes the first control value match v0(L).

    Profiles with ||(v0, w0)||_inf >= eps are rejected when ``strict``;
    otherwise a warning is issued and the state is returned as is.
    """
    if isinstance(profile, str):
        v0, w0 = initial_profile(profile, amplitude, grid)
    else:
        v0, w0 = (np.asarray(a, float) for a in profile)
    grid.check(v0, w0)
    norms = discrete_norms(v0, grid.h, w0)
    if norms.linf >= spec.eps:
        msg = f"initial data leave the admissible box: ||(v0, w0)||_inf = {norms.linf:.4g} >= eps = {spec.eps:.4g}"
        if strict:
            raise AdmissibilityError(msg)
        warnings.warn(msg, stacklevel=2)
    elif norms.h1 >= spec.eps_h1:
        warnings.warn(f"initial H1 norm {norms.h1:.4g} exceeds the sqrt(L) eps ball {spec.eps_h1:.4g}", stacklevel=2)
    alpha0 = 0.0
    if plant is not None and plant.gains is not None:
        state = SimState(v0, w0, 0.0, 0.0)
        feedback = compute_control(state, plant.gains, plant.kernels, plant.gain, eq)
        alpha0 = float(v0[-1] - eq.k2 * w0[-1] - feedback)
    return SimState(v=v0.copy(), w=w0.copy(), alpha=alpha0, t=0.0)


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------


def compute_control(state: SimState, gains: ControllerGains, ks: KernelSet, gain: RoutingGain,
                    eq: Equilibrium, method: str = "chain") -> float:
    """Ramp-metering input U_ramp for the current state.

    ``"chain"`` maps the state through the backstepping and decoupling
    transforms and evaluates the final transform at x = L; ``"flat"`` uses the
    precomputed gains F_v, F_w and the routing tail.
    """
    v, w = state.v, state.w
    wq = gains.grid.weights
    if method == "flat":
        return float(state.alpha - gains.k2 * w[-1] + wq @ (gains.F_v * v) + wq @ (gains.F_w * w)
                     - gains.routing_tail @ w / eq.k1)
    if method != "chain":
        raise ValueError(f"unknown control evaluation {method!r}")
    z = tfm_backstep("forward", v, w, ks)
    eta = tfm_decouple("forward", z, w, gain, eq)
    w_ramp = wq @ (gains.n_rev * eta)
    v_ramp = (w_ramp - gains.routing_tail @ w) / eq.k1
    return float(state.alpha + v_ramp - gains.k2 * w[-1] + wq @ (gains.k_L * v) + wq @ (gains.l_L * w))


# ---------------------------------------------------------------------------
# linear stepper
# ---------------------------------------------------------------------------


def step_linear(state: SimState, dt: float, plant: Plant, controller_on: bool = True, routing_on: bool = True,
                control_method: str = "flat") -> tuple[SimState, float, float]:
    """One explicit upwind step; returns (new state, U_ramp, U_rout) applied at the boundaries."""
    eq, h = plant.eq, plant.grid.h
    cw, cv = eq.lambda_w * dt / h, eq.lambda_v * dt / h
    if max(cw, cv) > 1.0 + 1e-12:
        raise ValueError(f"CFL violated: Courant numbers {cw:.3f}, {cv:.3f}")
    v, w = state.v, state.w
    w_new = w.copy()
    v_new = v.copy()
    w_new[1:] = w[1:] - cw * (w[1:] - w[:-1])
    v_new[:-1] = v[:-1] + cv * (v[1:] - v[:-1]) + dt * plant.c[:-1] * w[:-1]
    gains = plant.gains
    k3 = gains.k3 if gains is not None else 1.0
    alpha = state.alpha * math.exp(-k3 * dt)

    u_rout = float(plant.routing_weights @ w_new) if routing_on else 0.0
    w_new[0] = eq.k1 * v_new[0] + u_rout
    u_ramp = 0.0
    if controller_on:
        if gains is None:
            raise ValueError("closed-loop step requested without controller gains")
        u_ramp = compute_control(SimState(v_new, w_new, alpha, state.t + dt), gains, plant.kernels, plant.gain, eq,
                                 method=control_method)
    v_new[-1] = eq.k2 * w_new[-1] + u_ramp
    return SimState(v_new, w_new, alpha, state.t + dt), u_ramp, u_rout


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray  # (records, nodes)
    w: np.ndarray
    u_ramp: np.ndarray
    u_rout: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray | None = None
    steps: int = 0
    dt: float = 0.0
    blowup: str | None = None


@dataclass
class RunResult:
    trajectory: Trajectory
    report: StabilityReport
    config: SimConfig = field(repr=False, default=None)


def run_simulation(cfg: SimConfig, plant: Plant, state0: SimState, lyap: LyapunovSpec | None = None,
                   control_method: str = "flat", raise_on_blowup: bool = True) -> RunResult:
    """Simulate to ``cfg.t_final`` recording every ``cfg.record_every`` steps."""
    eq, grid = plant.eq, plant.grid
    if grid.N != cfg.N:
        raise ValueError(f"plant grid has N={grid.N} but config asks for N={cfg.N}")
    lyap = lyap or LyapunovSpec()
    dt, steps = cfg.time_grid(eq, grid.L)
    closed = cfg.controller_on
    if closed and plant.gains is None:
        raise ValueError("closed-loop run needs a plant built with the controller")
    limit = BLOWUP_FACTOR * plant.adm.eps

    def boundary_inputs(s: SimState) -> tuple[float, float]:
        u_rout = float(plant.routing_weights @ s.w) if cfg.routing_on else 0.0
        u_ramp = compute_control(s, plant.gains, plant.kernels, plant.gain, eq, control_method) if closed else 0.0
        return u_ramp, u_rout

    rec_t, rec_v, rec_w, rec_ur, rec_uo, rec_a = [], [], [], [], [], []
    state = state0
    u_ramp, u_rout = boundary_inputs(state0)
    blowup = None
    for k in range(steps + 1):
        if k % cfg.record_every == 0:
            rec_t.append(state.t)
            rec_v.append(state.v)
            rec_w.append(state.w)
            rec_ur.append(u_ramp)
            rec_uo.append(u_rout)
            rec_a.append(state.alpha)
        if k == steps:
            break
        state, u_ramp, u_rout = step_linear(replace(state, t=k * dt), dt, plant, closed, cfg.routing_on, control_method)
        peak = max(np.max(np.abs(state.v)), np.max(np.abs(state.w)))
        if not np.isfinite(peak) or peak > limit:
            blowup = f"state magnitude {peak:.3e} exceeded {limit:.3e} at t = {state.t:.3f} s"
            if raise_on_blowup:
                raise InstabilityError(blowup, state.t)
            break
    log.debug("ran %d steps of %.4g s (%s loop)", steps, dt, "closed" if closed else "open")

    traj = Trajectory(t=np.array(rec_t), x=grid.x, v=np.array(rec_v), w=np.array(rec_w), u_ramp=np.array(rec_ur),
                      u_rout=np.array(rec_uo), alpha=np.array(rec_a), steps=steps, dt=dt, blowup=blowup)
    report = stability_report(traj, plant, lyap, closed)
    return RunResult(trajectory=traj, report=report, config=cfg)


def stability_report(traj: Trajectory, plant: Plant, lyap: LyapunovSpec, closed: bool) -> StabilityReport:
    eq, h = plant.eq, plant.grid.h
    norms = np.array([discrete_norms(v, h, w) for v, w in zip(traj.v, traj.w)])
    lyap_vals = []
    xis = []
    for v, w in zip(traj.v, traj.w):
        if closed and plant.kernels is not None:
            xi = to_target(v, w, plant.kernels, plant.gain, eq)[2]
            xis.append(xi)
            lyap_vals.append(lyapunov_value(w, xi, lyap, eq, h))
        else:
            lyap_vals.append(lyapunov_value(w, v, lyap, eq, h))
    if xis:
        traj.xi = np.array(xis)
    flags = [admissibility_monitor(v, w, plant.adm, eq, h) for v, w in zip(traj.v, traj.w)]
    admissible = np.array([f.admissible for f in flags])
    viol = np.nonzero(~admissible)[0]
    h1 = norms[:, 1]
    M1, rate = theory_constants(lyap, eq)
    if len(traj.t) >= 10:
        fit = fit_decay(traj.t, h1)
    else:
        fit = fit_decay(np.linspace(traj.t[0], traj.t[-1], 10), np.interp(np.linspace(traj.t[0], traj.t[-1], 10),
                                                                            traj.t, h1))
    return StabilityReport(
        t=traj.t, l2=norms[:, 0], h1=h1, linf=norms[:, 2], lyapunov=np.array(lyap_vals), fit=fit,
        theory_M1=M1, theory_gamma=rate, admissible=admissible, settling_time=settling_time(traj.t, h1),
        embedding_constant=embedding_constant(plant.grid.N + 1, h),
        first_violation_time=float(traj.t[viol[0]]) if viol.size else None,
        growth=h1 / h1[0] if h1[0] > 0 else np.zeros_like(h1),
    )


def settling_horizon(eq: Equilibrium) -> float:
    """Finite settling time L/v* + L/(gamma p* - v*) of the target cascade."""
    return eq.params.L / eq.lambda_w + eq.params.L / eq.lambda_v


def find_destabilizing_gain(eq: Equilibrium, grid: Grid, amplitudes, t_final: float = 300.0, cfl: float = 0.9,
                            profile: str = "bump", init_amplitude: float | None = None,
                            record_every: int = 50) -> tuple[float | None, list[tuple[float, float]]]:
    """Scan constant routing gains; return the first whose open-loop H1 norm grows over the horizon.

    Returns ``(amplitude or None, [(amplitude, h1_final / h1_initial), ...])``.
    """
    from .kernels import make_routing_gain

    adm = admissible_bounds(eq)
    amp0 = 0.5 * adm.eps if init_amplitude is None else init_amplitude
    cfg = SimConfig(N=grid.N, cfl=cfl, t_final=t_final, controller_on=False, record_every=record_every)
    scan = []
    for a in amplitudes:
        gain = make_routing_gain("constant", grid, eq, amplitude=a)
        plant = Plant.build(eq, gain, with_controller=False)
        state0 = init_scenario(profile, amp0, eq, adm, grid)
        result = run_simulation(cfg, plant, state0, raise_on_blowup=False)
        h1 = result.report.h1
        ratio = math.inf if result.trajectory.blowup else float(h1[-1] / h1[0])
        scan.append((float(a), ratio))
        if ratio > 1.0:
            return float(a), scan
    return None, scan


# ---------------------------------------------------------------------------
# nonlinear reference
# ---------------------------------------------------------------------------


@dataclass
class NonlinearTrajectory:
    t: np.ndarray
    x: np.ndarray
    q: np.ndarray  # absolute flow, (records, nodes)
    v: np.ndarray  # absolute speed


def run_nonlinear_reference(eq: Equilibrium, grid: Grid, v0: np.ndarray, w0: np.ndarray, t_final: float,
                            cfl: float = 0.9, gain: RoutingGain | None = None,
                            control: Callable[[np.ndarray, np.ndarray, float], float] | None = None,
                            record_every: int = 10, rho_floor: float = 1e-6) -> NonlinearTrajectory:
    """First-order characteristic upwind solution of the nonlinear (q, v) ARZ system.

    Initial and boundary data are given in the linear (v, w) variables and
    mapped to physical perturbations; the inflow boundaries reuse the linear
    boundary relations w(0) = k1 v(0) + U_rout and v(L) = k2 w(L) + U_ramp.
    ``control(v, w, t)`` supplies U_ramp (zero when omitted).
    """
    params = eq.params
    x, h = grid.x, grid.h
    g, vf, rm, tau = params.gamma_exp, params.v_f, params.rho_m, params.tau
    v_tilde, q_tilde = riemann_map("inverse", v0, w0, eq, x=x)
    q = eq.q_star + q_tilde
    v = eq.v_star + v_tilde
    dt = cfl * h / max(eq.lambda_w, eq.lambda_v)
    steps = max(1, math.ceil(t_final / dt - 1e-9))
    dt = t_final / steps
    route_w = grid.weights * gain.a if gain is not None else None
    weight_L = math.exp(params.L / (tau * eq.v_star))
    scale = eq.q_star / eq.gamma_p

    def check(q, v, t):
        rho = q / v
        if np.any(v <= 0) or np.any(rho <= rho_floor * rm):
            raise VacuumError(f"vacuum approached at t = {t:.3f} s (min density {rho.min():.3e})")
        if np.any(rho >= rm):
            raise VacuumError(f"density reached rho_m at t = {t:.3f} s (max density {rho.max():.4g})")

    def linear_vars(q, v):
        return riemann_map("forward", v - eq.v_star, q - eq.q_star, eq, x=x)

    check(q, v, 0.0)
    rec_t, rec_q, rec_v = [0.0], [q.copy()], [v.copy()]
    for k in range(1, steps + 1):
        p = vf * (q / (rm * v)) ** g
        gp = g * p
        relax = (vf - p - v) / tau
        s_q = relax * q / v
        b = -q * (gp - v) / (v * gp)
        if max(np.max(v), np.max(gp - v)) * dt / h > 1.0 + 1e-12:
            raise ValueError("CFL violated by the nonlinear characteristic speeds")
        v_new = v.copy()
        q_new = q.copy()
        v_new[:-1] = v[:-1] + dt * ((gp[:-1] - v[:-1]) * (v[1:] - v[:-1]) / h + relax[:-1])
        # left-eigenvector combination transported at speed v
        comb = dt * (-v[1:] * ((q[1:] - q[:-1]) + b[1:] * (v[1:] - v[:-1])) / h + s_q[1:] + b[1:] * relax[1:])
        q_new[1:-1] = q[1:-1] - b[1:-1] * (v_new[1:-1] - v[1:-1]) + comb[:-1]

        lin_v, lin_w = linear_vars(q_new, v_new)
        u_rout = float(route_w @ lin_w) if route_w is not None else 0.0
        u_ramp = float(control(lin_v, lin_w, k * dt)) if control is not None else 0.0
        # x = 0: w(0) = k1 v(0) + U_rout fixes the flow given the outgoing speed
        vt0 = v_new[0] - eq.v_star
        q_new[0] = eq.q_star + (eq.k1 * scale * vt0 + u_rout) + eq.beta * vt0
        # x = L: outgoing combination plus v(L) = k2 w(L) + U_ramp, solved in (q~, v~)
        rhs = q[-1] - eq.q_star + b[-1] * (v[-1] - eq.v_star) + comb[-1]
        A = np.array([[1.0, b[-1]], [-eq.k2 * weight_L, scale + eq.k2 * weight_L * eq.beta]])
        qt_L, vt_L = np.linalg.solve(A, [rhs, u_ramp])
        q_new[-1] = eq.q_star + qt_L
        v_new[-1] = eq.v_star + vt_L
        q, v = q_new, v_new
        check(q, v, k * dt)
        if k % record_every == 0:
            rec_t.append(k * dt)
            rec_q.append(q.copy())
            rec_v.append(v.copy())
    return NonlinearTrajectory(t=np.array(rec_t), x=x, q=np.array(rec_q), v=np.array(rec_v))
