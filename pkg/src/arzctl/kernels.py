"""Backstepping kernels k, l, m, the convolution kernel n and the ramp-metering gains.

The kernel boundary-value problem is solved along characteristics.  Every
kernel value is a linear functional of the trace ``l(x, 0)``; that trace is the
fixed point of a causal integral equation, solved here either by successive
approximations or by a direct collocation solve.  Once the trace is known, k,
l and m follow from explicit quadratures.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Grid, integrate_to_weights, interp_weights, line_nodes, lower_weights, upper_weights
from .model import Equilibrium, coeff_c, require_congested

log = logging.getLogger(__name__)

DIAG_REFINE = 4
PICARD_TOL = 1e-12
PICARD_MAX_ITER = 200


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# routing gain
# ---------------------------------------------------------------------------


def routing_profile(family: str, L: float, amplitude: float = 0.0, center: float | None = None,
                    width: float | None = None, table=None) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised a(y) for one of the named families (zero, constant, gaussian, table)."""
    if family == "zero":
        return lambda y: np.zeros_like(np.asarray(y, dtype=float))
    if family == "constant":
        return lambda y: np.full_like(np.asarray(y, dtype=float), amplitude)
    if family == "gaussian":
        c = 0.5 * L if center is None else center
        s = 0.1 * L if width is None else width
        if s <= 0:
            raise ValueError("gaussian width must be positive")
        return lambda y: amplitude * np.exp(-0.5 * ((np.asarray(y, dtype=float) - c) / s) ** 2)
    if family == "table":
        if table is None or len(table) < 2:
            raise ValueError("table routing gain needs at least two (y, a) pairs")
        ys, vals = (np.asarray(col, dtype=float) for col in zip(*sorted(table)))
        return lambda y: np.interp(np.asarray(y, dtype=float), ys, vals)
    raise ValueError(f"unknown routing-gain family {family!r}")


@dataclass(frozen=True)
class RoutingGain:
    """Routing kernel a(y) on [0, L] and its rescaled form a_check(x).

    a_check(x) = v* a(mu* x) on [0, L/mu*] and zero beyond; it is the trace
    forcing that the decoupling transform produces.
    """

    grid: Grid
    a: np.ndarray
    a_check: np.ndarray
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    breakpoint: float = math.inf

    @classmethod
    def from_function(cls, func, grid: Grid, eq: Equilibrium) -> "RoutingGain":
        x = grid.x
        inside = eq.mu_star * x <= grid.L * (1 + 1e-12)
        a_check = np.where(inside, eq.v_star * func(np.minimum(eq.mu_star * x, grid.L)), 0.0)
        return cls(grid=grid, a=np.asarray(func(x), dtype=float), a_check=a_check, func=func,
                   breakpoint=grid.L / eq.mu_star)

    def __call__(self, y):
        return self.func(np.clip(y, 0.0, self.grid.L))


def make_routing_gain(family: str, grid: Grid, eq: Equilibrium, **kwargs) -> RoutingGain:
    return RoutingGain.from_function(routing_profile(family, grid.L, **kwargs), grid, eq)


# ---------------------------------------------------------------------------
# characteristic functionals
# ---------------------------------------------------------------------------


class _Functional:
    """value(x, y) = const + sum_k wts_k * trace(pos_k) (+ diagonal-table part)."""

    __slots__ = ("const", "pos", "wts", "diag_pos")

    def __init__(self, const, pos, wts, diag_pos=None):
        self.const, self.pos, self.wts, self.diag_pos = const, pos, wts, diag_pos


class _KernelProblem:
    """Discretised characteristic representation of the (k, l, m) system."""

    def __init__(self, eq: Equilibrium, gain: RoutingGain, c: Callable | None, N: int):
        require_congested(eq)
        self.eq = eq
        self.gain = gain
        self.grid = gain.grid if gain.grid.N == N else Grid(gain.grid.L, N)
        self.c = c if c is not None else (lambda x: coeff_c(x, eq))
        self.L = self.grid.L
        self.h = self.grid.h
        self.N = N
        self.lam = eq.lambda_v
        self.vs = eq.v_star
        self.gp = eq.gamma_p
        self.mu = eq.mu_star
        self.k1mu = eq.k1 * eq.mu_star
        self.sig = np.linspace(0.0, self.L, DIAG_REFINE * N + 1)
        self._diag = None

    # a evaluated inside the closed domain only
    def _a(self, y):
        return self.gain(y)

    def m_functional(self, x, y) -> _Functional:
        """m(x, y) on the upper triangle by integration back to x = 0 or y = L."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        first = y <= self.L - self.mu * x
        # range swept by the trace argument along the characteristic
        span = np.where(first, x, (self.L - y) / self.mu)
        n = max(1, int(np.ceil(span.max(initial=0.0) / self.h - 1e-9)))
        length = np.where(first, x / self.lam, (self.L - y) / self.vs)
        s, ws = line_nodes(length, n)
        a_arg = np.where(first[..., None], (self.mu * x + y)[..., None] - self.vs * s, self.L - self.vs * s)
        shift = np.where(first, 0.0, x - (self.L - y) / self.mu)
        pos = self.lam * s + shift[..., None]
        wts = ws * self.vs * self._a(a_arg)
        return _Functional(np.zeros(x.shape), pos, wts)

    def diag_operator(self) -> np.ndarray:
        """Matrix mapping trace samples to m(s, s) on the refined diagonal table."""
        if self._diag is None:
            fn = self.m_functional(self.sig, self.sig)
            self._diag = self._assemble(fn)
        return self._diag

    def l_functional(self, x, y) -> _Functional:
        """l(x, y) on the lower triangle by integration back to the diagonal."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        foot = (self.vs * x + self.lam * y) / self.gp
        n = max(1, int(np.ceil((x - y).max(initial=0.0) / self.h - 1e-9)))
        s, ws = line_nodes((x - y) / self.gp, n)
        back = foot[..., None] - self.vs * s
        pos = np.concatenate([self.gp * s, self.lam * s + foot[..., None]], axis=-1)
        wts = np.concatenate([ws * self.k1mu * self.c(back), ws * self.vs * self._a(back)], axis=-1)
        const = -self.c(foot) / self.gp
        return _Functional(const, pos, wts, diag_pos=foot)

    def _assemble(self, fn: _Functional) -> np.ndarray:
        """Dense matrix of a functional acting on the trace (ignores const)."""
        rows = np.broadcast_to(np.arange(fn.pos.shape[0])[:, None], fn.pos.shape)
        j, theta = interp_weights(fn.pos, self.h, self.N)
        mat = np.zeros((fn.pos.shape[0], self.N + 1))
        np.add.at(mat, (rows, j), fn.wts * (1.0 - theta))
        np.add.at(mat, (rows, j + 1), fn.wts * theta)
        if fn.diag_pos is not None:
            dj, dt = interp_weights(fn.diag_pos, self.sig[1] - self.sig[0], len(self.sig) - 1)
            d = self.diag_operator()
            mat += (1.0 - dt)[:, None] * d[dj] + dt[:, None] * d[dj + 1]
        return mat

    def _apply(self, fn: _Functional, trace: np.ndarray, diag_values: np.ndarray | None = None) -> np.ndarray:
        j, theta = interp_weights(fn.pos, self.h, self.N)
        out = fn.const + np.sum(fn.wts * ((1.0 - theta) * trace[j] + theta * trace[j + 1]), axis=-1)
        if fn.diag_pos is not None:
            dj, dt = interp_weights(fn.diag_pos, self.sig[1] - self.sig[0], len(self.sig) - 1)
            out = out + (1.0 - dt) * diag_values[dj] + dt * diag_values[dj + 1]
        return out

    def trace_system(self):
        """(f, K) with the discrete trace equation l = f + K l."""
        fn = self.l_functional(self.grid.x, np.zeros(self.N + 1))
        return fn.const.copy(), self._assemble(fn)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


@dataclass
class TraceSolution:
    l_trace: np.ndarray
    iterations: int
    increments: list[float]
    method: str


def solve_l_trace(eq: Equilibrium, gain: RoutingGain, c: Callable | None = None, N: int | None = None,
                  method: str = "picard", tol: float = PICARD_TOL,
                  max_iter: int = PICARD_MAX_ITER) -> TraceSolution:
    """Trace l(x, 0) of the kernel system.

    For x <= L/mu* the characteristic through the diagonal foot lands in the
    part of the upper triangle fed from x = 0; beyond it, from y = L.  Both
    branches come out of the same discretised functional.
    """
    N = gain.grid.N if N is None else N
    prob = _KernelProblem(eq, gain, c, N)
    f, K = prob.trace_system()
    if method == "direct":
        sol = np.linalg.solve(np.eye(N + 1) - K, f)
        return TraceSolution(sol, 0, [], "direct")
    if method != "picard":
        raise ValueError(f"unknown method {method!r}")
    current = f.copy()
    increments: list[float] = []
    for it in range(1, max_iter + 1):
        nxt = f + K @ current
        delta = float(np.max(np.abs(nxt - current)))
        increments.append(delta)
        current = nxt
        if delta <= tol * float(np.max(np.abs(current))):
            log.debug("trace converged after %d successive approximations", it)
            return TraceSolution(current, it, increments, "picard")
        if not np.isfinite(delta):
            break
    raise ConvergenceError(
        f"successive approximations did not converge in {max_iter} iterations "
        f"(last increment {increments[-1]:.3e}); the routing gain is likely too large", increments[-1])


@dataclass
class KernelSet:
    """Kernels sampled on the simulation grid.

    k and l live on the lower triangle (row x, column y, y <= x), m on the upper
    triangle; entries outside a kernel's triangle are zero.
    """

    grid: Grid
    k: np.ndarray
    l: np.ndarray
    m: np.ndarray
    l_trace: np.ndarray
    n: np.ndarray
    picard_iterations: int = 0

    @property
    def h(self) -> float:
        return self.grid.h


def assemble_klm(trace: TraceSolution | np.ndarray, eq: Equilibrium, gain: RoutingGain,
                 c: Callable | None = None, N: int | None = None) -> KernelSet:
    l_tr = trace.l_trace if isinstance(trace, TraceSolution) else np.asarray(trace, float)
    N = len(l_tr) - 1 if N is None else N
    prob = _KernelProblem(eq, gain, c, N)
    x = prob.grid.x
    idx = np.arange(N + 1)

    k = np.zeros((N + 1, N + 1))
    diff = idx[:, None] - idx[None, :]
    low = diff >= 0
    k[low] = prob.k1mu * l_tr[diff[low]]

    diag_vals = prob.diag_operator() @ l_tr
    l = np.zeros((N + 1, N + 1))
    for d in range(N + 1):
        rows = idx[d:]
        fn = prob.l_functional(x[rows], x[rows - d])
        l[rows, rows - d] = prob._apply(fn, l_tr, diag_vals)
    # the y = 0 column is the trace itself, by construction of the fixed point
    l[:, 0] = l_tr

    m = np.zeros((N + 1, N + 1))
    for i in range(N + 1):
        cols = idx[i:]
        fn = prob.m_functional(np.full(len(cols), x[i]), x[cols])
        m[i, cols] = prob._apply(fn, l_tr)
    # diagonal shared with the table that feeds l(x, x)
    m[idx, idx] = diag_vals[::DIAG_REFINE]
    iters = trace.iterations if isinstance(trace, TraceSolution) else 0
    return KernelSet(grid=prob.grid, k=k, l=l, m=m, l_trace=l_tr.copy(), n=np.zeros(N + 1),
                     picard_iterations=iters)


def verify_kernel_residuals(ks: KernelSet, eq: Equilibrium, gain: RoutingGain,
                            c: Callable | None = None) -> dict[str, float]:
    """Max-norm residuals of the kernel PDEs (forward differences) and boundary conditions."""
    c = c if c is not None else (lambda y: coeff_c(y, eq))
    g, h, N = ks.grid, ks.h, ks.grid.N
    x = g.x
    lam, vs = eq.lambda_v, eq.v_star
    i, j = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")

    inner_low = (j + 1 <= i) & (i + 1 <= N)
    ii, jj = i[inner_low], j[inner_low]
    dkx = (ks.k[ii + 1, jj] - ks.k[ii, jj]) / h
    dky = (ks.k[ii, jj + 1] - ks.k[ii, jj]) / h
    dlx = (ks.l[ii + 1, jj] - ks.l[ii, jj]) / h
    dly = (ks.l[ii, jj + 1] - ks.l[ii, jj]) / h
    a_y = gain(x[jj])
    res_k = dkx + dky
    res_l = lam * dlx - vs * dly - c(x[jj]) * ks.k[ii, jj] - vs * ks.l[ii, 0] * a_y

    inner_up = (i + 1 <= j) & (j + 1 <= N)
    ii, jj = i[inner_up], j[inner_up]
    dmx = (ks.m[ii + 1, jj] - ks.m[ii, jj]) / h
    dmy = (ks.m[ii, jj + 1] - ks.m[ii, jj]) / h
    res_m = lam * dmx - vs * dmy - vs * ks.l[ii, 0] * gain(x[jj])

    diag = np.arange(N + 1)

    def mx(a):
        return float(np.max(np.abs(a))) if np.size(a) else 0.0

    return {
        "k_pde": mx(res_k),
        "l_pde": mx(res_l),
        "m_pde": mx(res_m),
        "bc_k_trace": mx(ks.k[:, 0] - eq.k1 * eq.mu_star * ks.l[:, 0]),
        "bc_diagonal": mx(ks.l[diag, diag] - ks.m[diag, diag] + c(x) / eq.gamma_p),
        "bc_m_top": mx(ks.m[:, N]),
        "bc_m_left": mx(ks.m[0, :]),
    }


def solve_convolution_volterra(forcing: np.ndarray, kernel: np.ndarray, h: float, coef: float = 1.0) -> np.ndarray:
    """Solve u(x) = f(x) + coef * int_0^x g(y) u(x - y) dy by trapezoid forward substitution."""
    f = np.asarray(forcing, float)
    g = np.asarray(kernel, float)
    n = len(f)
    u = np.zeros(n)
    u[0] = f[0]
    denom = 1.0 - coef * 0.5 * h * g[0]
    for i in range(1, n):
        # int_0^{x_i} g(y) u(x_i - y) dy with u_i's own term moved to the left
        acc = 0.5 * g[i] * u[0] + g[1:i] @ u[i - 1:0:-1]
        u[i] = (f[i] + coef * h * acc) / denom
    return u


def solve_n(gain: RoutingGain, eq: Equilibrium, N: int | None = None) -> np.ndarray:
    """Kernel of the final convolution transform.

    n = (v* - gamma p*)^{-1} [a_check - int_0^x a_check(y) n(x - y) dy]
    """
    if N is not None and N != gain.grid.N:
        raise ValueError("routing gain must be sampled on the requested grid")
    C = 1.0 / (eq.v_star - eq.gamma_p)
    return solve_convolution_volterra(C * gain.a_check, gain.a_check, gain.grid.h, -C)


def volterra_residual(n: np.ndarray, gain: RoutingGain, eq: Equilibrium) -> float:
    """Max-norm residual of the n equation with trapezoid convolution."""
    h = gain.grid.h
    a = gain.a_check
    C = 1.0 / (eq.v_star - eq.gamma_p)
    conv = np.array([np.trapezoid(a[: i + 1] * n[i::-1], dx=h) if i else 0.0 for i in range(len(n))])
    return float(np.max(np.abs(n - C * (a - conv))))


def synthesize(eq: Equilibrium, gain: RoutingGain, c: Callable | None = None, method: str = "picard") -> KernelSet:
    """Trace, k/l/m and n in one call."""
    trace = solve_l_trace(eq, gain, c, gain.grid.N, method=method)
    ks = assemble_klm(trace, eq, gain, c)
    ks.n = solve_n(gain, eq)
    return ks


# ---------------------------------------------------------------------------
# controller gains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerGains:
    F_v: np.ndarray
    F_w: np.ndarray
    k2: float
    k3: float
    routing_tail: np.ndarray  # nodal weights: tail integral = routing_tail @ w
    k_L: np.ndarray
    l_L: np.ndarray
    n_rev: np.ndarray  # n(L - y)
    grid: Grid

    def routing_tail_value(self, w: np.ndarray) -> float:
        return float(self.routing_tail @ w)


def routing_shift_matrix(gain: RoutingGain, eq: Equilibrium) -> np.ndarray:
    """Matrix D with (D w)(x) = int_{mu* x}^L a(y) w(y - mu* x) dy for x <= L/mu*, zero beyond.

    The breakpoint L/mu* is snapped to the nearest grid node.
    """
    cache = gain.__dict__.setdefault("_shift_cache", {})
    if eq.mu_star not in cache:
        g = gain.grid
        x, h, N = g.x, g.h, g.N
        last = g.snap(g.L / eq.mu_star) if eq.mu_star > 1 else N
        D = np.zeros((N + 1, N + 1))
        for i in range(last + 1):
            shift = eq.mu_star * x[i]
            D[i] = integrate_to_weights(N, h, g.L - shift) * gain(x + shift)
        cache[eq.mu_star] = D
    return cache[eq.mu_star]


def routing_tail_weights(gain: RoutingGain, eq: Equilibrium) -> np.ndarray:
    """Weights r with int_{min(mu* L, L)}^L a(y) w(y - mu* L) dy = r @ w."""
    g = gain.grid
    shift = min(eq.mu_star * g.L, g.L)
    return integrate_to_weights(g.N, g.h, g.L - shift) * gain(g.x + shift)


def compute_gains(ks: KernelSet, gain: RoutingGain, eq: Equilibrium, k3: float = 1.0) -> ControllerGains:
    """Flattened feedback gains of the ramp-metering law."""
    if not k3 > 0:
        raise ValueError("dynamic-extension rate k3 must be positive")
    g = ks.grid
    N, h = g.N, g.h
    n_rev = ks.n[::-1].copy()  # n(L - x_i)
    wq = g.weights
    low = lower_weights(N + 1, h)
    up = upper_weights(N + 1, h)
    # The chain evaluates int_0^L n(L - xi) (int ... dy) dxi as a double trapezoid
    # sum; swapping the order of that sum (not of the integrals) gives gains that
    # reproduce it exactly, corner half-weights included.
    outer = wq * n_rev

    def swap(op):
        return (outer @ op) / wq

    corr_k = swap(low * ks.k)
    corr_l = swap(low * ks.l)
    corr_m = swap(up * ks.m)
    F_v = ks.k[N, :] + n_rev - corr_k
    route = swap(routing_shift_matrix(gain, eq)) if np.any(gain.a != 0.0) else np.zeros(N + 1)
    F_w = ks.l[N, :] + route / eq.k1 - corr_l - corr_m
    return ControllerGains(
        F_v=F_v, F_w=F_w, k2=eq.k2, k3=k3,
        routing_tail=routing_tail_weights(gain, eq),
        k_L=ks.k[N, :].copy(), l_L=ks.l[N, :].copy(), n_rev=n_rev, grid=g,
    )
