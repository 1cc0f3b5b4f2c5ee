"""Road parameters, congested equilibria and the Riemann-variable change of coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CongestionError(ValueError):
    """Raised when an equilibrium lies outside the congested regime."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of a homogeneous road segment (SI units)."""

    v_f: float = 40.0  # free-flow speed, m/s
    rho_m: float = 0.12  # maximum density, veh/m
    gamma_exp: float = 1.0  # pressure exponent
    tau: float = 60.0  # relaxation time, s
    L: float = 500.0  # road length, m

    def __post_init__(self) -> None:
        for name in ("v_f", "rho_m", "gamma_exp", "tau", "L"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and strictly positive, got {value!r}")

    def pressure(self, rho):
        return self.v_f * (np.asarray(rho) / self.rho_m) ** self.gamma_exp

    def greenshield(self, rho):
        """Equilibrium speed V(rho) = v_f - p(rho)."""
        return self.v_f - self.pressure(rho)


@dataclass(frozen=True)
class Equilibrium:
    v_star: float
    q_star: float
    rho_star: float
    p_star: float
    k1: float
    k2: float
    mu_star: float
    lambda_w: float
    lambda_v: float
    params: ModelParams = field(repr=False)

    @property
    def gamma_p(self) -> float:
        """gamma * p*, the sum of the two transport speeds."""
        return self.params.gamma_exp * self.p_star

    @property
    def beta(self) -> float:
        """Coupling q*(1/v* - 1/(gamma p*)) in the definition of w."""
        return self.q_star * (1.0 / self.v_star - 1.0 / self.gamma_p)

    def compatibility_residual(self) -> float:
        p = self.params
        expected = p.rho_m * self.v_star * ((p.v_f - self.v_star) / p.v_f) ** (1.0 / p.gamma_exp)
        return abs(self.q_star - expected) / max(abs(expected), 1e-300)


@dataclass(frozen=True)
class AdmissibilitySpec:
    eps0: float
    eps: float
    eps_h1: float
    q_max: float


def compute_equilibrium(params: ModelParams, v_star: float) -> Equilibrium:
    """Congested-or-not equilibrium for a prescribed speed; see :func:`check_congestion`."""
    if not (0.0 < v_star < params.v_f):
        raise ValueError(f"equilibrium speed must satisfy 0 < v* < v_f = {params.v_f}, got {v_star}")
    g = params.gamma_exp
    p_star = params.v_f - v_star
    q_star = params.rho_m * v_star * ((params.v_f - v_star) / params.v_f) ** (1.0 / g)
    lambda_v = g * p_star - v_star
    return Equilibrium(
        v_star=v_star,
        q_star=q_star,
        rho_star=q_star / v_star,
        p_star=p_star,
        k1=lambda_v / v_star,
        k2=math.exp(-params.L / (params.tau * v_star)),
        mu_star=v_star / lambda_v if lambda_v != 0 else math.inf,
        lambda_w=v_star,
        lambda_v=lambda_v,
        params=params,
    )


def check_congestion(eq: Equilibrium, params: ModelParams | None = None) -> bool:
    params = params or eq.params
    g = params.gamma_exp
    return 0.0 < eq.v_star < g / (g + 1.0) * params.v_f


def require_congested(eq: Equilibrium) -> None:
    if not check_congestion(eq):
        g = eq.params.gamma_exp
        raise CongestionError(
            f"v* = {eq.v_star} violates the congestion condition 0 < v* < gamma/(gamma+1) v_f "
            f"= {g / (g + 1.0) * eq.params.v_f:g}"
        )


def coeff_c(x, eq: Equilibrium, params: ModelParams | None = None):
    """In-domain coupling c(x) = -(1/tau) exp(-x / (tau v*))."""
    params = params or eq.params
    return -np.exp(-np.asarray(x, dtype=float) / (params.tau * eq.v_star)) / params.tau


def riemann_matrix(eq: Equilibrium) -> np.ndarray:
    """Matrix T with (v, w) = T (v_tilde, q_tilde)."""
    return np.array([[eq.q_star / eq.gamma_p, 0.0], [-eq.beta, 1.0]])


def riemann_map(direction: str, first, second, eq: Equilibrium, x=None):
    """Change of variables between (v_tilde, q_tilde) and (v, w).

    ``direction="forward"`` takes ``(v_tilde, q_tilde)`` and returns ``(v, w)``;
    ``"inverse"`` does the opposite.  When grid positions ``x`` are supplied, w
    additionally carries the weight exp(x / (tau v*)) that removes the relaxation
    decay from the w-transport; the pointwise map (``x=None``) is the plain
    algebraic one.  Fields may carry leading axes (e.g. records in time);
    ``x`` then matches the last axis.
    """
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mismatched field shapes {a.shape} and {b.shape}")
    weight = 1.0
    if x is not None:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or a.shape[-1:] != x.shape:
            raise ValueError(f"grid shape {x.shape} does not match fields {a.shape}")
        weight = np.exp(x / (eq.params.tau * eq.v_star))
    scale = eq.q_star / eq.gamma_p
    if direction == "forward":
        v_tilde, q_tilde = a, b
        return scale * v_tilde, weight * (q_tilde - eq.beta * v_tilde)
    if direction == "inverse":
        v, w = a, b
        v_tilde = v / scale
        return v_tilde, w / weight + eq.beta * v_tilde
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def admissible_bounds(eq: Equilibrium, params: ModelParams | None = None) -> AdmissibilitySpec:
    """Pointwise perturbation bounds in physical and Riemann coordinates.

    eps is chosen so that ``|(v, w)| < eps`` pointwise implies
    ``|(v_tilde, q_tilde)| < eps0``, i.e. eps0 divided by the max-row-sum norm
    of the inverse coordinate map.
    """
    params = params or eq.params
    q_max = params.rho_m * eq.v_star
    eps0 = min(q_max - eq.q_star, eq.q_star, params.v_f - eq.v_star, eq.v_star)
    t_inv = np.linalg.inv(riemann_matrix(eq))
    eps = eps0 / np.abs(t_inv).sum(axis=1).max()
    return AdmissibilitySpec(eps0=eps0, eps=float(eps), eps_h1=math.sqrt(params.L) * float(eps), q_max=q_max)
