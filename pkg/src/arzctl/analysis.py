"""Discrete norms, the target-system Lyapunov functional, decay fits and admissibility flags."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .grid import trapz_weights
from .model import AdmissibilitySpec, Equilibrium, riemann_map

NORM_FLOOR = 1e-14


class Norms(NamedTuple):
    l2: float
    h1: float
    linf: float


def derivative(f: np.ndarray, h: float) -> np.ndarray:
    """Central differences inside, one-sided at the two ends."""
    return np.gradient(np.asarray(f, float), h, edge_order=1)


def discrete_norms(f: np.ndarray, h: float, g: np.ndarray | None = None) -> Norms:
    """Trapezoid L2, H1 (values and derivative in quadrature) and max norms.

    With a second field the norms are those of the pair (f, g).
    """
    fields = [np.asarray(f, float)] if g is None else [np.asarray(f, float), np.asarray(g, float)]
    l2sq = sum(np.trapezoid(u**2, dx=h) for u in fields)
    dsq = sum(np.trapezoid(derivative(u, h) ** 2, dx=h) for u in fields)
    linf = max(float(np.max(np.abs(u))) for u in fields)
    return Norms(math.sqrt(l2sq), math.sqrt(l2sq + dsq), linf)


def _gram(n_nodes: int, h: float) -> np.ndarray:
    W = np.diag(trapz_weights(n_nodes, h))
    D = np.zeros((n_nodes, n_nodes))
    D[0, :2] = [-1.0 / h, 1.0 / h]
    D[-1, -2:] = [-1.0 / h, 1.0 / h]
    idx = np.arange(1, n_nodes - 1)
    D[idx, idx - 1] = -0.5 / h
    D[idx, idx + 1] = 0.5 / h
    return W + D.T @ W @ D


@lru_cache(maxsize=32)
def embedding_constant(n_nodes: int, h: float) -> float:
    """Sharp constant c with ||f||_inf <= c ||f||_H1 for the discrete norms above.

    The squared H1 norm is f^T A f, so max |f_i| / ||f||_H1 = sqrt((A^{-1})_ii).
    """
    return float(math.sqrt(np.max(np.diag(np.linalg.inv(_gram(n_nodes, h))))))


# ---------------------------------------------------------------------------
# Lyapunov functional of the target system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LyapunovSpec:
    delta1: float = 0.002
    delta2: float = 0.002
    delta3: float = 0.002
    delta4: float = 0.002
    d1: float = 1.0
    d2: float = 4.0

    def validate(self, eq: Equilibrium) -> None:
        deltas = (self.delta1, self.delta2, self.delta3, self.delta4)
        if min(deltas) <= 0:
            raise ValueError(f"all delta weights must be positive, got {deltas}")
        if not self.d1 > eq.mu_star:
            raise ValueError(f"d1 = {self.d1} must exceed mu* = {eq.mu_star:g}")
        if not self.d2 > 1.0 / eq.mu_star:
            raise ValueError(f"d2 = {self.d2} must exceed 1/mu* = {1.0 / eq.mu_star:g}")


def lyapunov_value(w: np.ndarray, xi: np.ndarray, spec: LyapunovSpec, eq: Equilibrium, h: float) -> float:
    spec.validate(eq)
    x = np.arange(len(w)) * h
    integrand = (
        np.exp(-spec.delta1 * x) * w**2
        + spec.d1 * np.exp(spec.delta2 * x) * xi**2
        + np.exp(-spec.delta3 * x) * derivative(w, h) ** 2
        + spec.d2 * np.exp(spec.delta4 * x) * derivative(xi, h) ** 2
    )
    return float(np.trapezoid(integrand, dx=h))


def lyapunov_min_weight(spec: LyapunovSpec, L: float) -> float:
    """Smallest integrand weight on [0, L]; V >= this * ||(w, xi)||_H1^2."""
    return min(math.exp(-spec.delta1 * L), math.exp(-spec.delta3 * L), spec.d1, spec.d2)


def theory_constants(spec: LyapunovSpec, eq: Equilibrium) -> tuple[float, float]:
    spec.validate(eq)
    L = eq.params.L
    M1 = max(math.exp(spec.delta2 * L), math.exp(spec.delta4 * L)) / min(
        math.exp(-spec.delta1 * L), math.exp(-spec.delta3 * L))
    lam = eq.lambda_v
    rate = 0.25 * min(spec.delta1 * eq.v_star, spec.delta3 * eq.v_star,
                      spec.d1 * spec.delta2 * lam, spec.d2 * spec.delta4 * lam)
    return M1, rate


# ---------------------------------------------------------------------------
# decay fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    M: float
    gamma: float
    converged_to_zero: bool = False


def fit_decay(t, values, window_start: float = 0.2) -> DecayFit:
    """Least-squares fit of log(norm) against t over the last 80% of the horizon."""
    t = np.asarray(t, float)
    y = np.asarray(values, float)
    if len(t) < 10:
        raise ValueError(f"need at least 10 samples for a decay fit, got {len(t)}")
    start = t[0] + window_start * (t[-1] - t[0])
    keep = (t >= start) & (y > NORM_FLOOR)
    if not np.any(y > NORM_FLOOR):
        return DecayFit(M=0.0, gamma=math.inf, converged_to_zero=True)
    if keep.sum() < 2:
        return DecayFit(M=0.0, gamma=math.inf, converged_to_zero=True)
    slope, intercept = np.polyfit(t[keep], np.log(y[keep]), 1)
    initial = y[0] if y[0] > 0 else 1.0
    return DecayFit(M=float(math.exp(intercept) / initial), gamma=float(-slope))


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------


class AdmissibilityFlags(NamedTuple):
    in_box: bool  # pointwise box: ||(v, w)||_inf < eps
    in_h1_ball: bool  # ||(v, w)||_H1 < sqrt(L) eps
    in_embedded_ball: bool  # ||(v, w)||_H1 < eps / c_emb, which implies in_box
    physical: bool  # 0 < q < rho_m v and 0 < v < v_f pointwise

    @property
    def admissible(self) -> bool:
        return self.in_box and self.physical


def admissibility_monitor(v: np.ndarray, w: np.ndarray, spec: AdmissibilitySpec, eq: Equilibrium,
                          h: float) -> AdmissibilityFlags:
    norms = discrete_norms(v, h, w)
    c_emb = embedding_constant(len(v), h)
    x = np.arange(len(v)) * h
    v_tilde, q_tilde = riemann_map("inverse", v, w, eq, x=x)
    vel = eq.v_star + v_tilde
    flow = eq.q_star + q_tilde
    physical = bool(np.all((flow > 0) & (flow < eq.params.rho_m * vel) & (vel > 0) & (vel < eq.params.v_f)))
    return AdmissibilityFlags(
        in_box=norms.linf < spec.eps,
        in_h1_ball=norms.h1 < spec.eps_h1,
        in_embedded_ball=norms.h1 < spec.eps / c_emb,
        physical=physical,
    )


@dataclass
class StabilityReport:
    t: np.ndarray
    l2: np.ndarray
    h1: np.ndarray
    linf: np.ndarray
    lyapunov: np.ndarray
    fit: DecayFit
    theory_M1: float
    theory_gamma: float
    admissible: np.ndarray
    settling_time: float | None
    embedding_constant: float
    first_violation_time: float | None = None
    growth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def stable(self) -> bool:
        return self.fit.gamma > 0

    def summary(self) -> dict:
        """Flat JSON-ready summary (documented key set in the README)."""
        def num(x):
            if x is None:
                return None
            x = float(x)
            return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")

        return {
            "h1_initial": num(self.h1[0]),
            "h1_final": num(self.h1[-1]),
            "h1_ratio": num(self.h1[-1] / self.h1[0]) if self.h1[0] > 0 else None,
            "h1_max_growth": num(self.growth.max()) if self.growth.size else None,
            "fitted_M": num(self.fit.M),
            "fitted_gamma": num(self.fit.gamma),
            "converged_to_zero": self.fit.converged_to_zero,
            "theory_M1": num(self.theory_M1),
            "theory_gamma": num(self.theory_gamma),
            "settling_time": num(self.settling_time),
            "all_admissible": bool(np.all(self.admissible)),
            "first_violation_time": num(self.first_violation_time),
            "embedding_constant": num(self.embedding_constant),
            "stable": self.stable,
        }


def settling_time(t, h1, fraction: float = 0.01) -> float | None:
    h1 = np.asarray(h1)
    if h1[0] == 0:
        return float(t[0])
    below = np.nonzero(h1 <= fraction * h1[0])[0]
    return float(np.asarray(t)[below[0]]) if below.size else None
