"""Forward and inverse maps (v, w) <-> (z, w) <-> (eta, w) <-> (xi, w).

Fields are plain arrays of nodal values on the scenario grid.  The operators
are dense matrices built once per kernel set and cached on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .analysis import discrete_norms
from .grid import lower_weights, upper_weights
from .kernels import KernelSet, RoutingGain, routing_shift_matrix, solve_convolution_volterra
from .model import Equilibrium


@dataclass(frozen=True)
class BackstepOperators:
    K: np.ndarray  # lower-triangular, acts on v
    Lw: np.ndarray  # lower-triangular, acts on w
    Mw: np.ndarray  # upper-triangular, acts on w


def backstep_operators(ks: KernelSet) -> BackstepOperators:
    cached = getattr(ks, "_ops", None)
    if cached is None:
        n, h = ks.grid.N + 1, ks.h
        low, up = lower_weights(n, h), upper_weights(n, h)
        cached = BackstepOperators(K=low * ks.k, Lw=low * ks.l, Mw=up * ks.m)
        ks._ops = cached
    return cached


def tfm_backstep(direction: str, first: np.ndarray, w: np.ndarray, ks: KernelSet) -> np.ndarray:
    """z = v - int_0^x k v - int_0^x l w - int_x^L m w, or its inverse.

    ``first`` is v for the forward map and z for the inverse.  w passes through
    unchanged, so the inverse is a lower-triangular solve in v.
    """
    ks.grid.check(first, w)
    ops = backstep_operators(ks)
    w_part = ops.Lw @ w + ops.Mw @ w
    if direction == "forward":
        return first - ops.K @ first - w_part
    if direction == "inverse":
        system = np.eye(len(first)) - ops.K
        return solve_triangular(system, first + w_part, lower=True)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def decouple_operator(gain: RoutingGain, eq: Equilibrium) -> np.ndarray:
    """Routing part of the decoupling transform; see :func:`routing_shift_matrix`."""
    return routing_shift_matrix(gain, eq)


def tfm_decouple(direction: str, first: np.ndarray, w: np.ndarray, gain: RoutingGain, eq: Equilibrium) -> np.ndarray:
    """eta = k1 z + (routing integral) on [0, L/mu*], eta = k1 z beyond; or its inverse."""
    if eq.k1 == 0:
        raise ValueError("decoupling transform needs k1 != 0")
    gain.grid.check(first, w)
    shift = decouple_operator(gain, eq) @ w
    if direction == "forward":
        return eq.k1 * first + shift
    if direction == "inverse":
        return (first - shift) / eq.k1
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def convolution_operator(n: np.ndarray, h: float) -> np.ndarray:
    idx = np.arange(len(n))
    diff = idx[:, None] - idx[None, :]
    return lower_weights(len(n), h) * np.where(diff >= 0, n[np.clip(diff, 0, None)], 0.0)


def tfm_final(direction: str, first: np.ndarray, n: np.ndarray, h: float) -> np.ndarray:
    """xi = eta - int_0^x n(x - y) eta(y) dy, or its inverse by forward substitution."""
    first = np.asarray(first, float)
    if first.shape != np.shape(n):
        raise ValueError(f"field shape {first.shape} does not match kernel shape {np.shape(n)}")
    if direction == "forward":
        return first - convolution_operator(n, h) @ first
    if direction == "inverse":
        return solve_convolution_volterra(first, n, h, 1.0)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def to_target(v: np.ndarray, w: np.ndarray, ks: KernelSet, gain: RoutingGain, eq: Equilibrium):
    """(z, eta, xi) of a plant snapshot."""
    z = tfm_backstep("forward", v, w, ks)
    eta = tfm_decouple("forward", z, w, gain, eq)
    xi = tfm_final("forward", eta, ks.n, ks.h)
    return z, eta, xi


def from_target(xi: np.ndarray, w: np.ndarray, ks: KernelSet, gain: RoutingGain, eq: Equilibrium) -> np.ndarray:
    eta = tfm_final("inverse", xi, ks.n, ks.h)
    z = tfm_decouple("inverse", eta, w, gain, eq)
    return tfm_backstep("inverse", z, w, ks)


@dataclass
class EquivalenceReport:
    stage: int
    ratios: np.ndarray  # ||out||_H1 / ||in||_H1 per draw
    bound: float | None
    violations: int

    @property
    def min_ratio(self) -> float:
        return float(self.ratios.min())

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())


def norm_equivalence_audit(pairs_in, pairs_out, which: int, h: float, n: np.ndarray | None = None) -> EquivalenceReport:
    """Compare H1 norms of transform inputs and outputs over an ensemble.

    For stage 3 (the convolution transform) each draw is checked against
    ||xi||_H1 <= (1 + 3 ||n||_L2) ||eta||_H1; the other stages only report
    empirical ratio bounds.
    """
    ratios = []
    for (a_in, w_in), (a_out, w_out) in zip(pairs_in, pairs_out):
        num = discrete_norms(a_out, h, w_out).h1
        den = discrete_norms(a_in, h, w_in).h1
        ratios.append(num / den if den > 0 else (0.0 if num == 0 else np.inf))
    ratios = np.asarray(ratios)
    bound = None
    violations = 0
    if which == 3:
        if n is None:
            raise ValueError("stage-3 audit needs the kernel n")
        bound = 1.0 + 3.0 * float(np.sqrt(np.trapezoid(n**2, dx=h)))
        violations = int(np.sum(ratios > bound * (1 + 1e-12)))
    return EquivalenceReport(stage=which, ratios=ratios, bound=bound, violations=violations)
