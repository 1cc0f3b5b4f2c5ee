"""Uniform grid and the composite-trapezoid helpers shared by every module."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    L: float
    N: int

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError(f"grid needs at least 2 cells, got N={self.N}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.N + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        return trapz_weights(self.N + 1, self.h)

    def check(self, *fields: np.ndarray) -> None:
        for f in fields:
            if np.shape(f) != (self.N + 1,):
                raise ValueError(f"field of shape {np.shape(f)} does not live on a grid with {self.N + 1} nodes")

    def snap(self, position: float) -> int:
        """Index of the node nearest to ``position`` (clipped to the grid)."""
        return int(np.clip(np.rint(position / self.h), 0, self.N))


def trapz_weights(n_nodes: int, step: float) -> np.ndarray:
    w = np.full(n_nodes, step)
    if n_nodes == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * step
    return w


def trapz(values: np.ndarray, h: float, axis: int = -1) -> float | np.ndarray:
    return np.trapezoid(values, dx=h, axis=axis)


def line_nodes(length, n):
    """Nodes and trapezoid weights of ``n`` uniform cells on [0, length].

    ``length`` may be an array; results then broadcast with a trailing node axis.
    """
    length = np.asarray(length, dtype=float)
    n = max(int(n), 1)
    frac = np.linspace(0.0, 1.0, n + 1)
    nodes = length[..., None] * frac
    weights = length[..., None] / n * np.where((frac == 0.0) | (frac == 1.0), 0.5, 1.0)
    return nodes, weights


def interp_weights(positions: np.ndarray, h: float, n_cells: int):
    """Linear-interpolation stencil (left index, right weight) for grid positions."""
    s = np.clip(np.asarray(positions, dtype=float) / h, 0.0, n_cells)
    j = np.minimum(np.floor(s).astype(int), n_cells - 1)
    theta = s - j
    return j, theta


def interp(values: np.ndarray, positions, h: float) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant of nodal ``values`` at ``positions``."""
    j, theta = interp_weights(positions, h, len(values) - 1)
    return (1.0 - theta) * values[j] + theta * values[j + 1]


def integrate_to_weights(n_cells: int, h: float, upper: float) -> np.ndarray:
    """Nodal weights of the trapezoid integral over [0, upper].

    ``upper`` need not fall on a node; the last partial cell uses the linearly
    interpolated end value.
    """
    wts = np.zeros(n_cells + 1)
    if upper <= 0.0:
        return wts
    upper = min(upper, n_cells * h)
    k = min(int(np.floor(upper / h + 1e-12)), n_cells)
    if k > 0:
        wts[: k + 1] = trapz_weights(k + 1, h)
    rest = upper - k * h
    if rest > 1e-12 * h and k < n_cells:
        r = rest / h
        wts[k] += 0.5 * rest * (2.0 - r)
        wts[k + 1] += 0.5 * rest * r
    return wts


def integrate_to(values: np.ndarray, h: float, upper: float) -> float:
    return float(integrate_to_weights(len(values) - 1, h, upper) @ values)


def lower_weights(n_nodes: int, h: float) -> np.ndarray:
    """Row i holds the trapezoid weights of the integral over [x_0, x_i]."""
    i = np.arange(n_nodes)[:, None]
    j = np.arange(n_nodes)[None, :]
    w = np.where(j < i, h, 0.0)
    w = np.where((j == 0) | (j == i), 0.5 * h * (j <= i), w)
    w[0, 0] = 0.0
    return w


def upper_weights(n_nodes: int, h: float) -> np.ndarray:
    """Row i holds the trapezoid weights of the integral over [x_i, x_N]."""
    return lower_weights(n_nodes, h)[::-1, ::-1].copy()
