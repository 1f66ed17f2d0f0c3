"""Seeded random allocation rules and one-dimensional slices.

These back the property tests: rules built to be eventually monotone, slices
built to violate it, and convex value slices with a flat prefix.
"""

from __future__ import annotations

import numpy as np

from expost import _slices
from expost.mechanism import AllocationRule
from expost.signals import Grid
from expost.values import TOL_V, ValueModel, grid_flat_index, value_table

__all__ = ["em_slice", "non_em_slice", "random_q_slice", "convex_value_slice", "random_em_rule"]


def em_slice(flat_idx: int, m: int, rng: np.random.Generator, cap: float = 1.0) -> np.ndarray:
    """Arbitrary values up to ``flat_idx``, then sorted values above all of them."""
    q = np.empty(m)
    k = flat_idx + 1
    q[:k] = rng.uniform(0.0, cap, size=k)
    floor = q[:k].max()
    q[k:] = np.sort(rng.uniform(floor, cap, size=m - k))
    return q


def non_em_slice(flat_idx: int, m: int, rng: np.random.Generator, min_drop: float = 0.05) -> np.ndarray:
    """An EM slice with one drop of at least ``min_drop`` placed above the threshold."""
    if flat_idx >= m - 1:
        raise ValueError("need at least one grid point above the threshold")
    q = em_slice(flat_idx, m, rng, cap=1.0)
    a = int(rng.integers(flat_idx + 1, m))
    b = int(rng.integers(0, a))
    hi = max(q[b], q[a]) if q[b] >= min_drop else min_drop + rng.uniform(0.0, 1.0 - min_drop)
    q[b] = hi
    q[a] = rng.uniform(0.0, hi - min_drop)
    return q


def random_q_slice(m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=m)


def convex_value_slice(m: int, rng: np.random.Generator, flat_idx: int | None = None,
                       points: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Convex nondecreasing values, constant up to ``flat_idx`` and strictly increasing after."""
    x = np.linspace(0.0, 1.0, m) if points is None else np.asarray(points, float)
    if flat_idx is None:
        flat_idx = int(rng.integers(0, m - 1))
    slopes = np.zeros(m - 1)
    slopes[flat_idx:] = np.sort(rng.uniform(0.1, 2.0, size=m - 1 - flat_idx))
    v = rng.uniform(0.0, 1.0) + np.r_[0.0, np.cumsum(slopes * np.diff(x))]
    return v, flat_idx


def random_em_rule(model: ValueModel, grid: Grid, rng: np.random.Generator,
                   tol_v: float = TOL_V) -> AllocationRule:
    """Random rule that is eventually monotone for ``model`` on ``grid``.

    Each agent's probabilities stay in ``[0, 1/n]`` so any combination is
    feasible; each own-signal slice is built by :func:`em_slice` against the
    model's flat region on that slice.
    """
    n, m = model.n_agents, grid.m
    vt = value_table(model, grid)
    q = np.empty((n,) + (m,) * n)
    for i in range(n):
        L = grid_flat_index(_slices.own_slices(vt[i], i), tol_v)
        rows = np.stack([em_slice(int(l), m, rng, cap=1.0 / n) for l in L])
        q[i] = _slices.from_own_slices(rows, i, n)
    return AllocationRule(grid, q)
