"""Own-signal slicing of dense ``(m,)*n`` tables.

Agent ``i``'s slices fix ``s_{-i}`` and run along axis ``i``. Slices come out
in lexicographic order of ``s_{-i}`` (remaining axes in agent order), which is
the merge order used by every report.
"""

from __future__ import annotations

import numpy as np


def own_slices(table: np.ndarray, i: int) -> np.ndarray:
    """``(S, m)`` array of the own-signal slices of agent ``i``."""
    m = table.shape[i]
    return np.moveaxis(table, i, -1).reshape(-1, m)


def from_own_slices(rows: np.ndarray, i: int, n: int) -> np.ndarray:
    m = rows.shape[-1]
    return np.moveaxis(rows.reshape((m,) * n), -1, i)


def others_points(points: np.ndarray, n: int) -> np.ndarray:
    """``(S, n-1)`` values of ``s_{-i}`` in slice order (the same for every i)."""
    if n == 1:
        return np.zeros((1, 0))
    axes = np.meshgrid(*([points] * (n - 1)), indexing="ij")
    return np.stack(axes, axis=-1).reshape(-1, n - 1)


def others_indices(m: int, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros((1, 0), dtype=int)
    axes = np.meshgrid(*([np.arange(m)] * (n - 1)), indexing="ij")
    return np.stack(axes, axis=-1).reshape(-1, n - 1)


def full_profile(s_minus_i, i: int, s_i: float) -> tuple[float, ...]:
    s = [float(x) for x in s_minus_i]
    s.insert(i, float(s_i))
    return tuple(s)
