"""Virtual values, ironing and the revenue-optimal mechanisms.

The revenue of an EPIC mechanism whose lowest types get zero utility is the
expectation of ``sum_i J_i(s) q_i(s)`` with the virtual value

    J_i(s) = v_i(s) - (1 - F(s_i)) / f(s_i) * dv_i/ds_i(s),

so the constructions here maximize that integrand pointwise over the grid
and then price the resulting rule with :func:`synthesize_payments`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from expost import _slices
from expost.errors import ConfigurationError, PreconditionError
from expost.mechanism import (
    AllocationRule,
    Mechanism,
    constant_rule,
    synthesize_payments,
    write_table_csv,
)
from expost.signals import Grid, SignalDistribution, inverse_hazard
from expost.values import AdditiveValues, MaxValues, ValueModel, grid_flat_index, value_table

log = logging.getLogger(__name__)

# ties in virtual values / adjusted hazards closer than this go to the lowest index
TIE_TOL = 1e-12

__all__ = [
    "VirtualValueField",
    "IronedCurve",
    "virtual_value",
    "virtual_value_field",
    "adjusted_hazard",
    "iron",
    "ironed_field",
    "optimal_strictly_increasing",
    "optimal_additive",
    "optimal_max_must_sell",
    "revenue_objective",
]


@dataclass(frozen=True, eq=False)
class VirtualValueField:
    grid: Grid
    J: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.J.shape[0]

    def to_csv(self, path) -> None:
        write_table_csv(path, self.grid, {"J": self.J})


@dataclass(frozen=True, eq=False)
class IronedCurve:
    """Ironed virtual values along one own-signal slice.

    ``flat_intervals`` are inclusive ``(start, end)`` index pairs of pooled
    blocks; outside them ``values`` equals ``raw``.
    """

    quantiles: np.ndarray
    values: np.ndarray
    raw: np.ndarray
    flat_intervals: list = field(default_factory=list)


def virtual_value(model: ValueModel, dist: SignalDistribution, i: int, s, selection: str = "right"):
    s = np.asarray(s, dtype=float)
    ih = inverse_hazard(dist, s[..., i])
    return model.value(i, s) - ih * model.subgradient(i, s, selection)


def adjusted_hazard(dist: SignalDistribution, c_i: float, s_i):
    if c_i < 0:
        raise ConfigurationError(f"weight must be nonnegative, got {c_i!r}")
    return c_i * inverse_hazard(dist, s_i)


def _grid_inverse_hazard(dist: SignalDistribution, grid: Grid) -> np.ndarray:
    """Inverse hazard at grid nodes; at a zero-density upper end, the one-sided limit.

    The limit is extrapolated linearly from the last two interior nodes; a
    non-finite result is returned as NaN and the caller excludes it.
    """
    x = grid.points
    ih = np.asarray(inverse_hazard(dist, x[:-1]), dtype=float)
    top = 0.0
    if float(dist.pdf(x[-1])) <= 0.0:
        if x.size >= 3:
            slope = (ih[-1] - ih[-2]) / (x[-2] - x[-3])
            top = ih[-1] + slope * (x[-1] - x[-2])
        if not np.isfinite(top):
            log.warning("inverse hazard diverges at the upper endpoint %.6g; "
                        "those profiles are excluded from pointwise maximization", x[-1])
            top = np.nan
        top = max(top, 0.0) if np.isfinite(top) else top
    return np.r_[ih, top]


def virtual_value_field(model: ValueModel, dist: SignalDistribution, grid: Grid,
                        selection: str = "right") -> VirtualValueField:
    if model.space != grid.space or dist.space != grid.space:
        raise ConfigurationError("model, distribution and grid must share one signal space")
    n, m = model.n_agents, grid.m
    S = grid.profiles(n)
    ih = _grid_inverse_hazard(dist, grid)
    J = np.empty((n,) + (m,) * n)
    for i in range(n):
        ih_i = ih.reshape((1,) * i + (m,) + (1,) * (n - i - 1))
        J[i] = model.value(i, S) - ih_i * model.subgradient(i, S, selection)
    return VirtualValueField(grid, J)


def _pav(y: np.ndarray, w: np.ndarray):
    """Weighted pool-adjacent-violators.

    Returns the nondecreasing fit and the block boundaries. The fitted values
    are the slopes of the greatest convex minorant of the cumulative sums of
    ``w * y`` against cumulative ``w``.
    """
    vals, wts, starts = [], [], []
    for k in range(y.size):
        v, wt, st = float(y[k]), float(w[k]), k
        while vals and vals[-1] > v:
            pv, pw = vals.pop(), wts.pop()
            st = starts.pop()
            tot = pw + wt
            v = (pv * pw + v * wt) / tot if tot > 0 else max(pv, v)
            wt = tot
        vals.append(v)
        wts.append(wt)
        starts.append(st)
    out = np.empty(y.size)
    blocks = []
    ends = starts[1:] + [y.size]
    for v, st, en in zip(vals, starts, ends):
        out[st:en] = v
        blocks.append((st, en - 1))
    return out, blocks


def iron(raw, points, dist: SignalDistribution) -> IronedCurve:
    """Iron a virtual-value curve given at own-signal ``points``.

    The curve is moved to quantile space ``t = F(s)`` where each node carries
    its trapezoidal quantile mass; the ironed curve is the derivative of the
    greatest convex minorant of the cumulative integral.
    """
    raw = np.asarray(raw, dtype=float).ravel()
    t = np.asarray(dist.cdf(np.asarray(points, dtype=float)), dtype=float).ravel()
    if raw.size != t.size:
        raise ConfigurationError("raw curve and signal points differ in length")
    if raw.size == 1:
        return IronedCurve(t, raw.copy(), raw, [])
    dt = np.diff(t)
    w = np.zeros(t.size)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    values, blocks = _pav(raw, w)
    flats = [b for b in blocks if b[1] > b[0]]
    return IronedCurve(t, values, raw, flats)


def ironed_field(vv: VirtualValueField, dist: SignalDistribution) -> VirtualValueField:
    n = vv.n_agents
    x = vv.grid.points
    out = np.empty_like(vv.J)
    for i in range(n):
        rows = _slices.own_slices(vv.J[i], i)
        ironed = np.stack([iron(r, x, dist).values for r in rows])
        out[i] = _slices.from_own_slices(ironed, i, n)
    return VirtualValueField(vv.grid, out)


def _pointwise_winner(score: np.ndarray, eligible: np.ndarray, maximize: bool = True) -> np.ndarray:
    """Index of the best agent per profile (lowest index among near-ties), -1 if none eligible."""
    s = np.where(eligible, score, -np.inf if maximize else np.inf)
    best = s.max(axis=0) if maximize else s.min(axis=0)
    near = (s >= best - TIE_TOL) if maximize else (s <= best + TIE_TOL)
    winner = np.argmax(near & eligible, axis=0)
    return np.where(eligible.any(axis=0), winner, -1)


def _winner_rule(grid: Grid, n: int, winner: np.ndarray) -> AllocationRule:
    q = np.stack([(winner == i).astype(float) for i in range(n)])
    return AllocationRule(grid, q)


def optimal_strictly_increasing(model: ValueModel, dist: SignalDistribution, grid: Grid,
                                baseline="binding-ir") -> Mechanism:
    """Award the object to the highest nonnegative ironed virtual value.

    Ironing runs per own-signal slice (fixed ``s_{-i}``). If interdependence
    makes the resulting rule fail eventual monotonicity, payment synthesis
    raises :class:`~expost.errors.NotEventuallyMonotoneError`.
    """
    n = model.n_agents
    vt = value_table(model, grid)
    for i in range(n):
        if np.any(grid_flat_index(_slices.own_slices(vt[i], i)) > 0):
            raise PreconditionError(
                f"value of agent {i} is flat in its own signal somewhere on the grid; "
                "optimal_strictly_increasing needs strictly increasing values "
                "(use revenue_objective for the general eventually monotone problem)")
    jbar = ironed_field(virtual_value_field(model, dist, grid), dist).J
    ok = np.isfinite(jbar)
    winner = _pointwise_winner(jbar, ok)
    top = np.take_along_axis(np.where(ok, jbar, -np.inf), np.maximum(winner, 0)[None], axis=0)[0]
    winner = np.where((winner >= 0) & (top >= -TIE_TOL), winner, -1)
    rule = _winner_rule(grid, n, winner)
    return Mechanism(rule, synthesize_payments(rule, model, baseline))


def optimal_additive(dist: SignalDistribution, weights, grid: Grid, baseline="binding-ir") -> Mechanism:
    """Lowest adjusted hazard ``c_i (1 - F(s_i)) / f(s_i)`` wins if its virtual value is >= 0."""
    model = AdditiveValues(weights, grid.space)
    n, m = model.n_agents, grid.m
    ih = _grid_inverse_hazard(dist, grid)
    if np.any(~np.isfinite(ih)) or np.any(np.diff(ih) > 1e-12):
        raise PreconditionError("distribution does not have a monotone hazard rate on the grid "
                                "(inverse hazard must be non-increasing)")
    adj = np.stack([np.broadcast_to(model.weights[i] * ih.reshape((1,) * i + (m,) + (1,) * (n - i - 1)),
                                    (m,) * n) for i in range(n)])
    V = value_table(model, grid)
    J = V - adj
    winner = _pointwise_winner(adj, np.ones_like(adj, dtype=bool), maximize=False)
    jw = np.take_along_axis(J, winner[None], axis=0)[0]
    winner = np.where(jw >= -TIE_TOL, winner, -1)
    rule = _winner_rule(grid, n, winner)
    return Mechanism(rule, synthesize_payments(rule, model, baseline))


def optimal_max_must_sell(shares, dist: SignalDistribution | None, grid: Grid,
                          model: MaxValues | None = None) -> Mechanism:
    """Constant allocation ``q_i = c_i`` under the max model, priced at binding IR.

    ``dist`` does not affect the construction; it is accepted for a uniform
    call signature with the other designs.
    """
    c = np.asarray(shares, dtype=float).ravel()
    if c.size < 1 or np.any(c < 0) or abs(c.sum() - 1.0) > 1e-12:
        raise ConfigurationError(f"params.shares must be nonnegative and sum to 1, got {c.tolist()}")
    model = model or MaxValues(c.size, grid.space)
    if not isinstance(model, MaxValues) or model.n_agents != c.size:
        raise ConfigurationError("must-sell design needs the max model with one share per agent")
    rule = constant_rule(grid, c)
    return Mechanism(rule, synthesize_payments(rule, model, "binding-ir"))


def _density_weights(dist: SignalDistribution, grid: Grid) -> np.ndarray:
    return grid.trapezoid_weights() * np.asarray(dist.pdf(grid.points), dtype=float)


def revenue_objective(q, model: ValueModel, dist: SignalDistribution, selection: str = "mean") -> float:
    """Tensor trapezoidal quadrature of ``E[sum_i J_i(s) q_i(s)]``.

    Kinks of ``v_i`` at nodes make ``J_i`` jump there, so by default the
    node value uses the mean of the one-sided derivatives (the midpoint of
    the jump), which keeps the trapezoidal rule second order.
    """
    rule = q.allocation if isinstance(q, Mechanism) else q
    grid, n = rule.grid, rule.n_agents
    J = virtual_value_field(model, dist, grid, selection).J
    integrand = np.nansum(J * rule.q, axis=0)
    w = _density_weights(dist, grid)
    total = integrand
    for _ in range(n):
        total = total @ w
    return float(total)
