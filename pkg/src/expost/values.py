"""Convex interdependent value functions.

Every model exposes, for agent ``i`` and profiles ``s`` of shape ``(..., n)``:

* ``value(i, s)``: ``v_i(s)``
* ``right_derivative`` / ``left_derivative``: one-sided own-signal slopes
* ``subgradient(i, s)``: the fixed selection used throughout the package,
  right derivative except at the upper endpoint where the left one is used
* ``ell_threshold(i, s_minus_i)``: right edge of the flat region of
  ``v_i(., s_{-i})``

Agents are indexed from 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from expost import _slices
from expost.errors import ConfigurationError, DomainError
from expost.signals import Grid, SignalSpace

TOL_V = 1e-9

__all__ = [
    "TOL_V",
    "ValueModel",
    "PrivateValues",
    "AdditiveValues",
    "MaxValues",
    "ConvexPiecewiseLinear",
    "PiecewiseLinearValues",
    "CallableValues",
    "RegularityReport",
    "value_table",
    "ell_threshold",
    "grid_flat_index",
    "check_value_regularity",
    "load_value_model",
]


class ValueModel:
    kind = "abstract"

    def __init__(self, n_agents: int, space: SignalSpace | None = None):
        if int(n_agents) != n_agents or n_agents < 1:
            raise ConfigurationError(f"n_agents must be a positive integer, got {n_agents!r}")
        self.n_agents = int(n_agents)
        self.space = space or SignalSpace()

    # -- helpers -----------------------------------------------------------
    def _profiles(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1:] != (self.n_agents,):
            raise DomainError(f"profile must have {self.n_agents} signals, got shape {s.shape}")
        if not self.space.contains(s, atol=1e-12):
            raise DomainError(f"profile outside [{self.space.lower}, {self.space.upper}]^{self.n_agents}")
        return s

    def _agent(self, i: int) -> int:
        if not 0 <= i < self.n_agents:
            raise DomainError(f"agent index {i} out of range for {self.n_agents} agents")
        return int(i)

    def _others(self, s: np.ndarray, i: int) -> np.ndarray:
        return np.delete(s, i, axis=-1)

    # -- interface ---------------------------------------------------------
    def value(self, i: int, s):
        i, s = self._agent(i), self._profiles(s)
        return self._value(i, s)

    def right_derivative(self, i: int, s):
        i, s = self._agent(i), self._profiles(s)
        return self._right(i, s)

    def left_derivative(self, i: int, s):
        i, s = self._agent(i), self._profiles(s)
        out = self._left(i, s)
        return np.where(s[..., i] <= self.space.lower, self._right(i, s), out)

    def subgradient(self, i: int, s, selection: str = "right"):
        """Own-signal subgradient element.

        ``selection="right"`` is the package-wide rule (right derivative, left
        derivative at the upper endpoint). ``"mean"`` averages both one-sided
        derivatives, which is what trapezoidal quadrature of a kinked
        integrand wants at grid nodes.
        """
        i, s = self._agent(i), self._profiles(s)
        top = s[..., i] >= self.space.upper
        right = np.where(top, self._left(i, s), self._right(i, s))
        if selection == "right":
            return right
        if selection == "mean":
            return 0.5 * (right + self.left_derivative(i, s))
        raise ValueError(f"unknown subgradient selection {selection!r}")

    def ell_threshold(self, i: int, s_minus_i) -> float:
        i = self._agent(i)
        s_minus_i = np.asarray(s_minus_i, dtype=float).reshape(self.n_agents - 1)
        self.space.check(s_minus_i)
        return float(self._ell(i, s_minus_i))

    def params(self) -> dict:
        return {"family": self.kind, "n_agents": self.n_agents}

    def __repr__(self):
        return f"{type(self).__name__}({self.params()})"

    def _value(self, i, s):
        raise NotImplementedError

    def _right(self, i, s):
        raise NotImplementedError

    def _left(self, i, s):
        raise NotImplementedError

    def _ell(self, i, s_minus_i):
        raise NotImplementedError


class PrivateValues(ValueModel):
    """``v_i(s) = s_i``."""

    kind = "private"

    def _value(self, i, s):
        return s[..., i].copy()

    def _right(self, i, s):
        return np.ones(s.shape[:-1])

    _left = _right

    def _ell(self, i, s_minus_i):
        return self.space.lower


class AdditiveValues(ValueModel):
    """``v_i(s) = sum_j c_j s_j`` (common to all agents)."""

    kind = "additive"

    def __init__(self, weights, space: SignalSpace | None = None):
        c = np.asarray(weights, dtype=float).ravel()
        if c.size < 1 or np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ConfigurationError(f"additive weights must be finite and nonnegative, got {weights!r}")
        super().__init__(c.size, space)
        self.weights = c

    def _value(self, i, s):
        return s @ self.weights

    def _right(self, i, s):
        return np.full(s.shape[:-1], self.weights[i])

    _left = _right

    def _ell(self, i, s_minus_i):
        return self.space.lower if self.weights[i] > 0 else self.space.upper

    def params(self):
        return {**super().params(), "weights": self.weights.tolist()}


class MaxValues(ValueModel):
    """``v_i(s) = max_j s_j``."""

    kind = "max"

    def _value(self, i, s):
        return s.max(axis=-1)

    def _others_max(self, i, s):
        if self.n_agents == 1:
            return np.full(s.shape[:-1], -np.inf)
        return self._others(s, i).max(axis=-1)

    def _right(self, i, s):
        return (s[..., i] >= self._others_max(i, s)).astype(float)

    def _left(self, i, s):
        return (s[..., i] > self._others_max(i, s)).astype(float)

    def _ell(self, i, s_minus_i):
        return max(self.space.lower, float(np.max(s_minus_i, initial=-np.inf)))


@dataclass(frozen=True, eq=False)
class ConvexPiecewiseLinear:
    """Nondecreasing convex piecewise-linear function of one signal.

    ``slopes[k]`` applies on ``[breakpoints[k], breakpoints[k+1])``; the last
    slope runs to the upper end of ``space``. A first breakpoint above the
    lower end is preceded by an implicit flat piece.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    intercept: float = 0.0
    space: SignalSpace = field(default_factory=SignalSpace)

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float).ravel()
        a = np.asarray(self.slopes, dtype=float).ravel()
        if b.size == 0 or b.size != a.size:
            raise ConfigurationError("piecewise model needs matching (breakpoint, slope) pairs")
        if np.any(np.diff(b) <= 0):
            raise ConfigurationError("piecewise breakpoints must be strictly increasing")
        if b[0] < self.space.lower or b[-1] >= self.space.upper:
            raise ConfigurationError("piecewise breakpoints must lie in [lower, upper)")
        if np.any(a < 0):
            raise ConfigurationError("piecewise slopes must be nonnegative")
        if b[0] > self.space.lower:
            b, a = np.r_[self.space.lower, b], np.r_[0.0, a]
        if np.any(np.diff(a) < 0):
            raise ConfigurationError(f"piecewise slopes must be nondecreasing (convexity), got {a.tolist()}")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "slopes", a)
        object.__setattr__(self, "intercept", float(self.intercept))
        ends = np.r_[b[1:], self.space.upper]
        object.__setattr__(self, "_lengths", ends - b)
        object.__setattr__(self, "_knot_values", self.intercept + np.r_[0.0, np.cumsum(a * (ends - b))])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        pieces = np.clip(x[..., None] - self.breakpoints, 0.0, self._lengths)
        return self.intercept + pieces @ self.slopes

    def right_slope(self, x):
        k = np.searchsorted(self.breakpoints, x, side="right") - 1
        return self.slopes[np.clip(k, 0, self.slopes.size - 1)]

    def left_slope(self, x):
        k = np.searchsorted(self.breakpoints, x, side="left") - 1
        return self.slopes[np.clip(k, 0, self.slopes.size - 1)]

    def sup_at_most(self, level: float, tol: float = TOL_V) -> float:
        """Largest signal where the function is ``<= level + tol``."""
        knots = np.r_[self.breakpoints, self.space.upper]
        vals = self._knot_values
        if vals[-1] <= level + tol:
            return self.space.upper
        k = int(np.searchsorted(vals, level + tol, side="right")) - 1
        if k < 0:
            return self.space.lower
        slope = self.slopes[k]
        return float(min(knots[k + 1], knots[k] + (level + tol - vals[k]) / slope)) if slope > 0 else float(knots[k])

    def to_pairs(self) -> list[list[float]]:
        return [[float(b), float(a)] for b, a in zip(self.breakpoints, self.slopes)]


class PiecewiseLinearValues(ValueModel):
    """Per-agent convex piecewise-linear own-signal part, composed with others.

    ``v_i(s) = g_i(s_i) (+|max) h(s_{-i})`` where ``h`` is ``weight * sum``,
    ``weight * max`` or a constant over the other signals.
    """

    kind = "piecewise"

    def __init__(self, functions, combine: str = "add", aggregate: str = "constant",
                 weight: float = 1.0, constant: float = 0.0, space: SignalSpace | None = None):
        functions = list(functions)
        super().__init__(len(functions), space)
        if combine not in ("add", "max"):
            raise ConfigurationError(f"model.others.combine must be 'add' or 'max', got {combine!r}")
        if aggregate not in ("sum", "max", "constant"):
            raise ConfigurationError(f"model.others.aggregate must be sum/max/constant, got {aggregate!r}")
        if weight < 0:
            raise ConfigurationError("model.others.weight must be nonnegative")
        self.functions = functions
        self.combine, self.aggregate = combine, aggregate
        self.weight, self.constant = float(weight), float(constant)

    def _h(self, i, s):
        if self.aggregate == "constant" or self.n_agents == 1:
            return np.full(s.shape[:-1], self.constant if self.aggregate == "constant" else 0.0)
        others = self._others(s, i)
        agg = others.sum(axis=-1) if self.aggregate == "sum" else others.max(axis=-1)
        return self.weight * agg

    def _value(self, i, s):
        g, h = self.functions[i](s[..., i]), self._h(i, s)
        return g + h if self.combine == "add" else np.maximum(g, h)

    def _right(self, i, s):
        g_slope = self.functions[i].right_slope(s[..., i])
        if self.combine == "add":
            return np.asarray(g_slope, dtype=float) * np.ones(s.shape[:-1])
        above = self.functions[i](s[..., i]) >= self._h(i, s)
        return np.where(above, g_slope, 0.0)

    def _left(self, i, s):
        g_slope = self.functions[i].left_slope(s[..., i])
        if self.combine == "add":
            return np.asarray(g_slope, dtype=float) * np.ones(s.shape[:-1])
        above = self.functions[i](s[..., i]) > self._h(i, s)
        return np.where(above, g_slope, 0.0)

    def _ell(self, i, s_minus_i):
        g = self.functions[i]
        s = np.array(_slices.full_profile(s_minus_i, i, self.space.lower))
        if self.combine == "add":
            return g.sup_at_most(float(g(self.space.lower)))
        level = float(self._value(i, s))
        return g.sup_at_most(level)

    def params(self):
        return {
            **super().params(),
            "agents": [{"pieces": f.to_pairs(), "intercept": f.intercept} for f in self.functions],
            "others": {"combine": self.combine, "aggregate": self.aggregate,
                       "weight": self.weight, "constant": self.constant},
        }


class CallableValues(ValueModel):
    """Wraps ``func(i, s) -> values`` (vectorized over leading axes of ``s``).

    Regularity is not assumed; :func:`check_value_regularity` is how a
    callable model is vetted. Derivatives are one-sided finite differences
    and the flat-region edge is found by a fine scan.
    """

    kind = "callable"

    def __init__(self, func, n_agents: int, space: SignalSpace | None = None,
                 name: str = "callable", scan_points: int = 2001):
        super().__init__(n_agents, space)
        self.func, self.name, self.scan_points = func, name, scan_points
        self._h = 1e-7 * self.space.width

    def _shift(self, s, i, d):
        t = s.copy()
        t[..., i] = np.clip(t[..., i] + d, self.space.lower, self.space.upper)
        return t, t[..., i] - s[..., i]

    def _value(self, i, s):
        return np.asarray(self.func(i, s), dtype=float)

    def _right(self, i, s):
        t, d = self._shift(s, i, self._h)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = (self._value(i, t) - self._value(i, s)) / d
        return np.where(d > 0, out, self._left(i, s))

    def _left(self, i, s):
        t, d = self._shift(s, i, -self._h)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(d < 0, (self._value(i, t) - self._value(i, s)) / d, 0.0)

    def _ell(self, i, s_minus_i):
        xs = np.linspace(self.space.lower, self.space.upper, self.scan_points)
        prof = np.array([_slices.full_profile(s_minus_i, i, x) for x in xs])
        return float(xs[grid_flat_index(self._value(i, prof))])

    def params(self):
        return {**super().params(), "name": self.name}


def value_table(model: ValueModel, grid: Grid) -> np.ndarray:
    """``v_i`` on every grid profile, shape ``(n,) + (m,)*n``."""
    S = grid.profiles(model.n_agents)
    return np.stack([model.value(i, S) for i in range(model.n_agents)])


def grid_flat_index(v_rows: np.ndarray, tol: float = TOL_V) -> np.ndarray:
    """Index of the last grid point still in the flat region, per row.

    ``v_rows`` has the own signal on its last axis. Points strictly after the
    returned index are above the threshold.
    """
    v_rows = np.asarray(v_rows, dtype=float)
    flat = v_rows <= v_rows[..., :1] + tol
    # first non-flat point minus one; all-flat rows map to the last index
    rising = ~flat
    first = np.where(rising.any(axis=-1), rising.argmax(axis=-1), v_rows.shape[-1])
    return first - 1


def ell_threshold(model: ValueModel, i: int, s_minus_i, grid: Grid | None = None,
                  tol: float = TOL_V) -> float:
    """Flat-region edge ``sup{x : v_i(x, s_{-i}) = v_i(lower, s_{-i})}``.

    With a grid, the threshold is the last grid point whose value is within
    ``tol`` of the bottom value; without one, the model's exact formula.
    """
    if grid is None:
        return model.ell_threshold(i, s_minus_i)
    prof = np.array([_slices.full_profile(s_minus_i, i, x) for x in grid.points])
    return float(grid.points[grid_flat_index(model.value(i, prof), tol)])


@dataclass
class RegularityReport:
    convexity_violations: list = field(default_factory=list)
    monotonicity_violations: list = field(default_factory=list)
    tolerance: float = TOL_V

    @property
    def ok(self) -> bool:
        return not (self.convexity_violations or self.monotonicity_violations)

    def __bool__(self):
        return self.ok


def check_value_regularity(model: ValueModel, grid: Grid, tol: float = TOL_V) -> RegularityReport:
    """Scan every own-signal slice for negative first or second differences.

    Violations are ``(i, s_minus_i, points, defect)`` tuples; ``points`` is the
    offending triple (convexity) or pair (monotonicity) of own signals.
    """
    report = RegularityReport(tolerance=tol)
    n, x = model.n_agents, grid.points
    vt = value_table(model, grid)
    others = _slices.others_points(x, n)
    h = np.diff(x)
    for i in range(n):
        rows = _slices.own_slices(vt[i], i)
        d1 = np.diff(rows, axis=1)
        # second difference rescaled to the right cell width (equals the
        # plain second difference on a uniform grid)
        d2 = d1[:, 1:] - d1[:, :-1] * (h[1:] / h[:-1])
        for r, k in zip(*np.nonzero(d1 < -tol)):
            report.monotonicity_violations.append(
                (i, tuple(others[r]), (x[k], x[k + 1]), float(-d1[r, k])))
        for r, k in zip(*np.nonzero(d2 < -tol)):
            report.convexity_violations.append(
                (i, tuple(others[r]), (x[k], x[k + 1], x[k + 2]), float(-d2[r, k])))
    return report


def load_value_model(spec: dict, n_agents: int, space: SignalSpace) -> ValueModel:
    """Build a model from a config mapping ``{"family": ..., ...}``."""
    family = spec.get("family")
    if family == "private":
        return PrivateValues(n_agents, space)
    if family == "max":
        return MaxValues(n_agents, space)
    if family == "additive":
        weights = spec.get("weights", [1.0] * n_agents)
        if len(weights) != n_agents:
            raise ConfigurationError(f"model.weights: expected {n_agents} weights, got {len(weights)}")
        return AdditiveValues(weights, space)
    if family == "piecewise":
        if "agents" in spec:
            agents = spec["agents"]
            if len(agents) != n_agents:
                raise ConfigurationError(f"model.agents: expected {n_agents} entries")
        else:
            agents = [{"pieces": spec.get("pieces"), "intercept": spec.get("intercept", 0.0)}] * n_agents
        funcs = []
        for a in agents:
            pieces = a.get("pieces")
            if not pieces:
                raise ConfigurationError("model.pieces: list of (breakpoint, slope) pairs required")
            b, sl = zip(*pieces)
            funcs.append(ConvexPiecewiseLinear(b, sl, a.get("intercept", 0.0), space))
        others = spec.get("others", {})
        return PiecewiseLinearValues(funcs, others.get("combine", "add"), others.get("aggregate", "constant"),
                                     others.get("weight", 1.0), others.get("constant", 0.0), space)
    raise ConfigurationError(f"model.family: unknown value family {family!r}")
