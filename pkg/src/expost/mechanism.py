"""Allocation rules, payment synthesis and ex-post verification on a grid.

Tables are dense arrays of shape ``(n,) + (m,)*n``: entry ``[i, k_1, ..., k_n]``
belongs to agent ``i`` at the grid profile ``(x[k_1], ..., x[k_n])``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from expost import _slices
from expost.errors import ConfigurationError, DomainError, NotEventuallyMonotoneError
from expost.signals import Grid, SignalSpace
from expost.values import TOL_V, ValueModel, grid_flat_index, value_table

TOL_Q = 1e-12
TOL_IC = 1e-8
TOL_CONV = 1e-8

# pairwise checks are chunked so that chunk * m * m stays below this
_PAIR_BUDGET = 1 << 22

__all__ = [
    "TOL_Q",
    "TOL_IC",
    "TOL_CONV",
    "AllocationRule",
    "PaymentRule",
    "Mechanism",
    "Violation",
    "VerificationReport",
    "OracleResult",
    "is_eventually_monotone",
    "eventually_monotone_slice",
    "synthesize_payments",
    "utility",
    "utility_table",
    "verify_epic",
    "verify_epir",
    "weak_monotonicity_check",
    "implementability_oracle",
    "efficient_rule",
    "constant_rule",
    "read_table_csv",
]


def _check_table(arr, grid: Grid, what: str) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    if arr.ndim < 2:
        raise ConfigurationError(f"{what} table must have shape (n,) + (m,)*n")
    n, m = arr.shape[0], grid.m
    if arr.shape != (n,) + (m,) * n:
        raise ConfigurationError(f"{what} table shape {arr.shape} does not match {n} agents on {m} points")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{what} table has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AllocationRule:
    grid: Grid
    q: np.ndarray
    must_sell: bool = False

    def __post_init__(self):
        q = _check_table(self.q, self.grid, "allocation")
        if np.any(q < -TOL_Q) or np.any(q > 1 + TOL_Q):
            raise ConfigurationError("allocation probabilities must lie in [0, 1]")
        total = q.sum(axis=0)
        if np.any(total > 1 + 1e-12):
            raise ConfigurationError(f"infeasible allocation: total probability reaches {total.max():.6g}")
        if self.must_sell and np.any(np.abs(total - 1) > 1e-12):
            raise ConfigurationError("must-sell allocation must sum to exactly 1 at every profile")
        object.__setattr__(self, "q", q)

    @property
    def n_agents(self) -> int:
        return self.q.shape[0]

    def at(self, i: int, s) -> float:
        return float(self.q[(i,) + self.grid.profile_index(s)])

    def to_csv(self, path) -> None:
        write_table_csv(path, self.grid, {"q": self.q})

    @classmethod
    def from_csv(cls, path, must_sell: bool = False) -> "AllocationRule":
        grid, tables = read_table_csv(path)
        if "q" not in tables:
            raise ConfigurationError(f"{path}: no q_1..q_n columns")
        return cls(grid, tables["q"], must_sell)


@dataclass(frozen=True, eq=False)
class PaymentRule:
    grid: Grid
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _check_table(self.p, self.grid, "payment"))

    @property
    def n_agents(self) -> int:
        return self.p.shape[0]

    def at(self, i: int, s) -> float:
        return float(self.p[(i,) + self.grid.profile_index(s)])

    def to_csv(self, path) -> None:
        write_table_csv(path, self.grid, {"p": self.p})

    @classmethod
    def from_csv(cls, path) -> "PaymentRule":
        grid, tables = read_table_csv(path)
        if "p" not in tables:
            raise ConfigurationError(f"{path}: no p_1..p_n columns")
        return cls(grid, tables["p"])


@dataclass(frozen=True, eq=False)
class Mechanism:
    allocation: AllocationRule
    payment: PaymentRule

    def __post_init__(self):
        if self.allocation.grid != self.payment.grid:
            raise ConfigurationError("allocation and payment rules live on different grids")
        if self.allocation.n_agents != self.payment.n_agents:
            raise ConfigurationError("allocation and payment rules disagree on the number of agents")

    @property
    def grid(self) -> Grid:
        return self.allocation.grid

    @property
    def n_agents(self) -> int:
        return self.allocation.n_agents

    def total_payment(self) -> np.ndarray:
        return self.payment.p.sum(axis=0)

    def to_csv(self, path) -> None:
        write_table_csv(path, self.grid, {"q": self.allocation.q, "p": self.payment.p})

    @classmethod
    def from_csv(cls, path, must_sell: bool = False) -> "Mechanism":
        grid, tables = read_table_csv(path)
        if "q" not in tables or "p" not in tables:
            raise ConfigurationError(f"{path}: mechanism CSV needs q_* and p_* columns")
        return cls(AllocationRule(grid, tables["q"], must_sell), PaymentRule(grid, tables["p"]))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class Violation:
    agent: int
    profile: tuple
    target: float | None
    defect: float
    at_threshold: bool = False

    def to_dict(self) -> dict:
        d = {"agent": self.agent + 1, "profile": list(self.profile), "target": self.target,
             "defect": self.defect}
        if self.at_threshold:
            d["at_threshold"] = True
        return d


@dataclass
class VerificationReport:
    kind: str
    violations: list = field(default_factory=list)
    max_defect: float = 0.0
    tolerance: float = TOL_IC
    grid_resolution: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.passed

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "violations": [v.to_dict() for v in self.violations],
            "max_defect": self.max_defect,
            "tolerance": self.tolerance,
            "grid_resolution": self.grid_resolution,
        }

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=False, **kw)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def summary(self) -> str:
        state = "pass" if self.passed else f"FAIL ({len(self.violations)} violations)"
        return f"{self.kind}: {state}, max defect {self.max_defect:.3e} (tol {self.tolerance:g})"


class _Collector:
    def __init__(self, kind: str, grid: Grid, n: int, tol: float):
        self.report = VerificationReport(kind, tolerance=tol, grid_resolution=grid.m)
        self.x = grid.points
        self.others = _slices.others_points(grid.points, n)

    def add(self, i: int, defects: np.ndarray, targets: np.ndarray | None = None,
            row_offset: int = 0, flags: np.ndarray | None = None) -> None:
        """``defects[r, k]``: defect of agent i at own index k of slice row r."""
        if defects.size:
            self.report.max_defect = max(self.report.max_defect, float(defects.max()))
        rep = self.report
        for r, k in zip(*np.nonzero(defects > rep.tolerance)):
            prof = _slices.full_profile(self.others[row_offset + r], i, self.x[k])
            tgt = None if targets is None else float(self.x[targets[r, k]])
            flag = bool(flags[r, k]) if flags is not None else False
            rep.violations.append(Violation(i, prof, tgt, float(defects[r, k]), flag))


def _check_model(rule_grid: Grid, n: int, model: ValueModel) -> None:
    if model.n_agents != n:
        raise ConfigurationError(f"rule has {n} agents but the value model has {model.n_agents}")
    if model.space != rule_grid.space:
        raise ConfigurationError("rule grid and value model use different signal spaces")


def _alloc(obj) -> AllocationRule:
    return obj.allocation if isinstance(obj, Mechanism) else obj


# ---------------------------------------------------------------------------
# eventual monotonicity


def _em_defects(q_rows: np.ndarray, flat_idx: np.ndarray):
    """Worst EM defect and its lower-signal witness for every (row, k).

    For ``k`` above the flat index the defect is ``max_{j<k} q[j] - q[k]``.
    """
    S, m = q_rows.shape
    best = np.full(S, -np.inf)
    arg = np.zeros(S, dtype=int)
    defects = np.zeros((S, m))
    targets = np.zeros((S, m), dtype=int)
    for k in range(m):
        if k:
            above = k > flat_idx
            d = np.where(above, best - q_rows[:, k], 0.0)
            defects[:, k] = np.maximum(d, 0.0)
            targets[:, k] = arg
        upd = q_rows[:, k] > best
        best = np.where(upd, q_rows[:, k], best)
        arg = np.where(upd, k, arg)
    return defects, targets


def eventually_monotone_slice(q_slice, v_slice, tol_q: float = TOL_Q, tol_v: float = TOL_V) -> bool:
    q = np.asarray(q_slice, dtype=float)[None, :]
    L = grid_flat_index(np.asarray(v_slice, dtype=float)[None, :], tol_v)
    d, _ = _em_defects(q, L)
    return bool(d.max(initial=0.0) <= tol_q)


def is_eventually_monotone(q, model: ValueModel, tol_q: float = TOL_Q,
                           tol_v: float = TOL_V) -> VerificationReport:
    """Check the EM inequality for every gridded slice.

    A grid point counts as above the threshold only if it lies strictly after
    the last grid point of the value function's flat region. Violations whose
    witness is that boundary point carry ``at_threshold=True``.
    """
    rule = _alloc(q)
    _check_model(rule.grid, rule.n_agents, model)
    n = rule.n_agents
    vt = value_table(model, rule.grid)
    col = _Collector("EM", rule.grid, n, tol_q)
    for i in range(n):
        q_rows = _slices.own_slices(rule.q[i], i)
        L = grid_flat_index(_slices.own_slices(vt[i], i), tol_v)
        defects, targets = _em_defects(q_rows, L)
        col.add(i, defects, targets, flags=targets == L[:, None])
    return col.report


# ---------------------------------------------------------------------------
# payments


Baseline = str | float | Callable[[int, np.ndarray], float]


def _baseline_rows(baseline, i: int, q_rows, v_rows, others) -> np.ndarray:
    if isinstance(baseline, str):
        if baseline in ("binding-ir", "binding_ir"):
            return q_rows[:, 0] * v_rows[:, 0]
        if baseline == "zero":
            return np.zeros(q_rows.shape[0])
        raise ConfigurationError(f"unknown baseline {baseline!r}; use 'binding-ir', 'zero', a number or a callable")
    if callable(baseline):
        return np.array([float(baseline(i, s)) for s in others])
    return np.full(q_rows.shape[0], float(baseline))


def synthesize_payments(q, model: ValueModel, baseline: Baseline = "binding-ir",
                        check: bool = True) -> PaymentRule:
    """Payments that implement an eventually monotone rule.

    ``p(s) = b(s_{-i}) - q(lower) v(lower) + q(s) v(s) - integral of q dv``
    along the own signal, where ``b`` is the payment of the lowest type.
    On each grid cell the allocation is taken at the cell's upper node, so
    the integral over the cell is exactly ``q(s_{k+1}) (v(s_{k+1}) - v(s_k))``
    for any value function. This step function is the discrete allocation
    the grid mechanism actually uses, and EM of the table makes the result
    exactly EPIC on the grid.

    ``baseline`` is ``"binding-ir"`` (lowest type's utility is zero),
    ``"zero"``, a number, or ``f(i, s_minus_i) -> float``.
    """
    rule = _alloc(q)
    _check_model(rule.grid, rule.n_agents, model)
    if check:
        em = is_eventually_monotone(rule, model)
        if not em.passed:
            worst = max(em.violations, key=lambda v: v.defect)
            raise NotEventuallyMonotoneError(
                f"allocation rule is not eventually monotone: agent {worst.agent} at {worst.profile} "
                f"loses {worst.defect:.3g} against lower signal {worst.target}", em)
    n = rule.n_agents
    vt = value_table(model, rule.grid)
    others = _slices.others_points(rule.grid.points, n)
    p = np.empty_like(rule.q)
    for i in range(n):
        q_rows = _slices.own_slices(rule.q[i], i)
        v_rows = _slices.own_slices(vt[i], i)
        rent = np.zeros_like(q_rows)
        rent[:, 1:] = np.cumsum(q_rows[:, 1:] * np.diff(v_rows, axis=1), axis=1)
        base = _baseline_rows(baseline, i, q_rows, v_rows, others)
        rows = (base - q_rows[:, 0] * v_rows[:, 0])[:, None] + q_rows * v_rows - rent
        p[i] = _slices.from_own_slices(rows, i, n)
    return PaymentRule(rule.grid, p)


def utility_table(mech: Mechanism, model: ValueModel) -> np.ndarray:
    _check_model(mech.grid, mech.n_agents, model)
    return mech.allocation.q * value_table(model, mech.grid) - mech.payment.p


def utility(mech: Mechanism, model: ValueModel, i: int, s) -> float:
    """``q_i(s) v_i(s) - p_i(s)`` at a grid profile."""
    idx = (i,) + mech.grid.profile_index(s)
    if len(idx) != mech.n_agents + 1:
        raise DomainError(f"profile must have {mech.n_agents} signals")
    v = float(model.value(i, np.asarray(s, dtype=float)))
    return float(mech.allocation.q[idx]) * v - float(mech.payment.p[idx])


# ---------------------------------------------------------------------------
# ex-post verification


def _pair_chunks(S: int, m: int):
    step = max(1, _PAIR_BUDGET // (m * m))
    for start in range(0, S, step):
        yield slice(start, min(S, start + step))


def verify_epic(mech: Mechanism, model: ValueModel, tol: float = TOL_IC) -> VerificationReport:
    """Every type ``s`` against every misreport ``s'`` with the same ``s_{-i}``.

    Defect at ``(s, s')`` is ``u(s') + (v(s) - v(s')) q(s') - u(s)`` when
    positive; each violating ``(i, s)`` is reported once with its worst ``s'``.
    """
    _check_model(mech.grid, mech.n_agents, model)
    n = mech.n_agents
    vt = value_table(model, mech.grid)
    ut = mech.allocation.q * vt - mech.payment.p
    col = _Collector("EPIC", mech.grid, n, tol)
    for i in range(n):
        q_rows = _slices.own_slices(mech.allocation.q[i], i)
        v_rows = _slices.own_slices(vt[i], i)
        u_rows = _slices.own_slices(ut[i], i)
        for sl in _pair_chunks(q_rows.shape[0], q_rows.shape[1]):
            q, v, u = q_rows[sl], v_rows[sl], u_rows[sl]
            # gain[r, a, b]: true a, report b
            gain = u[:, None, :] + (v[:, :, None] - v[:, None, :]) * q[:, None, :] - u[:, :, None]
            worst = gain.argmax(axis=2)
            defects = np.maximum(np.take_along_axis(gain, worst[:, :, None], axis=2)[:, :, 0], 0.0)
            col.add(i, defects, worst, row_offset=sl.start)
    return col.report


def verify_epir(mech: Mechanism, model: ValueModel, tol: float = TOL_IC) -> VerificationReport:
    n = mech.n_agents
    ut = utility_table(mech, model)
    col = _Collector("EPIR", mech.grid, n, tol)
    for i in range(n):
        col.add(i, np.maximum(-_slices.own_slices(ut[i], i), 0.0))
    return col.report


def weak_monotonicity_check(mech, model: ValueModel, tol: float = TOL_IC) -> VerificationReport:
    """Pairwise ``(q(s'') - q(s'))(v(s'') - v(s')) >= 0``, a necessary condition for EPIC."""
    rule = _alloc(mech)
    _check_model(rule.grid, rule.n_agents, model)
    n = rule.n_agents
    vt = value_table(model, rule.grid)
    col = _Collector("weak-monotonicity", rule.grid, n, tol)
    for i in range(n):
        q_rows = _slices.own_slices(rule.q[i], i)
        v_rows = _slices.own_slices(vt[i], i)
        for sl in _pair_chunks(q_rows.shape[0], q_rows.shape[1]):
            q, v = q_rows[sl], v_rows[sl]
            prod = (q[:, :, None] - q[:, None, :]) * (v[:, :, None] - v[:, None, :])
            worst = prod.argmin(axis=2)
            defects = np.maximum(-np.take_along_axis(prod, worst[:, :, None], axis=2)[:, :, 0], 0.0)
            col.add(i, defects, worst, row_offset=sl.start)
    return col.report


# ---------------------------------------------------------------------------
# independent implementability oracle


@dataclass
class OracleResult:
    """Outcome of the difference-constraint feasibility test for one slice.

    ``potential`` (when feasible) is a utility profile satisfying every
    incentive constraint up to ``residual``; ``cycle`` (when infeasible) lists
    grid indices ``c_0 -> c_1 -> ... -> c_0`` where each arrow is a report
    of the left index by the true type on the right, with total gain
    ``cycle_weight > 0``.
    """

    feasible: bool
    potential: np.ndarray | None = None
    cycle: list | None = None
    cycle_weight: float = 0.0
    residual: float = 0.0

    def __bool__(self):
        return self.feasible


def _gain_matrix(q, v):
    # w[b, a]: utility gain bound for true type a from the report b
    return (v[None, :] - v[:, None]) * q[:, None]


def cycle_weight(q_slice, v_slice, cycle) -> float:
    w = _gain_matrix(np.asarray(q_slice, float), np.asarray(v_slice, float))
    return float(sum(w[b, a] for b, a in zip(cycle, cycle[1:] + cycle[:1])))


def _pred_cycle(pred: np.ndarray, start: int):
    m = pred.size
    x = start
    for _ in range(m):
        x = pred[x]
        if x < 0:
            return None
    cyc, y = [x], pred[x]
    while y != x:
        cyc.append(int(y))
        y = pred[y]
    # walking predecessors yields the cycle backwards
    return [int(c) for c in reversed(cyc)]


def implementability_oracle(q_slice, v_slice, tol: float = TOL_IC) -> OracleResult:
    """Decide whether some utility profile satisfies all pairwise IC constraints.

    The constraints ``u(a) - u(b) >= (v(a) - v(b)) q(b)`` form a difference
    system on the complete digraph with arc ``b -> a`` of weight
    ``(v(a) - v(b)) q(b)``. It is feasible iff no cycle has positive weight.
    Two-cycles are scanned directly; longer cycles are found by Bellman-Ford
    on the negated weights from a virtual source.
    """
    q = np.asarray(q_slice, dtype=float).ravel()
    v = np.asarray(v_slice, dtype=float).ravel()
    if q.size != v.size or q.size < 1:
        raise ConfigurationError("allocation and value slices must have the same nonzero length")
    m = q.size
    w = _gain_matrix(q, v)
    np.fill_diagonal(w, 0.0)

    two = w + w.T
    b, a = np.unravel_index(int(np.argmax(two)), two.shape)
    if two[b, a] > tol:
        return OracleResult(False, cycle=[int(b), int(a)], cycle_weight=float(two[b, a]))

    cost = -w
    d = np.zeros(m)
    pred = np.full(m, -1)
    eps = tol * 1e-3
    cols = np.arange(m)
    for rnd in range(4 * m + 4):
        cand = d[:, None] + cost
        best_b = cand.argmin(axis=0)
        best = cand[best_b, cols]
        improve = best < d - eps
        if not improve.any():
            break
        d = np.where(improve, best, d)
        pred = np.where(improve, best_b, pred)
        if rnd >= m - 1:
            cyc = _pred_cycle(pred, int(np.argmax(improve)))
            if cyc is not None:
                cw = cycle_weight(q, v, cyc)
                if cw > tol:
                    return OracleResult(False, cycle=cyc, cycle_weight=cw)
    u = -d
    u = u - u[0]
    slack = w + u[:, None] - u[None, :]
    residual = float(max(0.0, slack.max()))
    return OracleResult(residual <= tol, potential=u, residual=residual)


# ---------------------------------------------------------------------------
# stock allocation rules


def efficient_rule(grid: Grid, n_agents: int) -> AllocationRule:
    """Highest signal wins with probability one; ties go to the lowest index."""
    S = grid.profiles(n_agents)
    winner = S.argmax(axis=-1)  # first maximum
    q = np.stack([(winner == i).astype(float) for i in range(n_agents)])
    return AllocationRule(grid, q, must_sell=True)


def constant_rule(grid: Grid, shares) -> AllocationRule:
    shares = np.asarray(shares, dtype=float).ravel()
    n = shares.size
    q = np.broadcast_to(shares.reshape((n,) + (1,) * n), (n,) + (grid.m,) * n)
    return AllocationRule(grid, q, must_sell=bool(abs(shares.sum() - 1) <= 1e-12))


# ---------------------------------------------------------------------------
# CSV exchange

_PREFIXES = ("s", "q", "p", "J")


def write_table_csv(path, grid: Grid, tables: dict) -> None:
    """One row per grid profile: ``s_1..s_n`` then ``<prefix>_1..<prefix>_n`` per table."""
    first = next(iter(tables.values()))
    n = first.shape[0]
    S = grid.profiles(n).reshape(-1, n)
    cols, header = [S], [f"s_{k + 1}" for k in range(n)]
    for prefix, t in tables.items():
        cols.append(np.asarray(t).reshape(n, -1).T)
        header += [f"{prefix}_{k + 1}" for k in range(n)]
    data = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def read_table_csv(path):
    """Inverse of :func:`write_table_csv`; returns ``(grid, {prefix: table})``."""
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"malformed CSV {path}: {exc}") from exc
    header = [h.strip() for h in header]
    if data.shape[1] != len(header):
        raise ConfigurationError(f"malformed CSV {path}: {len(header)} columns in header, {data.shape[1]} in rows")
    groups: dict[str, list[int]] = {}
    for col, name in enumerate(header):
        prefix, _, idx = name.partition("_")
        if prefix not in _PREFIXES or not idx.isdigit():
            raise ConfigurationError(f"malformed CSV {path}: unexpected column {name!r}")
        groups.setdefault(prefix, []).append(col)
    if "s" not in groups:
        raise ConfigurationError(f"malformed CSV {path}: no s_1..s_n columns")
    n = len(groups["s"])
    if any(len(c) != n for c in groups.values()):
        raise ConfigurationError(f"malformed CSV {path}: column groups have unequal sizes")
    S = data[:, groups["s"]]
    points = np.unique(S[:, 0])
    m = points.size
    if data.shape[0] != m ** n or any(not np.array_equal(np.unique(S[:, k]), points) for k in range(n)):
        raise ConfigurationError(f"malformed CSV {path}: rows do not form a full {m}^{n} grid product")
    order = np.lexsort(S.T[::-1])
    data, S = data[order], S[order]
    if np.unique(S, axis=0).shape[0] != S.shape[0]:
        raise ConfigurationError(f"malformed CSV {path}: duplicate profiles")
    grid = Grid(SignalSpace(points[0], points[-1]), points)
    tables = {}
    for prefix, cols in groups.items():
        if prefix == "s":
            continue
        tables[prefix] = data[:, cols].T.reshape((n,) + (m,) * n)
    return grid, tables
