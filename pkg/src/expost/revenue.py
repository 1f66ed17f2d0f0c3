"""Expected revenue of tabulated mechanisms and comparison tables."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from expost.errors import ConfigurationError, ResourceError
from expost.mechanism import TOL_IC, Mechanism, verify_epic, verify_epir
from expost.signals import SignalDistribution
from expost.values import ValueModel

DEFAULT_SAMPLES = 1_000_000
BATCH_SIZE = 100_000
QUADRATURE_MAX_AGENTS = 3

__all__ = [
    "RevenueEstimate",
    "expected_revenue_mc",
    "expected_revenue_quadrature",
    "bbm_benchmark",
    "order_statistic_decomposition",
    "ComparisonTable",
    "compare_mechanisms",
]


@dataclass(frozen=True)
class RevenueEstimate:
    mean: float
    std_error: float
    n_samples: int
    seed: int | None
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def simplex_interpolator(points: np.ndarray, table: np.ndarray):
    """Piecewise-linear interpolant on the Kuhn triangulation of the grid.

    Each grid cell is split into the ``n!`` simplices on which the order of
    the fractional coordinates is fixed. Functions that are affine on those
    simplices, such as maxima of signals with kinks on the diagonals, are
    reproduced exactly.
    """
    pts = np.asarray(points, dtype=float)
    n, m = table.ndim, pts.size
    flat = table.reshape(-1)
    strides = np.array([m ** (n - 1 - k) for k in range(n)])

    def interp(s):
        s = np.asarray(s, dtype=float).reshape(-1, n)
        k = np.clip(np.searchsorted(pts, s, side="right") - 1, 0, m - 2)
        r = np.clip((s - pts[k]) / (pts[k + 1] - pts[k]), 0.0, 1.0)
        order = np.argsort(-r, axis=1, kind="stable")
        r_sorted = np.take_along_axis(r, order, axis=1)
        idx = k @ strides
        out = (1.0 - r_sorted[:, 0]) * flat[idx]
        for j in range(n):
            idx = idx + strides[order[:, j]]
            nxt = r_sorted[:, j + 1] if j + 1 < n else 0.0
            out = out + (r_sorted[:, j] - nxt) * flat[idx]
        return out

    return interp


def total_payment_interpolator(mech: Mechanism, method: str = "simplex"):
    """Interpolant of ``sum_i p_i`` at off-grid profiles.

    ``method`` is ``"simplex"`` (Kuhn triangulation) or ``"multilinear"``.
    """
    pts = mech.grid.points
    total = mech.total_payment()
    if mech.n_agents == 1:
        return lambda s: np.interp(np.asarray(s)[:, 0], pts, total)
    if method == "simplex":
        return simplex_interpolator(pts, total)
    if method == "multilinear":
        return RegularGridInterpolator((pts,) * mech.n_agents, total, method="linear")
    raise ConfigurationError(f"unknown interpolation method {method!r}")


def _batch_moments(args):
    fn, dist, n, size, seq = args
    rng = np.random.default_rng(seq)
    vals = fn(dist.sample(rng, (size, n)))
    mu = float(vals.mean())
    return size, mu, float(((vals - mu) ** 2).sum())


def _merge(parts):
    count, mean, m2 = 0, 0.0, 0.0
    for c, mu, sq in parts:
        delta = mu - mean
        tot = count + c
        mean += delta * c / tot
        m2 += sq + delta * delta * count * c / tot
        count = tot
    return count, mean, m2


def mc_mean(fn, dist: SignalDistribution, n_agents: int, n_samples: int, seed: int,
            n_jobs: int = 1, batch_size: int = BATCH_SIZE) -> tuple[float, float]:
    """Mean and standard error of ``fn(profiles)`` over i.i.d. profiles.

    Samples come in fixed batches, each seeded by a child of ``seed``'s
    ``SeedSequence``; batches merge in order, so the result does not depend
    on ``n_jobs``.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    n_batches = math.ceil(n_samples / batch_size)
    seqs = np.random.SeedSequence(seed).spawn(n_batches)
    sizes = [batch_size] * (n_batches - 1) + [n_samples - batch_size * (n_batches - 1)]
    jobs = [(fn, dist, n_agents, sz, sq) for sz, sq in zip(sizes, seqs)]
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(_batch_moments, jobs))
    else:
        parts = [_batch_moments(j) for j in jobs]
    count, mean, m2 = _merge(parts)
    var = m2 / (count - 1) if count > 1 else 0.0
    return mean, math.sqrt(max(var, 0.0) / count)


def expected_revenue_mc(mech: Mechanism, dist: SignalDistribution, n_samples: int = DEFAULT_SAMPLES,
                        seed: int = 0, n_jobs: int = 1, interpolation: str = "simplex") -> RevenueEstimate:
    """Sample mean and standard error of total payments at i.i.d. profiles."""
    if dist.space != mech.grid.space:
        raise ConfigurationError("distribution and mechanism grid use different signal spaces")
    fn = total_payment_interpolator(mech, interpolation)
    mean, se = mc_mean(fn, dist, mech.n_agents, n_samples, seed, n_jobs)
    return RevenueEstimate(mean, se, int(n_samples), seed, "monte-carlo")


def expected_revenue_quadrature(mech: Mechanism, dist: SignalDistribution,
                                max_agents: int = QUADRATURE_MAX_AGENTS) -> RevenueEstimate:
    """Tensor trapezoidal integral of ``sum_i p_i(s) f(s)`` on the mechanism grid."""
    n = mech.n_agents
    if n > max_agents:
        raise ResourceError(f"quadrature over {n} agents is too expensive; use expected_revenue_mc")
    grid = mech.grid
    w = grid.trapezoid_weights() * np.asarray(dist.pdf(grid.points), dtype=float)
    total = mech.total_payment()
    for _ in range(n):
        total = total @ w
    return RevenueEstimate(float(total), 0.0, grid.m ** n, None, "quadrature")


def bbm_benchmark(dist: SignalDistribution, n_agents: int, resolution: int = 10_001) -> float:
    """``int x d(F^{N-1}(x))``: expected maximum of ``N - 1`` i.i.d. signals.

    With ``N = 1`` there is no competing signal; the benchmark is taken to be
    the lowest signal, which is what a single agent pays under must-sell.
    """
    if n_agents < 1:
        raise ConfigurationError("n_agents must be positive")
    if n_agents == 1:
        return dist.space.lower
    x = np.linspace(dist.space.lower, dist.space.upper, resolution)
    G = np.asarray(dist.cdf(x), dtype=float) ** (n_agents - 1)
    return float(np.sum(0.5 * (x[1:] + x[:-1]) * np.diff(G)))


def order_statistic_decomposition(dist: SignalDistribution, n_agents: int,
                                  n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> dict:
    """Monte Carlo estimates of the two top order statistics and their mix.

    Returns means and standard errors of ``s_(N)``, ``s_(N-1)`` and
    ``(N-1)/N s_(N) + 1/N s_(N-1)``.
    """
    N = n_agents
    if N < 2:
        raise ConfigurationError("order-statistic decomposition needs at least 2 agents")

    def top(s):
        return np.max(s, axis=1)

    def second(s):
        return np.partition(s, N - 2, axis=1)[:, N - 2]

    def mix(s):
        srt = np.partition(s, (N - 2, N - 1), axis=1)
        return (N - 1) / N * srt[:, N - 1] + srt[:, N - 2] / N

    out = {}
    for name, fn in (("max", top), ("second", second), ("combined", mix)):
        mean, se = mc_mean(fn, dist, N, n_samples, seed)
        out[name] = {"mean": mean, "std_error": se}
    out["n_samples"], out["seed"] = int(n_samples), seed
    return out


COLUMNS = ["label", "method", "mean", "std_error", "epic_pass", "epir_pass", "max_ic_defect",
           "profile_revenue_min", "profile_revenue_max", "n_samples", "seed"]


class ComparisonTable:
    """Rows of a mechanism comparison; one row per (label, method)."""

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def by_label(self, label: str, method: str = "monte-carlo") -> dict:
        for r in self.rows:
            if r["label"] == label and r["method"] == method:
                return r
        raise KeyError((label, method))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                            for k in COLUMNS})

    def to_json(self, path=None) -> str:
        text = json.dumps(self.rows, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def compare_mechanisms(entries, dist: SignalDistribution, model: ValueModel,
                       n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                       tol: float = TOL_IC) -> ComparisonTable:
    """Revenue (Monte Carlo, plus quadrature when cheap) and EPIC/EPIR status per mechanism.

    All mechanisms are sampled with the same seed. Per-profile total payment
    ranges are reported alongside, since equal expected revenue does not
    mean equal revenue profile by profile.
    """
    table = ComparisonTable()
    for label, mech in entries:
        epic = verify_epic(mech, model, tol)
        epir = verify_epir(mech, model, tol)
        total = mech.total_payment()
        common = {
            "label": label,
            "epic_pass": epic.passed,
            "epir_pass": epir.passed,
            "max_ic_defect": max(epic.max_defect, epir.max_defect),
            "profile_revenue_min": float(total.min()),
            "profile_revenue_max": float(total.max()),
        }
        estimates = [expected_revenue_mc(mech, dist, n_samples, seed)]
        if mech.n_agents <= QUADRATURE_MAX_AGENTS:
            estimates.append(expected_revenue_quadrature(mech, dist))
        for est in estimates:
            table.rows.append({**common, "method": est.method, "mean": est.mean,
                               "std_error": est.std_error, "n_samples": est.n_samples, "seed": est.seed})
    return table
