"""Signal spaces, discretization grids and one-dimensional signal laws.

All agents share one signal space ``[lower, upper]`` and draw i.i.d. signals
from one distribution. Grids are the common evaluation lattice for every
tabulated object in the package (allocation, payment, value tables).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from expost.errors import ConfigurationError, DegenerateDensityError, DomainError, InvalidResolutionError

__all__ = [
    "SignalSpace",
    "Grid",
    "make_grid",
    "default_resolution",
    "SignalDistribution",
    "Uniform",
    "TruncatedExponential",
    "Tabulated",
    "inverse_hazard",
    "sample_profiles",
    "load_distribution",
]


@dataclass(frozen=True)
class SignalSpace:
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ConfigurationError(f"signal space bounds must be finite, got [{lo}, {hi}]")
        if not lo < hi:
            raise ConfigurationError(f"signal space needs lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, s, atol: float = 1e-12) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all((s >= self.lower - atol) & (s <= self.upper + atol)))

    def check(self, s, atol: float = 1e-12) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if not self.contains(s, atol):
            raise DomainError(f"signal(s) outside [{self.lower}, {self.upper}]: {s!r}")
        return s


@dataclass(frozen=True, eq=False)
class Grid:
    """Strictly increasing signal points spanning a :class:`SignalSpace`."""

    space: SignalSpace
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidResolutionError("a grid needs at least 2 points")
        if np.any(np.diff(pts) <= 0):
            raise ConfigurationError("grid points must be strictly increasing")
        if pts[0] != self.space.lower or pts[-1] != self.space.upper:
            raise ConfigurationError("grid must include both endpoints of the signal space")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.space, self.points.tobytes()))

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def max_spacing(self) -> float:
        return float(self.spacing.max())

    def index_of(self, s: float, atol: float = 1e-9) -> int:
        """Grid index of a signal that lies on the grid."""
        k = int(np.argmin(np.abs(self.points - s)))
        if abs(self.points[k] - s) > atol:
            raise DomainError(f"signal {s!r} is not a grid point")
        return k

    def profile_index(self, s) -> tuple[int, ...]:
        return tuple(self.index_of(x) for x in np.ravel(s))

    def profiles(self, n_agents: int) -> np.ndarray:
        """All grid profiles, shape ``(m,)*n + (n,)``, C order over agents."""
        axes = np.meshgrid(*([self.points] * n_agents), indexing="ij")
        return np.stack(axes, axis=-1)

    def trapezoid_weights(self) -> np.ndarray:
        h = self.spacing
        w = np.zeros(self.m)
        w[:-1] += h / 2
        w[1:] += h / 2
        return w


def make_grid(space: SignalSpace, m: int) -> Grid:
    if int(m) != m or m < 2:
        raise InvalidResolutionError(f"grid resolution must be an integer >= 2, got {m!r}")
    pts = np.linspace(space.lower, space.upper, int(m))
    pts[0], pts[-1] = space.lower, space.upper
    return Grid(space, pts)


def default_resolution(n_agents: int) -> int:
    """Points per axis that keep full pairwise verification at desk scale."""
    if n_agents <= 2:
        return 101
    if n_agents == 3:
        return 41
    return 21 if n_agents == 4 else 11


class SignalDistribution:
    """A law on a :class:`SignalSpace` with cdf, pdf, quantile and sampler.

    Subclasses implement ``_cdf``, ``_pdf`` and ``_ppf`` on arrays already
    inside the space.
    """

    name = "abstract"

    def __init__(self, space: SignalSpace):
        self.space = space

    def cdf(self, s):
        s = np.clip(self.space.check(s), self.space.lower, self.space.upper)
        return np.clip(self._cdf(s), 0.0, 1.0)

    def pdf(self, s):
        s = np.clip(self.space.check(s), self.space.lower, self.space.upper)
        return self._pdf(s)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return np.clip(self._ppf(np.clip(u, 0.0, 1.0)), self.space.lower, self.space.upper)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.ppf(rng.random(size))

    def params(self) -> dict:
        return {"name": self.name, "space": [self.space.lower, self.space.upper]}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items() if k != "name")
        return f"{type(self).__name__}({args})"


class Uniform(SignalDistribution):
    name = "uniform"

    def __init__(self, space: SignalSpace | None = None):
        super().__init__(space or SignalSpace())

    def _cdf(self, s):
        return (s - self.space.lower) / self.space.width

    def _pdf(self, s):
        return np.full_like(s, 1.0 / self.space.width, dtype=float)

    def _ppf(self, u):
        return self.space.lower + u * self.space.width


class TruncatedExponential(SignalDistribution):
    """Exponential law with the given rate, truncated to the signal space."""

    name = "truncated_exponential"

    def __init__(self, rate: float = 1.0, space: SignalSpace | None = None):
        super().__init__(space or SignalSpace())
        if not rate > 0:
            raise ConfigurationError(f"rate must be positive, got {rate!r}")
        self.rate = float(rate)
        self._mass = -math.expm1(-self.rate * self.space.width)

    def _cdf(self, s):
        return -np.expm1(-self.rate * (s - self.space.lower)) / self._mass

    def _pdf(self, s):
        return self.rate * np.exp(-self.rate * (s - self.space.lower)) / self._mass

    def _ppf(self, u):
        return self.space.lower - np.log1p(-u * self._mass) / self.rate

    def params(self):
        return {**super().params(), "rate": self.rate}


class Tabulated(SignalDistribution):
    """Piecewise-linear cdf through ``(knots, cdf_values)``.

    The density is the slope of the segment containing ``s``; at an interior
    knot it is the mean of the two adjacent slopes (at the upper end, the
    left slope), which reproduces the derivative of a smooth cdf sampled at
    the knots to second order.
    """

    name = "tabulated"

    def __init__(self, knots, cdf_values, source: str | None = None):
        x = np.asarray(knots, dtype=float)
        F = np.asarray(cdf_values, dtype=float)
        if x.ndim != 1 or x.shape != F.shape or x.size < 2:
            raise ConfigurationError("tabulated cdf needs two equal-length columns with >= 2 rows")
        if np.any(np.diff(x) <= 0):
            raise ConfigurationError("tabulated cdf signals must be strictly increasing")
        if np.any(np.diff(F) < 0):
            raise ConfigurationError("tabulated cdf values must be nondecreasing")
        if abs(F[0]) > 1e-12 or abs(F[-1] - 1.0) > 1e-12:
            raise ConfigurationError("tabulated cdf must start at 0 and end at 1")
        F = F.copy()
        F[0], F[-1] = 0.0, 1.0
        super().__init__(SignalSpace(x[0], x[-1]))
        self.knots, self.values = x, F
        self.slopes = np.diff(F) / np.diff(x)
        self.source = source

    @classmethod
    def from_csv(cls, path) -> "Tabulated":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except (ValueError, IndexError):
                    if rows:
                        raise ConfigurationError(f"malformed tabulated cdf row in {path}: {row!r}")
                    continue  # header
        if not rows:
            raise ConfigurationError(f"no data rows in {path}")
        x, F = np.array(rows).T
        return cls(x, F, source=str(path))

    def _cdf(self, s):
        return np.interp(s, self.knots, self.values)

    def _pdf(self, s):
        s = np.asarray(s, dtype=float)
        seg = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, self.slopes.size - 1)
        out = self.slopes[seg].astype(float)
        at_knot = np.isclose(s, self.knots[seg], rtol=0, atol=1e-14) & (seg > 0)
        out = np.where(at_knot, 0.5 * (self.slopes[seg - 1] + self.slopes[seg]), out)
        return np.where(s >= self.knots[-1], self.slopes[-1], out)

    def _ppf(self, u):
        # Flat cdf segments carry no mass; keep the right-most preimage.
        F, x = self.values, self.knots
        keep = np.concatenate([np.diff(F) > 0, [True]])
        return np.interp(u, F[keep], x[keep])

    def params(self):
        p = {**super().params()}
        if self.source:
            p["csv"] = self.source
        else:
            p["knots"] = self.knots.tolist()
            p["cdf"] = self.values.tolist()
        return p


def inverse_hazard(dist: SignalDistribution, s):
    """``(1 - F(s)) / f(s)``; zero at the upper endpoint by convention."""
    s = np.asarray(dist.space.check(s), dtype=float)
    F, f = dist.cdf(s), dist.pdf(s)
    at_top = s >= dist.space.upper
    bad = (f <= 0) & ~at_top
    if np.any(bad):
        where = np.atleast_1d(s)[np.atleast_1d(bad)]
        raise DegenerateDensityError(f"density vanishes at interior signal(s) {where.tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(at_top, 0.0, (1.0 - F) / np.where(f > 0, f, 1.0))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def sample_profiles(dist: SignalDistribution, n_agents: int, count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. profiles of ``n_agents`` signals, shape ``(count, n_agents)``."""
    if n_agents < 1 or count < 1:
        raise ConfigurationError("n_agents and count must be positive")
    rng = np.random.default_rng(seed)
    return dist.sample(rng, (int(count), int(n_agents)))


def load_distribution(spec: dict, space: SignalSpace | None = None, base_dir: Path | None = None):
    """Build a distribution from a config mapping ``{"name": ..., ...}``."""
    name = spec.get("name")
    if name == "uniform":
        return Uniform(space)
    if name == "truncated_exponential":
        return TruncatedExponential(spec.get("rate", 1.0), space)
    if name == "tabulated":
        if "csv" in spec:
            path = Path(spec["csv"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                dist = Tabulated.from_csv(path)
            except OSError as exc:
                raise ConfigurationError(f"distribution.csv: cannot read {path}: {exc}") from exc
        else:
            dist = Tabulated(spec["knots"], spec["cdf"])
        if space is not None and dist.space != space:
            raise ConfigurationError("distribution: tabulated cdf must span the configured signal space")
        return dist
    raise ConfigurationError(f"distribution.name: unknown distribution {name!r}")
