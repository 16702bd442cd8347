"""Yield surfaces on a fixed rating x tenor grid.

Yields are stored in decimal units (0.05 is 5%, i.e. 500 bps). Rows are
ratings ordered best first, columns are tenors in increasing order.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_RATINGS: tuple[str, ...] = (
    "AAA", "AA", "A+", "A", "A-", "BBB+", "BBB", "BBB-",
    "BB+", "BB", "BB-", "B+", "B",
)
DEFAULT_TENORS: tuple[float, ...] = (
    0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0, 9.0, 10.0, 15.0, 20.0, 25.0, 30.0,
)

CSV_HEADER = ("date", "rating", "tenor_years", "yield")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RatingGrid:
    labels: tuple[str, ...] = DEFAULT_RATINGS

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValueError("rating grid is empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate rating labels in {self.labels}")

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"unknown rating label {label!r}") from None


@dataclass(frozen=True)
class TenorGrid:
    tenors: tuple[float, ...] = DEFAULT_TENORS

    def __post_init__(self):
        t = tuple(float(x) for x in self.tenors)
        object.__setattr__(self, "tenors", t)
        if not t:
            raise ValueError("tenor grid is empty")
        if any(x <= 0 for x in t):
            raise ValueError("tenors must be positive")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("tenors must be strictly increasing")

    def __len__(self) -> int:
        return len(self.tenors)

    def index(self, tenor: float) -> int:
        for j, t in enumerate(self.tenors):
            if math.isclose(t, tenor, rel_tol=1e-9, abs_tol=1e-12):
                return j
        raise ValueError(f"unknown tenor {tenor!r}")


@dataclass(frozen=True)
class YieldSurface:
    date: dt.date
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise ValueError(f"surface must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"surface for {self.date} has non-finite yields")
        if np.any(v < 0):
            raise ValueError(f"surface for {self.date} has negative yields")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class MaskedSurface:
    """Surface with an observation mask; unobserved cells hold 0."""

    values: np.ndarray
    observed: np.ndarray
    date: dt.date | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        m = np.array(self.observed, dtype=bool)
        if v.shape != m.shape or v.ndim != 2:
            raise ValueError(f"values {v.shape} and mask {m.shape} must be equal 2-D shapes")
        if not m.any():
            raise ValueError("masked surface has no observed cells")
        if np.any(v[~m] != 0):
            raise ValueError("unobserved cells must carry value 0")
        if not np.all(np.isfinite(v)):
            raise ValueError("masked surface has non-finite values")
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "observed", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


@dataclass(frozen=True)
class SurfaceDataset:
    surfaces: tuple[YieldSurface, ...]
    ratings: RatingGrid = field(default_factory=RatingGrid)
    tenors: TenorGrid = field(default_factory=TenorGrid)
    scale_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        shape = (len(self.ratings), len(self.tenors))
        for s in self.surfaces:
            if s.shape != shape:
                raise ValueError(f"surface {s.date} has shape {s.shape}, grid is {shape}")

    def __len__(self) -> int:
        return len(self.surfaces)

    def __getitem__(self, i):
        return self.surfaces[i]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.ratings), len(self.tenors))

    def stack(self) -> np.ndarray:
        """All surfaces as an (n, R, T) array."""
        if not self.surfaces:
            return np.zeros((0,) + self.shape)
        return np.stack([s.values for s in self.surfaces])


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv(path, ratings: RatingGrid | None = None, tenors: TenorGrid | None = None) -> SurfaceDataset:
    """Read a long-format surface CSV (one row per date/rating/tenor cell)."""
    ratings = ratings or RatingGrid()
    tenors = tenors or TenorGrid()
    shape = (len(ratings), len(tenors))
    cells: dict[dt.date, np.ndarray] = {}
    seen: dict[dt.date, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing_cols = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing_cols:
            raise ValueError(f"{path}: missing columns {sorted(missing_cols)}")
        for lineno, row in enumerate(reader, start=2):
            date = dt.date.fromisoformat(row["date"].strip())
            try:
                i = ratings.index(row["rating"].strip())
                j = tenors.index(float(row["tenor_years"]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            y = float(row["yield"])
            if not math.isfinite(y):
                raise ValueError(f"{path}:{lineno}: non-finite yield {row['yield']!r}")
            if date not in cells:
                cells[date] = np.zeros(shape)
                seen[date] = np.zeros(shape, dtype=bool)
            if seen[date][i, j]:
                raise ValueError(f"{path}:{lineno}: duplicate cell ({date}, {ratings.labels[i]}, {tenors.tenors[j]:g})")
            cells[date][i, j] = y
            seen[date][i, j] = True

    surfaces = []
    for date in sorted(cells):
        gaps = np.argwhere(~seen[date])
        if len(gaps):
            i, j = gaps[0]
            raise ValueError(
                f"{path}: missing cell ({date}, {ratings.labels[i]}, {tenors.tenors[j]:g}y)"
            )
        surfaces.append(YieldSurface(date, cells[date]))
    return SurfaceDataset(tuple(surfaces), ratings, tenors)


def save_csv(dataset: SurfaceDataset, path, digits: int = 9) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in dataset.surfaces:
            d = s.date.isoformat()
            for i, r in enumerate(dataset.ratings.labels):
                for j, t in enumerate(dataset.tenors.tenors):
                    w.writerow((d, r, f"{t:g}", f"{s.values[i, j]:.{digits}f}"))


# ---------------------------------------------------------------------------
# scaling and padding
# ---------------------------------------------------------------------------


def scale_to_unit(dataset: SurfaceDataset) -> SurfaceDataset:
    """Divide every yield by the dataset-wide maximum so the max becomes 1."""
    if len(dataset) == 0:
        raise ValueError("cannot scale an empty dataset")
    peak = float(dataset.stack().max())
    if peak <= 0:
        raise ValueError("cannot scale a dataset with no positive entries")
    surfaces = tuple(YieldSurface(s.date, s.values / peak) for s in dataset.surfaces)
    return replace(dataset, surfaces=surfaces, scale_factor=dataset.scale_factor / peak)


def descale(dataset: SurfaceDataset) -> SurfaceDataset:
    f = dataset.scale_factor
    surfaces = tuple(YieldSurface(s.date, s.values / f) for s in dataset.surfaces)
    return replace(dataset, surfaces=surfaces, scale_factor=1.0)


def pad_surface(values: np.ndarray, target: tuple[int, int] = (16, 16)) -> np.ndarray:
    """Pad bottom/right to ``target`` by replicating the nearest edge value."""
    values = np.asarray(values, dtype=np.float64)
    r, t = values.shape
    h, w = target
    if h < r or w < t:
        raise ValueError(f"pad target {target} is smaller than surface {values.shape}")
    return np.pad(values, ((0, h - r), (0, w - t)), mode="edge")


def crop_surface(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    r, t = shape
    values = np.asarray(values)
    if values.shape[-2] < r or values.shape[-1] < t:
        raise ValueError(f"cannot crop {values.shape} to {shape}")
    return values[..., :r, :t].copy()


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

# Spread over the base curve per rating, decimal. Increasing in rating ordinal.
DEFAULT_SPREADS: tuple[float, ...] = (
    0.0040, 0.0055, 0.0070, 0.0080, 0.0090, 0.0110, 0.0130,
    0.0160, 0.0220, 0.0260, 0.0300, 0.0350, 0.0410,
)


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameter ranges for the Nelson-Siegel style surface generator.

    Each surface draws a base curve ``level + slope*L(t) + curvature*C(t)``
    with Nelson-Siegel loadings ``L``/``C`` at decay ``decay`` (years), then
    adds per-rating spreads. Spread increments between adjacent ratings are
    perturbed with log-normal noise of scale ``noise`` and cumulated, so every
    surface stays weakly increasing in rating.
    """

    level: tuple[float, float] = (0.030, 0.045)
    slope: tuple[float, float] = (-0.022, -0.008)
    curvature: tuple[float, float] = (-0.010, 0.010)
    decay: tuple[float, float] = (1.0, 3.0)
    spreads: tuple[float, ...] = DEFAULT_SPREADS
    spread_scale: tuple[float, float] = (0.8, 1.3)
    # widening of spreads toward the long end: spread * (1 + w * (1 - exp(-t/5)))
    spread_widening: tuple[float, float] = (0.2, 0.8)
    noise: float = 0.05
    seed: int = 0
    start_date: str = "2018-01-29"
    backfill_long_end: bool = False
    backfill_from_rating: str = "BB+"

    def __post_init__(self):
        for name in ("level", "slope", "curvature", "decay", "spread_scale", "spread_widening"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"degenerate range for {name}: min {lo} > max {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.decay[0] <= 0:
            raise ValueError("decay must be positive")
        if self.spread_scale[0] < 0:
            raise ValueError("spread_scale must be non-negative")
        sp = tuple(float(s) for s in self.spreads)
        if any(s < 0 for s in sp):
            raise ValueError("spreads must be non-negative")
        if any(b < a for a, b in zip(sp, sp[1:])):
            raise ValueError("spreads must be weakly increasing in rating")
        object.__setattr__(self, "spreads", sp)
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def nelson_siegel(tenors: np.ndarray, level: float, slope: float, curvature: float, decay: float) -> np.ndarray:
    x = np.asarray(tenors, dtype=np.float64) / decay
    load = (1.0 - np.exp(-x)) / x
    return level + slope * load + curvature * (load - np.exp(-x))


def _business_days(start: dt.date, n: int) -> list[dt.date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def _backfill_long_end(values: np.ndarray, tenors: Sequence[float], first_row: int) -> None:
    """Rebuild tenors beyond 15y for rows >= first_row from a generic index.

    The generic curve is the average of the affected rows; each row keeps its
    own 15y yield and takes the generic curve's long-minus-15y spread.
    """
    tenors = np.asarray(tenors)
    anchor = np.flatnonzero(np.isclose(tenors, 15.0))
    if not len(anchor):
        return
    k = int(anchor[0])
    long = tenors > 15.0
    generic = values[first_row:].mean(axis=0)
    values[first_row:, long] = values[first_row:, k:k + 1] + (generic[long] - generic[k])


def generate_synthetic(
    config: SyntheticConfig,
    n: int,
    ratings: RatingGrid | None = None,
    tenors: TenorGrid | None = None,
) -> SurfaceDataset:
    ratings = ratings or RatingGrid()
    tenors = tenors or TenorGrid()
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(config.spreads) != len(ratings):
        raise ValueError(f"{len(config.spreads)} spreads for {len(ratings)} ratings")
    rng = np.random.default_rng(config.seed)
    t = np.asarray(tenors.tenors)
    increments = np.diff(np.asarray(config.spreads), prepend=0.0)
    dates = _business_days(dt.date.fromisoformat(config.start_date), n)
    backfill_row = ratings.index(config.backfill_from_rating) if config.backfill_long_end else None

    surfaces = []
    for date in dates:
        level = rng.uniform(*config.level)
        slope = rng.uniform(*config.slope)
        curv = rng.uniform(*config.curvature)
        decay = rng.uniform(*config.decay)
        scale = rng.uniform(*config.spread_scale)
        widen = rng.uniform(*config.spread_widening)
        z = rng.standard_normal((len(ratings), len(t)))

        base = nelson_siegel(t, level, slope, curv, decay)
        shape = 1.0 + widen * (1.0 - np.exp(-t / 5.0))
        s = config.noise
        noisy_inc = increments[:, None] * np.exp(s * z - 0.5 * s * s)
        spread = scale * np.cumsum(noisy_inc, axis=0) * shape[None, :]
        values = base[None, :] + spread
        if backfill_row is not None:
            _backfill_long_end(values, t, backfill_row)
        if values.min() <= 0 or values.max() >= 0.25:
            raise ValueError(
                f"synthetic config produced yields outside (0, 0.25): "
                f"[{values.min():.4f}, {values.max():.4f}]"
            )
        surfaces.append(YieldSurface(date, values))
    return SurfaceDataset(tuple(surfaces), ratings, tenors)

