"""Experiment orchestration: config, data preparation, the method benchmark and its report.

A run holds out test surfaces once, corrupts them once per masking kind and
evaluates every method on exactly those masked inputs. TV and TPS pick their
smoothing weight once on a subset of training pairs and are then fitted to
each test pair independently. The autoencoders are trained on the training
pairs of the same masking kind.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from yieldpaint import dae
from yieldpaint.masking import CorruptionSpec
from yieldpaint.metrics import MetricsReport, error_metrics, write_report
from yieldpaint.plot import plot_reconstruction
from yieldpaint.surface import (
    MaskedSurface,
    SurfaceDataset,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    scale_to_unit,
)
from yieldpaint.tps import TpsError, tps_cross_validate, tps_inpaint
from yieldpaint.tv import TvConfig, tv_inpaint

log = logging.getLogger(__name__)

METHODS = ("tv", "tps", "fcnn", "cnn", "cnn_pe")
DAE_METHODS = ("fcnn", "cnn", "cnn_pe")
MASKINGS = ("uniform", "block")
SEED_ENV = "YIELDPAINT_SEED"


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


def _take(d: dict, section: str, allowed: Sequence[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
    return d


# ---------------------------------------------------------------------------
# config sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    path: str | None = None
    n: int = 500

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"[data] source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("[data] source = 'csv' needs a path")
        if self.n < 1:
            raise ConfigError("[data] n must be >= 1")


@dataclass(frozen=True)
class MaskingSection:
    kinds: tuple[str, ...] = MASKINGS
    nu: float = 0.75
    # None means the top-left ceil(R/2) x ceil(T/2) block
    keep_rows: int | None = None
    keep_cols: int | None = None
    nu_inside: float = 0.75

    def __post_init__(self):
        if not self.kinds:
            raise ConfigError("[masking] needs at least one kind")
        bad = [k for k in self.kinds if k not in MASKINGS]
        if bad or len(set(self.kinds)) != len(self.kinds):
            raise ConfigError(f"[masking] kinds must be distinct values of {MASKINGS}, got {list(self.kinds)}")
        for name in ("nu", "nu_inside"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"[masking] {name} must lie in [0, 1]")

    def spec(self, kind: str, shape: tuple[int, int], seed: int) -> CorruptionSpec:
        if kind == "uniform":
            return CorruptionSpec.uniform(self.nu, seed)
        rows = self.keep_rows if self.keep_rows is not None else -(-shape[0] // 2)
        cols = self.keep_cols if self.keep_cols is not None else -(-shape[1] // 2)
        return CorruptionSpec(kind="block", nu=self.nu, keep_rows=rows, keep_cols=cols,
                              nu_inside=self.nu_inside, seed=seed)


@dataclass(frozen=True)
class TpsSection:
    lambda_grid: tuple[float, ...] = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    # "validation": one lambda chosen on training pairs; "cv": k-fold per test pair
    selection: str = "validation"
    folds: int = 5
    select_pairs: int = 20

    def __post_init__(self):
        if not self.lambda_grid or any(v < 0 for v in self.lambda_grid):
            raise ConfigError("[tps] lambda_grid must be a non-empty list of values >= 0")
        if self.selection not in ("validation", "cv"):
            raise ConfigError("[tps] selection must be 'validation' or 'cv'")
        if self.folds < 2 or self.select_pairs < 1:
            raise ConfigError("[tps] needs folds >= 2 and select_pairs >= 1")


@dataclass(frozen=True)
class TvSection:
    lambda_grid: tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3)
    # "auto" sets rho = rho_factor * lambda; yields are O(1e-2), so rho = 1 is far too stiff
    rho: float | str = "auto"
    rho_factor: float = 300.0
    tol: float = 1e-7
    max_iters: int = 5000
    variant: str = "anisotropic"
    select_pairs: int = 20

    def __post_init__(self):
        if not self.lambda_grid or any(v <= 0 for v in self.lambda_grid):
            raise ConfigError("[tv] lambda_grid must be a non-empty list of positive values")
        if self.rho != "auto" and not (isinstance(self.rho, (int, float)) and self.rho > 0):
            raise ConfigError("[tv] rho must be 'auto' or a positive number")
        if self.rho_factor <= 0 or self.select_pairs < 1:
            raise ConfigError("[tv] needs rho_factor > 0 and select_pairs >= 1")

    def config(self, lam: float) -> TvConfig:
        rho = self.rho_factor * lam if self.rho == "auto" else float(self.rho)
        return TvConfig(lam=lam, rho=rho, tol=self.tol, max_iters=self.max_iters, variant=self.variant)


ARCH_KEYS = ("hidden", "conv_filters", "pad_to", "pooling")
PER_METHOD_TRAIN_KEYS = ("lr", "decay", "batch_size", "epochs", "patience", "val_fraction")
TRAIN_KEYS = PER_METHOD_TRAIN_KEYS + ("replicas", "holdout")


@dataclass(frozen=True)
class DaeSection:
    """Shared training/architecture settings plus optional per-method overrides."""

    common: dict = field(default_factory=dict)
    per_method: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> DaeSection:
        allowed = ARCH_KEYS + TRAIN_KEYS + DAE_METHODS
        _take(d, "dae", allowed)
        common = {k: v for k, v in d.items() if k not in DAE_METHODS}
        per = {}
        for m in DAE_METHODS:
            if m in d:
                # holdout and replicas define the shared test set, so they stay global
                per[m] = dict(_take(d[m], f"dae.{m}", ARCH_KEYS + PER_METHOD_TRAIN_KEYS))
        section = cls(common, per)
        for m in DAE_METHODS:
            section.architecture(m)
            section.train_config(m, CorruptionSpec(), 0)
        return section

    def _merged(self, method: str) -> dict:
        return {**self.common, **self.per_method.get(method, {})}

    def architecture(self, method: str) -> dae.DaeArchitecture:
        kw = {k: v for k, v in self._merged(method).items() if k in ARCH_KEYS}
        for k in ("conv_filters", "pad_to"):
            if k in kw:
                kw[k] = tuple(kw[k])
        try:
            return dae.DaeArchitecture(kind=method, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[dae] {method}: {exc}") from None

    def train_config(self, method: str, corruption: CorruptionSpec, seed: int) -> dae.TrainConfig:
        kw = {k: v for k, v in self._merged(method).items() if k in TRAIN_KEYS}
        try:
            return dae.TrainConfig(corruption=corruption, seed=seed, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[dae] {method}: {exc}") from None

    def split_config(self, corruption: CorruptionSpec, seed: int) -> dae.TrainConfig:
        """Holdout and replica settings shared by every method."""
        kw = {k: self.common[k] for k in ("holdout", "replicas") if k in self.common}
        return dae.TrainConfig(corruption=corruption, seed=seed, **kw)

    def to_dict(self) -> dict:
        d = dict(self.common)
        d.update({m: dict(v) for m, v in self.per_method.items()})
        return d


@dataclass(frozen=True)
class ReportSection:
    plots: int = 1

    def __post_init__(self):
        if self.plots < 0:
            raise ConfigError("[report] plots must be >= 0")


def _section(cls, d: dict, name: str):
    allowed = [f.name for f in dataclasses.fields(cls)]
    kw = dict(_take(d, name, allowed))
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    out: str = "runs/default"
    methods: tuple[str, ...] = METHODS
    data: DataSection = field(default_factory=DataSection)
    synthetic: dict = field(default_factory=dict)
    masking: MaskingSection = field(default_factory=MaskingSection)
    tps: TpsSection = field(default_factory=TpsSection)
    tv: TvSection = field(default_factory=TvSection)
    dae: DaeSection = field(default_factory=DaeSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"methods must be distinct values of {METHODS}, got {list(self.methods)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.synthetic_config()

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        top = ("seed", "out", "methods", "data", "synthetic", "masking", "tps", "tv", "dae", "report")
        _take(d, "top level", top)
        kw = {}
        for k in ("seed", "out"):
            if k in d:
                kw[k] = d[k]
        if "methods" in d:
            kw["methods"] = tuple(d["methods"])
        for name, cls_ in (("data", DataSection), ("masking", MaskingSection), ("tps", TpsSection),
                           ("tv", TvSection), ("report", ReportSection)):
            if name in d:
                kw[name] = _section(cls_, d[name], name)
        if "synthetic" in d:
            kw["synthetic"] = dict(_take(d["synthetic"], "synthetic",
                                         [f.name for f in dataclasses.fields(SyntheticConfig)]))
        if "dae" in d:
            kw["dae"] = DaeSection.from_dict(d["dae"])
        return cls(**kw)

    def synthetic_config(self) -> SyntheticConfig:
        kw = {"seed": self.seed, **self.synthetic}
        try:
            return SyntheticConfig.from_dict(kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[synthetic] {exc}") from None

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out": self.out,
            "methods": list(self.methods),
            "data": dataclasses.asdict(self.data),
            "synthetic": dict(self.synthetic),
            "masking": dataclasses.asdict(self.masking),
            "tps": dataclasses.asdict(self.tps),
            "tv": dataclasses.asdict(self.tv),
            "dae": self.dae.to_dict(),
            "report": dataclasses.asdict(self.report),
        }
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        """Digest of everything that affects results (the output dir is excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def parse_config(text: str, fmt: str = "toml") -> dict:
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML config: {exc}") from None


def load_config(path=None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Read a TOML or JSON config; ``YIELDPAINT_SEED`` overrides the seed, then ``overrides`` apply."""
    d: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        d = parse_config(text, "json" if path.suffix.lower() == ".json" else "toml")
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a table at the top level")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> SurfaceDataset:
    if cfg.data.source == "csv":
        return load_csv(cfg.data.path)
    return generate_synthetic(cfg.synthetic_config(), cfg.data.n)


@dataclass
class Split:
    """Train/test pairs for one masking kind. Test inputs are kept in raw units."""

    kind: str
    spec: CorruptionSpec
    train: dae.PairSet
    test: dae.PairSet
    test_masked: list[MaskedSurface]
    test_truth: np.ndarray
    digest: str


def hash_pairs(masked: Sequence[MaskedSurface]) -> str:
    h = hashlib.sha256()
    for m in masked:
        h.update(np.ascontiguousarray(m.values, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(m.observed, dtype=np.uint8).tobytes())
    return h.hexdigest()


def masking_seed(seed: int, kind: str) -> int:
    return dae._derived_seed(seed, 11, MASKINGS.index(kind))


def prepare_split(cfg: ExperimentConfig, raw: SurfaceDataset, scaled: SurfaceDataset, kind: str) -> Split:
    spec = cfg.masking.spec(kind, raw.shape, masking_seed(cfg.seed, kind))
    train, test = dae.build_dataset(scaled, cfg.dae.split_config(spec, cfg.seed))
    sf = scaled.scale_factor
    test_masked = [MaskedSurface(m.values / sf, m.observed, raw.surfaces[i].date)
                   for m, i in zip(test.masked, test.surface_index)]
    truth = np.stack([raw.surfaces[i].values for i in test.surface_index])
    return Split(kind, spec, train, test, test_masked, truth, hash_pairs(test_masked))


def _selection_rows(n: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n)[:min(k, n)])


def select_lambda(grid: Sequence[float], solve: Callable[[MaskedSurface, float], np.ndarray],
                  masked: Sequence[MaskedSurface], truth: np.ndarray) -> tuple[float, dict]:
    """Grid value with the lowest mean squared error over the given pairs; ties go to the larger value."""
    scores = {}
    for lam in grid:
        errs = [float(((solve(m, lam) - t) ** 2).mean()) for m, t in zip(masked, truth)]
        scores[float(lam)] = float(np.mean(errs))
    best = min(scores.values())
    chosen = max(lam for lam, s in scores.items() if math.isclose(s, best, rel_tol=1e-9, abs_tol=1e-20))
    return chosen, scores


def _raw_train_subset(split: Split, raw: SurfaceDataset, sf: float, k: int, seed: int):
    rows = _selection_rows(len(split.train), k, seed)
    masked = [MaskedSurface(split.train.masked[i].values / sf, split.train.masked[i].observed) for i in rows]
    truth = np.stack([raw.surfaces[split.train.surface_index[i]].values for i in rows])
    return masked, truth


# ---------------------------------------------------------------------------
# per-method runners
# ---------------------------------------------------------------------------


def _per_pair(split: Split, fn: Callable[[MaskedSurface], np.ndarray], method: str) -> np.ndarray:
    out = []
    for j, m in enumerate(split.test_masked):
        try:
            out.append(fn(m))
        except Exception as exc:
            surface = int(split.test.surface_index[j])
            raise ExperimentError(f"{method}/{split.kind}: test pair {j} (surface {surface}): {exc}") from exc
    return np.stack(out)


def run_tv(cfg: ExperimentConfig, split: Split, raw: SurfaceDataset, sf: float) -> tuple[np.ndarray, dict]:
    sec = cfg.tv

    def solve(m, lam):
        return tv_inpaint(m, sec.config(lam)).surface

    masked, truth = _raw_train_subset(split, raw, sf, sec.select_pairs, dae._derived_seed(cfg.seed, 21))
    lam, scores = select_lambda(sec.lambda_grid, solve, masked, truth)
    recon = _per_pair(split, lambda m: solve(m, lam), "tv")
    return recon, {"lambda": lam, "selection_mse": scores, "rho": sec.config(lam).rho}


def run_tps(cfg: ExperimentConfig, split: Split, raw: SurfaceDataset, sf: float) -> tuple[np.ndarray, dict]:
    sec = cfg.tps

    def solve(m, lam):
        return tps_inpaint(m, lam).values

    if sec.selection == "cv":
        chosen = []

        def fit_cv(m):
            lam = tps_cross_validate(m, sec.lambda_grid, sec.folds, seed=cfg.seed)
            chosen.append(lam)
            return solve(m, lam)

        recon = _per_pair(split, fit_cv, "tps")
        return recon, {"lambda_per_pair": chosen}
    masked, truth = _raw_train_subset(split, raw, sf, sec.select_pairs, dae._derived_seed(cfg.seed, 22))
    try:
        lam, scores = select_lambda(sec.lambda_grid, solve, masked, truth)
    except TpsError as exc:
        raise ExperimentError(f"tps/{split.kind}: lambda selection failed: {exc}") from exc
    recon = _per_pair(split, lambda m: solve(m, lam), "tps")
    return recon, {"lambda": lam, "selection_mse": scores}


def checkpoint_stem(out: Path, method: str, kind: str) -> Path:
    return out / "checkpoints" / f"{method}_{kind}"


def train_dae(cfg: ExperimentConfig, method: str, split: Split, sf: float, out: Path | None = None
              ) -> tuple[dae.DaeModel, list[Path]]:
    arch = cfg.dae.architecture(method)
    tcfg = cfg.dae.train_config(method, split.spec, cfg.seed)
    tr, val = dae.split_validation(split.train, tcfg.val_fraction, tcfg.seed)
    model = dae.fit(arch, tcfg, tr, val, sf)
    paths: list[Path] = []
    if out is not None:
        stem = checkpoint_stem(out, method, split.kind)
        paths.extend(model.save(stem))
        log_path = out / "logs" / f"{method}_{split.kind}.csv"
        dae.write_training_log(model, log_path)
        paths.append(log_path)
    return model, paths


def run_dae(cfg: ExperimentConfig, method: str, split: Split, sf: float, out: Path
            ) -> tuple[np.ndarray, dict, list[Path]]:
    try:
        model, paths = train_dae(cfg, method, split, sf, out)
    except Exception as exc:
        raise ExperimentError(f"{method}/{split.kind}: training failed: {exc}") from exc
    recon = dae.reconstruct_many(model, split.test_masked)
    info = {"epochs_run": len(model.history),
            "best_val_mse": float(np.nanmin([h[2] for h in model.history])) if model.history else None}
    return recon, info, paths


# ---------------------------------------------------------------------------
# the experiment
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    wall_time: dict
    artifacts: dict
    test_hashes: dict
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _rel(path: Path, root: Path) -> str:
    try:
        return str(path.relative_to(root))
    except ValueError:
        return str(path)


def run_experiment(config: ExperimentConfig, out=None) -> RunManifest:
    """Run every configured method on every masking kind and write the report.

    Writes ``report.csv``, ``manifest.json``, ``plots/*.svg`` and, for the
    autoencoders, ``checkpoints/*`` and ``logs/*`` under the output directory.
    On failure the rows finished so far are flushed to ``report.csv`` before
    the error propagates.
    """
    out = Path(out if out is not None else config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None

    t_start = time.perf_counter()
    raw = load_data(config)
    scaled = scale_to_unit(raw)
    sf = scaled.scale_factor
    rows: list[tuple[str, str, MetricsReport]] = []
    wall: dict = {}
    details: dict = {}
    artifacts: dict = {"report": "report.csv", "manifest": "manifest.json", "plots": [], "checkpoints": []}
    seeds = {"global": config.seed, "synthetic": config.synthetic_config().seed if config.data.source == "synthetic"
             else None, "masking": {}}
    test_hashes = {}
    report_path = out / "report.csv"

    try:
        for kind in config.masking.kinds:
            split = prepare_split(config, raw, scaled, kind)
            seeds["masking"][kind] = split.spec.seed
            test_hashes[kind] = split.digest
            details[kind] = {"train_pairs": len(split.train), "test_pairs": len(split.test),
                             "test_surfaces": sorted(set(int(i) for i in split.test.surface_index))}
            for method in config.methods:
                t0 = time.perf_counter()
                log.info("%s / %s: %d test pairs", method, kind, len(split.test_masked))
                if method == "tv":
                    recon, info = run_tv(config, split, raw, sf)
                elif method == "tps":
                    recon, info = run_tps(config, split, raw, sf)
                else:
                    recon, info, paths = run_dae(config, method, split, sf, out)
                    artifacts["checkpoints"].extend(_rel(p, out) for p in paths)
                if hash_pairs(split.test_masked) != split.digest:
                    raise ExperimentError(f"{method}/{kind}: masked test inputs changed during evaluation")
                rep = error_metrics(split.test_truth, recon)
                rows.append((method, kind, rep))
                wall[f"{method}/{kind}"] = round(time.perf_counter() - t0, 3)
                details[kind][method] = info
                for j in range(min(config.report.plots, len(split.test_masked))):
                    p = plot_reconstruction(
                        split.test_truth[j], split.test_masked[j], recon[j],
                        out / "plots" / f"{kind}_{method}_{j:02d}.svg",
                        raw.tenors.tenors, raw.ratings.labels,
                        title=f"{method}, {kind} masking, test pair {j}",
                    )
                    artifacts["plots"].append(_rel(p, out))
    except Exception:
        if rows:
            write_report(rows, report_path)
        raise

    write_report(rows, report_path)
    wall["total"] = round(time.perf_counter() - t_start, 3)
    manifest = RunManifest(config.hash(), seeds, wall, artifacts, test_hashes, details)
    manifest.write(out / "manifest.json")
    return manifest
