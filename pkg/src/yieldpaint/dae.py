"""Denoising autoencoders for yield surfaces.

Three input formats share one training loop:

* ``fcnn``   -- the R*T surface flattened, one overcomplete hidden layer;
* ``cnn``    -- the surface edge-padded to 16x16, one channel;
* ``cnn_pe`` -- the padded surface stacked with a rating ramp and a tenor ramp
  (channel order: surface, rating, tenor).

Masked cells enter the network as 0. The loss compares the output with the
clean target surface over the R x T cells only.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from yieldpaint.masking import CorruptionSpec, replicate_and_corrupt
from yieldpaint.neural import (
    Activation,
    Adam,
    AvgPool2x2,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool2x2,
    Network,
    Upsample2x2,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
)
from yieldpaint.surface import MaskedSurface, SurfaceDataset, YieldSurface, pad_surface

log = logging.getLogger(__name__)

KINDS = ("fcnn", "cnn", "cnn_pe")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DaeArchitecture:
    kind: str = "cnn"
    hidden: int = 256
    # encoder filters, bottleneck, decoder filters: length 2*L for L pool stages
    conv_filters: tuple[int, ...] = (16, 8, 8, 16)
    pad_to: tuple[int, int] = (16, 16)
    pooling: str = "max"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "pad_to", tuple(int(p) for p in self.pad_to))
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        f = self.conv_filters
        if self.kind != "fcnn":
            if len(f) < 2 or len(f) % 2:
                raise ValueError("conv_filters needs an even number (>= 2) of entries")
            stages = len(f) // 2
            if any(p % (2 ** stages) for p in self.pad_to):
                raise ValueError(f"pad_to {self.pad_to} is not divisible by 2^{stages}")

    @property
    def in_channels(self) -> int:
        return 3 if self.kind == "cnn_pe" else 1

    @classmethod
    def from_dict(cls, d: dict) -> DaeArchitecture:
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


def build_network(arch: DaeArchitecture, shape: tuple[int, int]) -> Network:
    r, t = shape
    if arch.kind == "fcnn":
        d = r * t
        if arch.hidden <= d:
            raise ValueError(f"FCNN hidden width {arch.hidden} must exceed input size {d} (overcomplete)")
        layers = [Dense(d, arch.hidden), Activation("relu"), BatchNorm(arch.hidden),
                  Dense(arch.hidden, d), Activation("sigmoid")]
        return Network(layers, (d,))

    h, w = arch.pad_to
    if h < r or w < t:
        raise ValueError(f"pad_to {arch.pad_to} is smaller than the grid {shape}")
    pool = MaxPool2x2 if arch.pooling == "max" else AvgPool2x2
    f = arch.conv_filters
    stages = len(f) // 2
    encoder, bottleneck, decoder = f[:stages], f[stages], f[stages + 1:]
    layers, c = [], arch.in_channels

    def block(c_in, c_out):
        return [Conv2d(c_in, c_out), Activation("relu"), BatchNorm(c_out)]

    for e in encoder:
        layers += block(c, e) + [pool()]
        c = e
    layers += block(c, bottleneck)
    c = bottleneck
    for d in decoder:
        layers += [Upsample2x2()] + block(c, d)
        c = d
    layers += [Upsample2x2(), Conv2d(c, 1), Activation("sigmoid")]
    return Network(layers, (h, w, arch.in_channels))


# ---------------------------------------------------------------------------
# input formatting
# ---------------------------------------------------------------------------


def position_embedding(r: int, t: int, padded: tuple[int, int] = (16, 16)) -> np.ndarray:
    """(H, W, 2): rating ramp i/(R-1) and tenor ramp j/(T-1), edge-extended into padding."""
    ri = np.arange(r) / max(r - 1, 1)
    ti = np.arange(t) / max(t - 1, 1)
    rating = np.repeat(ri[:, None], t, axis=1)
    tenor = np.repeat(ti[None, :], r, axis=0)
    return np.stack([pad_surface(rating, padded), pad_surface(tenor, padded)], axis=-1)


def format_inputs(values: np.ndarray, arch: DaeArchitecture) -> np.ndarray:
    """Masked (n, R, T) surfaces in scaled units -> network input batch."""
    values = np.asarray(values, dtype=np.float64)
    n, r, t = values.shape
    if arch.kind == "fcnn":
        return values.reshape(n, r * t)
    h, w = arch.pad_to
    padded = np.pad(values, ((0, 0), (0, h - r), (0, w - t)), mode="edge")[..., None]
    if arch.kind == "cnn":
        return padded
    pe = np.broadcast_to(position_embedding(r, t, arch.pad_to), (n, h, w, 2))
    return np.concatenate([padded, pe], axis=-1)


def outputs_to_surfaces(out: np.ndarray, arch: DaeArchitecture, shape: tuple[int, int]) -> np.ndarray:
    r, t = shape
    if arch.kind == "fcnn":
        return out.reshape(len(out), r, t)
    return out[:, :r, :t, 0]


def surface_grad_to_output(g: np.ndarray, arch: DaeArchitecture) -> np.ndarray:
    n, r, t = g.shape
    if arch.kind == "fcnn":
        return g.reshape(n, r * t)
    h, w = arch.pad_to
    out = np.zeros((n, h, w, 1))
    out[:, :r, :t, 0] = g
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.0
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    replicas: int = 10
    holdout: float = 0.10
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.holdout < 1.0:
            raise ValueError("holdout must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.batch_size < 2 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("need batch_size >= 2, epochs >= 1 and lr > 0")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if isinstance(kw.get("corruption"), dict):
            kw["corruption"] = CorruptionSpec(**kw["corruption"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairSet:
    """Corrupted inputs paired with clean targets, all in scaled units."""

    masked: list[MaskedSurface]
    targets: np.ndarray
    surface_index: np.ndarray

    def __len__(self) -> int:
        return len(self.masked)

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([m.values for m in self.masked]) if self.masked else np.zeros((0,) + self.targets.shape[1:])

    def subset(self, rows) -> PairSet:
        rows = np.asarray(rows, dtype=int)
        return PairSet([self.masked[i] for i in rows], self.targets[rows], self.surface_index[rows])


def _split_count(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def split_holdout(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, test) surface indices; test size is round(n * holdout)."""
    n_test = _split_count(n, holdout)
    if n_test < 1 or n_test >= n:
        raise ValueError(f"dataset of {n} surfaces is too small for holdout {holdout}")
    perm = np.random.default_rng(_derived_seed(seed, 0)).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def make_pairs(dataset: SurfaceDataset, indices: np.ndarray, spec: CorruptionSpec, k: int) -> PairSet:
    sub = SurfaceDataset(tuple(dataset.surfaces[i] for i in indices), dataset.ratings, dataset.tenors,
                         dataset.scale_factor)
    pairs = replicate_and_corrupt(sub, spec, k)
    return PairSet(
        [m for m, _ in pairs],
        np.stack([s.values for _, s in pairs]),
        np.repeat(np.asarray(indices, dtype=int), k),
    )


def build_dataset(dataset: SurfaceDataset, cfg: TrainConfig, arch: DaeArchitecture | None = None
                  ) -> tuple[PairSet, PairSet]:
    """Hold out surfaces, then replicate and corrupt each side independently.

    ``arch`` is accepted for symmetry with training; formatting for a given
    architecture is done with :func:`format_inputs` on ``PairSet.inputs``.
    """
    peak = float(dataset.stack().max())
    if abs(peak - 1.0) > 1e-9:
        raise ValueError(f"dataset must be scaled to unit max (max is {peak:.6g}); call scale_to_unit")
    train_idx, test_idx = split_holdout(len(dataset), cfg.holdout, cfg.seed)
    spec = cfg.corruption
    train = make_pairs(dataset, train_idx, spec.with_seed(_derived_seed(cfg.seed, spec.seed, 1)), cfg.replicas)
    test = make_pairs(dataset, test_idx, spec.with_seed(_derived_seed(cfg.seed, spec.seed, 2)), cfg.replicas)
    return train, test


def split_validation(pairs: PairSet, fraction: float, seed: int) -> tuple[PairSet, PairSet | None]:
    """Carve a validation set out of training pairs, by surface."""
    surfaces = np.unique(pairs.surface_index)
    n_val = _split_count(len(surfaces), fraction)
    if fraction <= 0 or n_val < 1 or n_val >= len(surfaces):
        return pairs, None
    rng = np.random.default_rng(_derived_seed(seed, 3))
    val_surfaces = set(rng.permutation(surfaces)[:n_val].tolist())
    is_val = np.array([s in val_surfaces for s in pairs.surface_index])
    return pairs.subset(np.flatnonzero(~is_val)), pairs.subset(np.flatnonzero(is_val))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class DaeModel:
    arch: DaeArchitecture
    net: Network
    scale_factor: float
    shape: tuple[int, int]
    history: list[tuple[int, float, float]] = field(default_factory=list)
    config: TrainConfig | None = None

    def save(self, path) -> tuple[Path, Path]:
        meta = {
            "architecture": asdict(self.arch),
            "scale_factor": self.scale_factor,
            "shape": list(self.shape),
            "train_config": self.config.to_dict() if self.config else None,
        }
        return save_checkpoint(self.net, path, meta)

    @classmethod
    def load(cls, path) -> DaeModel:
        net, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
        return cls(DaeArchitecture.from_dict(meta["architecture"]), net, float(meta["scale_factor"]),
                   tuple(meta["shape"]), [], cfg)


def evaluate_mse(net: Network, arch: DaeArchitecture, pairs: PairSet) -> float:
    out = net.predict(format_inputs(pairs.inputs, arch))
    pred = outputs_to_surfaces(out, arch, pairs.targets.shape[1:])
    return float(((pred - pairs.targets) ** 2).mean())


def fit(arch: DaeArchitecture, cfg: TrainConfig, train_pairs: PairSet, val_pairs: PairSet | None,
        scale_factor: float) -> DaeModel:
    """Adam on MSE against the clean targets, with early stopping on validation MSE."""
    shape = tuple(train_pairs.targets.shape[1:])
    rng = np.random.default_rng(_derived_seed(cfg.seed, 4))
    net = build_network(arch, shape).initialize(rng)
    opt = Adam(lr=cfg.lr, decay=cfg.decay)
    x_all = format_inputs(train_pairs.inputs, arch)
    y_all = train_pairs.targets
    n = len(x_all)
    bs = cfg.batch_size

    history = []
    best_val, best_state, stale = np.inf, None, 0
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            rows = perm[start:start + bs]
            if len(rows) < 2:
                continue
            try:
                out, cache = net.forward(x_all[rows], train=True)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{arch.kind}: epoch {epoch}: {exc}") from None
            loss, g = mse_loss(outputs_to_surfaces(out, arch, shape), y_all[rows])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{arch.kind}: loss became {loss} at epoch {epoch} (lr={opt.lr:g})")
            grads = net.backward(cache, surface_grad_to_output(g, arch))
            net.apply_update(opt, grads)
            net.commit_batch_stats(cache)
            total += loss * len(rows)
            count += len(rows)
        train_mse = total / max(count, 1)
        val_mse = evaluate_mse(net, arch, val_pairs) if val_pairs is not None and len(val_pairs) else float("nan")
        history.append((epoch, train_mse, val_mse))
        log.debug("%s epoch %d train %.3e val %.3e", arch.kind, epoch, train_mse, val_mse)

        if val_pairs is None or not len(val_pairs):
            continue
        if val_mse < best_val:
            best_val, stale = val_mse, 0
            best_state = [a.copy() for _, _, a in net.arrays()]
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_state is not None:
        for (i, k, _), a in zip(net.arrays(), best_state):
            setattr(net.layers[i], k, a)
        net.version += 1
    return DaeModel(arch, net, scale_factor, shape, history, cfg)


def train(dataset: SurfaceDataset, arch: DaeArchitecture, cfg: TrainConfig) -> DaeModel:
    """Split, corrupt and train on a unit-scaled dataset."""
    train_pairs, _ = build_dataset(dataset, cfg, arch)
    tr, val = split_validation(train_pairs, cfg.val_fraction, cfg.seed)
    return fit(arch, cfg, tr, val, dataset.scale_factor)


def reconstruct_many(model: DaeModel, masked: Sequence[MaskedSurface]) -> np.ndarray:
    """Reconstruct raw-unit masked surfaces; returns (n, R, T) in raw units."""
    if not masked:
        return np.zeros((0,) + tuple(model.shape))
    values = np.stack([m.values for m in masked])
    if values.shape[1:] != tuple(model.shape):
        raise ValueError(f"surface shape {values.shape[1:]} does not match model grid {tuple(model.shape)}")
    out = model.net.predict(format_inputs(values * model.scale_factor, model.arch))
    return outputs_to_surfaces(out, model.arch, model.shape) / model.scale_factor


def reconstruct(model: DaeModel, masked: MaskedSurface) -> YieldSurface:
    return YieldSurface(masked.date, reconstruct_many(model, [masked])[0])


def write_training_log(model: DaeModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_mse", "val_mse"))
        for epoch, tr, val in model.history:
            w.writerow((epoch, repr(tr), repr(val)))


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

SEARCHABLE_TRAIN = ("lr", "decay", "batch_size")
SEARCHABLE_ARCH = ("hidden", "conv_filters")


@dataclass
class Trial:
    index: int
    params: dict
    val_mse: float


def hyperparameter_search(dataset: SurfaceDataset, arch: DaeArchitecture, space: dict,
                          budget: int, cfg: TrainConfig | None = None, log_path=None
                          ) -> tuple[TrainConfig, DaeArchitecture, list[Trial]]:
    """Seeded random search; the validation split comes from training surfaces only."""
    cfg = cfg or TrainConfig()
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = {k: list(v) for k, v in space.items()}
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("empty search space")
    unknown = set(space) - set(SEARCHABLE_TRAIN) - set(SEARCHABLE_ARCH)
    if unknown:
        raise ValueError(f"unsupported search dimensions: {sorted(unknown)}")

    train_pairs, _ = build_dataset(dataset, cfg, arch)
    tr, val = split_validation(train_pairs, cfg.val_fraction or 0.1, cfg.seed)
    if val is None:
        raise ValueError("training set too small to carve a validation split")
    rng = np.random.default_rng(_derived_seed(cfg.seed, 5))
    trials = []
    best = None
    for i in range(budget):
        params = {k: v[int(rng.integers(len(v)))] for k, v in sorted(space.items())}
        t_cfg = replace(cfg, **{k: v for k, v in params.items() if k in SEARCHABLE_TRAIN})
        a_kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items() if k in SEARCHABLE_ARCH}
        t_arch = replace(arch, **a_kw)
        try:
            model = fit(t_arch, t_cfg, tr, val, dataset.scale_factor)
            score = evaluate_mse(model.net, t_arch, val)
        except TrainingDiverged as exc:
            log.warning("trial %d diverged: %s", i, exc)
            score = float("inf")
        trials.append(Trial(i, params, score))
        if best is None or score < best[0]:
            best = (score, t_cfg, t_arch)

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([asdict(t) for t in trials], indent=2, default=list) + "\n", encoding="utf-8")
    return best[1], best[2], trials
