"""Thin plate spline smoothing in two dimensions.

The fitted surface is

    f(x) = sum_i a_i * u(|x - X_i|) + b0 + b1*x1 + b2*x2,   u(r) = r^2 log r

with the side condition N^T a = 0, where N has rows [1, X_i]. For smoothing
weight ``lam`` the kernel matrix M is replaced by K = M + lam*I and the
system is solved in two steps:

    b = (N^T K^-1 N)^-1 N^T K^-1 Y
    a = K^-1 (Y - N b)

lam = 0 gives exact interpolation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from yieldpaint.surface import MaskedSurface, YieldSurface

log = logging.getLogger(__name__)


class TpsError(ValueError):
    pass


def tps_kernel(r):
    """r^2 log r, with the limit value 0 at r = 0."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out if out.ndim else float(out)


def kernel_matrix(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    d = np.sqrt(((x[:, None, :] - knots[None, :, :]) ** 2).sum(-1))
    return tps_kernel(d)


def affine_matrix(x: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((len(x), 1)), x])


@dataclass(frozen=True)
class TpsModel:
    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lam: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return tps_eval(self, x)

    def to_json(self) -> str:
        return json.dumps({
            "knots": self.knots.tolist(), "a": self.a.tolist(),
            "b": self.b.tolist(), "lambda": self.lam,
        })

    @classmethod
    def from_json(cls, s: str) -> TpsModel:
        d = json.loads(s)
        return cls(np.array(d["knots"], dtype=float).reshape(-1, 2), np.array(d["a"], dtype=float),
                   np.array(d["b"], dtype=float), float(d["lambda"]))


@dataclass(frozen=True)
class TpsFitReport:
    residual_norm: float
    condition: float
    lam: float


def _check_knots(x: np.ndarray) -> None:
    m = len(x)
    if m < 3:
        raise TpsError(f"need at least 3 points for a thin plate spline, got {m}")
    _, counts = np.unique(np.round(x, 12), axis=0, return_counts=True)
    if np.any(counts > 1):
        raise TpsError("duplicate knot locations")
    if np.linalg.matrix_rank(affine_matrix(x), tol=1e-10) < 3:
        raise TpsError("knots are collinear; the affine part is not identifiable")


def tps_fit(points, values, lam: float = 0.0) -> tuple[TpsModel, TpsFitReport]:
    """Fit a thin plate spline to ``values`` at 2-D ``points``."""
    x = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(values, dtype=np.float64).ravel()
    if len(y) != len(x):
        raise ValueError(f"{len(x)} points but {len(y)} values")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _check_knots(x)

    K = kernel_matrix(x, x) + lam * np.eye(len(x))
    N = affine_matrix(x)
    cond = float(np.linalg.cond(K))
    try:
        lu = sla.lu_factor(K, check_finite=True)
        if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0:
            raise np.linalg.LinAlgError("singular kernel matrix")
        KiN = sla.lu_solve(lu, N)
        KiY = sla.lu_solve(lu, y)
        b = np.linalg.solve(N.T @ KiN, N.T @ KiY)
        a = sla.lu_solve(lu, y - N @ b)
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        # The two-step formulas need K invertible; the bordered system only
        # needs K positive definite on null(N^T).
        log.debug("two-step TPS solve failed (%s); using bordered system", exc)
        m = len(x)
        A = np.zeros((m + 3, m + 3))
        A[:m, :m], A[:m, m:], A[m:, :m] = K, N, N.T
        try:
            sol = np.linalg.solve(A, np.concatenate([y, np.zeros(3)]))
        except np.linalg.LinAlgError:
            raise TpsError(f"TPS system is singular (kernel condition number {cond:.3g})") from None
        a, b = sol[:m], sol[m:]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise TpsError(f"TPS solve produced non-finite coefficients (condition {cond:.3g})")

    model = TpsModel(x.copy(), a, b, float(lam))
    resid = float(np.linalg.norm(tps_eval(model, x) - y))
    return model, TpsFitReport(resid, cond, float(lam))


def tps_eval(model: TpsModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    out = kernel_matrix(x, model.knots) @ model.a + affine_matrix(x) @ model.b
    return float(out[0]) if single else out


def grid_coordinates(shape: tuple[int, int]) -> np.ndarray:
    """Normalized (rating, tenor) coordinates in [0, 1]^2 for every cell, row-major."""
    r, t = shape
    ri = np.arange(r) / max(r - 1, 1)
    ti = np.arange(t) / max(t - 1, 1)
    rr, tt = np.meshgrid(ri, ti, indexing="ij")
    return np.column_stack([rr.ravel(), tt.ravel()])


def tps_inpaint(masked: MaskedSurface, lam: float = 0.0) -> YieldSurface:
    coords = grid_coordinates(masked.shape)
    obs = masked.observed.ravel()
    try:
        model, _ = tps_fit(coords[obs], masked.values.ravel()[obs], lam)
    except TpsError as exc:
        raise TpsError(f"{exc}; fall back to another method (e.g. TV) for this surface") from None
    filled = tps_eval(model, coords).reshape(masked.shape)
    # TPS is unconstrained; surfaces must stay non-negative.
    return YieldSurface(masked.date, np.maximum(filled, 0.0))


def _fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    ids = np.arange(n) % folds
    return np.random.default_rng(seed).permutation(ids)


def tps_cross_validate(masked: MaskedSurface, lambda_grid, folds: int = 5, seed: int = 0) -> float:
    """Pick the grid lambda with lowest mean held-out squared error.

    Ties (within floating noise) go to the larger lambda.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if len(grid) == 1:
        return grid[0]
    coords = grid_coordinates(masked.shape)
    obs = masked.observed.ravel()
    x, y = coords[obs], masked.values.ravel()[obs]
    if folds < 2 or folds > len(x):
        raise ValueError(f"cannot split {len(x)} observations into {folds} folds")
    ids = _fold_ids(len(x), folds, seed)
    for f in range(folds):
        try:
            _check_knots(x[ids != f])
        except TpsError as exc:
            raise ValueError(f"fold {f} is infeasible: {exc}") from None

    scores = []
    for lam in grid:
        fold_mse = []
        for f in range(folds):
            tr, te = ids != f, ids == f
            model, _ = tps_fit(x[tr], y[tr], lam)
            fold_mse.append(float(((tps_eval(model, x[te]) - y[te]) ** 2).mean()))
        scores.append(np.mean(fold_mse))
    scores = np.array(scores)
    best = scores.min()
    tied = np.isclose(scores, best, rtol=1e-9, atol=1e-20)
    return max(lam for lam, t in zip(grid, tied) if t)
