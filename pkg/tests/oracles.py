"""Independent reference computations used by the tests.

Each oracle solves the same problem as the library by a different route:
a dense block solve for thin plate splines, a generic convex solver for TV,
and central finite differences for network gradients.
"""

import numpy as np


def tps_kkt_solve(x, y, lam):
    """Solve [[M + lam I, N], [N^T, 0]] [a; b] = [y; 0] directly."""
    x = np.asarray(x, float)
    m = len(x)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        M = np.where(d > 0, d ** 2 * np.log(d), 0.0)
    N = np.column_stack([np.ones(m), x])
    A = np.zeros((m + 3, m + 3))
    A[:m, :m] = M + lam * np.eye(m)
    A[:m, m:] = N
    A[m:, :m] = N.T
    sol = np.linalg.solve(A, np.concatenate([np.asarray(y, float), np.zeros(3)]))
    return sol[:m], sol[m:]


def tps_kkt_eval(x_knots, a, b, x):
    d = np.sqrt(((np.asarray(x)[:, None, :] - np.asarray(x_knots)[None, :, :]) ** 2).sum(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(d > 0, d ** 2 * np.log(d), 0.0)
    return G @ a + b[0] + np.asarray(x) @ b[1:]


def tv_cvxpy(values, observed, lam, variant="anisotropic"):
    """Minimize sum_obs (f - y)^2 + lam * TV(f) with cvxpy; returns (f, objective)."""
    import cvxpy as cp

    y = np.asarray(values, float)
    w = np.asarray(observed, float)
    r, t = y.shape
    f = cp.Variable((r, t))
    gr = f[1:, :] - f[:-1, :]
    gt = f[:, 1:] - f[:, :-1]
    if variant == "anisotropic":
        tv = cp.sum(cp.abs(gr)) + cp.sum(cp.abs(gt))
    else:
        # pad the missing directions with zeros so every cell contributes one norm
        zr = np.zeros((1, t))
        zc = np.zeros((r, 1))
        gr_full = cp.vstack([gr, zr])
        gt_full = cp.hstack([gt, zc])
        tv = cp.sum(cp.norm(cp.vstack([cp.vec(gr_full, order="C"), cp.vec(gt_full, order="C")]), 2, axis=0))
    obj = cp.sum(cp.multiply(w, cp.square(f - y))) + lam * tv
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return np.asarray(f.value), float(prob.value)


def numerical_grad(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = fn()
        x[idx] = old - h
        fm = fn()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
