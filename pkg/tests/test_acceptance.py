"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 6 to 8 share one end-to-end run of ``configs/default.toml``
(500 synthetic surfaces, every method, both maskings), which takes several
minutes on one core and is marked ``slow``.
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import tps_kkt_eval, tps_kkt_solve, tv_cvxpy
from test_neural import LAYER_KINDS, _make, layer_gradient_error
from yieldpaint import CorruptionSpec, MaskedSurface, SyntheticConfig, generate_synthetic, scale_to_unit
from yieldpaint.dae import TrainConfig, build_dataset
from yieldpaint.harness import ExperimentConfig, load_config, run_experiment
from yieldpaint.masking import block_mask, masked_count, uniform_mask
from yieldpaint.metrics import read_report
from yieldpaint.tps import tps_eval, tps_fit
from yieldpaint.tv import TvConfig, tv_inpaint

ROOT = Path(__file__).resolve().parents[1]
DAE = ("fcnn", "cnn", "cnn_pe")


def verdict(record, n, ok, detail):
    record(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_tps_exactness(acceptance):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_interp = worst_oracle = 0.0
    done = 0
    while done < 100:
        m = int(rng.integers(5, 101))
        x = rng.random((m, 2))
        if np.linalg.matrix_rank(np.column_stack([np.ones(m), x])) < 3:
            continue
        y = rng.normal(size=m)
        probe = np.vstack([x, rng.random((20, 2))])
        for lam in (0.0, 0.1):
            model, _ = tps_fit(x, y, lam)
            a, b = tps_kkt_solve(x, y, lam)
            ref = tps_kkt_eval(x, a, b, probe)
            worst_oracle = max(worst_oracle, np.abs(tps_eval(model, probe) - ref).max())
            if lam == 0.0:
                worst_interp = max(worst_interp, np.abs(tps_eval(model, x) - y).max())
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_interp <= 1e-6 and worst_oracle <= 1e-6 and elapsed < 10
    verdict(acceptance, 1, ok, f"max interpolation residual {worst_interp:.1e}, max oracle gap "
                               f"{worst_oracle:.1e}, {elapsed:.1f} s")


def test_criterion_02_tps_affine_reproduction(acceptance):
    rng = np.random.default_rng(2)
    worst_a = worst_b = 0.0
    for _ in range(20):
        m = int(rng.integers(5, 60))
        x = rng.random((m, 2)) * rng.uniform(0.5, 30, 2)
        coef = rng.normal(size=3)
        y = coef[0] + x @ coef[1:]
        for lam in (0.0, 0.01, 1.0, 100.0):
            model, _ = tps_fit(x, y, lam)
            worst_a = max(worst_a, np.abs(model.a).max())
            worst_b = max(worst_b, np.abs(model.b - coef).max())
    ok = worst_a <= 1e-8 and worst_b <= 1e-8
    verdict(acceptance, 2, ok, f"max |a| {worst_a:.1e}, max coefficient error {worst_b:.1e}")


def _masked(values, observed):
    return MaskedSurface(np.where(observed, values, 0.0), observed)


def test_criterion_03_tv_sanity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)

    fixed = 0.0
    for seed in range(10):
        obs = rng.random((13, 15)) < rng.uniform(0.02, 0.9)
        obs[rng.integers(13), rng.integers(15)] = True
        res = tv_inpaint(_masked(np.full((13, 15), 0.045), obs), TvConfig(lam=10.0 ** -rng.integers(2, 7)))
        fixed = max(fixed, np.abs(res.surface - 0.045).max())

    equiv = 0.0
    cfg = TvConfig(lam=1e-3, rho=0.05, tol=1e-10, max_iters=20000)
    for seed in range(3):
        y = 0.02 + 0.04 * rng.random((6, 7))
        obs = rng.random((6, 7)) < 0.6
        base = tv_inpaint(_masked(y, obs), cfg).surface
        shifted = tv_inpaint(_masked(y + 0.013, obs), cfg).surface
        equiv = max(equiv, np.abs(shifted - base - 0.013).max())

    rise = 0.0
    for seed in range(5):
        y = 0.02 + 0.03 * rng.random((13, 15))
        res = tv_inpaint(_masked(y, rng.random((13, 15)) < 0.25), TvConfig(lam=1e-4, rho=0.03))
        rise = max(rise, float(np.diff(res.history).max(initial=0.0)))

    y = 0.02 + 0.04 * rng.random((3, 3))
    gap, n_masks = 0.0, 0
    sweep_cfg = TvConfig(lam=1e-3, rho=0.03, tol=1e-9, max_iters=20000)
    for bits in itertools.product((False, True), repeat=9):
        obs = np.array(bits).reshape(3, 3)
        if not obs.any():
            continue  # a surface needs at least one observed cell
        n_masks += 1
        res = tv_inpaint(_masked(y, obs), sweep_cfg)
        _, ref = tv_cvxpy(y, obs, 1e-3)
        gap = max(gap, abs(res.objective - ref))
    elapsed = time.perf_counter() - t0

    ok = fixed <= 1e-6 and equiv <= 1e-6 and rise <= 1e-10 and gap <= 1e-3 and n_masks == 511 and elapsed < 30
    verdict(acceptance, 3, ok, f"fixed point {fixed:.1e}, translation {equiv:.1e}, max objective rise "
                               f"{rise:.1e}, 3x3 sweep ({n_masks} masks) gap {gap:.1e}, {elapsed:.1f} s")


def test_criterion_04_gradients(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for kind in LAYER_KINDS:
        rng = np.random.default_rng(100 + LAYER_KINDS.index(kind))
        worst[kind] = max(layer_gradient_error(*_make(kind, rng), rng) for _ in range(20))
    elapsed = time.perf_counter() - t0
    kind = max(worst, key=worst.get)
    ok = worst[kind] <= 1e-5 and elapsed < 60
    verdict(acceptance, 4, ok, f"{len(worst)} layer kinds x 20, worst {kind} {worst[kind]:.1e}, {elapsed:.1f} s")


def test_criterion_05_masking_laws(acceptance):
    t0 = time.perf_counter()
    bad = []
    for k in range(1, 10):
        nu = k / 10
        want = masked_count(nu, 195)
        for seed in range(200):
            obs = uniform_mask((13, 15), nu, np.random.default_rng(seed))
            if (~obs).sum() != want:
                bad.append(("uniform", nu, seed))
    n75 = (~uniform_mask((13, 15), 0.75, np.random.default_rng(0))).sum()
    for rows, cols in itertools.product(range(1, 14), range(1, 16)):
        for nu_inside in (0.0, 0.25, 0.5, 0.75, 0.9):
            for seed in range(3):
                obs = block_mask((13, 15), rows, cols, nu_inside, np.random.default_rng(seed))
                if obs[rows:, :].any() or obs[:, cols:].any():
                    bad.append(("block", rows, cols, nu_inside, seed))
    elapsed = time.perf_counter() - t0
    ok = not bad and n75 == 146 and elapsed < 5
    verdict(acceptance, 5, ok, f"nu=0.75 masks {n75} cells, {len(bad)} violations, {elapsed:.1f} s")


def test_criterion_09_pipeline_counts(acceptance):
    scaled = scale_to_unit(generate_synthetic(SyntheticConfig(seed=5), 63))
    cfg = TrainConfig(corruption=CorruptionSpec.uniform(0.75, seed=1), replicas=10, holdout=0.10)
    train, test = build_dataset(scaled, cfg)
    overlap = set(train.surface_index) & set(test.surface_index)
    ok = len(train) == 570 and len(test) == 60 and not overlap
    verdict(acceptance, 9, ok, f"{len(train)} train pairs, {len(test)} test pairs, {len(overlap)} shared surfaces")


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = load_config(ROOT / "configs" / "default.toml", env={})
    out = tmp_path_factory.mktemp("default_run")
    t0 = time.perf_counter()
    run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    rows = {(r["method"], r["masking"]): r for r in read_report(out / "report.csv")}
    return rows, elapsed


@pytest.mark.slow
def test_criterion_06_block_ordering(acceptance, default_run):
    rows, elapsed = default_run
    rmse = {m: rows[(m, "block")]["rmse_bps"] for m in ("tv", "tps") + DAE}
    worst_dae = max(rmse[m] for m in DAE)
    ok = worst_dae < rmse["tps"] < rmse["tv"] and elapsed < 600
    detail = ", ".join(f"{m} {v:.1f}" for m, v in rmse.items())
    verdict(acceptance, 6, ok, f"block RMSE (bps) {detail}; full run {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_07_position_embedding_monotonicity(acceptance, default_run):
    rows, _ = default_run
    pairs = {k: (rows[("cnn_pe", k)]["mono_violation_pct"], rows[("cnn", k)]["mono_violation_pct"])
             for k in ("uniform", "block")}
    ok = all(pe <= cnn for pe, cnn in pairs.values())
    detail = ", ".join(f"{k} cnn_pe {pe:.2f}% vs cnn {cnn:.2f}%" for k, (pe, cnn) in pairs.items())
    verdict(acceptance, 7, ok, f"monotonicity violations: {detail}")


@pytest.mark.slow
def test_criterion_08_block_is_harder(acceptance, default_run):
    rows, _ = default_run
    gaps = {m: (rows[(m, "uniform")]["mae_bps"], rows[(m, "block")]["mae_bps"]) for m in ("tv", "tps") + DAE}
    ok = all(b >= u for u, b in gaps.values())
    detail = ", ".join(f"{m} {u:.1f}/{b:.1f}" for m, (u, b) in gaps.items())
    verdict(acceptance, 8, ok, f"MAE uniform/block (bps): {detail}")


REPRO = {
    "data": {"n": 60},
    "tps": {"select_pairs": 5},
    "tv": {"select_pairs": 5},
    "dae": {"epochs": 2, "replicas": 4},
    "report": {"plots": 1},
}


@pytest.mark.slow
def test_criterion_10_reproducibility(acceptance, tmp_path):
    cfg = ExperimentConfig.from_dict(REPRO)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "report.csv").read_bytes()
    b = (tmp_path / "b" / "report.csv").read_bytes()
    n_rows = len(a.splitlines()) - 1
    verdict(acceptance, 10, a == b, f"report.csv byte-identical across two runs: {a == b} ({n_rows} rows, "
                                    f"all methods, 60 surfaces)")
