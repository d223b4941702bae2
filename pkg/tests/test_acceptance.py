"""Acceptance criteria 1-10, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are also
printed when capture is on) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import chord_through_grid, dense_row, disk_chord, disk_image, fd_gradient, ista, smoothed_tv  # noqa: E402
from sdrct.baseline import ossirt_reconstruct, sirt_reconstruct, tv_gradient, tvart_reconstruct  # noqa: E402
from sdrct.core import GridGeometry, ReconConfig  # noqa: E402
from sdrct.degrade import BlankEdgeModel, add_gaussian_noise, apply_blank_edges  # noqa: E402
from sdrct.experiment import make_phantom, project_volume  # noqa: E402
from sdrct.metrics import RoiSpec, cnr, nrss, snr_db, ssim_global  # noqa: E402
from sdrct.projector import (back_project, build_system_matrix, estimate_system_matrix_bytes,  # noqa: E402
                             forward_project, simulate_projection)
from sdrct.sdr import fuse_slices, lasso_cd, sdr_reconstruct  # noqa: E402


def report(capsys, n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok


# ---------------------------------------------------------------------------


def check_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_adj, worst_sum, worst_row = 0.0, 0.0, 0.0
    for L in (16, 32):
        g = GridGeometry(L, 30, 1)
        W = build_system_matrix(g)
        for _ in range(100):
            f = rng.normal(size=(L, L))
            p = rng.normal(size=W.shape[0])
            err = abs(forward_project(W, f)[0] @ p - np.sum(f * back_project(W, p)))
            worst_adj = max(worst_adj, err / (np.linalg.norm(f) * np.linalg.norm(p)))
        sums = np.asarray(W.csr.sum(axis=1)).ravel()
        dense = W.csr.toarray() if L == 16 else None
        for a, theta in enumerate(g.angles):
            for d, t in enumerate(g.detector_offsets()):
                i = a * g.detector_count + d
                worst_sum = max(worst_sum, abs(sums[i] - chord_through_grid(L, theta, t)))
                if dense is not None:
                    worst_row = max(worst_row, np.max(np.abs(dense[i] - dense_row(L, theta, t))))
    dt = time.perf_counter() - t0
    ok = worst_adj < 1e-12 and worst_sum < 1e-9 and worst_row < 1e-9 and dt < 10
    return ok, (f"adjoint rel err {worst_adj:.1e}, row-sum err {worst_sum:.1e}, "
                f"per-pixel err {worst_row:.1e}, {dt:.1f} s")


def check_2():
    t0 = time.perf_counter()
    L, r, mu = 64, 20.0, 1.0
    img = disk_image(L, r, mu)
    t = np.arange(L) - (L - 1) / 2
    inner = np.abs(t) < 0.9 * r
    worst = 0.0
    for angle in np.linspace(0, np.pi, 12, endpoint=False):
        p = simulate_projection(img, angle, step=0.5)
        ref = disk_chord(r, t[inner], mu)
        worst = max(worst, np.sqrt(np.mean((p[inner] - ref) ** 2)) / np.sqrt(np.mean(ref**2)))
    dt = time.perf_counter() - t0
    return worst < 0.02 and dt < 5, f"worst relative RMS {worst:.2%} over 12 angles, {dt:.2f} s"


def check_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = ReconConfig(lasso_tolerance=1e-11, lasso_max_sweeps=500_000)
    lams = [0.0, 0.01, 0.1, 1.0]
    worst_diff, worst_kkt = 0.0, 0.0
    for i in range(20):
        lam = lams[i % 4]
        while True:
            W = build_system_matrix(GridGeometry(8, int(rng.integers(9, 20)), 1))
            A = W.csr.toarray()
            if lam > 0 or np.linalg.matrix_rank(A) == 64:  # unique minimiser
                break
        x = rng.normal(size=64) * (rng.random(64) < 0.3)
        b = A @ x + 0.1 * rng.normal(size=A.shape[0])
        est = lasso_cd(W, b, np.ones(A.shape[0], bool), lam, cfg)
        worst_diff = max(worst_diff, np.max(np.abs(est.image.ravel() - ista(A, b, lam, A.shape[0]))))
        worst_kkt = max(worst_kkt, est.kkt / (10 * cfg.lasso_tolerance))
    dt = time.perf_counter() - t0
    ok = worst_diff < 1e-6 and worst_kkt <= 1 and dt < 30
    return ok, f"max |cd - ista| {worst_diff:.1e}, KKT {worst_kkt:.2f} of bound, {dt:.1f} s"


def check_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    eps = 1e-8
    worst = 0.0
    for _ in range(20):
        f = rng.normal(size=(16, 16))
        fd = fd_gradient(lambda x: smoothed_tv(x, eps), f)
        worst = max(worst, np.max(np.abs(tv_gradient(f, eps, "symmetric") - fd)))
    dt = time.perf_counter() - t0
    return worst < 1e-4 and dt < 5, f"max abs diff {worst:.1e}, {dt:.2f} s"


def check_5():
    t0 = time.perf_counter()
    truth = make_phantom(16)
    sino = project_volume(truth, 20)
    sino = add_gaussian_noise(apply_blank_edges(sino, BlankEdgeModel(1), seed=5), 0.5, seed=6)
    W = build_system_matrix(sino.geometry.with_slices(1))
    cfg = ReconConfig(lambda2=0.0, fusion=False, convergence_threshold=0.0)
    vol = sdr_reconstruct(sino, W, cfg).volume
    ref = np.stack([tvart_reconstruct(W, *sino.slice_rays(l), cfg) for l in range(16)])
    d_tv = float(np.max(np.abs(vol - ref)))
    d_sirt = 0.0
    for l in range(16):
        p, v = sino.slice_rays(l)
        a = ossirt_reconstruct(W, p, v, cfg, subsets=1)
        b = sirt_reconstruct(W, p, v, cfg.max_outer_iterations)
        d_sirt = max(d_sirt, float(np.max(np.abs(a - b))))
    dt = time.perf_counter() - t0
    ok = d_tv < 1e-10 and d_sirt < 1e-10 and dt < 60
    return ok, f"SDR vs TVART {d_tv:.1e}, OSSIRT(1) vs SIRT {d_sirt:.1e}, {dt:.1f} s"


def _table(results):
    return {name: {r.method: r for r in res.reports} for name, (_, res) in results.items()}


def check_6(results):
    tab = _table(results)
    high = tab["highnoise-64"]
    sdr = high["sdr"]
    margins = {m: sdr.snr_db - high[m].snr_db for m in ("tvart", "fbp", "ossirt")}
    ok_a = all(v >= 2.0 for v in margins.values())
    ok_a &= all(sdr.ssim >= high[m].ssim for m in ("tvart", "fbp", "ossirt"))
    ok_b = True
    parts = []
    for name in ("noiseless-64", "lownoise-64"):
        t = tab[name]
        ok_b &= t["sdr"].ssim >= t["tvart"].ssim >= t["fbp"].ssim - 0.02
        parts.append(f"{name.split('-')[0]} SSIM sdr/tvart/fbp "
                     f"{t['sdr'].ssim:.4f}/{t['tvart'].ssim:.4f}/{t['fbp'].ssim:.4f}")
    detail = ("high-noise SNR margins " + ", ".join(f"{m} +{v:.2f} dB" for m, v in margins.items())
              + f", SSIM sdr {sdr.ssim:.4f} vs best baseline "
              + f"{max(high[m].ssim for m in ('tvart', 'fbp', 'ossirt')):.4f}; " + "; ".join(parts))
    return ok_a and ok_b, detail


def check_7(results):
    limits = {"noiseless-64": 0.005, "lownoise-64": 0.03, "highnoise-64": 0.08}
    ok, parts = True, []
    for name, limit in limits.items():
        run = {r.method: r for r in results[name][1].runs}["sdr"]
        tr = run.trace
        monotone = all(tr[k + 1] <= 1.1 * tr[k] for k in range(4, len(tr) - 1))
        good = len(tr) == 20 and tr[-1] <= limit and monotone and all(map(math.isfinite, tr))
        ok &= good
        parts.append(f"{name.split('-')[0]} {tr[-1]:.4f} (<= {limit}, monotone {monotone})")
    return ok, "change at iteration 20: " + ", ".join(parts)


def check_8():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    f = rng.normal(size=(8, 8))
    results = [
        snr_db(np.full_like(f, f.mean()), f) == 0.0,
        ssim_global(f, f) == 1.0,
        cnr(np.array([2, 2, 4, 4, 0, 0, 2, 2.0]),
            RoiSpec(np.arange(8) < 4, np.arange(8) >= 4)) == 2 / math.sqrt(2),
        nrss(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2.0,
    ]
    dt = time.perf_counter() - t0
    return all(results) and dt < 1, f"snr/ssim/cnr/nrss exact: {results}, {dt * 1000:.1f} ms"


def check_9():
    rng = np.random.default_rng(9)
    worst = 0.0
    positions = set()
    for i in range(100):
        vol = rng.normal(size=(3, 8, 8))
        diffs = [vol[1] - vol[0], vol[2] - vol[1]]
        l = i % 3
        positions.add(l)
        worst = max(worst, float(np.max(np.abs(fuse_slices(list(vol), diffs, l) - vol[l]))))
    return worst < 1e-12 and positions == {0, 1, 2}, f"max abs diff {worst:.1e} over 100 triples"


def check_10(tmp_path):
    from sdrct.cli import main

    config = Path(__file__).resolve().parents[1] / "src" / "sdrct" / "configs" / "highnoise-64.json"
    outs = []
    for k in range(2):
        out = Path(tmp_path) / f"run{k}"
        rc = main(["experiment", "--config", str(config), "--output-dir", str(out), "--no-figures"])
        outs.append((rc, out))
    same = all(rc == 0 for rc, _ in outs) and all(
        (outs[0][1] / n).read_bytes() == (outs[1][1] / n).read_bytes() for n in ("table.csv", "traces.csv"))
    est = estimate_system_matrix_bytes(GridGeometry(512, 180, 1))
    return same and est < 2.0e9, f"CSV byte-identical {same}; L=512/180 estimate {est / 1e9:.3f} GB"


# ---------------------------------------------------------------------------


def test_criterion_01_projector(capsys):
    ok, detail = check_1()
    assert report(capsys, 1, ok, detail), detail


def test_criterion_02_analytic_projection(capsys):
    ok, detail = check_2()
    assert report(capsys, 2, ok, detail), detail


def test_criterion_03_lasso(capsys):
    ok, detail = check_3()
    assert report(capsys, 3, ok, detail), detail


def test_criterion_04_tv_gradient(capsys):
    ok, detail = check_4()
    assert report(capsys, 4, ok, detail), detail


def test_criterion_05_degeneracy(capsys):
    ok, detail = check_5()
    assert report(capsys, 5, ok, detail), detail


def test_criterion_06_method_ordering(capsys, desk_results):
    ok, detail = check_6(desk_results)
    assert report(capsys, 6, ok, detail), detail


def test_criterion_07_convergence(capsys, desk_results):
    ok, detail = check_7(desk_results)
    assert report(capsys, 7, ok, detail), detail


def test_criterion_08_metrics(capsys):
    ok, detail = check_8()
    assert report(capsys, 8, ok, detail), detail


def test_criterion_09_fusion(capsys):
    ok, detail = check_9()
    assert report(capsys, 9, ok, detail), detail


def test_criterion_10_determinism_memory(capsys, tmp_path):
    ok, detail = check_10(tmp_path)
    assert report(capsys, 10, ok, detail), detail


if __name__ == "__main__":
    import tempfile

    from conftest import CONFIG_DIR, DESK_SCENARIOS
    from sdrct.experiment import load_scenario, run_scenario

    desk = {n: (load_scenario(CONFIG_DIR / f"{n}.json"),) for n in DESK_SCENARIOS}
    desk = {n: (sc[0], run_scenario(sc[0])) for n, sc in desk.items()}
    with tempfile.TemporaryDirectory() as tmp:
        checks = [check_1, check_2, check_3, check_4, check_5, lambda: check_6(desk),
                  lambda: check_7(desk), check_8, check_9, lambda: check_10(tmp)]
        passed = [report(None, k + 1, *c()) for k, c in enumerate(checks)]
    sys.exit(0 if all(passed) else 1)
