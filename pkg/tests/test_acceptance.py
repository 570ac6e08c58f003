"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion.  The weighted desk run over the synthetic digit dataset is
executed once (session fixture) and shared by the criteria that inspect it.
"""

import csv
import math
import struct
import time

import numpy as np
import pytest
from PIL import Image

from wspoints.dataio import filter_by_label, load_idx, load_idx_labels, load_matrix, save_matrix
from wspoints.energy import DiscreteMeasure, energy_distance, mc_weighted
from wspoints.geometry import CandidateSet, ReferenceSet, build_cache, epsilon_scale
from wspoints.imaging import ImageLayout, clip_and_round_pixels, render_grid
from wspoints.measures import (
    RandomMeasureParams,
    calibrate_concentration,
    draw_symmetric_dirichlet,
    estimate_centering_gap,
)
from wspoints.optimizer import OptimizerOptions, run_ccp, run_ccp_weighted

from conftest import DESK_RUNS, read_manifest
from oracles import grid_weighted_geometric_median, naive_mc_weighted


def _report(tag, text):
    print(f"[{tag}] {text}: PASS")


def test_c01_cache_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    for _ in range(100):
        d = rng.integers(1, 9)
        n = rng.integers(1, 11)
        N = rng.integers(1, 51)
        A = CandidateSet(rng.standard_normal((d, n)))
        ref = ReferenceSet(rng.standard_normal((d, N)))
        w = rng.dirichlet(np.ones(N))
        cache = build_cache(A, ref, w)
        fast = mc_weighted(cache, int(n))
        slow = naive_mc_weighted(A.points, ref.data, w, cache.epsilon)
        assert fast == pytest.approx(slow, rel=1e-10, abs=1e-12)
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0
    _report("C1", f"cache vs naive oracle on 100 instances ({elapsed:.2f}s)")


def test_c02_ccp_descent(desk_run):
    started = time.perf_counter()
    rng = np.random.default_rng(202)
    for trial in range(50):
        d = int(rng.integers(1, 4))
        N = int(rng.integers(2, 101))
        n = int(rng.integers(1, 11))
        ref = ReferenceSet(rng.standard_normal((d, N)) * float(rng.uniform(0.5, 4.0)))
        _, trace = run_ccp(ref, n, OptimizerOptions(seed=trial, max_iter=200))
        costs = np.asarray(trace.costs)
        assert np.all(costs[1:] <= costs[:-1] + 1e-9)
    elapsed = time.perf_counter() - started

    for path in desk_run["traces"]:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        costs = np.array([float(row["cost"]) for row in rows])
        assert np.all(costs[1:] <= costs[:-1] + 1e-9)
    assert elapsed < 60.0
    _report("C2", f"descent on 50 random instances + {DESK_RUNS} desk traces ({elapsed:.2f}s)")


def test_c03_geometric_median_reduction():
    started = time.perf_counter()
    rng = np.random.default_rng(303)
    for trial in range(20):
        P = rng.uniform(-1.0, 1.0, size=(2, 10))
        w = rng.dirichlet(np.ones(10))
        ref = ReferenceSet(P)
        options = OptimizerOptions(tol=1e-12, max_iter=5000, seed=trial)
        A, _ = run_ccp_weighted(ref, 1, w, options)
        oracle = grid_weighted_geometric_median(P, w)
        assert np.linalg.norm(A.points[:, 0] - oracle) <= 1e-4
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _report("C3", f"n=1 run matches grid geometric-median oracle, 20 instances ({elapsed:.2f}s)")


def test_c04_dirichlet_calibration():
    started = time.perf_counter()
    n0, target_cv, draws = 100, 0.4, 20_000
    kappa, alpha = calibrate_concentration(n0, target_cv)
    rng = np.random.default_rng(404)
    samples = np.empty((draws, n0))
    for t in range(draws):
        samples[t] = draw_symmetric_dirichlet(n0, alpha, rng)

    empirical_cv = samples.std(ddof=1) / samples.mean()
    assert 0.38 <= empirical_cv <= 0.42

    first = samples[:, 0]
    se_mean = first.std(ddof=1) / math.sqrt(draws)
    assert abs(first.mean() - 1.0 / n0) <= 3.0 * se_mean

    theory_var = (n0 - 1) / (n0**2 * (kappa + 1.0))
    var_hat = first.var(ddof=1)
    centered = (first - first.mean()) ** 2
    se_var = centered.std(ddof=1) / math.sqrt(draws)
    assert abs(var_hat - theory_var) <= 3.0 * se_var
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _report("C4", f"CV calibration moments at N0=100, CV=0.4 ({elapsed:.2f}s)")


def test_c05_centering():
    started = time.perf_counter()
    rng = np.random.default_rng(505)
    ref = ReferenceSet(rng.standard_normal((5, 50)))
    events = []
    for _ in range(40):
        axis = int(rng.integers(5))
        q = float(rng.uniform(0.1, 0.9))
        events.append((axis, float(np.quantile(ref.data[axis], q))))
    reports = estimate_centering_gap(
        ref, RandomMeasureParams(cv=0.4), 20_000, events, np.random.default_rng(506)
    )
    within = sum(1 for r in reports if abs(r.z_score) < 3.0)
    assert within >= math.ceil(0.95 * len(reports))
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    _report("C5", f"centering: |z|<3 for {within}/40 half-space events ({elapsed:.2f}s)")


def test_c06_mnist_desk_protocol(digit_dataset, desk_run):
    assert desk_run["exit_code"] == 0

    images, layout = load_idx(digit_dataset["images_path"])
    labels = load_idx_labels(digit_dataset["labels_path"])
    subset = filter_by_label(images, labels, {6, 9})
    assert subset.d == 784
    assert subset.n_atoms == 2000

    lo = subset.data.min(axis=1)
    hi = subset.data.max(axis=1)
    slack = 1e-6 * float(np.linalg.norm(hi - lo))

    for out_path, manifest_path in zip(desk_run["run_outs"], desk_run["manifests"]):
        manifest = read_manifest(manifest_path)
        assert manifest["stop_reason"] == "converged"
        assert int(manifest["iterations"]) <= 1000
        assert manifest["opt.tol"] == "1e-05"
        points = load_matrix(out_path).data
        assert points.shape == (784, 10)
        assert np.all(points >= (lo - slack)[:, None])
        assert np.all(points <= (hi + slack)[:, None])

    assert desk_run["render"].exists()
    with Image.open(desk_run["render"]) as grid:
        assert grid.size == (10 * 28 + 9 * 2, DESK_RUNS * 28 + (DESK_RUNS - 1) * 2)

    assert desk_run["elapsed_s"] <= 300.0
    _report(
        "C6",
        f"desk protocol: {DESK_RUNS} runs converged, in-box, grid rendered "
        f"({desk_run['elapsed_s']:.1f}s)",
    )


def test_c07_diversity_across_runs(desk_run):
    points = [load_matrix(path).data for path in desk_run["run_outs"]]

    def directed_hausdorff(a, b):
        d2 = (a * a).sum(0)[:, None] + (b * b).sum(0)[None, :] - 2.0 * a.T @ b
        return float(np.sqrt(np.maximum(d2, 0.0).min(axis=1)).max())

    worst = math.inf
    for i in range(len(points)):
        for j in range(len(points)):
            if i != j:
                worst = min(worst, directed_hausdorff(points[i], points[j]))
    assert worst > 1.0

    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            assert not np.array_equal(points[i], points[j])
    _report("C7", f"run diversity: min directed Hausdorff {worst:.1f} > 1.0, all runs distinct")


def test_c08_uniform_weight_reduction():
    started = time.perf_counter()
    rng = np.random.default_rng(808)
    for trial in range(10):
        d = int(rng.integers(1, 5))
        N = int(rng.integers(2, 40))
        n = int(rng.integers(1, 7))
        ref = ReferenceSet(rng.standard_normal((d, N)))
        a_plain, t_plain = run_ccp(ref, n, OptimizerOptions(seed=trial, max_iter=100))
        a_weighted, t_weighted = run_ccp_weighted(
            ref, n, np.full(N, 1.0 / N), OptimizerOptions(seed=trial, max_iter=100)
        )
        assert np.array_equal(a_plain.points, a_weighted.points)
        assert t_plain.costs == t_weighted.costs
        assert t_plain.stop_reason == t_weighted.stop_reason
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    _report("C8", f"uniform-weight run reproduces plain run bitwise, 10 instances ({elapsed:.2f}s)")


def test_c09_metric_axioms():
    started = time.perf_counter()
    rng = np.random.default_rng(909)
    for _ in range(50):
        d = int(rng.integers(1, 5))
        kf = int(rng.integers(1, 7))
        kg = int(rng.integers(1, 7))
        f = DiscreteMeasure(rng.standard_normal((d, kf)), rng.dirichlet(np.ones(kf)))
        g = DiscreteMeasure(rng.standard_normal((d, kg)), rng.dirichlet(np.ones(kg)))
        ab = energy_distance(f, g)
        ba = energy_distance(g, f)
        assert ab == pytest.approx(ba, rel=1e-12, abs=1e-12)
        assert ab >= 0.0
        eps = epsilon_scale(np.concatenate([f.atoms, f.atoms], axis=1))
        assert energy_distance(f, f) <= 3.0 * eps

    point_a = DiscreteMeasure([[0.0]])
    point_b = DiscreteMeasure([[1.0]])
    assert abs(energy_distance(point_a, point_b) - 2.0) <= 1e-12
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0
    _report("C9", f"energy-distance axioms on 50 random measures ({elapsed:.2f}s)")


def test_c10_format_round_trips(tmp_path):
    rng = np.random.default_rng(1010)

    matrix = rng.standard_normal((9, 17))
    wspm = tmp_path / "m.wspm"
    save_matrix(matrix, wspm)
    assert np.array_equal(load_matrix(wspm).data, matrix)

    raw = clip_and_round_pixels(CandidateSet(rng.uniform(-30, 290, size=(8 * 7, 6))))
    png = tmp_path / "grid.png"
    render_grid(raw, ImageLayout(8, 7), 3, png)
    with Image.open(png) as image:
        canvas = np.asarray(image, dtype=np.float64)
    for i in range(6):
        r, c = divmod(i, 3)
        tile = canvas[r * 10 : r * 10 + 8, c * 9 : c * 9 + 7]
        assert np.array_equal(tile.reshape(-1), raw.points[:, i])

    golden = tmp_path / "golden.idx"
    golden.write_bytes(struct.pack(">IIII", 0x00000803, 1, 1, 1) + b"\xff")
    ref, layout = load_idx(golden)
    assert ref.data.tolist() == [[255.0]]
    assert layout.d == 1

    truncated = tmp_path / "short.idx"
    truncated.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 7)
    with pytest.raises(ValueError):
        load_idx(truncated)
    _report("C10", "WSPM bitwise, PNG pixel-exact, IDX golden files")
