"""Shared fixtures: a synthetic digit dataset in IDX format and one full
weighted desk run over it.

The dataset mimics the structure of the 6-versus-9 experiment: 28x28
grayscale images, ten distinct shape families (five per digit) rendered
over a dim base with varying stroke brightness, plus 200 distractor images
of a third shape so that label filtering has something to drop.  The files
are written byte-by-byte with struct, independently of the package's IDX
reader.
"""

import struct
import time
from pathlib import Path

import numpy as np
import pytest

from wspoints import cli

IMAGE_SIDE = 28
N_PER_FAMILY = 200
N_DISTRACTORS = 200
DESK_MASTER_SEED = 123
DESK_RUNS = 5
DESK_N_POINTS = 10

# (center row, center col, ring radius) per shape family
_PRESETS = [(15.5, 11.0, 4.0), (18.5, 13.5, 5.5), (17.0, 15.5, 4.8),
            (19.5, 11.5, 6.2), (16.5, 13.0, 3.6)]


def _segment_distance(yy, xx, p0, p1):
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    denom = vy * vy + vx * vx
    t = np.clip(((yy - p0[0]) * vy + (xx - p0[1]) * vx) / denom, 0.0, 1.0)
    return np.sqrt((yy - (p0[0] + t * vy)) ** 2 + (xx - (p0[1] + t * vx)) ** 2)


def synthetic_digit(rng, digit, style):
    """One noisy 28x28 uint8 image of a 6, a 9, or a distractor ring (0)."""
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)
    cy0, cx0, r0 = _PRESETS[style]
    cy = cy0 + rng.uniform(-0.5, 0.5)
    cx = cx0 + rng.uniform(-0.5, 0.5)
    r = r0 + rng.uniform(-0.25, 0.25)
    if digit == 9:
        cy = (IMAGE_SIDE - 1.0) - cy
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ink = np.clip(1.6 - np.abs(dist - r), 0.0, 1.0)
    if digit == 6:
        p0 = (cy - r + 0.5, cx + r - 1.0)
        p1 = (cy - r - 7.5, cx + r + 1.0)
    elif digit == 9:
        p0 = (cy + r - 0.5, cx + r - 1.0)
        p1 = (cy + r + 7.5, cx + r - 2.0)
    else:
        p0 = p1 = None
    if p0 is not None:
        ink = np.clip(ink + np.clip(1.4 - _segment_distance(yy, xx, p0, p1), 0.0, 1.0), 0.0, 1.0)
    img = 20.0 + 255.0 * ink * rng.uniform(0.68, 0.92) + rng.normal(0.0, 4.0, size=yy.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_idx_images(path, images):
    """(count, 28, 28) uint8 stack -> IDX image file."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, count, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        fh.write(labels.tobytes())


@pytest.fixture(scope="session")
def digit_dataset(tmp_path_factory):
    """Synthetic 6/9 dataset on disk plus the in-memory arrays.

    2200 images total: 5 families x 200 images for each of the digits 6 and
    9, plus 200 ring-only distractors labeled 0.  Keeping labels {6, 9}
    leaves exactly 2000 columns of dimension 784.
    """
    rng = np.random.default_rng(2024)
    plan = [(6, s) for s in range(5) for _ in range(N_PER_FAMILY)]
    plan += [(9, s) for s in range(5) for _ in range(N_PER_FAMILY)]
    plan += [(0, s % 5) for s in range(N_DISTRACTORS)]
    images = np.stack([synthetic_digit(rng, d, s) for d, s in plan])
    labels = np.array([d for d, _ in plan], dtype=np.uint8)

    root = tmp_path_factory.mktemp("digits")
    images_path = root / "images.idx"
    labels_path = root / "labels.idx"
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return {
        "images_path": images_path,
        "labels_path": labels_path,
        "images": images,
        "labels": labels,
        "dir": root,
    }


@pytest.fixture(scope="session")
def desk_run(digit_dataset, tmp_path_factory):
    """One full weighted desk run over the synthetic dataset via the CLI:
    five independent runs, n=10, cv=0.4, tol=1e-5, max 1000 iterations."""
    out_dir = tmp_path_factory.mktemp("desk")
    out = out_dir / "points.wspm"
    render = out_dir / "grid.png"
    trace = out_dir / "trace.csv"
    argv = [
        "wsp",
        "--input", str(digit_dataset["images_path"]),
        "--labels", str(digit_dataset["labels_path"]),
        "--keep", "6,9",
        "--n", str(DESK_N_POINTS),
        "--cv", "0.4",
        "--tol", "1e-5",
        "--max-iter", "1000",
        "--seed", str(DESK_MASTER_SEED),
        "--runs", str(DESK_RUNS),
        "--out", str(out),
        "--render", str(render),
        "--trace", str(trace),
    ]
    started = time.perf_counter()
    exit_code = cli.main(argv)
    elapsed = time.perf_counter() - started

    run_outs = [out_dir / f"points_run{k}.wspm" for k in range(1, DESK_RUNS + 1)]
    manifests = [out_dir / f"points_run{k}.manifest" for k in range(1, DESK_RUNS + 1)]
    traces = [out_dir / f"trace_run{k}.csv" for k in range(1, DESK_RUNS + 1)]
    return {
        "exit_code": exit_code,
        "elapsed_s": elapsed,
        "out_dir": out_dir,
        "render": render,
        "run_outs": run_outs,
        "manifests": manifests,
        "traces": traces,
        "argv": argv,
    }


def read_manifest(path) -> dict:
    entries = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" = ")
        entries[key] = value
    return entries
