"""Command-line front end.

Subcommands: ``sp`` (uniform-weight support points), ``wsp`` (weighted
support points over freshly drawn random measures, one or more runs),
``rmeasure`` (draw and save a random measure, optionally checking its
centering), and ``energy`` (energy distance between two saved matrices).

Every optimizer invocation writes a manifest (flat ``key = value`` lines)
recording the resolved options, seeds, dataset fingerprints and outcome, so
a run can be reproduced bit for bit.  A config file with the same ``key =
value`` syntax may supply defaults; explicit command-line flags win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 infeasible CV target.
"""

from __future__ import annotations

import argparse
import csv
import gzip
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataio import (
    DataFormatError,
    fingerprint,
    filter_by_label,
    load_idx,
    load_idx_labels,
    load_matrix,
    load_weights,
    save_matrix,
)
from .energy import DiscreteMeasure, energy_distance_terms
from .geometry import CandidateSet, ReferenceSet
from .imaging import ImageLayout, clip_and_round_pixels, render_grid
from .measures import (
    InfeasibleCVError,
    RandomMeasureParams,
    estimate_centering_gap,
    gen_rmeasure,
    save_measure,
)
from .optimizer import (
    DescentError,
    OptimizerOptions,
    RunTrace,
    run_ccp,
    run_ccp_weighted,
)

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    """Bad or missing command-line / config options."""


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# dest -> converter for config-file values
_CONFIG_TYPES = {
    "input": str,
    "labels": str,
    "keep": str,
    "limit": int,
    "image_shape": str,
    "n": int,
    "tol": float,
    "max_iter": int,
    "init": str,
    "seed": int,
    "threads": str,
    "relative_tol": _bool,
    "out": str,
    "render": str,
    "grid_cols": int,
    "trace": str,
    "cv": float,
    "runs": int,
    "subset_floor": float,
    "theta_lo": float,
    "theta_hi": float,
    "fixed_subset": int,
    "parallel_runs": _bool,
    "check_centering": _bool,
    "draws": int,
    "a": str,
    "b": str,
    "weights_a": str,
    "weights_b": str,
}

_COMMON_DEFAULTS = {
    "tol": 1e-5,
    "max_iter": 1000,
    "init": "uniform",
    "seed": 0,
    "threads": "auto",
    "relative_tol": False,
    "limit": None,
    "labels": None,
    "keep": None,
    "image_shape": None,
    "render": None,
    "grid_cols": None,
    "trace": None,
    "config": None,
}

_DEFAULTS = {
    "sp": {**_COMMON_DEFAULTS, "out": "support_points.wspm"},
    "wsp": {
        **_COMMON_DEFAULTS,
        "out": "wsp_points.wspm",
        "cv": 0.4,
        "runs": 1,
        "subset_floor": 0.6,
        "theta_lo": 0.7,
        "theta_hi": 0.9,
        "fixed_subset": None,
        "parallel_runs": False,
    },
    "rmeasure": {
        "seed": 0,
        "check_centering": False,
        "draws": 2000,
        "cv": None,
        "subset_floor": 0.6,
        "theta_lo": 0.7,
        "theta_hi": 0.9,
        "fixed_subset": None,
        "config": None,
    },
    "energy": {"weights_a": None, "weights_b": None, "config": None},
}

_REQUIRED = {
    "sp": ("input", "n"),
    "wsp": ("input", "n"),
    "rmeasure": ("input", "cv", "out"),
    "energy": ("a", "b"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wspoints",
        description="Support points and weighted support points by energy-distance descent.",
    )
    parser.add_argument("--version", action="version", version=f"wspoints {__version__}")
    sub = parser.add_subparsers(dest="command")

    def add_dataset_opts(p):
        p.add_argument("--input", help="dataset: IDX image file, .wspm binary matrix, or text matrix")
        p.add_argument("--labels", help="IDX label file matching --input")
        p.add_argument("--keep", help="comma-separated labels to keep, e.g. 6,9")
        p.add_argument("--limit", type=int, help="use only the first LIMIT columns")
        p.add_argument("--image-shape", dest="image_shape",
                       help="HxW or HxWxC layout for rendering non-IDX inputs")

    def add_run_opts(p):
        p.add_argument("--n", type=int, help="number of support points")
        p.add_argument("--tol", type=float, help="convergence tolerance (default 1e-5)")
        p.add_argument("--max-iter", dest="max_iter", type=int, help="iteration cap (default 1000)")
        p.add_argument("--init", choices=("uniform", "columns"),
                       help="initialization scheme (default uniform)")
        p.add_argument("--seed", type=int, help="master RNG seed (default 0)")
        p.add_argument("--threads", help="worker threads for column updates, or 'auto'")
        p.add_argument("--relative-tol", dest="relative_tol", action="store_const", const=True,
                       help="scale the tolerance by max(1, |cost|)")
        p.add_argument("--out", help="output matrix path ('.wspm' selects the binary format)")
        p.add_argument("--render", help="render the points as a PNG grid at this path")
        p.add_argument("--grid-cols", dest="grid_cols", type=int,
                       help="grid columns for --render (default: n)")
        p.add_argument("--trace", help="write per-iteration cost CSV here")
        p.add_argument("--config", help="key = value file supplying option defaults")

    p_sp = sub.add_parser("sp", help="support points with uniform weights")
    add_dataset_opts(p_sp)
    add_run_opts(p_sp)

    p_wsp = sub.add_parser("wsp", help="weighted support points over random measures")
    add_dataset_opts(p_wsp)
    add_run_opts(p_wsp)
    p_wsp.add_argument("--cv", type=float, help="target weight coefficient of variation (default 0.4)")
    p_wsp.add_argument("--runs", type=int, help="number of independent runs (default 1)")
    p_wsp.add_argument("--subset-floor", dest="subset_floor", type=float,
                       help="minimum retained fraction of atoms (default 0.6)")
    p_wsp.add_argument("--theta-lo", dest="theta_lo", type=float,
                       help="lower retention probability (default 0.7)")
    p_wsp.add_argument("--theta-hi", dest="theta_hi", type=float,
                       help="upper retention probability (default 0.9)")
    p_wsp.add_argument("--fixed-subset", dest="fixed_subset", type=int,
                       help="fixed subset size instead of the random rule")
    p_wsp.add_argument("--parallel-runs", dest="parallel_runs", action="store_const", const=True,
                       help="execute independent runs concurrently")

    p_rm = sub.add_parser("rmeasure", help="draw a random measure and save it")
    p_rm.add_argument("--input", help="dataset path")
    p_rm.add_argument("--cv", type=float, help="target weight coefficient of variation")
    p_rm.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p_rm.add_argument("--out", help="measure output path")
    p_rm.add_argument("--check-centering", dest="check_centering", action="store_const", const=True,
                      help="Monte Carlo check that the measure centers on the data")
    p_rm.add_argument("--draws", type=int, help="draws for --check-centering (default 2000)")
    p_rm.add_argument("--subset-floor", dest="subset_floor", type=float)
    p_rm.add_argument("--theta-lo", dest="theta_lo", type=float)
    p_rm.add_argument("--theta-hi", dest="theta_hi", type=float)
    p_rm.add_argument("--fixed-subset", dest="fixed_subset", type=int)
    p_rm.add_argument("--config", help="key = value file supplying option defaults")

    p_en = sub.add_parser("energy", help="energy distance between two matrices")
    p_en.add_argument("--a", help="first matrix path")
    p_en.add_argument("--b", help="second matrix path")
    p_en.add_argument("--weights-a", dest="weights_a", help="weight file for the first matrix")
    p_en.add_argument("--weights-b", dest="weights_b", help="weight file for the second matrix")
    p_en.add_argument("--config", help="key = value file supplying option defaults")

    return parser


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}: line {lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge command line, config file and defaults; validate requireds."""
    command = args.command
    defaults = _DEFAULTS[command]
    config: dict[str, str] = {}
    if getattr(args, "config", None):
        config = parse_config_file(args.config)
        unknown = set(config) - set(_CONFIG_TYPES)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")

    opts: dict = {"command": command}
    keys = set(defaults) | set(_REQUIRED[command])
    for key in keys:
        if key in ("command", "config"):
            continue
        value = getattr(args, key, None)
        if value is None and key in config:
            try:
                value = _CONFIG_TYPES[key](config[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        if value is None:
            value = defaults.get(key)
        opts[key] = value

    for key in _REQUIRED[command]:
        if opts.get(key) is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return opts


def _parse_threads(value) -> int | str:
    if value is None or value == "auto":
        return "auto"
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"--threads must be a count or 'auto', got {value!r}") from None


def _parse_image_shape(text: str) -> ImageLayout:
    parts = text.lower().split("x")
    if len(parts) not in (2, 3):
        raise UsageError(f"--image-shape must look like HxW or HxWxC, got {text!r}")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--image-shape must be integers, got {text!r}") from None
    return ImageLayout(dims[0], dims[1], dims[2] if len(dims) == 3 else 1)


def _sniff_and_load(path) -> tuple[ReferenceSet, ImageLayout | None]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        head = fh.read(4)
    if head == b"WSPM":
        return load_matrix(path), None
    if len(head) == 4 and struct.unpack(">I", head)[0] == 0x00000803:
        return load_idx(path)
    return load_matrix(path), None


def _load_dataset(opts) -> tuple[ReferenceSet, ImageLayout | None]:
    ref, layout = _sniff_and_load(opts["input"])
    if opts.get("labels"):
        labels = load_idx_labels(opts["labels"])
        keep_text = opts.get("keep")
        if not keep_text:
            raise UsageError("--labels requires --keep")
        keep = [int(tok) for tok in str(keep_text).split(",") if tok.strip()]
        ref = filter_by_label(ref, labels, keep)
    elif opts.get("keep"):
        raise UsageError("--keep requires --labels")
    limit = opts.get("limit")
    if limit is not None:
        if limit < 1:
            raise UsageError(f"--limit must be positive, got {limit}")
        if limit < ref.n_atoms:
            ref = ReferenceSet(ref.data[:, :limit])
    if opts.get("image_shape"):
        layout = _parse_image_shape(opts["image_shape"])
        layout.check_matches(ref.d)
    return ref, layout


def _optimizer_options(opts) -> OptimizerOptions:
    return OptimizerOptions(
        tol=opts["tol"],
        max_iter=opts["max_iter"],
        init_scheme=opts["init"],
        seed=opts["seed"],
        threads=_parse_threads(opts["threads"]),
        relative_tol=bool(opts["relative_tol"]),
    )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def _write_trace(path, trace: RunTrace) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "cost", "delta", "ms"])
        for l, cost in enumerate(trace.costs):
            delta = "" if l == 0 else repr(cost - trace.costs[l - 1])
            ms = f"{trace.cost_times_ms[l]:.3f}" if l < len(trace.cost_times_ms) else ""
            writer.writerow([l, repr(cost), delta, ms])


def _base_manifest(opts, started: str) -> dict:
    entries = {
        "subcommand": opts["command"],
        "library_version": __version__,
        "started_utc": started,
    }
    skip = {"command"}
    for key in sorted(opts):
        if key in skip:
            continue
        entries[f"opt.{key}"] = opts[key]
    if opts.get("input"):
        entries["input_fingerprint"] = fingerprint(opts["input"])
    if opts.get("labels"):
        entries["labels_fingerprint"] = fingerprint(opts["labels"])
    return entries


def _render_points(points: np.ndarray, layout: ImageLayout | None, columns: int, path) -> None:
    if layout is None:
        raise UsageError("--render needs an image layout; pass --image-shape or use an IDX input")
    clipped = clip_and_round_pixels(CandidateSet(points))
    render_grid(clipped, layout, columns, path)


def _manifest_path(out_path) -> Path:
    return Path(out_path).with_suffix(".manifest")


def _run_suffixed(path, k: int) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_run{k}{p.suffix}")


def _check_render_layout(opts, layout) -> None:
    if opts["render"] and layout is None:
        raise UsageError("--render needs an image layout; pass --image-shape or use an IDX input")


def cmd_sp(opts) -> int:
    started = _utc_now()
    ref, layout = _load_dataset(opts)
    _check_render_layout(opts, layout)
    options = _optimizer_options(opts)
    A, trace = run_ccp(ref, opts["n"], options)

    out = opts["out"]
    save_matrix(A.points, out)
    if opts["trace"]:
        _write_trace(opts["trace"], trace)
    if opts["render"]:
        _render_points(A.points, layout, opts["grid_cols"] or opts["n"], opts["render"])

    entries = _base_manifest(opts, started)
    entries.update(
        finished_utc=_utc_now(),
        stop_reason=trace.stop_reason,
        iterations=trace.iterations,
        final_objective=repr(trace.costs[-1]),
        wall_ms=f"{trace.wall_ms:.3f}",
        bbox_within_dilated=trace.bbox_ok,
        out=out,
    )
    _write_manifest(_manifest_path(out), entries)
    print(
        f"sp: {trace.stop_reason} after {trace.iterations} iterations, "
        f"final objective {trace.costs[-1]:.12g}, wrote {out}"
    )
    return 0


def _wsp_single_run(k: int, ref: ReferenceSet, opts, options: OptimizerOptions):
    """Run k (1-based) of a weighted batch.

    The child seed is the pure function SeedSequence(master_seed,
    spawn_key=(k,)); it feeds the measure draw first, then candidate
    initialization, so each run is reproducible in isolation.
    """
    child = np.random.SeedSequence(opts["seed"], spawn_key=(k,))
    rng = np.random.default_rng(child)
    params = RandomMeasureParams(
        cv=opts["cv"],
        theta_lo=opts["theta_lo"],
        theta_hi=opts["theta_hi"],
        floor_frac=opts["subset_floor"],
        fixed_subset_size=opts["fixed_subset"],
    )
    measure = gen_rmeasure(ref, params, rng)
    measure.seed = opts["seed"]
    sub = ReferenceSet(ref.data[:, measure.indices])
    A, trace = run_ccp_weighted(sub, opts["n"], measure.weights, options, rng=rng)
    return A, trace, measure


def cmd_wsp(opts) -> int:
    started = _utc_now()
    ref, layout = _load_dataset(opts)
    _check_render_layout(opts, layout)
    options = _optimizer_options(opts)
    runs = opts["runs"]
    if runs < 1:
        raise UsageError(f"--runs must be positive, got {runs}")

    indices = list(range(1, runs + 1))
    if opts["parallel_runs"] and runs > 1:
        # hold the BLAS pin across all workers so their nested pins are no-ops
        with threadpool_limits(limits=1):
            with ThreadPoolExecutor(max_workers=min(runs, 4)) as pool:
                results = list(pool.map(lambda k: _wsp_single_run(k, ref, opts, options), indices))
    else:
        results = [_wsp_single_run(k, ref, opts, options) for k in indices]

    out = opts["out"]
    for k, (A, trace, measure) in zip(indices, results):
        run_out = _run_suffixed(out, k)
        save_matrix(A.points, run_out)
        save_measure(measure, _run_suffixed(Path(out).with_suffix(".measure"), k))
        if opts["trace"]:
            _write_trace(_run_suffixed(opts["trace"], k), trace)

        entries = _base_manifest(opts, started)
        entries.update(
            run_index=k,
            child_seed_spawn_key=f"({k},)",
            subset_size=measure.n0,
            kappa=repr(measure.kappa),
            alpha=repr(measure.alpha),
            finished_utc=_utc_now(),
            stop_reason=trace.stop_reason,
            iterations=trace.iterations,
            final_objective=repr(trace.costs[-1]),
            wall_ms=f"{trace.wall_ms:.3f}",
            bbox_within_dilated=trace.bbox_ok,
            out=str(run_out),
        )
        _write_manifest(_manifest_path(run_out), entries)
        print(
            f"wsp run {k}: {trace.stop_reason} after {trace.iterations} iterations, "
            f"N0={measure.n0}, final objective {trace.costs[-1]:.12g}, wrote {run_out}"
        )

    if opts["render"]:
        combined = np.concatenate([A.points for A, _, _ in results], axis=1)
        _render_points(combined, layout, opts["grid_cols"] or opts["n"], opts["render"])
        print(f"wsp: rendered {runs} run(s) x {opts['n']} points to {opts['render']}")
    return 0


def cmd_rmeasure(opts) -> int:
    ref, _ = _sniff_and_load(opts["input"])
    params = RandomMeasureParams(
        cv=opts["cv"],
        theta_lo=opts["theta_lo"],
        theta_hi=opts["theta_hi"],
        floor_frac=opts["subset_floor"],
        fixed_subset_size=opts["fixed_subset"],
    )
    rng = np.random.default_rng(opts["seed"])
    measure = gen_rmeasure(ref, params, rng)
    measure.seed = opts["seed"]
    save_measure(measure, opts["out"])
    print(
        f"rmeasure: N0={measure.n0}, kappa={measure.kappa:.6g}, "
        f"alpha={measure.alpha:.6g}, wrote {opts['out']}"
    )

    if opts["check_centering"]:
        draws = opts["draws"]
        events = []
        for _ in range(20):
            axis = int(rng.integers(ref.d))
            q = float(rng.uniform(0.1, 0.9))
            events.append((axis, float(np.quantile(ref.data[axis], q))))
        reports = estimate_centering_gap(ref, params, draws, events, rng)
        print(f"centering check over {draws} draws:")
        print(f"{'axis':>6} {'threshold':>14} {'empirical':>10} {'mean':>10} {'se':>10} {'z':>8}")
        for r in reports:
            print(
                f"{r.axis:>6} {r.threshold:>14.6g} {r.empirical_mass:>10.6f} "
                f"{r.mean_mass:>10.6f} {r.std_error:>10.3e} {r.z_score:>8.2f}"
            )
        within = sum(1 for r in reports if abs(r.z_score) < 3.0)
        print(f"|z| < 3 for {within}/{len(reports)} events")
    return 0


def cmd_energy(opts) -> int:
    ref_a = load_matrix(opts["a"])
    ref_b = load_matrix(opts["b"])
    wa = load_weights(opts["weights_a"], ref_a.n_atoms) if opts["weights_a"] else None
    wb = load_weights(opts["weights_b"], ref_b.n_atoms) if opts["weights_b"] else None
    f = DiscreteMeasure(ref_a.data, wa)
    g = DiscreteMeasure(ref_b.data, wb)
    cross, within_a, within_b = energy_distance_terms(f, g)
    total = max(2.0 * cross - within_a - within_b, 0.0)
    print(f"term_cross      = {cross:.12g}")
    print(f"term_within_a   = {within_a:.12g}")
    print(f"term_within_b   = {within_b:.12g}")
    print(f"energy_distance = {total:.12g}")
    return 0


_DISPATCH = {"sp": cmd_sp, "wsp": cmd_wsp, "rmeasure": cmd_rmeasure, "energy": cmd_energy}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        opts = resolve_options(args)
        return _DISPATCH[args.command](opts)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleCVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DescentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
