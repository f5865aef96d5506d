"""Command-line front end: phantom, centerline, prior, fit, track, baseline,
metrics, and the full pipeline.

Every subcommand writes its outputs plus a ``manifest-<name>.json`` into the
``--out`` directory; ``pipeline`` chains the stages through those files, so
running it equals running the stages by hand with the same flags.  Exit
codes: 0 success, 1 usage or parameter error, 2 data or format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .centerline import RESAMPLE_STEP, extract_centerline, load_centerline, save_centerline
from .errors import (
    ConditioningError,
    FormatError,
    TractFieldError,
    UnderdeterminedError,
)
from .grids import (
    _fmt,
    load_mask,
    load_peaks,
    load_tract,
    load_volume,
    save_mask,
    save_peaks,
    save_tract,
)
from .metrics import hausdorff, spatial_overlap, voxelize
from .phantom import generate, load_phantom_spec, save_descriptor
from .polyfield import RIDGE_PER_SAMPLE, fit_bundle_field, load_field, save_field
from .prior import MIN_AMP_DEFAULT, build_prior, prior_from_peaks, prior_to_peaks
from .tracking import ANGLE_MAX_DEFAULT, TrackParams, baseline_peak_track, track

MASK_FILE = "mask.rvf"
PEAKS_FILE = "peaks.rvf"
AXIS_FILE = "axis.tract"
DESCRIPTOR_FILE = "descriptor.txt"
ENDPOINTS_FILE = "endpoints.txt"
CENTERLINE_FILE = "centerline.tract"
PRIOR_FILE = "prior.rvf"
FIELD_FILE = "field.txt"
TRACT_FILE = "streamlines.tract"
BASELINE_FILE = "baseline.tract"
METRICS_FILE = "metrics.txt"


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _triple(text: str) -> np.ndarray:
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return np.array(parts)


def _write_manifest(out_dir, name, parameters, inputs, outputs):
    payload = {
        "subcommand": name,
        "version": __version__,
        "parameters": parameters,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = os.path.join(out_dir, f"manifest-{name}.json")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_endpoints(path, p1, p2):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("p1: " + " ".join(_fmt(v) for v in p1) + "\n")
        fh.write("p2: " + " ".join(_fmt(v) for v in p2) + "\n")


def _load_endpoints(path):
    values = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh.read().splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition(": ")
            if not sep or key not in ("p1", "p2") or key in values:
                raise FormatError(f"{path}: malformed endpoint line {line!r}")
            values[key] = np.array([float(v) for v in value.split()])
    if set(values) != {"p1", "p2"}:
        raise FormatError(f"{path}: endpoint file needs both p1 and p2")
    return values["p1"], values["p2"]


def _run_phantom(spec_path, out_dir, rng_seed):
    spec = load_phantom_spec(spec_path)
    result = generate(spec, rng_seed)
    paths = {
        "mask": os.path.join(out_dir, MASK_FILE),
        "peaks": os.path.join(out_dir, PEAKS_FILE),
        "axis": os.path.join(out_dir, AXIS_FILE),
        "descriptor": os.path.join(out_dir, DESCRIPTOR_FILE),
        "endpoints": os.path.join(out_dir, ENDPOINTS_FILE),
    }
    save_mask(result.mask, paths["mask"])
    save_peaks(result.peaks, paths["peaks"])
    save_centerline(result.centerline, paths["axis"])
    save_descriptor(result.field, paths["descriptor"])
    _save_endpoints(paths["endpoints"], result.p1, result.p2)
    _write_manifest(
        out_dir,
        "phantom",
        {"rng_seed": int(rng_seed)},
        {"spec": spec_path},
        paths,
    )
    return paths


def _run_centerline(mask_path, p1, p2, delta, out_dir):
    mask = load_mask(mask_path)
    cl = extract_centerline(mask, p1, p2, delta)
    out_path = os.path.join(out_dir, CENTERLINE_FILE)
    save_centerline(cl, out_path)
    _write_manifest(
        out_dir,
        "centerline",
        {
            "p1": [float(v) for v in p1],
            "p2": [float(v) for v in p2],
            "delta": float(delta),
        },
        {"mask": mask_path},
        {"centerline": out_path},
    )
    return out_path


def _run_prior(peaks_path, centerline_path, mask_path, cutoff, centerline_only, out_dir):
    peaks = load_peaks(peaks_path)
    cl = load_centerline(centerline_path)
    mask = load_mask(mask_path)
    prior = build_prior(peaks, cl, mask, cutoff, centerline_only)
    out_path = os.path.join(out_dir, PRIOR_FILE)
    save_peaks(prior_to_peaks(prior), out_path)
    _write_manifest(
        out_dir,
        "prior",
        {"cutoff": float(cutoff), "centerline_only": bool(centerline_only)},
        {"peaks": peaks_path, "centerline": centerline_path, "mask": mask_path},
        {"prior": out_path},
    )
    return out_path


def _run_fit(prior_path, mask_path, order, ridge, out_dir):
    prior = prior_from_peaks(load_peaks(prior_path))
    mask = load_mask(mask_path)
    if ridge is None:
        ridge = RIDGE_PER_SAMPLE * int(
            (np.asarray(prior.valid, dtype=bool) & mask.foreground).sum()
        )
    field = fit_bundle_field(prior, mask, order, ridge)
    out_path = os.path.join(out_dir, FIELD_FILE)
    save_field(field, out_path)
    _write_manifest(
        out_dir,
        "fit",
        {"order": int(order), "ridge": float(ridge)},
        {"prior": prior_path, "mask": mask_path},
        {"field": out_path},
    )
    return out_path


def _track_params(args) -> TrackParams:
    return TrackParams(
        step=args.step,
        sigma=getattr(args, "sigma", 0.0),
        max_steps=args.max_steps,
        seed_count=getattr(args, "seed_count", 1),
        rng_seed=getattr(args, "rng_seed", 0),
        min_len=args.min_len,
        bidirectional=not args.unidirectional,
    )


def _run_track(field_path, mask_path, params, out_dir):
    field = load_field(field_path)
    mask = load_mask(mask_path)
    tract = track(field, mask, mask.foreground_points(), params)
    out_path = os.path.join(out_dir, TRACT_FILE)
    save_tract(tract, out_path)
    _write_manifest(
        out_dir,
        "track",
        {
            "step": params.step,
            "sigma": params.sigma,
            "max_steps": params.max_steps,
            "seed_count": params.seed_count,
            "rng_seed": params.rng_seed,
            "min_len": params.min_len,
            "bidirectional": params.bidirectional,
            "seeding": "all foreground voxel centers",
        },
        {"field": field_path, "mask": mask_path},
        {"tract": out_path},
    )
    return out_path


def _run_baseline(peaks_path, mask_path, params, angle_max, cutoff, out_dir):
    peaks = load_peaks(peaks_path)
    mask = load_mask(mask_path)
    tract = baseline_peak_track(
        peaks, mask, mask.foreground_points(), params, angle_max, cutoff
    )
    out_path = os.path.join(out_dir, BASELINE_FILE)
    save_tract(tract, out_path)
    _write_manifest(
        out_dir,
        "baseline",
        {
            "step": params.step,
            "max_steps": params.max_steps,
            "min_len": params.min_len,
            "bidirectional": params.bidirectional,
            "angle_max": float(angle_max),
            "cutoff": float(cutoff),
            "seeding": "all foreground voxel centers",
        },
        {"peaks": peaks_path, "mask": mask_path},
        {"tract": out_path},
    )
    return out_path


def _run_metrics(tract_path, ref_tract_path, grid_path, ref_mask_path, out_dir):
    tract = load_tract(tract_path)
    ref_tract = load_tract(ref_tract_path)
    grid = load_volume(grid_path)
    tract_mask = voxelize(tract, grid)
    if ref_mask_path:
        reference = load_mask(ref_mask_path)
        against = "reference mask"
    else:
        reference = voxelize(ref_tract, grid)
        against = "voxelized reference tract"
    overlap = spatial_overlap(tract_mask, reference)
    hd, ahd = hausdorff(tract, ref_tract)
    record = f"overlap={overlap:.4f} hd={hd:.4f} ahd={ahd:.4f}"
    table = [
        record,
        "",
        f"spatial overlap  {overlap:8.2f}  % Dice, voxelized tract vs {against}",
        f"hausdorff        {hd:8.2f}  mm, pooled points vs reference tract",
        f"avg hausdorff    {ahd:8.2f}  mm, pooled points vs reference tract",
    ]
    out_path = os.path.join(out_dir, METRICS_FILE)
    with open(out_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(table) + "\n")
    print("\n".join(table))
    _write_manifest(
        out_dir,
        "metrics",
        {"overlap": overlap, "hd": hd, "ahd": ahd},
        {
            "tract": tract_path,
            "ref_tract": ref_tract_path,
            "grid": grid_path,
            "ref_mask": ref_mask_path,
        },
        {"metrics": out_path},
    )
    return out_path


def _cmd_phantom(args):
    os.makedirs(args.out, exist_ok=True)
    _run_phantom(args.spec, args.out, args.rng_seed)
    return 0


def _cmd_centerline(args):
    if args.endpoints is None and (args.p1 is None or args.p2 is None):
        raise ValueError("give either --endpoints or both --p1 and --p2")
    if args.endpoints is not None:
        p1, p2 = _load_endpoints(args.endpoints)
    else:
        p1, p2 = args.p1, args.p2
    os.makedirs(args.out, exist_ok=True)
    _run_centerline(args.mask, p1, p2, args.delta, args.out)
    return 0


def _cmd_prior(args):
    os.makedirs(args.out, exist_ok=True)
    _run_prior(
        args.peaks, args.centerline, args.mask, args.cutoff,
        args.centerline_only, args.out,
    )
    return 0


def _cmd_fit(args):
    os.makedirs(args.out, exist_ok=True)
    _run_fit(args.prior, args.mask, args.order, args.ridge, args.out)
    return 0


def _cmd_track(args):
    os.makedirs(args.out, exist_ok=True)
    _run_track(args.field, args.mask, _track_params(args), args.out)
    return 0


def _cmd_baseline(args):
    os.makedirs(args.out, exist_ok=True)
    params = TrackParams(
        step=args.step,
        sigma=0.0,
        max_steps=args.max_steps,
        seed_count=1,
        rng_seed=0,
        min_len=args.min_len,
        bidirectional=not args.unidirectional,
    )
    _run_baseline(args.peaks, args.mask, params, args.angle_max, args.cutoff, args.out)
    return 0


def _cmd_metrics(args):
    os.makedirs(args.out, exist_ok=True)
    _run_metrics(args.tract, args.ref_tract, args.grid, args.ref_mask, args.out)
    return 0


def _cmd_pipeline(args):
    os.makedirs(args.out, exist_ok=True)
    paths = _run_phantom(args.spec, args.out, args.rng_seed)
    p1, p2 = _load_endpoints(paths["endpoints"])
    centerline_path = _run_centerline(paths["mask"], p1, p2, args.delta, args.out)
    prior_path = _run_prior(
        paths["peaks"], centerline_path, paths["mask"], args.cutoff,
        args.centerline_only, args.out,
    )
    field_path = _run_fit(prior_path, paths["mask"], args.order, args.ridge, args.out)
    tract_path = _run_track(field_path, paths["mask"], _track_params(args), args.out)
    baseline_params = TrackParams(
        step=args.step,
        sigma=0.0,
        max_steps=args.max_steps,
        seed_count=1,
        rng_seed=0,
        min_len=args.min_len,
        bidirectional=not args.unidirectional,
    )
    _run_baseline(
        paths["peaks"], paths["mask"], baseline_params, args.angle_max,
        args.cutoff, args.out,
    )
    _run_metrics(tract_path, paths["axis"], paths["mask"], paths["mask"], args.out)
    return 0


def _add_track_flags(p, with_noise=True):
    p.add_argument("--step", type=float, default=0.3, help="integration step, mm")
    p.add_argument("--max-steps", type=int, default=2000,
                   help="step budget per direction")
    p.add_argument("--min-len", type=float, default=None,
                   help="minimum streamline length, mm (default 3x step)")
    p.add_argument("--unidirectional", action="store_true",
                   help="integrate forward from seeds only")
    if with_noise:
        p.add_argument("--sigma", type=float, default=0.1,
                       help="direction perturbation std")
        p.add_argument("--seed-count", type=int, default=10,
                       help="streamline repetitions per seed")
        p.add_argument("--rng-seed", type=int, default=0, help="random seed")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="tractfield",
        description="Fit a divergence-free polynomial flow to bundle "
        "orientations and trace streamlines through it.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="<command>",
                                parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="generate a synthetic tube phantom")
    p.add_argument("--spec", required=True, help="phantom spec text file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rng-seed", type=int, default=0, help="random seed")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("centerline", help="extract a mask centerline")
    p.add_argument("--mask", required=True, help="mask volume file")
    p.add_argument("--p1", type=_triple, default=None, help="first endpoint x,y,z")
    p.add_argument("--p2", type=_triple, default=None, help="second endpoint x,y,z")
    p.add_argument("--endpoints", default=None,
                   help="endpoint file (as written by phantom)")
    p.add_argument("--delta", type=float, default=RESAMPLE_STEP,
                   help="centerline resampling step, mm")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_centerline)

    p = sub.add_parser("prior", help="select one peak per voxel")
    p.add_argument("--peaks", required=True, help="peaks volume file")
    p.add_argument("--centerline", required=True, help="centerline file")
    p.add_argument("--mask", required=True, help="mask volume file")
    p.add_argument("--cutoff", type=float, default=MIN_AMP_DEFAULT,
                   help="peak amplitude floor")
    p.add_argument("--centerline-only", action="store_true",
                   help="select only at voxels the centerline passes through")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_prior)

    p = sub.add_parser("fit", help="fit the divergence-free polynomial field")
    p.add_argument("--prior", required=True, help="prior volume file")
    p.add_argument("--mask", required=True, help="mask volume file")
    p.add_argument("--order", type=int, default=4, help="polynomial order")
    p.add_argument("--ridge", type=float, default=None,
                   help="coefficient shrinkage weight (default 1e-8 per sample)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("track", help="trace streamlines through a fitted field")
    p.add_argument("--field", required=True, help="fitted field file")
    p.add_argument("--mask", required=True, help="mask volume file")
    _add_track_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("baseline", help="deterministic peak-following tracker")
    p.add_argument("--peaks", required=True, help="peaks volume file")
    p.add_argument("--mask", required=True, help="mask volume file")
    _add_track_flags(p, with_noise=False)
    p.add_argument("--angle-max", type=float, default=ANGLE_MAX_DEFAULT,
                   help="turning angle stop, degrees")
    p.add_argument("--cutoff", type=float, default=MIN_AMP_DEFAULT,
                   help="peak amplitude floor")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("metrics", help="compare a tract against a reference")
    p.add_argument("--tract", required=True, help="tract file to score")
    p.add_argument("--ref-tract", required=True, help="reference tract file")
    p.add_argument("--grid", required=True,
                   help="volume file defining the voxelization grid")
    p.add_argument("--ref-mask", default=None,
                   help="score overlap against this mask instead of the "
                   "voxelized reference tract")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("pipeline", help="run phantom through metrics in one go")
    p.add_argument("--spec", required=True, help="phantom spec text file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--order", type=int, default=4, help="polynomial order")
    p.add_argument("--ridge", type=float, default=None,
                   help="coefficient shrinkage weight (default 1e-8 per sample)")
    p.add_argument("--cutoff", type=float, default=MIN_AMP_DEFAULT,
                   help="peak amplitude floor")
    p.add_argument("--centerline-only", action="store_true",
                   help="select only at voxels the centerline passes through")
    p.add_argument("--delta", type=float, default=RESAMPLE_STEP,
                   help="centerline resampling step, mm")
    p.add_argument("--angle-max", type=float, default=ANGLE_MAX_DEFAULT,
                   help="baseline turning angle stop, degrees")
    _add_track_flags(p)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UnderdeterminedError, ConditioningError) as exc:
        print(f"tractfield: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"tractfield: invalid parameter: {exc}", file=sys.stderr)
        return 1
    except (TractFieldError, OSError) as exc:
        print(f"tractfield: {exc}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main(sys.argv[1:]))
