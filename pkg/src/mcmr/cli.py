"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 invalid or unreadable data,
3 solver breakdown.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .container import FormatError, read_dataset, read_result, write_dataset, write_result
from .data import Dataset, ImageSequence, MotionConfig, MotionFieldSet, ReconConfig, ValidationError
from .metrics import EXACT, end_point_error, psnr, ssim_sequence
from .motion import VariationalEstimator
from .phantom import PhantomSpec, heart_roi, make_coil_maps, make_masks, make_phantom, simulate_kspace
from .pipeline import (
    motion_free_reconstruct,
    precomputed_motion_reconstruct,
    fixed_motion_reconstruct,
    reconstruct,
)

log = logging.getLogger("mcmr")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BREAKDOWN = 3

MODES = ("unrolled", "fixed-motion", "none")
# tolerance used by `rerun` when comparing metrics with the manifest
RERUN_TOL_DB = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _abspath(p: str) -> str:
    return os.path.abspath(p)


def _int_list(s: str) -> list:
    try:
        return [int(v) for v in s.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def _json_dump(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"mcmr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def manifest_path(out: str) -> str:
    return out + ".manifest.json"


def write_manifest(command: str, args: argparse.Namespace, outputs: list, metrics: Optional[dict] = None) -> str:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    doc = {
        "command": command,
        "args": params,
        "versions": _versions(),
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "metrics": metrics or {},
    }
    path = manifest_path(args.out)
    _json_dump(doc, path)
    return path


def _db(v: float):
    return EXACT if math.isinf(v) else float(v)


def _summary(values: np.ndarray) -> dict:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {"mean": EXACT, "std": 0.0, "n_exact": int(values.size)}
    return {"mean": float(finite.mean()), "std": float(finite.std()), "n_exact": int(values.size - finite.size)}


# ---------------------------------------------------------------- phantom

def cmd_phantom(args) -> int:
    spec = PhantomSpec(n_frames=args.frames, height=args.size, width=args.size,
                       motion_amplitude=args.amplitude, n_ellipses=args.ellipses, seed=args.seed)
    ref, gt = make_phantom(spec)
    coils = make_coil_maps(args.coils, args.size, args.size)
    masks = make_masks(args.frames, args.size, args.size, args.accel, args.center_lines, args.seed)
    y = simulate_kspace(ref, coils, masks, args.noise, args.seed)
    write_dataset(args.out, y, coils, masks, ref, gt)
    write_manifest("phantom", args, [args.out], {"acceleration": masks.acceleration()})
    print(f"wrote {args.out}: N={args.frames} {args.size}x{args.size} Q={args.coils} R={masks.acceleration():.3f}")
    return EXIT_OK


# ------------------------------------------------------------------ recon

def _configs(args) -> tuple[ReconConfig, MotionConfig]:
    recon = ReconConfig(lam=args.lam, unroll_iters=args.iters, cg_max_iters=args.cg_iters, cg_tol=args.cg_tol,
                        psnr_stop_delta=args.stop_delta, first_block_cg_iters=args.first_cg_iters,
                        threads=args.threads)
    motion = MotionConfig(alpha=args.alpha, beta=args.beta, gamma=args.gamma)
    return recon, motion


def run_mode(ds: Dataset, mode: str, recon_cfg: ReconConfig, motion_cfg: MotionConfig,
             reference: Optional[ImageSequence]):
    """Run one reconstruction mode; returns (images, motion or None, history or None, reports)."""
    y, coils, masks = ds.kspace, ds.coils, ds.masks
    if mode == "unrolled":
        x, u, hist = reconstruct(y, coils, masks, recon_cfg, motion_cfg, VariationalEstimator(), reference)
    elif mode == "fixed-motion":
        x, u, hist = fixed_motion_reconstruct(y, coils, masks, recon_cfg, motion_cfg, VariationalEstimator(), reference)
    elif mode == "none":
        x, reports = motion_free_reconstruct(y, coils, masks, recon_cfg)
        return x, None, None, reports
    else:
        raise UsageError(f"unknown mode {mode!r}")
    reports = [r for rec in hist.records for r in rec.cg_reports]
    return x, u, hist, reports


def cmd_recon(args) -> int:
    recon_cfg, motion_cfg = _configs(args)
    ds = read_dataset(args.input)
    reference = ds.reference if args.early_stop else None
    t0 = time.perf_counter()
    x, u, hist, reports = run_mode(ds, args.mode, recon_cfg, motion_cfg, reference)
    wall = time.perf_counter() - t0
    breakdown = any(r.breakdown for r in reports)

    history_doc = hist.to_dict() if hist is not None else {
        "n_iterations": 1, "stopped_early": False, "breakdown": breakdown,
        "iterations": [{"iteration": 1, "cg_reports": [r.to_dict() for r in reports]}],
    }
    history_doc["mode"] = args.mode
    history_doc["wall_time"] = wall
    metrics = {}
    if ds.reference is not None:
        rep = psnr(x, ds.reference)
        metrics = {"psnr_mean": _db(rep.mean), "psnr_per_frame": [_db(v) for v in rep.per_frame]}
    meta = {"mode": args.mode, "wall_time": wall, "n_iterations": history_doc["n_iterations"], **metrics}
    write_result(args.out, x, u, meta)
    history_path = args.history or args.out + ".history.json"
    _json_dump(history_doc, history_path)
    write_manifest("recon", args, [args.out], metrics)
    line = f"{args.mode}: {history_doc['n_iterations']} iteration(s) in {wall:.1f} s"
    if metrics:
        line += f", PSNR {metrics['psnr_mean'] if metrics['psnr_mean'] == EXACT else round(metrics['psnr_mean'], 4)} dB"
    print(line)
    if breakdown:
        print("error: CG breakdown (non-positive curvature)", file=sys.stderr)
        return EXIT_BREAKDOWN
    return EXIT_OK


# ------------------------------------------------------------------- eval

def evaluate(x: ImageSequence, ds: Dataset, motion: Optional[MotionFieldSet] = None,
             roi: Optional[np.ndarray] = None) -> dict:
    if ds.reference is None:
        raise ValueError("dataset has no reference images to evaluate against")
    p = psnr(x, ds.reference).per_frame
    s = ssim_sequence(x, ds.reference)
    report = {
        "frames": [{"frame": t, "psnr": _db(p[t]), "ssim": float(s[t])} for t in range(len(p))],
        "psnr": _summary(p),
        "ssim": {"mean": float(s.mean()), "std": float(s.std())},
    }
    if motion is not None and ds.gt_motion is not None:
        report["epe"] = {"mean": end_point_error(motion, ds.gt_motion, roi).mean}
    return report


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.12g}"


def format_report(report: dict) -> str:
    lines = ["frame  psnr_db  ssim"]
    for row in report["frames"]:
        lines.append(f"{row['frame']}  {_fmt(row['psnr'])}  {_fmt(row['ssim'])}")
    ps, ss = report["psnr"], report["ssim"]
    lines.append(f"psnr_mean {_fmt(ps['mean'])}  psnr_std {_fmt(ps['std'])}  exact_frames {ps['n_exact']}")
    lines.append(f"ssim_mean {_fmt(ss['mean'])}  ssim_std {_fmt(ss['std'])}")
    if "epe" in report:
        lines.append(f"epe_mean {_fmt(report['epe']['mean'])}")
    if "wall_time" in report:
        lines.append(f"wall_time {_fmt(report['wall_time'])}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    res = read_result(args.recon)
    ds = read_dataset(args.ref)
    roi = None
    if args.roi == "heart":
        n, h, w = res.recon.frames.shape
        roi = heart_roi(PhantomSpec(n_frames=n, height=h, width=w))
    report = evaluate(res.recon, ds, res.motion, roi)
    if "wall_time" in res.meta:
        report["wall_time"] = float(res.meta["wall_time"])
    print(format_report(report))
    if args.json:
        _json_dump(report, args.json)
    return EXIT_OK


# ------------------------------------------------------------------- plot

def to_gray(mag: np.ndarray) -> np.ndarray:
    """Linear grayscale: max magnitude maps to 255 and zero to 0."""
    mag = np.abs(mag)
    peak = float(mag.max()) if mag.size else 0.0
    if peak == 0:
        return np.zeros(mag.shape, np.uint8)
    return np.rint(255.0 * mag / peak).astype(np.uint8)


def xy_panel(x: ImageSequence, frame: int) -> np.ndarray:
    n = x.frames.shape[0]
    if not 0 <= frame < n:
        raise ValueError(f"frame {frame} out of range [0, {n})")
    return to_gray(x.frames[frame])


def yt_panel(x: ImageSequence, column: int) -> np.ndarray:
    """Spatio-temporal profile through ``column``; shape ``(H, N)``."""
    w = x.frames.shape[2]
    if not 0 <= column < w:
        raise ValueError(f"column {column} out of range [0, {w})")
    return to_gray(x.frames[:, :, column].T)


def _render(panels: list, stamps: list, scale: int):
    from PIL import Image, ImageDraw

    gap = 2
    big = [np.repeat(np.repeat(p, scale, axis=0), scale, axis=1) for p in panels]
    h = max(b.shape[0] for b in big)
    w = sum(b.shape[1] for b in big) + gap * (len(big) - 1)
    canvas = np.zeros((h, w), np.uint8)
    col = 0
    offsets = []
    for b in big:
        canvas[: b.shape[0], col: col + b.shape[1]] = b
        offsets.append((col, b.shape[0]))
        col += b.shape[1] + gap
    img = Image.fromarray(canvas, mode="L")
    draw = ImageDraw.Draw(img)
    for (x0, ph), text in zip(offsets, stamps):
        if text:
            draw.text((x0 + 2, ph - 12), text, fill=255)
    return img


def cmd_plot(args) -> int:
    results = [read_result(p) for p in args.recon]
    ref = read_dataset(args.ref).reference if args.ref else None
    xy, yt, xy_txt, yt_txt = [], [], [], []
    for res in results:
        xy.append(xy_panel(res.recon, args.frame))
        yt.append(yt_panel(res.recon, args.column))
        if ref is not None:
            rep = psnr(res.recon, ref)
            xy_txt.append(f"PSNR {_fmt_db(rep.per_frame[args.frame])}")
            yt_txt.append(f"{_fmt_db(rep.mean)}")
        else:
            xy_txt.append("")
            yt_txt.append("")
    prefix = args.out
    _render(xy, xy_txt, args.scale).save(prefix + "_xy.png", optimize=False)
    _render(yt, yt_txt, args.scale).save(prefix + "_yt.png", optimize=False)
    print(f"wrote {prefix}_xy.png and {prefix}_yt.png")
    return EXIT_OK


def _fmt_db(v: float) -> str:
    return EXACT if math.isinf(v) else f"{v:.2f}"


# ------------------------------------------------------------------ bench

def cmd_bench(args) -> int:
    recon_cfg, motion_cfg = _configs(args)
    spec = PhantomSpec(n_frames=args.frames, height=args.size, width=args.size,
                       motion_amplitude=args.amplitude, seed=args.seed)
    ref, gt = make_phantom(spec)
    coils = make_coil_maps(args.coils, args.size, args.size)
    modes = list(args.modes) + (["oracle"] if args.oracle else [])
    rows = []
    for accel in args.accels:
        masks = make_masks(args.frames, args.size, args.size, accel, args.center_lines, args.seed)
        y = simulate_kspace(ref, coils, masks, args.noise, args.seed)
        ds = Dataset(y, coils, masks, ref, gt)
        for mode in modes:
            t0 = time.perf_counter()
            if mode == "oracle":
                x = precomputed_motion_reconstruct(y, coils, masks, gt, recon_cfg)
            else:
                x, *_ = run_mode(ds, mode, recon_cfg, motion_cfg, ref if args.early_stop else None)
            wall = time.perf_counter() - t0
            p = psnr(x, ref).per_frame
            s = ssim_sequence(x, ref)
            rows.append({"accel": accel, "mode": mode, "psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                         "ssim_mean": float(s.mean()), "ssim_std": float(s.std()), "wall_time": wall})
            log.info("R=%s %s: %.3f dB", accel, mode, p.mean())
    print(format_bench(rows, modes))
    _json_dump({"rows": rows}, args.out)
    metrics = {f"R{r['accel']}_{r['mode']}_psnr": r["psnr_mean"] for r in rows}
    write_manifest("bench", args, [], metrics)
    return EXIT_OK


def format_bench(rows: list, modes: Sequence[str]) -> str:
    head = "R    " + "".join(f"{m:>28}" for m in modes)
    out = [head, " " * 5 + "".join(f"{'PSNR dB / SSIM':>28}" for _ in modes)]
    for accel in sorted({r["accel"] for r in rows}):
        cells = []
        for m in modes:
            r = next((r for r in rows if r["accel"] == accel and r["mode"] == m), None)
            cells.append("-" if r is None else
                         f"{r['psnr_mean']:.2f}±{r['psnr_std']:.2f} / {r['ssim_mean']:.3f}±{r['ssim_std']:.3f}")
        out.append(f"{accel:<5}" + "".join(f"{c:>28}" for c in cells))
    return "\n".join(out)


# ------------------------------------------------------------------ rerun

COMMANDS = {"phantom": cmd_phantom, "recon": cmd_recon, "bench": cmd_bench}


def cmd_rerun(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        doc = json.load(fh)
    command = doc.get("command")
    if command not in COMMANDS:
        raise ValueError(f"manifest command {command!r} cannot be re-run")
    params = dict(doc["args"])
    params["out"] = _abspath(args.out)
    if "history" in params:
        params["history"] = None
    ns = argparse.Namespace(**params)
    code = COMMANDS[command](ns)
    if code != EXIT_OK:
        return code
    with open(manifest_path(ns.out), encoding="utf-8") as fh:
        new = json.load(fh)
    worst = _max_metric_diff(doc.get("metrics", {}), new.get("metrics", {}))
    print(f"rerun of {command}: max metric difference {worst:.3g}")
    if worst > RERUN_TOL_DB:
        print(f"error: metrics differ from the manifest by more than {RERUN_TOL_DB:g}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _max_metric_diff(old, new) -> float:
    if isinstance(old, dict):
        if not isinstance(new, dict) or set(old) != set(new):
            return math.inf
        return max((_max_metric_diff(old[k], new[k]) for k in old), default=0.0)
    if isinstance(old, list):
        if not isinstance(new, list) or len(old) != len(new):
            return math.inf
        return max((_max_metric_diff(a, b) for a, b in zip(old, new)), default=0.0)
    if isinstance(old, str) or isinstance(new, str):
        return 0.0 if old == new else math.inf
    return abs(float(old) - float(new))


# ----------------------------------------------------------------- parser

def _add_recon_flags(p: argparse.ArgumentParser) -> None:
    d, m = ReconConfig(), MotionConfig()
    p.add_argument("--iters", type=int, default=d.unroll_iters, help="unrolled iterations I (>= 1)")
    p.add_argument("--lam", type=float, default=d.lam)
    p.add_argument("--alpha", type=float, default=m.alpha)
    p.add_argument("--beta", type=float, default=m.beta)
    p.add_argument("--gamma", type=float, default=m.gamma)
    p.add_argument("--cg-iters", type=int, default=d.cg_max_iters)
    p.add_argument("--cg-tol", type=float, default=d.cg_tol)
    p.add_argument("--first-cg-iters", type=int, default=d.first_block_cg_iters)
    p.add_argument("--stop-delta", type=float, default=d.psnr_stop_delta)
    p.add_argument("--no-early-stop", dest="early_stop", action="store_false",
                   help="ignore the embedded reference when deciding when to stop")
    p.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bit-reproducible")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcmr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--coils", type=int, default=8)
    p.add_argument("--accel", type=float, default=8.0)
    p.add_argument("--center-lines", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=3.0)
    p.add_argument("--ellipses", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=_abspath, required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("recon", help="reconstruct a dataset")
    p.add_argument("--in", dest="input", type=_abspath, required=True)
    p.add_argument("--mode", choices=MODES, default="unrolled")
    _add_recon_flags(p)
    p.add_argument("--out", type=_abspath, required=True)
    p.add_argument("--history", type=_abspath, default=None, help="history JSON (default: OUT.history.json)")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="compare a reconstruction with the dataset reference")
    p.add_argument("--recon", type=_abspath, required=True)
    p.add_argument("--ref", type=_abspath, required=True, help="dataset holding the reference images")
    p.add_argument("--roi", choices=("full", "heart"), default="full", help="pixels used for EPE")
    p.add_argument("--json", type=_abspath, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="write x-y and y-t PNG panels")
    p.add_argument("--recon", type=_abspath, action="append", required=True, help="repeat for side-by-side panels")
    p.add_argument("--ref", type=_abspath, default=None, help="dataset for the PSNR stamp")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--column", type=int, required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bench", help="acceleration x mode sweep on the phantom")
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--coils", type=int, default=8)
    p.add_argument("--amplitude", type=float, default=3.0)
    p.add_argument("--center-lines", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--accels", type=_int_list, default=[8, 12, 16])
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], default=list(MODES))
    p.add_argument("--oracle", action="store_true", help="add a ground-truth-motion column")
    _add_recon_flags(p)
    p.add_argument("--out", type=_abspath, required=True, help="JSON report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare metrics")
    p.add_argument("--manifest", type=_abspath, required=True)
    p.add_argument("--out", required=True, help="new output path")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "modes", None):
        bad = [m for m in args.modes if m not in MODES]
        if bad:
            parser.error(f"unknown mode(s): {', '.join(bad)}")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValidationError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
