"""``pose6d`` command line: synth, encode, decode, eval, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .geometry import CameraIntrinsics, ObjectModel
from .gridcodec import Anchor, GridSpec, decode, fuse_detections, read_grid, write_grid
from .pnp import Correspondences, solve_pnp
from .synth import (
    NoiseModel, SceneConfig, box_mesh, cylinder_mesh, default_models, generate_dataset,
    load_ply, read_frames_jsonl, read_models_json, write_frames_jsonl, write_models_json,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_CAMERA = {"fx": 500.0, "fy": 500.0, "cx": 208.0, "cy": 208.0, "width": 416, "height": 416}


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------

def _parse_anchors(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    p = Path(text)
    if p.suffix == ".json" and p.exists():
        raw = json.loads(p.read_text())
        return [Anchor(float(w), float(h)) for w, h in raw]
    try:
        pairs = [s.split(",") for s in text.split(";") if s.strip()]
        return [Anchor(float(w), float(h)) for w, h in pairs]
    except ValueError as exc:
        raise UsageError(f"bad --anchors value {text!r}: {exc}") from exc


def _spec_from_args(args, C: int, A: int) -> GridSpec:
    try:
        return GridSpec(S=args.spec_s, stride=args.spec_stride, A=A, C=C, alpha=args.alpha,
                        d_th=args.dth, conf_threshold=args.threshold)
    except ValueError as exc:
        raise UsageError(f"invalid grid spec: {exc}") from exc


def _load_inputs(args):
    for p in (args.frames, args.models):
        if not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    try:
        return read_frames_jsonl(args.frames), read_models_json(args.models)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def _model_from_config(entry: dict, base: Path, default_scale: float) -> ObjectModel:
    mid = str(entry["model_id"])
    cls = int(entry["class_index"])
    sym = bool(entry.get("symmetric", False))
    if "ply" in entry:
        ply = Path(entry["ply"])
        if not ply.is_absolute():
            ply = base / ply
        V, F = load_ply(ply, scale=float(entry.get("scale", default_scale)))
    elif "box" in entry:
        V, F = box_mesh(entry["box"], subdivisions=int(entry.get("subdivisions", 1)))
    elif "cylinder" in entry:
        r, h = entry["cylinder"]
        V, F = cylinder_mesh(float(r), float(h))
    else:
        raise ValueError(f"model {mid!r}: needs one of 'ply', 'box', 'cylinder'")
    return ObjectModel.from_vertices(mid, cls, V, F, symmetric=sym)


def scene_config_from_dict(cfg: dict, base: Path = Path("."), seed=None,
                           scale: float = 1.0) -> SceneConfig:
    raw_models = cfg.get("models", "default")
    if raw_models == "default":
        models = default_models()
    else:
        models = [_model_from_config(m, base, scale) for m in raw_models]
    return SceneConfig(
        seed=int(cfg.get("seed", 0) if seed is None else seed),
        n_frames=int(cfg["n_frames"]),
        models=tuple(models),
        K=CameraIntrinsics.from_dict(cfg.get("camera", DEFAULT_CAMERA)),
        depth_range=tuple(cfg.get("depth_range", (0.5, 1.5))),
        max_objects=int(cfg.get("max_objects", 1)),
        min_separation_px=float(cfg.get("min_separation_px", 96.0)),
        stride=float(cfg.get("stride", 32.0)),
    )


def _grid_paths(grid_dir: str) -> list:
    d = Path(grid_dir)
    if not d.is_dir():
        raise UsageError(f"no such directory: {grid_dir}")
    return sorted(d.glob("*.ss6d"))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"no such config file: {path}")
    try:
        cfg = scene_config_from_dict(json.loads(path.read_text()), path.parent, args.seed, args.scale)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    frames = generate_dataset(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_frames_jsonl(out / "frames.jsonl", frames)
    write_models_json(out / "models.json", cfg.models)
    print(f"{len(frames)} frames written to {out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    frames, models = _load_inputs(args)
    C = pipeline.class_count(models)
    if args.anchors is not None:
        anchors = _parse_anchors(args.anchors)
    else:
        if args.num_anchors < 1:
            raise UsageError("--num-anchors must be >= 1")
        try:
            anchors = pipeline.dataset_anchors(frames, models, args.num_anchors, args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    spec = _spec_from_args(args, C, len(anchors))
    noise = None
    if args.simulate:
        try:
            noise = NoiseModel(args.sigma, args.conf_mode, args.conf_value, args.flip,
                               args.neighbor_votes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    grids = pipeline.encode_frames(frames, models, spec, anchors, noise, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(grids):
        write_grid(out / f"frame_{i:06d}.ss6d", g)
    _write_text(out / "anchors.json",
                json.dumps([[a.width, a.height] for a in anchors]) + "\n")
    print(f"{len(grids)} grids written to {out} (S={spec.S}, A={spec.A}, C={spec.C})")
    return EXIT_OK


def cmd_decode(args) -> int:
    frames, models = _load_inputs(args)
    paths = _grid_paths(args.grids)
    if len(paths) != len(frames):
        raise UsageError(f"{len(paths)} grid files for {len(frames)} frames")
    kw = dict(alpha=args.alpha, d_th=args.dth)
    try:
        grids = [read_grid(p, stride=args.spec_stride, **kw) for p in paths]
        spec = grids[0].spec.with_threshold(args.threshold) if grids else None
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if grids and any(g.spec.shape != spec.shape for g in grids):
        raise UsageError("grid files disagree in shape")
    per_frame = pipeline.decode_frames(grids, frames, models, spec, args.fuse) if grids else []
    failed = sum(1 for dets in per_frame for d in dets if d.pnp is None)
    _write_text(args.out, pipeline.detections_to_jsonl(per_frame))
    n = sum(len(d) for d in per_frame)
    print(f"{n} detections in {len(per_frame)} frames written to {args.out}")
    if failed:
        print(f"warning: {failed} detections without a pose", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    frames, models = _load_inputs(args)
    if not Path(args.detections).is_file():
        raise UsageError(f"no such file: {args.detections}")
    try:
        dets = pipeline.detections_from_jsonl(Path(args.detections).read_text())
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad detections file: {exc}") from exc
    if len(dets) != len(frames):
        raise UsageError(f"{len(dets)} detection records for {len(frames)} frames")
    report = pipeline.evaluate(frames, dets, models)
    text = pipeline.report_to_json(report)
    if args.report:
        _write_text(args.report, text)
    else:
        sys.stdout.write(text)
    if args.curve:
        stem = Path(args.curve).with_suffix("")
        _write_text(stem.with_suffix(".csv"), pipeline.curve_to_csv(report))
        from .plotting import plot_accuracy_curve
        plot_accuracy_curve(report["reproj_curve"], stem.with_suffix(".svg"))
    agg = report["aggregate"]
    print(f"reproj@5px={agg['reproj_5px']:.4f} add@10%={agg['add_10']:.4f} "
          f"mask_iou@0.5={agg['mask_iou_0.5']:.4f} map={report['map']:.4f}", file=sys.stderr)
    return EXIT_OK


def bench_rows(n: int, spec_args, seed: int = 0, sigma: float = 2.0) -> list:
    """Median and p95 wall-clock per stage over ``n`` simulated frames."""
    models = default_models()
    by_id = {m.model_id: m for m in models}
    K = CameraIntrinsics.from_dict(DEFAULT_CAMERA)
    cfg = SceneConfig(seed=seed, n_frames=n, models=tuple(models), K=K, max_objects=3)
    frames = generate_dataset(cfg)
    anchors = pipeline.dataset_anchors(frames, by_id, spec_args.A, seed)
    spec = GridSpec(S=spec_args.S, stride=spec_args.stride, A=spec_args.A, C=len(models),
                    alpha=spec_args.alpha, d_th=spec_args.d_th,
                    conf_threshold=spec_args.conf_threshold)
    noise = NoiseModel(sigma_px=sigma, neighbor_votes=2)
    grids = pipeline.encode_frames(frames, by_id, spec, anchors, noise, seed)
    by_class = pipeline.models_by_class(by_id)
    t_dec, t_fuse, t_pnp = [], [], []
    for frame, grid in zip(frames, grids):
        t0 = time.perf_counter()
        dets = decode(grid, spec)
        t1 = time.perf_counter()
        fused = fuse_detections(dets, spec)
        t2 = time.perf_counter()
        t_dec.append(t1 - t0)
        t_fuse.append(t2 - t1)
        for d in fused:
            corr = Correspondences(d.points2d, by_class[d.class_index].control_points)
            t3 = time.perf_counter()
            solve_pnp(corr, frame.camera)
            t_pnp.append(time.perf_counter() - t3)
    rows = []
    for stage, unit, ts in (("decode", "frame", t_dec), ("fusion", "frame", t_fuse),
                            ("pnp", "object", t_pnp)):
        ms = 1e3 * np.asarray(ts)
        rows.append({"stage": stage, "unit": unit, "count": len(ms),
                     "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95))})
    return rows


def cmd_bench(args) -> int:
    if args.n < 10:
        raise UsageError("--n must be >= 10")
    spec = _spec_from_args(args, C=3, A=args.num_anchors)
    rows = bench_rows(args.n, spec, args.seed)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["stage", "unit", "count", "median_ms", "p95_ms"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        _write_text(args.out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_spec_flags(p, full: bool = True):
    if full:
        p.add_argument("--spec-s", type=int, default=13, help="grid side S (default 13)")
        p.add_argument("--anchors", default=None,
                       help="anchor sizes 'w,h;w,h;...' or a JSON file; default k-means")
        p.add_argument("--num-anchors", type=int, default=5,
                       help="k for k-means anchors when --anchors is absent")
    p.add_argument("--spec-stride", type=float, default=32.0, help="pixels per cell")
    p.add_argument("--alpha", type=float, default=2.0, help="confidence sharpness")
    p.add_argument("--dth", type=float, default=30.0, help="confidence cutoff in pixels")
    p.add_argument("--threshold", type=float, default=0.5, help="detection threshold")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pose6d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--scale", type=float, default=1.0, help="unit scale for PLY meshes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="write one SS6D grid file per frame")
    p.add_argument("--frames", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out-dir", required=True)
    _add_spec_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--simulate", action="store_true",
                   help="write noisy simulated predictions instead of targets")
    p.add_argument("--sigma", type=float, default=0.0, help="pixel noise for --simulate")
    p.add_argument("--conf-mode", choices=("oracle", "from-noise"), default="oracle")
    p.add_argument("--conf-value", type=float, default=1.0)
    p.add_argument("--flip", type=float, default=0.0, help="class flip probability")
    p.add_argument("--neighbor-votes", type=int, default=0)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode grids into detections with poses")
    p.add_argument("grids", help="directory of .ss6d files")
    p.add_argument("--frames", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True, help="detections JSONL")
    p.add_argument("--fuse", action="store_true", help="confidence-weighted 3x3 fusion")
    _add_spec_flags(p, full=False)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="accuracy report for decoded detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--report", default=None, help="JSON report path (default stdout)")
    p.add_argument("--curve", default=None,
                   help="accuracy-vs-threshold curve; writes <stem>.csv and <stem>.svg")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time decode, fusion and PnP")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", default=None, help="CSV path")
    p.add_argument("--seed", type=int, default=0)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pose6d {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"pose6d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
