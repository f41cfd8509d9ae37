"""End-to-end composition: encode, decode + PnP, evaluate.

The CLI is a thin layer over these functions, so running the commands in
sequence gives exactly what calling them in-process gives.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import ObjectModel, Pose
from .gridcodec import (
    Detection, GridSpec, GroundTruthFrame, LabelGrid, box_wh, decode, encode_targets,
    fuse_detections, grid_from_bytes, grid_to_bytes, kmeans_anchors,
)
from .metrics import (
    MASK_IOU_THRESHOLD, REPROJ_THRESHOLD_PX, GroundTruthBox,
    ScoredBox, accuracy_curve, bbox_iou_2d, evaluate_pose, mean_average_precision, points_bbox,
)
from .pnp import Correspondences, PnPResult, solve_pnp
from .synth import NoiseModel, frame_rng, simulate_prediction

ADD_FRACTIONS = (0.1, 0.3, 0.5)
CURVE_THRESHOLDS = tuple(range(1, 51))


@dataclass(frozen=True)
class PoseDetection:
    detection: Detection
    model_id: str
    pnp: Optional[PnPResult]

    @property
    def pose(self) -> Optional[Pose]:
        return self.pnp.pose if self.pnp is not None else None


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("POSE6D_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``map`` over items, parallel up to POSE6D_THREADS, results in input order."""
    n = thread_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def models_by_class(models: Mapping[str, ObjectModel]) -> dict:
    out = {}
    for m in models.values():
        if m.class_index in out:
            raise ValueError(f"class {m.class_index} has more than one model")
        out[m.class_index] = m
    return out


def class_count(models: Mapping[str, ObjectModel]) -> int:
    return max(m.class_index for m in models.values()) + 1


def projected_boxes(frames: Sequence[GroundTruthFrame], models) -> np.ndarray:
    return np.array([box_wh(p[:8]) for f in frames for p in f.points2d(models)]).reshape(-1, 2)


def dataset_anchors(frames, models, k: int, seed: int = 0) -> list:
    """k-means anchors over the projected control-point boxes of a dataset."""
    return kmeans_anchors(projected_boxes(frames, models), k=k, seed=seed)


def quantize(grid: LabelGrid) -> LabelGrid:
    """Round-trip through the on-disk float32 format."""
    return grid_from_bytes(grid_to_bytes(grid), stride=grid.spec.stride, alpha=grid.spec.alpha,
                           d_th=grid.spec.d_th, conf_threshold=grid.spec.conf_threshold,
                           raw_confidence=grid.spec.raw_confidence)


def encode_frames(frames, models, spec: GridSpec, anchors, noise: NoiseModel | None = None,
                  seed: int = 0) -> list:
    """Target grids, or simulated predictions when ``noise`` is given."""
    def one(i):
        if noise is None:
            return encode_targets(frames[i], models, spec, anchors)[0]
        return simulate_prediction(frames[i], models, spec, anchors, noise, frame_rng(seed, i))
    out = []
    for i in range(len(frames)):
        try:
            out.append(one(i))
        except ValueError as exc:
            raise ValueError(f"frame {i}: {exc}") from exc
    return out


def detect(grid: LabelGrid, spec: GridSpec, fuse: bool) -> list:
    dets = decode(grid, spec)
    return fuse_detections(dets, spec) if fuse else dets


def solve_detection(det: Detection, frame: GroundTruthFrame, by_class) -> PoseDetection:
    model = by_class.get(det.class_index)
    if model is None:
        return PoseDetection(det, "", None)
    try:
        res = solve_pnp(Correspondences(det.points2d, model.control_points), frame.camera)
    except ValueError:
        res = None
    return PoseDetection(det, model.model_id, res)


def decode_frames(grids, frames, models, spec: GridSpec, fuse: bool) -> list:
    """Per frame, the list of :class:`PoseDetection`."""
    if len(grids) != len(frames):
        raise ValueError(f"{len(grids)} grids for {len(frames)} frames")
    by_class = models_by_class(models)

    def one(i):
        return [solve_detection(d, frames[i], by_class) for d in detect(grids[i], spec, fuse)]
    return ordered_map(one, range(len(frames)))


# -- serialization ---------------------------------------------------------

def detection_to_dict(pd: PoseDetection) -> dict:
    d = pd.detection
    rec = {
        "class_index": int(d.class_index),
        "model_id": pd.model_id,
        "score": float(d.score),
        "confidence": float(d.confidence),
        "cell": [int(d.cell[0]), int(d.cell[1])],
        "anchor": int(d.anchor_index),
        "points2d": [[float(x), float(y)] for x, y in d.points2d],
        "pose": None,
    }
    if pd.pnp is not None:
        rec["pose"] = {
            "R": [float(x) for x in pd.pnp.pose.rotation.ravel()],
            "t": [float(x) for x in pd.pnp.pose.translation],
        }
        rec["pnp_rms"] = float(pd.pnp.reprojection_rms)
        rec["converged"] = bool(pd.pnp.converged)
    return rec


def detection_from_dict(rec: dict) -> PoseDetection:
    det = Detection(
        class_index=int(rec["class_index"]),
        score=float(rec["score"]),
        points2d=np.asarray(rec["points2d"], dtype=np.float64),
        cell=tuple(rec["cell"]),
        anchor_index=int(rec["anchor"]),
        confidence=float(rec["confidence"]),
    )
    pnp = None
    if rec.get("pose") is not None:
        pose = Pose(np.reshape(rec["pose"]["R"], (3, 3)), rec["pose"]["t"])
        pnp = PnPResult(pose, float(rec.get("pnp_rms", 0.0)), 0, bool(rec.get("converged", True)))
    return PoseDetection(det, str(rec.get("model_id", "")), pnp)


def detections_to_jsonl(per_frame) -> str:
    lines = []
    for i, dets in enumerate(per_frame):
        rec = {"frame": i, "detections": [detection_to_dict(d) for d in dets]}
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def detections_from_jsonl(text: str) -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("frame") != len(out):
            raise ValueError(f"line {lineno}: expected frame {len(out)}, got {rec.get('frame')}")
        out.append([detection_from_dict(d) for d in rec["detections"]])
    return out


# -- evaluation ------------------------------------------------------------

def match_frame(frame: GroundTruthFrame, dets, models) -> list:
    """For each ground-truth object, the matched PoseDetection or None.

    Detections with a pose claim, by descending score, the unmatched object
    of their class whose projected box overlaps theirs most.
    """
    gt_boxes = [points_bbox(p[:8]) for p in frame.points2d(models)]
    matched = [None] * len(frame.objects)
    for pd in sorted((d for d in dets if d.pose is not None),
                     key=lambda d: -d.detection.score):
        box = points_bbox(pd.detection.points2d[:8])
        best, best_j = 0.0, -1
        for j, obj in enumerate(frame.objects):
            if matched[j] is not None or obj.class_index != pd.detection.class_index:
                continue
            iou = bbox_iou_2d(box, gt_boxes[j])
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = pd
    return matched


def _rate(flags) -> float:
    return float(np.mean(flags)) if len(flags) else 0.0


def evaluate(frames, per_frame_dets, models) -> dict:
    """Accuracy report over a dataset; deterministic, JSON-serializable."""
    if len(frames) != len(per_frame_dets):
        raise ValueError(f"{len(per_frame_dets)} detection records for {len(frames)} frames")
    rows = []  # (model_id, reproj, pose_err, diameter, mask_iou)
    scored, gts = [], []
    for i, (frame, dets) in enumerate(zip(frames, per_frame_dets)):
        for pd in dets:
            scored.append(ScoredBox(i, pd.detection.class_index, pd.detection.score,
                                    points_bbox(pd.detection.points2d[:8])))
        pts = frame.points2d(models)
        for obj, p in zip(frame.objects, pts):
            gts.append(GroundTruthBox(i, obj.class_index, points_bbox(p[:8])))
        for obj, pd in zip(frame.objects, match_frame(frame, dets, models)):
            model = models[obj.model_id]
            if pd is None:
                rows.append((obj.model_id, np.inf, np.inf, model.diameter, 0.0))
                continue
            try:
                rep = evaluate_pose(obj.pose, pd.pose, model, frame.camera)
            except ValueError:
                rows.append((obj.model_id, np.inf, np.inf, model.diameter, 0.0))
                continue
            rows.append((obj.model_id, rep.reproj_mean_px, rep.pose_error_m,
                         model.diameter, rep.mask_iou))

    def summarize(sel):
        out = {"n": len(sel)}
        out["reproj_5px"] = _rate([r[1] < REPROJ_THRESHOLD_PX for r in sel])
        for f in ADD_FRACTIONS:
            out[f"add_{int(round(f * 100))}"] = _rate([r[2] < f * r[3] for r in sel])
        out["mask_iou_0.5"] = _rate([r[4] > MASK_IOU_THRESHOLD for r in sel])
        return out

    per_object = {
        mid: dict(summarize([r for r in rows if r[0] == mid]), symmetric=bool(models[mid].symmetric))
        for mid in sorted({r[0] for r in rows})
    }
    mAP, curves = mean_average_precision(scored, gts)
    curve = accuracy_curve([r[1] for r in rows], CURVE_THRESHOLDS) if rows else \
        [(float(t), 0.0) for t in CURVE_THRESHOLDS]
    return {
        "n_frames": len(frames),
        "n_objects": len(rows),
        "thresholds": {
            "reproj_px": REPROJ_THRESHOLD_PX,
            "add_diameter_fractions": list(ADD_FRACTIONS),
            "mask_iou": MASK_IOU_THRESHOLD,
            "detection_iou": 0.5,
        },
        "aggregate": summarize(rows),
        "per_object": per_object,
        "map": mAP,
        "ap_per_class": {str(c): v.ap for c, v in curves.items()},
        "reproj_curve": [[t, f] for t, f in curve],
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def curve_to_csv(report: dict) -> str:
    lines = ["threshold_px,fraction_correct"]
    lines += [f"{t!r},{f!r}" for t, f in report["reproj_curve"]]
    return "\n".join(lines) + "\n"
