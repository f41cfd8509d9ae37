"""Pose accuracy and detection metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import CameraIntrinsics, ObjectModel, Pose, project_points

REPROJ_THRESHOLD_PX = 5.0
ADD_DIAMETER_FRACTION = 0.1
MASK_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class PoseErrorReport:
    reproj_mean_px: float
    add_m: float
    adds_m: float
    mask_iou: float
    used_symmetric: bool

    @property
    def pose_error_m(self) -> float:
        """ADD, or ADD-S for symmetric objects."""
        return self.adds_m if self.used_symmetric else self.add_m


@dataclass(frozen=True)
class PRCurve:
    points: list
    ap: float


@dataclass(frozen=True)
class ScoredBox:
    frame: int
    class_index: int
    score: float
    box: tuple


@dataclass(frozen=True)
class GroundTruthBox:
    frame: int
    class_index: int
    box: tuple


@dataclass(frozen=True)
class MCEstimate:
    iou: float
    stderr: float
    n_samples: int


def reprojection_error(gt: Pose, est: Pose, vertices, K: CameraIntrinsics) -> float:
    """Mean pixel distance between vertices projected under both poses."""
    a = project_points(vertices, gt, K)
    b = project_points(vertices, est, K)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def add_error(gt: Pose, est: Pose, vertices) -> float:
    V = np.asarray(vertices, dtype=np.float64)
    if len(V) < 1:
        raise ValueError("need at least one vertex")
    return float(np.mean(np.linalg.norm(gt.transform(V) - est.transform(V), axis=1)))


def adds_error(gt: Pose, est: Pose, vertices, chunk: int = 256) -> float:
    """Symmetric ADD: each true vertex against its closest estimated vertex (O(N^2))."""
    V = np.asarray(vertices, dtype=np.float64)
    if len(V) < 1:
        raise ValueError("need at least one vertex")
    a = gt.transform(V)
    b = est.transform(V)
    mins = np.empty(len(a))
    for s in range(0, len(a), chunk):
        d = np.linalg.norm(a[s:s + chunk, None, :] - b[None, :, :], axis=-1)
        mins[s:s + chunk] = d.min(axis=1)
    return float(np.mean(mins))


# -- silhouettes -----------------------------------------------------------

def _raster_triangles(tris: np.ndarray, width: int, height: int, ss: int) -> np.ndarray:
    """Fill (M, 3, 2) pixel-space triangles, sampling ``ss x ss`` points per pixel."""
    mask = np.zeros((height * ss, width * ss), dtype=bool)
    tris = tris * ss
    W, H = width * ss, height * ss
    for tri in tris:
        (x0, y0), (x1, y1), (x2, y2) = tri
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        lo = np.floor(tri.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) - 0.5).astype(int)
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if c0 > c1 or r0 > r1:
            continue
        xs = np.arange(c0, c1 + 1) + 0.5
        ys = np.arange(r0, r1 + 1) + 0.5
        X, Y = np.meshgrid(xs, ys)
        s = np.sign(area)
        e0 = ((x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0)) * s
        e1 = ((x2 - x1) * (Y - y1) - (y2 - y1) * (X - x1)) * s
        e2 = ((x0 - x2) * (Y - y2) - (y0 - y2) * (X - x2)) * s
        mask[r0:r1 + 1, c0:c1 + 1] |= (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    return mask


def silhouette(pose: Pose, model: ObjectModel, K: CameraIntrinsics,
               image_size: tuple | None = None, supersample: int = 1) -> np.ndarray:
    """Boolean silhouette at pixel centers (``supersample`` samples per axis)."""
    width, height = image_size or (K.width, K.height)
    if model.faces is not None and model.vertices is not None:
        px = project_points(model.vertices, pose, K)
        tris = px[model.faces]
    else:
        px = project_points(model.mesh_points(), pose, K)
        try:
            hull = px[ConvexHull(px).vertices]
        except QhullError:
            return np.zeros((height * supersample, width * supersample), dtype=bool)
        tris = np.stack([np.repeat(hull[:1], len(hull) - 2, axis=0), hull[1:-1], hull[2:]], axis=1)
    return _raster_triangles(tris, width, height, supersample)


def mask_iou_2d(gt: Pose, est: Pose, model: ObjectModel, K: CameraIntrinsics,
                image_size: tuple | None = None, supersample: int = 1) -> float:
    a = silhouette(gt, model, K, image_size, supersample)
    b = silhouette(est, model, K, image_size, supersample)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("both silhouettes are empty")
    return np.count_nonzero(a & b) / union


def bbox_iou_2d(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) rectangles; 0 if either has no area."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def points_bbox(points2d) -> tuple:
    p = np.asarray(points2d, dtype=np.float64)
    x1, y1 = p.min(axis=0)
    x2, y2 = p.max(axis=0)
    return (float(x1), float(y1), float(x2), float(y2))


# -- detection AP ----------------------------------------------------------

def average_precision(dets: Sequence[ScoredBox], gts: Sequence[GroundTruthBox],
                      iou_thresh: float = 0.5) -> PRCurve:
    """All-points interpolated AP for one class.

    Detections are taken by descending score (stable for ties) and each
    claims the unmatched ground truth of its frame with the highest IoU,
    if that IoU reaches ``iou_thresh``.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return PRCurve([], 0.0)
    by_frame = {}
    for g in gts:
        by_frame.setdefault(g.frame, []).append(g.box)
    used = {f: [False] * len(b) for f, b in by_frame.items()}
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = by_frame.get(d.frame, [])
        best, best_j = -1.0, -1
        for j, box in enumerate(boxes):
            if used[d.frame][j]:
                continue
            iou = bbox_iou_2d(d.box, box)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thresh:
            used[d.frame][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    points = [(float(r), float(p)) for r, p in zip(recall, precision)]
    # precision envelope, integrated over the recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return PRCurve(points, ap)


def mean_average_precision(dets: Sequence[ScoredBox], gts: Sequence[GroundTruthBox],
                           iou_thresh: float = 0.5) -> tuple:
    """(MAP, {class: PRCurve}) over classes with at least one ground truth."""
    classes = sorted({g.class_index for g in gts})
    curves = {
        c: average_precision([d for d in dets if d.class_index == c],
                             [g for g in gts if g.class_index == c], iou_thresh)
        for c in classes
    }
    if not curves:
        return 0.0, {}
    return float(np.mean([c.ap for c in curves.values()])), curves


# -- 3D cuboid IoU ---------------------------------------------------------

def cuboid_iou_3d_mc(pose_a: Pose, pose_b: Pose, corners, n_samples: int = 100_000,
                     seed: int = 0) -> MCEstimate:
    """Monte-Carlo IoU of the same box placed by two poses."""
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3)[:8]
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    world = np.vstack([pose_a.transform(corners), pose_b.transform(corners)])
    blo, bhi = world.min(axis=0), world.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = blo + rng.random((n_samples, 3)) * (bhi - blo)

    def inside(pose):
        local = (pts - pose.translation) @ pose.rotation
        return np.all((local >= lo) & (local <= hi), axis=1)

    ia, ib = inside(pose_a), inside(pose_b)
    either = int(np.count_nonzero(ia | ib))
    if either == 0:
        raise ValueError("no sample landed in either box")
    p = np.count_nonzero(ia & ib) / either
    return MCEstimate(float(p), float(np.sqrt(p * (1.0 - p) / either)), n_samples)


# -- aggregate -------------------------------------------------------------

def accuracy_curve(errors, thresholds) -> list:
    """Fraction of errors at or below each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty error list")
    return [(float(t), float(np.count_nonzero(e <= t) / e.size)) for t in thresholds]


def evaluate_pose(gt: Pose, est: Pose, model: ObjectModel, K: CameraIntrinsics,
                  supersample: int = 1) -> PoseErrorReport:
    V = model.mesh_points()
    add = add_error(gt, est, V)
    try:
        iou = mask_iou_2d(gt, est, model, K, supersample=supersample)
    except ValueError:
        iou = 0.0  # neither silhouette reaches the image
    return PoseErrorReport(
        reproj_mean_px=reprojection_error(gt, est, V, K),
        add_m=add,
        adds_m=adds_error(gt, est, V),
        mask_iou=iou,
        used_symmetric=bool(model.symmetric),
    )
