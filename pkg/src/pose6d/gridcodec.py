"""Label grid encoding, decoding and confidence-weighted fusion.

A label grid holds, for every cell ``(row, col)`` and anchor slot, the
vector ``[x0, y0, ..., x8, y8, confidence, p_0 .. p_{C-1}]``. Point 8 is
the projected centroid. Offsets are in cell units relative to the cell's
top-left corner. Canonical grids are stored in *activated* space; the
*network* space variant holds the corresponding pre-activations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import CameraIntrinsics, ObjectModel, Pose, project_points

N_POINTS = 9
N_COORDS = 2 * N_POINTS
CONF = N_COORDS
CLASS0 = N_COORDS + 1
CENTROID = slice(16, 18)

ACTIVATED = "activated"
NETWORK = "network"

MAGIC = b"SS6D"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


class SlotCollisionError(ValueError):
    """Two objects were assigned to the same (cell, anchor) slot."""


@dataclass(frozen=True)
class GridSpec:
    S: int = 13
    stride: float = 32.0
    A: int = 5
    C: int = 1
    alpha: float = 2.0
    d_th: float = 30.0
    conf_threshold: float = 0.5
    raw_confidence: bool = False

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if not self.stride > 0:
            raise ValueError("stride must be positive")
        if not 1 <= self.A <= 5:
            raise ValueError("A must be in [1, 5]")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if not (self.alpha > 0 and self.d_th > 0):
            raise ValueError("alpha and d_th must be positive")
        # values above 1 are legal and prune every slot
        if not self.conf_threshold >= 0.0:
            raise ValueError("conf_threshold must be >= 0")

    @property
    def D(self) -> int:
        return N_COORDS + self.C + 1

    @property
    def shape(self) -> tuple:
        return (self.S, self.S, self.A, self.D)

    @property
    def input_size(self) -> float:
        return self.S * self.stride

    def with_threshold(self, threshold: float) -> "GridSpec":
        return GridSpec(self.S, self.stride, self.A, self.C, self.alpha,
                        self.d_th, threshold, self.raw_confidence)


@dataclass(frozen=True)
class Anchor:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("anchor sides must be positive")


@dataclass
class LabelGrid:
    spec: GridSpec
    data: np.ndarray
    space: str = ACTIVATED

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.spec.shape:
            raise ValueError(f"grid shape {self.data.shape} != {self.spec.shape}")
        if self.space not in (ACTIVATED, NETWORK):
            raise ValueError(f"unknown space {self.space!r}")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "LabelGrid":
        return cls(spec, np.zeros(spec.shape))

    def copy(self) -> "LabelGrid":
        return LabelGrid(self.spec, self.data.copy(), self.space)


@dataclass(frozen=True)
class Detection:
    class_index: int
    score: float
    points2d: np.ndarray
    cell: tuple
    anchor_index: int
    confidence: float


@dataclass(frozen=True)
class FrameObject:
    model_id: str
    class_index: int
    pose: Pose


@dataclass
class GroundTruthFrame:
    camera: CameraIntrinsics
    objects: list = field(default_factory=list)

    def points2d(self, models: Mapping[str, ObjectModel]) -> list:
        """Projected control points (9 x 2) for every object."""
        return [
            project_points(models[o.model_id].control_points, o.pose, self.camera)
            for o in self.objects
        ]


# -- confidence ------------------------------------------------------------

def confidence(d, alpha: float = 2.0, d_th: float = 30.0, raw: bool = False):
    """Exponential confidence of a pixel distance with a hard cutoff.

    The default form is normalized to 1 at ``d = 0`` and 0 at ``d_th``;
    ``raw=True`` returns ``exp(alpha * (1 - d / d_th))`` inside the cutoff.
    """
    d = np.asarray(d, dtype=np.float64)
    inside = d < d_th
    e = np.exp(alpha * (1.0 - np.where(inside, d, d_th) / d_th))
    val = e if raw else (e - 1.0) / np.expm1(alpha)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def confidence_derivative(d, alpha: float = 2.0, d_th: float = 30.0, raw: bool = False):
    """d confidence / d distance (zero beyond the cutoff)."""
    d = np.asarray(d, dtype=np.float64)
    inside = d < d_th
    e = np.exp(alpha * (1.0 - np.where(inside, d, d_th) / d_th)) * (-alpha / d_th)
    val = e if raw else e / np.expm1(alpha)
    return np.where(inside, val, 0.0)


def point_confidence_mean(pred9, true9, spec: GridSpec | None = None) -> float:
    spec = spec or GridSpec()
    d = np.linalg.norm(np.asarray(pred9, float) - np.asarray(true9, float), axis=-1)
    return float(np.mean(confidence(d, spec.alpha, spec.d_th, spec.raw_confidence)))


# -- offsets ---------------------------------------------------------------

def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cell_of(point, spec: GridSpec) -> tuple:
    """(row, col) of the cell containing a pixel; error if off-grid."""
    x, y = np.asarray(point, dtype=np.float64) / spec.stride
    col, row = int(np.floor(x)), int(np.floor(y))
    if not (0 <= row < spec.S and 0 <= col < spec.S):
        raise ValueError(f"point {tuple(point)} lies outside the {spec.S}x{spec.S} grid")
    return row, col


def encode_offsets(point, cell, stride: float, is_centroid: bool, logit_space: bool = False):
    row, col = cell
    off = np.asarray(point, dtype=np.float64) / stride - (col, row)
    if is_centroid:
        if logit_space:
            if np.any(off <= 0.0) or np.any(off >= 1.0):
                raise ValueError("centroid offset on the cell boundary has no logit")
            return logit(off)
        if np.any(off < 0.0) or np.any(off > 1.0):
            raise ValueError("centroid does not lie in its cell")
    return off


def decode_offsets(offsets, cell, stride: float, is_centroid: bool, logit_space: bool = False):
    row, col = cell
    off = np.asarray(offsets, dtype=np.float64)
    if is_centroid and logit_space:
        off = sigmoid(off)
    return (off + (col, row)) * stride


def decode_slot_points(vec, cell, stride: float) -> np.ndarray:
    """Pixel positions of the 9 points stored in an activated slot vector."""
    row, col = cell
    off = np.asarray(vec[:N_COORDS], dtype=np.float64).reshape(N_POINTS, 2)
    return (off + (col, row)) * stride


def encode_slot_points(points9, cell, stride: float) -> np.ndarray:
    row, col = cell
    return (np.asarray(points9, dtype=np.float64) / stride - (col, row)).ravel()


# -- space conversion ------------------------------------------------------

def to_network(grid: LabelGrid, eps: float | None = None) -> LabelGrid:
    """Pre-activations: logit on centroid offsets and confidence, log on classes.

    Values on the boundary of the activation range have no pre-image; they
    raise unless ``eps`` is given, in which case they are clipped first.
    """
    if grid.space == NETWORK:
        return grid.copy()
    d = grid.data.copy()
    bounded = np.concatenate([d[..., CENTROID], d[..., CONF:CONF + 1]], axis=-1)
    probs = d[..., CLASS0:]
    if eps is None:
        if np.any(bounded <= 0) or np.any(bounded >= 1) or np.any(probs <= 0):
            raise ValueError("activated values on the range boundary; pass eps to clip")
    else:
        bounded = np.clip(bounded, eps, 1.0 - eps)
        probs = np.clip(probs, eps, None)
    d[..., CENTROID] = logit(bounded[..., :2])
    d[..., CONF] = logit(bounded[..., 2])
    d[..., CLASS0:] = np.log(probs)
    return LabelGrid(grid.spec, d, NETWORK)


def to_activated(grid: LabelGrid) -> LabelGrid:
    """Inverse of :func:`to_network`; class logits go through a softmax."""
    if grid.space == ACTIVATED:
        return grid.copy()
    d = grid.data.copy()
    d[..., CENTROID] = sigmoid(d[..., CENTROID])
    d[..., CONF] = sigmoid(d[..., CONF])
    z = d[..., CLASS0:]
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    d[..., CLASS0:] = z / z.sum(axis=-1, keepdims=True)
    return LabelGrid(grid.spec, d, ACTIVATED)


# -- anchors ---------------------------------------------------------------

def _cocentered_iou(wh, anchors_wh) -> np.ndarray:
    wh = np.asarray(wh, dtype=np.float64)
    a = np.asarray(anchors_wh, dtype=np.float64)
    inter = np.minimum(wh[..., None, 0], a[:, 0]) * np.minimum(wh[..., None, 1], a[:, 1])
    union = wh[..., None, 0] * wh[..., None, 1] + a[:, 0] * a[:, 1] - inter
    return inter / union


def _anchor_array(anchors) -> np.ndarray:
    return np.array([[a.width, a.height] if isinstance(a, Anchor) else a for a in anchors],
                    dtype=np.float64).reshape(-1, 2)


def assign_anchor(object_box_wh, anchors: Sequence) -> int:
    """Index of the anchor with the highest co-centered IoU (lowest index wins ties)."""
    if len(anchors) == 0:
        raise ValueError("no anchors")
    return int(np.argmax(_cocentered_iou(object_box_wh, _anchor_array(anchors))))


def kmeans_anchors(boxes, k: int = 5, seed: int = 0, distance: str = "iou",
                   max_iter: int = 100) -> list:
    """Cluster (w, h) box sizes into ``k`` anchors, sorted by area.

    ``distance="iou"`` uses ``1 - IoU`` of co-centered boxes,
    ``"euclidean"`` plain distance in (w, h).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if len(boxes) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(boxes)}")
    if distance not in ("iou", "euclidean"):
        raise ValueError(f"unknown distance {distance!r}")
    rng = np.random.default_rng(seed)
    centers = boxes[rng.choice(len(boxes), size=k, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        if distance == "iou":
            dist = 1.0 - _cocentered_iou(boxes, centers)
        else:
            dist = np.linalg.norm(boxes[:, None, :] - centers[None], axis=-1)
        new_assign = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = boxes[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return [Anchor(float(w), float(h)) for w, h in centers[order]]


def box_wh(points2d) -> np.ndarray:
    p = np.asarray(points2d, dtype=np.float64)
    return p.max(axis=0) - p.min(axis=0)


# -- encode / decode -------------------------------------------------------

def encode_targets(frame: GroundTruthFrame, models: Mapping[str, ObjectModel],
                   spec: GridSpec, anchors: Sequence):
    """Target grid and responsibility mask (S, S, A) for one frame."""
    if len(anchors) != spec.A:
        raise ValueError(f"{len(anchors)} anchors given for A={spec.A}")
    grid = LabelGrid.zeros(spec)
    mask = np.zeros(spec.shape[:3], dtype=bool)
    owner = {}
    for idx, (obj, pts) in enumerate(zip(frame.objects, frame.points2d(models))):
        if not 0 <= obj.class_index < spec.C:
            raise ValueError(f"object {idx}: class {obj.class_index} outside [0, {spec.C})")
        cell = cell_of(pts[8], spec)
        a = assign_anchor(box_wh(pts[:8]), anchors)
        slot = (*cell, a)
        if slot in owner:
            other = owner[slot]
            raise SlotCollisionError(
                f"objects {other} ({frame.objects[other].model_id}) and {idx} "
                f"({obj.model_id}) both map to cell {cell}, anchor {a}"
            )
        owner[slot] = idx
        vec = grid.data[slot]
        vec[:N_COORDS] = encode_slot_points(pts, cell, spec.stride)
        vec[CONF] = 1.0
        vec[CLASS0 + obj.class_index] = 1.0
        mask[slot] = True
    return grid, mask


def decode(pred: LabelGrid, spec: GridSpec | None = None) -> list:
    """Detections for every slot whose confidence reaches the threshold."""
    spec = spec or pred.spec
    if pred.space == NETWORK:
        pred = to_activated(pred)
    data = pred.data
    conf = data[..., CONF]
    dets = []
    for row, col, a in zip(*np.nonzero(conf >= spec.conf_threshold)):
        vec = data[row, col, a]
        probs = vec[CLASS0:]
        cls = int(np.argmax(probs))
        c = float(vec[CONF])
        dets.append(Detection(
            class_index=cls,
            score=float(probs[cls]) * c,
            points2d=decode_slot_points(vec, (int(row), int(col)), spec.stride),
            cell=(int(row), int(col)),
            anchor_index=int(a),
            confidence=c,
        ))
    return dets


def fuse_detections(dets: Sequence[Detection], spec: GridSpec) -> list:
    """Confidence-weighted averaging over the 3x3 neighbourhood of each seed.

    Per class, the most confident remaining detection seeds a group; the
    best anchor of every neighbouring cell at or above threshold joins it,
    and the whole neighbourhood is then suppressed. Repeats until no
    detection above threshold remains.
    """
    out = []
    for cls in sorted({d.class_index for d in dets}):
        pool = [d for d in dets if d.class_index == cls and d.confidence >= spec.conf_threshold]
        # stable order: confidence desc, then cell, then anchor
        pool.sort(key=lambda d: (-d.confidence, d.cell, d.anchor_index))
        while pool:
            seed = pool[0]
            r0, c0 = seed.cell
            near = [d for d in pool if abs(d.cell[0] - r0) <= 1 and abs(d.cell[1] - c0) <= 1]
            best = {}
            for d in near:
                best.setdefault(d.cell, d)
            best[seed.cell] = seed
            group = [best[c] for c in sorted(best)]
            w = np.array([d.confidence for d in group])
            pts = np.stack([d.points2d for d in group])
            if len(group) == 1:
                fused = seed.points2d
            else:
                fused = np.tensordot(w, pts, axes=1) / w.sum()
            out.append(Detection(cls, seed.score, fused, seed.cell, seed.anchor_index,
                                 seed.confidence))
            taken = {id(d) for d in near}
            pool = [d for d in pool if id(d) not in taken]
    out.sort(key=lambda d: (d.class_index, -d.confidence, d.cell))
    return out


def best_per_class(dets: Sequence[Detection]) -> list:
    """Unfused baseline: the single most confident detection per class."""
    best = {}
    for d in sorted(dets, key=lambda d: (-d.confidence, d.cell, d.anchor_index)):
        best.setdefault(d.class_index, d)
    return [best[c] for c in sorted(best)]


# -- grid files ------------------------------------------------------------

def grid_to_bytes(grid: LabelGrid) -> bytes:
    spec = grid.spec
    flag = 0 if grid.space == ACTIVATED else 1
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, spec.S, spec.A, spec.C, flag)
    return header + grid.data.astype("<f4").tobytes(order="C")


def grid_from_bytes(buf: bytes, stride: float = 32.0, **spec_kwargs) -> LabelGrid:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated grid file header")
    magic, version, S, A, C, flag = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported grid version {version}")
    if flag not in (0, 1):
        raise ValueError(f"bad space flag {flag}")
    spec = GridSpec(S=S, stride=stride, A=A, C=C, **spec_kwargs)
    n = S * S * A * spec.D
    payload = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    if payload.size != n:
        raise ValueError(f"grid payload has {payload.size} floats, expected {n}")
    return LabelGrid(spec, payload.astype(np.float64).reshape(spec.shape),
                     ACTIVATED if flag == 0 else NETWORK)


def write_grid(path, grid: LabelGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def read_grid(path, stride: float = 32.0, **spec_kwargs) -> LabelGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read(), stride=stride, **spec_kwargs)
