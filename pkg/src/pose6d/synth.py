"""Deterministic synthetic scenes, simulated predictions and file I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import (
    BehindCameraError, CameraIntrinsics, ObjectModel, Pose, project_points,
    quaternion_to_matrix,
)
from .gridcodec import (
    CLASS0, CONF, N_COORDS, FrameObject, GridSpec, GroundTruthFrame, LabelGrid,
    assign_anchor, box_wh, cell_of, encode_slot_points, encode_targets, point_confidence_mean,
)

MAX_TRIES = 1000


class FrustumError(RuntimeError):
    """Rejection sampling could not place an object in view."""


@dataclass(frozen=True)
class SceneConfig:
    seed: int
    n_frames: int
    models: tuple
    K: CameraIntrinsics
    depth_range: tuple = (0.5, 1.5)
    max_objects: int = 1
    min_separation_px: float = 96.0
    stride: float = 32.0
    require_in_frame: bool = True

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth range must be positive and ordered")
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        if not self.models:
            raise ValueError("at least one model is required")
        object.__setattr__(self, "models", tuple(self.models))


@dataclass(frozen=True)
class NoiseModel:
    sigma_px: float = 0.0
    conf_mode: str = "oracle"
    conf_value: float = 1.0
    class_flip_prob: float = 0.0
    neighbor_votes: int = 0

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be >= 0")
        if self.conf_mode not in ("oracle", "from-noise"):
            raise ValueError(f"unknown conf_mode {self.conf_mode!r}")
        if not 0.0 <= self.class_flip_prob <= 1.0:
            raise ValueError("class_flip_prob must be in [0, 1]")
        if not 0 <= self.neighbor_votes <= 8:
            raise ValueError("neighbor_votes must be in [0, 8]")


# -- sampling --------------------------------------------------------------

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized 4-D Gaussian quaternion."""
    return quaternion_to_matrix(rng.standard_normal(4))


def sample_pose(rng: np.random.Generator, K: CameraIntrinsics, depth_range=(0.5, 1.5),
                model: Optional[ObjectModel] = None, require_in_frame: bool = True,
                max_tries: int = MAX_TRIES) -> Pose:
    """Random pose whose projected centroid is in-image at a depth in range.

    With a model and ``require_in_frame`` all 9 control points must project
    inside the image too.
    """
    lo, hi = depth_range
    if not 0 < lo <= hi:
        raise ValueError("depth range must be positive and ordered")
    pts = model.control_points if model is not None else np.zeros((1, 3))
    centroid = pts[-1]
    Kinv = np.linalg.inv(K.matrix)
    for _ in range(max_tries):
        R = random_rotation(rng)
        u = rng.uniform(0, K.width)
        v = rng.uniform(0, K.height)
        z = rng.uniform(lo, hi)
        # place the centroid on the ray through (u, v) at depth z
        t = z * (Kinv @ [u, v, 1.0]) - R @ centroid
        pose = Pose(R, t)
        try:
            px = project_points(pts if require_in_frame else pts[-1:], pose, K)
        except BehindCameraError:
            continue
        if np.all((px >= 0) & (px < [K.width, K.height])):
            return pose
    raise FrustumError(f"no in-frame pose found in {max_tries} tries")


def generate_frame(cfg: SceneConfig, rng: np.random.Generator) -> GroundTruthFrame:
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    objects, centers, cells = [], [], set()
    for _ in range(n_obj):
        for _ in range(MAX_TRIES):
            model = cfg.models[int(rng.integers(len(cfg.models)))]
            pose = sample_pose(rng, cfg.K, cfg.depth_range, model, cfg.require_in_frame)
            c = project_points(model.control_points[8:], pose, cfg.K)[0]
            cell = (int(c[1] // cfg.stride), int(c[0] // cfg.stride))
            if cell in cells:
                continue
            if any(np.linalg.norm(c - o) < cfg.min_separation_px for o in centers):
                continue
            break
        else:
            raise FrustumError("could not place object with the required separation")
        objects.append(FrameObject(model.model_id, model.class_index, pose))
        centers.append(c)
        cells.add(cell)
    return GroundTruthFrame(cfg.K, objects)


def generate_dataset(cfg: SceneConfig) -> list:
    """``n_frames`` frames; frame ``i`` uses its own child seed of ``cfg.seed``."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_frames)
    return [generate_frame(cfg, np.random.default_rng(s)) for s in children]


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for per-frame simulation (order-free)."""
    return np.random.default_rng([seed, index])


# -- simulated network output ---------------------------------------------

def simulate_prediction(frame: GroundTruthFrame, models: Mapping[str, ObjectModel],
                        spec: GridSpec, anchors: Sequence, noise: NoiseModel,
                        rng: np.random.Generator) -> LabelGrid:
    """A target grid with Gaussian pixel noise on the responsible slots.

    ``neighbor_votes`` extra cells of the 3x3 neighbourhood also predict the
    object with independent noise, the way a network spreads a large object
    over adjoining cells. Those slots sit outside the responsibility mask.
    """
    grid, mask = encode_targets(frame, models, spec, anchors)
    data = grid.data
    sigma = noise.sigma_px / spec.stride
    occupied = {tuple(int(i) for i in s) for s in zip(*np.nonzero(mask))}

    def fill(slot, truth, base_class, responsible):
        row, col, _ = slot
        target = encode_slot_points(truth, (row, col), spec.stride)
        vec = np.zeros(spec.D)
        vec[:N_COORDS] = target
        if sigma > 0:
            vec[:N_COORDS] += rng.normal(0.0, sigma, N_COORDS)
            if responsible:
                # the centroid activation cannot leave its cell
                vec[16:18] = np.clip(vec[16:18], 0.0, 1.0)
        if noise.conf_mode == "oracle":
            err_px = ((vec[:N_COORDS] - target) * spec.stride).reshape(-1, 2)
            vec[CONF] = point_confidence_mean(err_px, np.zeros_like(err_px), spec)
        else:
            vec[CONF] = noise.conf_value
        cls = base_class
        if spec.C > 1 and noise.class_flip_prob > 0 and rng.random() < noise.class_flip_prob:
            others = [c for c in range(spec.C) if c != base_class]
            cls = others[int(rng.integers(len(others)))]
        vec[CLASS0 + cls] = 1.0
        data[slot] = vec

    for obj, truth in zip(frame.objects, frame.points2d(models)):
        row, col = cell_of(truth[8], spec)
        a = assign_anchor(box_wh(truth[:8]), anchors)
        fill((row, col, a), truth, obj.class_index, True)
        if noise.neighbor_votes:
            nbrs = [(row + dr, col + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                    if (dr or dc) and 0 <= row + dr < spec.S and 0 <= col + dc < spec.S]
            free = [n for n in nbrs if (*n, a) not in occupied]
            k = min(noise.neighbor_votes, len(free))
            picks = rng.choice(len(free), size=k, replace=False) if k else []
            for i in sorted(int(i) for i in picks):
                slot = (*free[i], a)
                occupied.add(slot)
                fill(slot, truth, obj.class_index, False)
    return grid


# -- models ----------------------------------------------------------------

def box_mesh(size, center=(0.0, 0.0, 0.0), subdivisions: int = 1):
    """Vertices and triangles of an axis-aligned box surface."""
    size = np.asarray(size, dtype=np.float64)
    n = subdivisions + 1
    verts, faces, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    g = np.linspace(-0.5, 0.5, n)
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for side in (-0.5, 0.5):
            for i in range(n - 1):
                for j in range(n - 1):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = side
                        p[u_ax] = g[i + di]
                        p[v_ax] = g[j + dj]
                        quad.append(vid(p))
                    faces.append((quad[0], quad[1], quad[2]))
                    faces.append((quad[0], quad[2], quad[3]))
    V = np.array(verts) * size + np.asarray(center, dtype=np.float64)
    return V, np.array(faces, dtype=np.int64)


def cylinder_mesh(radius: float, height: float, segments: int = 24):
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.hstack([ring, np.full((segments, 1), -height / 2)])
    top = np.hstack([ring, np.full((segments, 1), height / 2)])
    V = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i),
                  (cb, j, i), (ct, segments + i, segments + j)]
    return V, np.array(faces, dtype=np.int64)


def default_models() -> list:
    """Three small objects: two boxes and a symmetric cylinder."""
    box_a = box_mesh((0.10, 0.08, 0.06), subdivisions=2)
    box_b = box_mesh((0.06, 0.12, 0.05), center=(0.0, 0.01, 0.0), subdivisions=2)
    cyl = cylinder_mesh(0.04, 0.10)
    return [
        ObjectModel.from_vertices("box_a", 0, *box_a),
        ObjectModel.from_vertices("box_b", 1, *box_b),
        ObjectModel.from_vertices("can", 2, *cyl, symmetric=True),
    ]


# -- persistence -----------------------------------------------------------

def frame_to_dict(frame: GroundTruthFrame) -> dict:
    return {
        "camera": frame.camera.to_dict(),
        "objects": [
            {
                "model_id": o.model_id,
                "class_index": int(o.class_index),
                "R": [float(x) for x in o.pose.rotation.ravel()],
                "t": [float(x) for x in o.pose.translation],
            }
            for o in frame.objects
        ],
    }


def frame_from_dict(d: dict) -> GroundTruthFrame:
    cam = CameraIntrinsics.from_dict(d["camera"])
    objs = [
        FrameObject(str(o["model_id"]), int(o["class_index"]),
                    Pose(np.reshape(o["R"], (3, 3)), o["t"]))
        for o in d["objects"]
    ]
    return GroundTruthFrame(cam, objs)


def write_frames_jsonl(path, frames: Sequence[GroundTruthFrame]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in frames:
            fh.write(json.dumps(frame_to_dict(f), separators=(",", ":")) + "\n")


def read_frames_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(frame_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad frame record: {exc}") from exc
    return out


def model_to_dict(m: ObjectModel) -> dict:
    d = {
        "model_id": m.model_id,
        "class_index": int(m.class_index),
        "control_points": m.control_points.tolist(),
        "diameter": float(m.diameter),
        "symmetric": bool(m.symmetric),
    }
    if m.vertices is not None:
        d["vertices"] = m.vertices.tolist()
    if m.faces is not None:
        d["faces"] = m.faces.tolist()
    return d


def model_from_dict(d: dict) -> ObjectModel:
    return ObjectModel(
        model_id=str(d["model_id"]),
        class_index=int(d["class_index"]),
        control_points=np.asarray(d["control_points"], dtype=np.float64),
        diameter=float(d["diameter"]),
        symmetric=bool(d.get("symmetric", False)),
        vertices=d.get("vertices"),
        faces=d.get("faces"),
    )


def write_models_json(path, models: Sequence[ObjectModel]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump([model_to_dict(m) for m in models], fh, separators=(",", ":"))
        fh.write("\n")


def read_models_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = [raw]
    models = [model_from_dict(d) for d in raw]
    return {m.model_id: m for m in models}


# -- PLY -------------------------------------------------------------------

class PlyError(ValueError):
    pass


def load_ply(path, scale: float = 1.0):
    """Read an ASCII PLY mesh; returns (vertices * scale, faces or None).

    Polygons with more than three corners are fan-triangulated. LineMod
    meshes are in millimetres, so ``scale=0.001`` gives metres.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.decode("latin-1").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}:1: missing 'ply' magic")
    elements = []  # (name, count, [(prop_name, is_list)])
    fmt = None
    lineno = 1
    for lineno in range(2, len(lines) + 1):
        tok = lines[lineno - 1].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise PlyError(f"{path}:{lineno}: malformed format line")
            fmt = tok[1]
            if fmt != "ascii":
                raise PlyError(f"{path}:{lineno}: unsupported PLY format {fmt!r} (ASCII only)")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"{path}:{lineno}: malformed element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"{path}:{lineno}: property before any element")
            if len(tok) >= 5 and tok[1] == "list":
                elements[-1][2].append((tok[4], True))
            elif len(tok) == 3:
                elements[-1][2].append((tok[2], False))
            else:
                raise PlyError(f"{path}:{lineno}: malformed property line")
        elif tok[0] == "end_header":
            break
        else:
            raise PlyError(f"{path}:{lineno}: unexpected header line {tok[0]!r}")
    else:
        raise PlyError(f"{path}:{lineno}: missing end_header")
    if fmt is None:
        raise PlyError(f"{path}: missing format line")

    vertices, faces = None, None
    cursor = lineno
    for name, count, props in elements:
        names = [p[0] for p in props]
        if name == "vertex":
            missing = [a for a in ("x", "y", "z") if a not in names]
            if missing:
                raise PlyError(f"{path}: vertex element lacks properties {missing}")
            cols = [names.index(a) for a in ("x", "y", "z")]
            if any(props[c][1] for c in cols):
                raise PlyError(f"{path}: vertex coordinates cannot be lists")
        rows = []
        for _ in range(count):
            cursor += 1
            if cursor > len(lines):
                raise PlyError(f"{path}:{cursor}: unexpected end of file in {name!r}")
            tok = lines[cursor - 1].split()
            try:
                if name == "vertex":
                    if len(tok) < len(props):
                        raise ValueError("too few values")
                    rows.append([float(tok[c]) for c in cols])
                elif name == "face":
                    n = int(tok[0])
                    idx = [int(v) for v in tok[1:1 + n]]
                    if n < 3 or len(idx) != n:
                        raise ValueError("bad vertex index list")
                    rows.extend((idx[0], idx[i], idx[i + 1]) for i in range(1, n - 1))
            except ValueError as exc:
                raise PlyError(f"{path}:{cursor}: {exc}") from exc
        if name == "vertex":
            vertices = np.array(rows, dtype=np.float64).reshape(-1, 3) * scale
        elif name == "face":
            faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if vertices is None:
        raise PlyError(f"{path}: no vertex element")
    if faces is not None and faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise PlyError(f"{path}: face index out of range")
    return vertices, faces
