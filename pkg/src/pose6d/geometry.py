"""Rigid transforms, pinhole projection and object control points."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """A point has non-positive depth in the camera frame."""


def _as_rotation(R) -> np.ndarray:
    R = np.array(R, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(R.T @ R - np.eye(3))) >= ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation determinant is not +1")
    return R


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking object coordinates to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points) -> np.ndarray:
        """Map an (N, 3) array of object points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


def project_points(points, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Project (N, 3) object points to (N, 2) pixels.

    Raises :class:`BehindCameraError` if any point has depth <= 0.
    """
    cam = pose.transform(np.atleast_2d(points))
    z = cam[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (non-positive depth)")
    u = K.fx * cam[:, 0] / z + K.cx
    v = K.fy * cam[:, 1] / z + K.cy
    return np.stack([u, v], axis=1)


def project_point(p, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    return project_points(np.reshape(p, (1, 3)), pose, K)[0]


def control_points_of(vertices) -> np.ndarray:
    """Return the 9 control points of a vertex cloud.

    Rows 0..7 are the corners of the axis-aligned bounding box; corner ``i``
    takes the max along x if bit 0 of ``i`` is set, along y for bit 1 and
    along z for bit 2. Row 8 is the vertex mean.
    """
    V = np.asarray(vertices, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != 3 or V.shape[0] < 4:
        raise ValueError("need at least 4 vertices of shape (N, 3)")
    lo = V.min(axis=0)
    hi = V.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError("degenerate extent: bounding box has zero volume")
    corners = np.empty((8, 3))
    for i in range(8):
        for axis in range(3):
            corners[i, axis] = hi[axis] if (i >> axis) & 1 else lo[axis]
    return np.vstack([corners, V.mean(axis=0)])


def model_diameter(vertices) -> float:
    """Maximum pairwise distance between vertices."""
    V = np.asarray(vertices, dtype=np.float64)
    if len(V) > 64:
        try:
            V = V[ConvexHull(V).vertices]
        except QhullError:
            pass
    return float(pdist(V).max())


@dataclass(frozen=True)
class ObjectModel:
    model_id: str
    class_index: int
    control_points: np.ndarray
    diameter: float
    symmetric: bool = False
    vertices: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64).reshape(9, 3)
        lo, hi = cp[:8].min(axis=0), cp[:8].max(axis=0)
        if not np.allclose(control_points_of(cp[:8])[:8], cp[:8]):
            raise ValueError("control points 0..7 must be the box corners in binary order")
        if np.any(cp[8] < lo) or np.any(cp[8] > hi):
            raise ValueError("centroid must lie inside the bounding box")
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")
        object.__setattr__(self, "control_points", cp)
        if self.vertices is not None:
            object.__setattr__(
                self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
            )
        if self.faces is not None:
            object.__setattr__(
                self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
            )

    @classmethod
    def from_vertices(cls, model_id, class_index, vertices, faces=None, symmetric=False):
        V = np.asarray(vertices, dtype=np.float64)
        return cls(
            model_id=str(model_id),
            class_index=int(class_index),
            control_points=control_points_of(V),
            diameter=model_diameter(V),
            symmetric=bool(symmetric),
            vertices=V,
            faces=faces,
        )

    def mesh_points(self) -> np.ndarray:
        """Vertices used by the metrics; falls back to the box corners."""
        if self.vertices is not None:
            return self.vertices
        return self.control_points[:8]


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def axis_angle_to_matrix(w) -> np.ndarray:
    """Rodrigues' formula for a rotation vector ``w`` (radians)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        # second-order series; exact to double precision at this size
        R = np.eye(3) + W + 0.5 * W @ W
    else:
        R = (
            np.eye(3)
            + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta**2 * W @ W
        )
    # re-orthonormalize so Pose validation never trips on rounding
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_distance(R1, R2) -> float:
    """Geodesic angle between two rotations, in [0, pi]."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    angle = float(np.arccos(np.clip(c, -1.0, 1.0)))
    if angle < 1e-4:
        # arccos loses precision near 1; use the skew part instead
        S = R1.T @ R2
        s = np.linalg.norm([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]]) / 2.0
        angle = float(np.arcsin(min(s, 1.0)))
    return angle


def compose(p1: Pose, p2: Pose) -> Pose:
    """``p1 ∘ p2``: apply ``p2`` first, then ``p1``."""
    return Pose(p1.rotation @ p2.rotation, p1.rotation @ p2.translation + p1.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)
