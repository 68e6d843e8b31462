"""Core geometric types: voxel grids, point maps, poses and similarity transforms.

Conventions used throughout the package:

* Rotations are stored as unit quaternions ``(w, x, y, z)``; matrices are
  derived on demand.
* A :class:`CameraPose` is camera-to-world: ``world = R @ cam + T``.
* A :class:`SimilarityTransform` acts as ``p -> s * (R @ p + T)``.
* The normalized shape cube is ``[0, 1)^3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

__all__ = [
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_multiply",
    "axis_angle_matrix",
    "rotation_angle_deg",
    "SparseVoxelGrid",
    "PointMap",
    "CameraPose",
    "SimilarityTransform",
    "Intrinsics",
    "apply_pose",
    "apply_similarity",
    "aligned_pointmap",
    "pointmap_normals",
    "voxel_indices",
    "voxelize_points",
]


# ---------------------------------------------------------------------------
# rotation helpers


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion with non-negative ``w``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        S = np.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def axis_angle_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * K @ K


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix, in degrees, in ``[0, 180]``."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _as_quat(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape == (3, 3):
        return matrix_to_quat(r)
    if r.shape == (4,):
        n = np.linalg.norm(r)
        if n == 0:
            raise ValueError("zero quaternion")
        return r / n
    raise ShapeMismatch(f"rotation must be a quaternion or 3x3 matrix, got shape {r.shape}")


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform; ``q`` is renormalized on construction."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _as_quat(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "CameraPose":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> "CameraPose":
        Rt = self.R.T
        return CameraPose.from_matrix(Rt, -Rt @ self.t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        return self.t

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(d["q"], d["t"])


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> s * (R @ p + T)``."""

    s: float = 1.0
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "q", _as_quat(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, s, R, t) -> "SimilarityTransform":
        return cls(s, matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points) -> np.ndarray:
        return self.s * (np.asarray(points, dtype=np.float64) @ self.R.T + self.t)

    def inverse(self) -> "SimilarityTransform":
        Rt = self.R.T
        return SimilarityTransform.from_matrix(1.0 / self.s, Rt, -self.s * (Rt @ self.t))

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying ``first`` and then ``self``."""
        R = self.R
        return SimilarityTransform.from_matrix(
            self.s * first.s, R @ first.R, R @ first.t + self.t / first.s
        )

    def to_json(self) -> dict:
        return {"s": self.s, "q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_json(cls, d: dict) -> "SimilarityTransform":
        return cls(d["s"], d["q"], d["t"])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy)}

    @classmethod
    def from_json(cls, d: dict) -> "Intrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"])


@dataclass(frozen=True)
class PointMap:
    """Per-pixel 3D points ``(H, W, 3)`` with a foreground mask ``(H, W)``."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3 or valid.shape != pts.shape[:2]:
            raise ShapeMismatch(f"points {pts.shape} / mask {valid.shape} are inconsistent")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def _map_valid(self, fn) -> "PointMap":
        out = self.points.copy()
        out[self.valid] = fn(self.points[self.valid])
        return PointMap(out, self.valid.copy())


@dataclass
class SparseVoxelGrid:
    """Occupied voxels of an ``N^3`` lattice over the unit cube.

    ``occupied`` is kept as a lexicographically sorted, duplicate-free
    ``(K, 3)`` integer array; its row order is the voxel token order.
    """

    resolution: int
    occupied: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        occ = np.asarray(self.occupied, dtype=np.int64).reshape(-1, 3)
        if occ.size and (occ.min() < 0 or occ.max() >= self.resolution):
            raise ValueError("occupied voxel outside [0, N)^3")
        occ = np.unique(occ, axis=0)
        if self.features is not None:
            feats = np.asarray(self.features)
            if feats.shape[0] != occ.shape[0]:
                raise ShapeMismatch("one feature row per occupied voxel required")
            self.features = feats
        self.occupied = occ

    @classmethod
    def from_dense(cls, dense) -> "SparseVoxelGrid":
        dense = np.asarray(dense, dtype=bool)
        if dense.ndim != 3 or len(set(dense.shape)) != 1:
            raise ShapeMismatch("dense occupancy must be a cube")
        return cls(dense.shape[0], np.argwhere(dense))

    def dense(self) -> np.ndarray:
        n = self.resolution
        out = np.zeros((n, n, n), dtype=bool)
        if len(self.occupied):
            out[tuple(self.occupied.T)] = True
        return out

    def index_volume(self) -> np.ndarray:
        """``N^3`` array holding each occupied voxel's token index, -1 elsewhere."""
        n = self.resolution
        vol = np.full((n, n, n), -1, dtype=np.int64)
        if len(self.occupied):
            vol[tuple(self.occupied.T)] = np.arange(len(self.occupied))
        return vol

    def __len__(self) -> int:
        return len(self.occupied)


# ---------------------------------------------------------------------------
# transforms


def apply_pose(pose: CameraPose, pm: PointMap) -> PointMap:
    return pm._map_valid(pose.apply)


def apply_similarity(sim: SimilarityTransform, pm: PointMap) -> PointMap:
    return pm._map_valid(sim.apply)


def aligned_pointmap(pm: PointMap, pose: CameraPose, sim: SimilarityTransform) -> PointMap:
    """Camera-space map -> shape cube: ``s * (R @ (R_i @ X + T_i) + T)``."""
    return apply_similarity(sim, apply_pose(pose, pm))


def pointmap_normals(pm: PointMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit normals of a point map.

    ``d_u`` is the derivative along columns and ``d_v`` along rows; the normal
    is ``normalize(d_u x d_v)``. For a camera-space map of a surface seen by a
    ``+z``-looking camera (x right, y down) the normal points away from the
    camera. Central differences are used in the interior and one-sided
    differences on the image border. A normal is invalid if the pixel or any
    neighbour its stencil needs is invalid, or the cross product vanishes.
    """
    P, V = pm.points, pm.valid
    H, W = V.shape
    if H < 2 or W < 2:
        raise ShapeMismatch("normals need H, W >= 2")
    du, ok_u = _diff(P, V, axis=1)
    dv, ok_v = _diff(P, V, axis=0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = V & ok_u & ok_v & (norm >= 1e-12)
    out = np.zeros_like(P)
    out[ok] = n[ok] / norm[ok][:, None]
    return out, ok


def _diff(P, V, axis):
    Pm = np.moveaxis(P, axis, 0)
    Vm = np.moveaxis(V, axis, 0)
    d = np.empty_like(Pm)
    ok = np.zeros_like(Vm)
    d[1:-1] = (Pm[2:] - Pm[:-2]) / 2.0
    ok[1:-1] = Vm[2:] & Vm[:-2]
    d[0] = Pm[1] - Pm[0]
    ok[0] = Vm[1]
    d[-1] = Pm[-1] - Pm[-2]
    ok[-1] = Vm[-2]
    return np.moveaxis(d, 0, axis), np.moveaxis(ok, 0, axis)


def voxel_indices(points, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Voxel coordinates ``floor(p * N)`` and a mask of points inside ``[0,1)^3``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.all((p >= 0.0) & (p < 1.0), axis=1)
    idx = np.zeros((len(p), 3), dtype=np.int64)
    idx[inside] = np.floor(p[inside] * N).astype(np.int64)
    # float rounding can push 1 - eps up to N
    np.minimum(idx, N - 1, out=idx)
    return idx, inside


def voxelize_points(points, N: int) -> tuple[dict[tuple[int, int, int], int], int]:
    """Count points per voxel of an ``N^3`` grid. Returns ``(counts, dropped)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    idx, inside = voxel_indices(points, N)
    vox, counts = np.unique(idx[inside], axis=0, return_counts=True)
    table = {tuple(int(c) for c in v): int(n) for v, n in zip(vox, counts)}
    return table, int((~inside).sum())
