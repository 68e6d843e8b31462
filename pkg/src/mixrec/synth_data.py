"""Synthetic scenes: procedural voxel shapes, hemisphere cameras and ray-cast point maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCount
from .geometry import (
    CameraPose,
    Intrinsics,
    PointMap,
    SimilarityTransform,
    SparseVoxelGrid,
    aligned_pointmap,
    axis_angle_matrix,
)

__all__ = [
    "SHAPE_RESOLUTION",
    "LATENT_SIDE",
    "CAMERA_COUNT",
    "Scene",
    "generate_shape",
    "pool_latent",
    "look_at",
    "sample_cameras",
    "raycast_pointmap",
    "sample_views",
    "make_scene",
    "scene_images",
    "VIEW_MODES",
    "VIEW_MODE_PROBS",
]

SHAPE_RESOLUTION = 16
LATENT_SIDE = 8
LATENT_CHANNELS = 4
CAMERA_COUNT = 32
CUBE_CENTER = np.array([0.5, 0.5, 0.5])
VIEW_MODES = ("random", "nearest", "farthest")
VIEW_MODE_PROBS = (0.2, 0.4, 0.4)


# ---------------------------------------------------------------------------
# shapes


def _primitive_bounds(prim) -> tuple[np.ndarray, np.ndarray]:
    kind, c, size = prim[0], prim[1], prim[2]
    if kind == "box":
        return c - size, c + size
    if kind == "sphere":
        return c - size, c + size
    axis = prim[3]
    r, hh = size
    ext = np.full(3, r)
    ext[axis] = hh
    return c - ext, c + ext


def _inside(prim, p: np.ndarray) -> np.ndarray:
    kind, c = prim[0], prim[1]
    d = p - c
    if kind == "box":
        return np.all(np.abs(d) <= prim[2], axis=-1)
    if kind == "sphere":
        return (d**2).sum(-1) <= prim[2] ** 2
    axis = prim[3]
    r, hh = prim[2]
    radial = (d**2).sum(-1) - d[..., axis] ** 2
    return (radial <= r * r) & (np.abs(d[..., axis]) <= hh)


def generate_shape(
    seed: int,
    resolution: int = SHAPE_RESOLUTION,
    latent_side: int = LATENT_SIDE,
    channels: int = LATENT_CHANNELS,
) -> tuple[SparseVoxelGrid, np.ndarray]:
    """Union of 2-5 random boxes, spheres and cylinders fitted into ``[0.1, 0.9]^3``.

    The first primitive is always a box placed off-center in the xy-plane so
    the shape has no 90-degree yaw symmetry. Returns the occupancy grid and the
    clean latent ``z_0`` of shape ``(S, S, S, channels)``.
    """
    rng = np.random.default_rng(seed)
    prims = []
    offset = rng.uniform(0.15, 0.25, 2) * rng.choice([-1.0, 1.0], 2)
    prims.append(("box", np.array([0.5 + offset[0], 0.5 + offset[1], rng.uniform(0.4, 0.6)]), rng.uniform(0.18, 0.25, 3)))
    for _ in range(int(rng.integers(1, 5))):
        kind = ("box", "sphere", "cylinder")[int(rng.integers(3))]
        c = rng.uniform(0.35, 0.65, 3)
        if kind == "box":
            prims.append(("box", c, rng.uniform(0.2, 0.3, 3)))
        elif kind == "sphere":
            prims.append(("sphere", c, float(rng.uniform(0.2, 0.3))))
        else:
            prims.append(("cylinder", c, (float(rng.uniform(0.18, 0.25)), float(rng.uniform(0.18, 0.3))), int(rng.integers(3))))

    lo = np.min([_primitive_bounds(p)[0] for p in prims], axis=0)
    hi = np.max([_primitive_bounds(p)[1] for p in prims], axis=0)
    scale = 0.8 / float((hi - lo).max())
    mid = (lo + hi) / 2

    centers = (np.indices((resolution,) * 3).transpose(1, 2, 3, 0) + 0.5) / resolution
    # voxel centers back in the primitives' frame
    p = mid + (centers - 0.5) / scale
    dense = np.zeros((resolution,) * 3, dtype=bool)
    for prim in prims:
        dense |= _inside(prim, p)
    grid = SparseVoxelGrid.from_dense(dense)
    return grid, pool_latent(dense, latent_side, channels)


def pool_latent(dense: np.ndarray, latent_side: int = LATENT_SIDE, channels: int = LATENT_CHANNELS) -> np.ndarray:
    """Average-pool occupancy to ``latent_side^3``; channel 0 is +1 where at least half is filled, else -1."""
    n = dense.shape[0]
    f = n // latent_side
    pooled = dense.reshape(latent_side, f, latent_side, f, latent_side, f).mean(axis=(1, 3, 5))
    z = np.zeros((latent_side,) * 3 + (channels,))
    z[..., 0] = np.where(pooled >= 0.5, 1.0, -1.0)
    return z


# ---------------------------------------------------------------------------
# cameras


def look_at(position, target=CUBE_CENTER, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera-to-world pose looking at ``target`` with zero roll (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return CameraPose.from_matrix(np.stack([right, down, f], axis=1), position)


def sample_cameras(
    seed: int, count: int = CAMERA_COUNT, image_side: int = 32
) -> list[tuple[CameraPose, Intrinsics]]:
    """Cameras spread over the upper hemisphere around the cube center.

    Elevations follow a jittered area-uniform spiral between 5 and 80 degrees,
    radii are uniform in ``[1.5, 2.5]`` and each focal is chosen so the cube's
    bounding sphere spans a random 60-90% of the image width.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.sin(np.radians(5.0)), np.sin(np.radians(80.0))
    golden = np.pi * (3 - np.sqrt(5))
    az0 = rng.uniform(0, 2 * np.pi)
    cube_radius = np.sqrt(3) / 2
    cams = []
    for k in range(count):
        s = lo + (k + rng.uniform(0.25, 0.75)) / count * (hi - lo)
        el = np.arcsin(s)
        az = az0 + k * golden
        r = rng.uniform(1.5, 2.5)
        pos = CUBE_CENTER + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        frac = rng.uniform(0.6, 0.9)
        f = frac * (image_side / 2) / np.tan(np.arcsin(cube_radius / r))
        cams.append((look_at(pos), Intrinsics(f, f, image_side / 2, image_side / 2)))
    return cams


# ---------------------------------------------------------------------------
# ray casting


def _camera_rays(pose: CameraPose, intr: Intrinsics, H: int, W: int):
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d_cam = np.stack([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, np.ones_like(u)], -1)
    d_cam = d_cam.reshape(-1, 3)
    return d_cam, np.broadcast_to(pose.t, d_cam.shape), d_cam @ pose.R.T


def dda_first_hit(occ: np.ndarray, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First occupied-voxel entry parameter ``t`` along ``origins + t * dirs``.

    Integer grid traversal over the unit cube; returns ``(t_hit, t_exit)`` where
    ``t_exit`` is where the ray leaves the hit voxel. Misses get ``inf``.
    """
    n = occ.shape[0]
    h = 1.0 / n
    R = len(origins)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (0.0 - origins) * inv
        tb = (1.0 - origins) * inv
    tmin = np.where(dirs == 0, np.where((origins >= 0) & (origins <= 1), -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(dirs == 0, np.where((origins >= 0) & (origins <= 1), np.inf, -np.inf), np.maximum(ta, tb))
    t_enter = np.maximum(tmin.max(1), 0.0)
    t_leave = tmax.min(1)
    active = t_enter < t_leave

    t_hit = np.full(R, np.inf)
    t_exit = np.full(R, np.inf)
    p = origins + t_enter[:, None] * dirs
    vox = np.clip(np.floor(p * n).astype(np.int64), 0, n - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(dirs != 0, h / np.abs(dirs), np.inf)
        boundary = (vox + (step > 0)) * h
        t_max = np.where(dirs != 0, (boundary - origins) * inv, np.inf)
    t_cur = t_enter.copy()

    for _ in range(3 * n + 3):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        v = vox[idx]
        hit = occ[v[:, 0], v[:, 1], v[:, 2]]
        hit_idx = idx[hit]
        t_hit[hit_idx] = t_cur[hit_idx]
        t_exit[hit_idx] = t_max[hit_idx].min(1)
        active[hit_idx] = False
        go = idx[~hit]
        axis = np.argmin(t_max[go], axis=1)
        t_cur[go] = t_max[go, axis]
        vox[go, axis] += step[go, axis]
        t_max[go, axis] += t_delta[go, axis]
        out = np.any((vox[go] < 0) | (vox[go] >= n), axis=1)
        active[go[out]] = False
    return t_hit, t_exit


def raycast_pointmap(shape: SparseVoxelGrid, pose: CameraPose, intr: Intrinsics, H: int, W: int) -> PointMap:
    """Camera-space point map of the first occupied voxel surface along each pixel ray.

    Hits are nudged a tiny distance into the hit voxel (at most half its chord)
    so that voxelizing a returned point recovers the occupied voxel exactly.
    """
    if H < 1 or W < 1:
        raise ValueError("resolution must be positive")
    d_cam, origins, dirs = _camera_rays(pose, intr, H, W)
    t_hit, t_exit = dda_first_hit(shape.dense(), origins, dirs)
    valid = np.isfinite(t_hit)
    eps = 1e-6 / shape.resolution / np.linalg.norm(dirs, axis=1)
    t = np.zeros_like(t_hit)
    t[valid] = t_hit[valid] + np.minimum(eps[valid], 0.5 * (t_exit[valid] - t_hit[valid]))
    points = (d_cam * t[:, None]).reshape(H, W, 3)
    return PointMap(points, valid.reshape(H, W))


# ---------------------------------------------------------------------------
# view sampling


def sample_views(
    cameras: list[tuple[CameraPose, Intrinsics]],
    n: int,
    mode: str = "mixed",
    seed: int | np.random.Generator = 0,
    start: int | None = None,
) -> list[int]:
    """Pick ``n`` camera indices with one of the training view-sampling modes.

    ``mode`` is ``random``, ``nearest``, ``farthest`` or ``mixed`` (which first
    draws one of the three with probabilities 0.2/0.4/0.4).
    """
    m = len(cameras)
    if not 1 <= n <= m:
        raise InvalidCount(f"cannot sample {n} of {m} views")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if mode == "mixed":
        mode = VIEW_MODES[int(rng.choice(3, p=VIEW_MODE_PROBS))]
    pos = np.array([c[0].t for c in cameras])
    if mode == "random":
        return [int(i) for i in rng.choice(m, n, replace=False)]
    first = int(rng.integers(m)) if start is None else int(start)
    if mode == "nearest":
        d = np.linalg.norm(pos - pos[first], axis=1)
        d[first] = -1.0
        return [int(i) for i in np.argsort(d, kind="stable")[:n]]
    if mode == "farthest":
        chosen = [first]
        dist = np.linalg.norm(pos - pos[first], axis=1)
        while len(chosen) < n:
            nxt = int(np.argmax(dist))
            chosen.append(nxt)
            dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
        return chosen
    raise ValueError(f"unknown view sampling mode {mode!r}")


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """Ground truth for one object.

    ``cameras`` hold the poses in the feed-forward frame and ``point_maps`` are
    camera-space; ``aligned_pointmap(point_maps[k], cameras[k][0],
    gt_similarity)`` lands on the shape surface inside the unit cube.
    """

    seed: int
    shape: SparseVoxelGrid
    z0: np.ndarray
    cameras: list[tuple[CameraPose, Intrinsics]]
    point_maps: list[PointMap]
    gt_similarity: SimilarityTransform

    def aligned(self, k: int) -> PointMap:
        return aligned_pointmap(self.point_maps[k], self.cameras[k][0], self.gt_similarity)


def make_scene(seed: int, image_side: int = 32, misaligned: bool = False) -> Scene:
    """Build a scene; ``misaligned`` randomizes the frame -> cube similarity."""
    shape, z0 = generate_shape(seed)
    cams = sample_cameras(seed, image_side=image_side)
    pms = [raycast_pointmap(shape, pose, intr, image_side, image_side) for pose, intr in cams]
    sim = SimilarityTransform.identity()
    if misaligned:
        rng = np.random.default_rng([seed, 1])
        s = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
        Rs = axis_angle_matrix([0, 0, 1], rng.uniform(0, 2 * np.pi))
        Ts = rng.uniform(-0.2, 0.2, 3)
        sim = SimilarityTransform.from_matrix(s, Rs, Ts)
        new_cams, new_pms = [], []
        for (pose, intr), pm in zip(cams, pms):
            # s (Rs (R' X/s + T') + Ts) = R X + T
            new_cams.append((CameraPose.from_matrix(Rs.T @ pose.R, Rs.T @ (pose.t / s - Ts)), intr))
            new_pms.append(PointMap(pm.points / s, pm.valid))
        cams, pms = new_cams, new_pms
    return Scene(seed, shape, z0, cams, pms, sim)


def scene_images(scene: Scene, views: list[int]) -> np.ndarray:
    """Toy input images ``(n, H, W, 3)`` with channels (depth, mask, constant)."""
    out = []
    for k in views:
        pm = scene.point_maps[k]
        depth = np.where(pm.valid, pm.points[..., 2], 0.0)
        out.append(np.stack([depth, pm.valid.astype(np.float64), np.ones_like(depth)], -1))
    return np.stack(out)
