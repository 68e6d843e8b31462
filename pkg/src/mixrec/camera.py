"""Pinhole intrinsics recovery, projection, camera refinement and pose accuracy.

Pixel ``(i, j)`` (row, column) observes image coordinates ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
import torch

from .errors import BehindCamera, DegenerateGeometry, DegenerateInput, NonPositiveDepth
from .geometry import CameraPose, Intrinsics, PointMap, rotation_angle_deg

__all__ = [
    "RefineConfig",
    "RefineResult",
    "PoseAccuracyReport",
    "pixel_grid",
    "solve_intrinsics_lsq",
    "project",
    "project_points",
    "reprojection_loss",
    "refine_camera",
    "relative_pose",
    "relative_rotation_angle",
    "relative_translation_angle",
    "pose_accuracy",
]


def pixel_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Image coordinates ``(u, v)`` of every pixel center, each ``(H, W)``."""
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return u + 0.5, v + 0.5


def solve_intrinsics_lsq(pm: PointMap) -> Intrinsics:
    """Solve ``u = fx x/z + cx`` and ``v = fy y/z + cy`` over all valid pixels."""
    u, v = pixel_grid(pm.height, pm.width)
    P = pm.points
    z = P[..., 2]
    use = pm.valid & (z > 1e-9)
    if not use.any():
        raise NonPositiveDepth("no valid pixel in front of the camera")
    a = P[..., 0][use] / z[use]
    b = P[..., 1][use] / z[use]
    fx, cx = _line_fit(a, u[use], "x/z")
    fy, cy = _line_fit(b, v[use], "y/z")
    return Intrinsics(fx, fy, cx, cy)


def _line_fit(x: np.ndarray, y: np.ndarray, name: str) -> tuple[float, float]:
    # normal equations of [x 1] @ [f c]^T = y
    n = len(x)
    sx, sxx = x.sum(), (x * x).sum()
    det = n * sxx - sx * sx
    if n < 2 or det <= 1e-12 * max(n * sxx, 1e-300):
        raise DegenerateGeometry(f"all {name} values coincide")
    sy, sxy = y.sum(), (x * y).sum()
    f = (n * sxy - sx * sy) / det
    c = (sxx * sy - sx * sxy) / det
    return float(f), float(c)


def project_points(intr: Intrinsics, pose_world_to_cam: CameraPose, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(uv (n, 2), depth (n,))`` without validity checks."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pose_world_to_cam.apply(p)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy], axis=1)
    return uv, z


def project(intr: Intrinsics, pose_world_to_cam: CameraPose, p) -> tuple[tuple[float, float], float]:
    uv, z = project_points(intr, pose_world_to_cam, p)
    if not z[0] > 0:
        raise BehindCamera(f"point has depth {z[0]:.6g}")
    return (float(uv[0, 0]), float(uv[0, 1])), float(z[0])


# ---------------------------------------------------------------------------
# refinement


@dataclass(frozen=True)
class RefineConfig:
    max_steps: int = 2000
    learning_rate: float = 1e-2
    early_stop_patience: int = 100

    def __post_init__(self):
        if self.max_steps <= 0 or self.learning_rate <= 0 or self.early_stop_patience <= 0:
            raise ValueError("refinement settings must be positive")


@dataclass
class RefineResult:
    intrinsics: Intrinsics
    pose: CameraPose
    loss: float
    initial_loss: float
    steps: int
    trace: list[float] = field(default_factory=list)


def _torch_quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = (q / q.norm()).unbind()
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
        ]
    )


def reprojection_loss(params: torch.Tensor, points: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error for a packed parameter vector.

    ``params = [log fx, log fy, cx, cy, qw, qx, qy, qz, tx, ty, tz]`` with the
    pose mapping world to camera.
    """
    R = _torch_quat_to_matrix(params[4:8])
    pc = points @ R.T + params[8:11]
    uv = torch.stack(
        [
            torch.exp(params[0]) * pc[:, 0] / pc[:, 2] + params[2],
            torch.exp(params[1]) * pc[:, 1] / pc[:, 2] + params[3],
        ],
        dim=1,
    )
    return ((uv - pixels) ** 2).sum(1).mean()


def _pack(intr: Intrinsics, pose: CameraPose) -> np.ndarray:
    return np.concatenate([[math.log(intr.fx), math.log(intr.fy), intr.cx, intr.cy], pose.q, pose.t])


def _unpack(x: np.ndarray) -> tuple[Intrinsics, CameraPose]:
    return Intrinsics(math.exp(x[0]), math.exp(x[1]), x[2], x[3]), CameraPose(x[4:8], x[8:11])


def refine_camera(
    intr0: Intrinsics,
    pose0: CameraPose,
    observations,
    cfg: RefineConfig = RefineConfig(),
) -> RefineResult:
    """Jointly refine intrinsics and a world-to-camera pose by reprojection.

    ``observations`` is a sequence of ``(point_xyz, pixel_uv)`` pairs (or a pair
    of arrays). Focals are optimized in log space and rotation as a quaternion
    renormalized after every step. Optimization is Adam at a fixed step size;
    it stops early once the loss has not improved for
    ``early_stop_patience`` steps. The best iterate seen is returned, so the
    returned loss never exceeds the initial one.
    """
    pts, pix = _split_observations(observations)
    if len(pts) < 6:
        raise DegenerateInput("refinement needs >= 6 observations")
    centered = pix - pix.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometry("observations are collinear in the image")
    _, depth = project_points(intr0, pose0, pts)
    if np.any(depth <= 0):
        raise BehindCamera("observation behind the initial camera")

    P = torch.as_tensor(pts, dtype=torch.float64)
    U = torch.as_tensor(pix, dtype=torch.float64)
    x0 = _pack(intr0, pose0)
    params = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([params], lr=cfg.learning_rate)

    best_x = x0.copy()
    with torch.no_grad():
        best = initial = float(reprojection_loss(params, P, U))
    trace = [initial]
    since_best = 0
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        opt.zero_grad()
        loss = reprojection_loss(params, P, U)
        loss.backward()
        opt.step()
        with torch.no_grad():
            params[4:8] /= params[4:8].norm()
            cur = float(reprojection_loss(params, P, U))
        trace.append(cur)
        if cur < best:
            best, best_x, since_best = cur, params.detach().numpy().copy(), 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    intr, pose = _unpack(best_x)
    return RefineResult(intr, pose, best, initial, steps, trace)


def _split_observations(observations) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(observations, tuple) and len(observations) == 2 and np.ndim(observations[0]) == 2:
        pts, pix = observations
    else:
        pts = [o[0] for o in observations]
        pix = [o[1] for o in observations]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3), np.asarray(pix, dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# pose accuracy


@dataclass(frozen=True)
class PoseAccuracyReport:
    rra: float
    rta: float
    auc: float
    threshold_deg: float

    def to_json(self) -> dict:
        return {"rra": self.rra, "rta": self.rta, "auc": self.auc, "threshold_deg": self.threshold_deg}


def relative_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose of camera ``b`` expressed in the frame of camera ``a``."""
    Ra = a.R
    return CameraPose.from_matrix(Ra.T @ b.R, Ra.T @ (b.t - a.t))


def relative_rotation_angle(a: CameraPose, b: CameraPose) -> float:
    """Geodesic angle (degrees) between the rotations of two relative poses."""
    return rotation_angle_deg(a.R @ b.R.T)


def _direction_angle(x: np.ndarray, y: np.ndarray) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    small_x, small_y = nx < 1e-8, ny < 1e-8
    if small_x and small_y:
        return 0.0
    if small_x or small_y:
        return 90.0
    c = float(np.dot(x, y) / (nx * ny))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def relative_translation_angle(a: CameraPose, b: CameraPose, a_ref: CameraPose, b_ref: CameraPose) -> float:
    """Angle (degrees) between relative translation directions of ``(a, b)`` and ``(a_ref, b_ref)``.

    When both relative translations are shorter than 1e-8 the angle is 0; when
    exactly one is, it is 90.
    """
    return _direction_angle(relative_pose(a, b).t, relative_pose(a_ref, b_ref).t)


def pair_errors(pred: list[CameraPose], gt: list[CameraPose]) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation-direction errors over all ordered pairs ``i != j``."""
    rot, trans = [], []
    for i, j in permutations(range(len(pred)), 2):
        rot.append(relative_rotation_angle(relative_pose(pred[i], pred[j]), relative_pose(gt[i], gt[j])))
        trans.append(relative_translation_angle(pred[i], pred[j], gt[i], gt[j]))
    # snap float noise so an error of exactly tau degrees is not counted below tau
    return np.round(rot, 9), np.round(trans, 9)


def pose_accuracy(pred: list[CameraPose], gt: list[CameraPose], threshold_deg: float = 30.0) -> PoseAccuracyReport:
    """RRA/RTA at ``threshold_deg`` and AUC over integer thresholds ``1..threshold_deg``.

    The AUC counts a pair as correct at threshold ``tau`` when the larger of
    its rotation and translation errors is below ``tau``.
    """
    if len(pred) != len(gt):
        raise DegenerateInput("pose lists differ in length")
    if len(pred) < 2:
        raise DegenerateInput("need >= 2 poses")
    rot, trans = pair_errors(pred, gt)
    worst = np.maximum(rot, trans)
    taus = np.arange(1, int(round(threshold_deg)) + 1)
    auc = float(np.mean([(worst < tau).mean() for tau in taus])) * 100 if len(taus) else 0.0
    return PoseAccuracyReport(
        rra=float((rot < threshold_deg).mean() * 100),
        rta=float((trans < threshold_deg).mean() * 100),
        auc=auc,
        threshold_deg=float(threshold_deg),
    )
