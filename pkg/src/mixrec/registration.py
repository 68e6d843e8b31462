"""Similarity fitting, ICP alignment heuristics and geometry error metrics.

All transforms follow the library-wide convention ``p -> s * (R @ p + T)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, EmptyCloud, EmptyOverlap, ShapeMismatch
from .geometry import CameraPose, PointMap, SimilarityTransform, axis_angle_matrix

__all__ = [
    "IcpConfig",
    "IcpResult",
    "fit_similarity",
    "icp_align",
    "align_with_orientation_trials",
    "align_from_poses",
    "chamfer_distance",
    "pixel_error",
]


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    sample_count: int = 10000
    with_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.sample_count < 3:
            raise ValueError("sample_count must be >= 3")


@dataclass
class IcpResult:
    transform: SimilarityTransform
    residual: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    trial_deg: int | None = None


def _points(a, name="points") -> np.ndarray:
    p = np.asarray(a, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeMismatch(f"{name} must be (n, 3), got {p.shape}")
    return p


def fit_similarity(src, dst, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares ``(s, R, T)`` minimizing ``sum |s (R src + T) - dst|^2``."""
    src, dst = _points(src, "src"), _points(dst, "dst")
    if len(src) != len(dst) or len(src) < 3:
        raise DegenerateInput("need >= 3 index-aligned correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    if var_s < 1e-15:
        raise DegenerateInput("source points are coincident")
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateInput("cross-covariance rank < 2")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    # dst ~ s R src + t  =>  T = t / s
    t = mu_d - s * R @ mu_s
    return SimilarityTransform.from_matrix(s, R, t / s)


def _mean_nn(tree: cKDTree, pts: np.ndarray) -> tuple[float, np.ndarray]:
    d, idx = tree.query(pts)
    return float(d.mean()), idx


def icp_align(src, dst, init: SimilarityTransform | None = None, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point ICP from ``init``; returns the full src->dst transform.

    Iterations whose mean nearest-neighbour residual would increase are
    rejected and terminate the loop, so ``trace`` is nonincreasing.
    """
    src, dst = _points(src, "src"), _points(dst, "dst")
    if len(src) < 3 or len(dst) < 3:
        raise DegenerateInput("ICP needs >= 3 points per cloud")
    if len(src) > cfg.sample_count:
        rng = np.random.default_rng(cfg.seed)
        src = src[rng.choice(len(src), cfg.sample_count, replace=False)]
    tree = cKDTree(dst)
    current = init if init is not None else SimilarityTransform.identity()
    residual, idx = _mean_nn(tree, current.apply(src))
    trace = [residual]
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if residual == 0.0:
            break
        candidate = fit_similarity(src, dst[idx], cfg.with_scale)
        new_residual, new_idx = _mean_nn(tree, candidate.apply(src))
        if new_residual > residual:
            break
        change = (residual - new_residual) / max(residual, 1e-300)
        current, residual, idx = candidate, new_residual, new_idx
        trace.append(residual)
        if change < cfg.convergence_tol:
            break
    return IcpResult(current, residual, trace, it)


def _normalizer(p: np.ndarray) -> SimilarityTransform:
    """Similarity mapping ``p`` to zero centroid and unit RMS radius."""
    c = p.mean(0)
    r = np.sqrt(((p - c) ** 2).sum(1).mean())
    if r < 1e-15:
        raise DegenerateInput("cloud has zero extent")
    return SimilarityTransform(1.0 / r, [1.0, 0, 0, 0], -c)


def align_with_orientation_trials(src, dst, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Try yaw rotations of 0/90/180/270 degrees about +z, then refine with ICP.

    Both clouds are normalized to zero centroid and unit RMS radius before the
    trials; the trial with the smallest Chamfer distance seeds ICP (ties go to
    the smaller angle).
    """
    src, dst = _points(src, "src"), _points(dst, "dst")
    ns, nd = _normalizer(src), _normalizer(dst)
    rng = np.random.default_rng(cfg.seed)

    def _sub(p):
        if len(p) > cfg.sample_count:
            return p[rng.choice(len(p), cfg.sample_count, replace=False)]
        return p

    a, b = _sub(ns.apply(src)), _sub(nd.apply(dst))
    best, best_cd = 0, np.inf
    for deg in (0, 90, 180, 270):
        Rz = axis_angle_matrix([0, 0, 1], np.radians(deg))
        cd = chamfer_distance(a @ Rz.T, b)
        if cd < best_cd:
            best, best_cd = deg, cd
    yaw = SimilarityTransform.from_matrix(1.0, axis_angle_matrix([0, 0, 1], np.radians(best)), np.zeros(3))
    init = nd.inverse().compose(yaw.compose(ns))
    result = icp_align(src, dst, init, cfg)
    result.trial_deg = best
    return result


def align_from_poses(pred_poses: list[CameraPose], gt_poses: list[CameraPose]) -> np.ndarray:
    """Rotation ``R`` minimizing ``sum |R R_pred_i - R_gt_i|_F^2``."""
    if len(pred_poses) != len(gt_poses):
        raise DegenerateInput("pose lists differ in length")
    if len(pred_poses) < 2:
        raise DegenerateInput("need >= 2 poses")
    M = sum(g.R @ p.R.T for p, g in zip(pred_poses, gt_poses))
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def chamfer_distance(a, b) -> float:
    """Symmetric mean of absolute nearest-neighbour distances."""
    a, b = _points(a, "a"), _points(b, "b")
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer distance of an empty cloud")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def pixel_error(pred: PointMap, gt: PointMap) -> float:
    """Mean per-pixel distance after similarity-aligning ``pred`` onto ``gt``."""
    if pred.points.shape != gt.points.shape:
        raise ShapeMismatch("point maps differ in size")
    both = pred.valid & gt.valid
    if not both.any():
        raise EmptyOverlap("no jointly valid pixels")
    p, g = pred.points[both], gt.points[both]
    sim = fit_similarity(p, g, with_scale=True)
    return float(np.linalg.norm(sim.apply(p) - g, axis=1).mean())
