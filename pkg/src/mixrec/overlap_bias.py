"""Voxel-patch overlap counting, the overlap attention bias, and biased attention.

Voxel tokens ``j`` follow the row order of ``SparseVoxelGrid.occupied``; image
patch tokens ``k`` are numbered view-major, then row-major within a view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import LayoutMismatch, ShapeMismatch
from .geometry import PointMap, SparseVoxelGrid, voxel_indices

__all__ = [
    "PatchLayout",
    "OverlapTable",
    "BiasMatrix",
    "compute_overlaps",
    "average_point_count",
    "compute_bias",
    "attend",
    "biased_cross_attention",
]


@dataclass(frozen=True)
class PatchLayout:
    patch_size: int
    height: int
    width: int
    views: int

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.height % p or self.width % p:
            raise LayoutMismatch(f"patch size {p} must divide {self.height}x{self.width}")

    @property
    def patches_per_view(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def num_patches(self) -> int:
        return self.views * self.patches_per_view

    def patch_index(self) -> np.ndarray:
        """``(views, H, W)`` array of the global patch index of each pixel."""
        p = self.patch_size
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        local = (rows // p) * (self.width // p) + cols // p
        return local[None] + self.patches_per_view * np.arange(self.views)[:, None, None]

    def patch_of(self, k: int) -> tuple[int, tuple[int, int, int, int]]:
        """View and ``(row0, row1, col0, col1)`` pixel rectangle of patch ``k``."""
        view, local = divmod(k, self.patches_per_view)
        r, c = divmod(local, self.width // self.patch_size)
        p = self.patch_size
        return view, (r * p, (r + 1) * p, c * p, (c + 1) * p)


@dataclass
class OverlapTable:
    counts: dict[tuple[int, int], int]
    num_voxels: int
    num_patches: int
    unoccupied_points: int = 0
    outside_points: int = 0

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_voxels, self.num_patches), dtype=np.int64)
        for (j, k), c in self.counts.items():
            out[j, k] = c
        return out


@dataclass
class BiasMatrix:
    values: dict[tuple[int, int], float]
    shape: tuple[int, int]
    alpha: float = 5.0

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        for (j, k), b in self.values.items():
            out[j, k] = b
        return out

    def top_patches(self, j: int, n: int = 3) -> list[tuple[int, float]]:
        row = [(k, b) for (jj, k), b in self.values.items() if jj == j]
        return sorted(row, key=lambda kb: (-kb[1], kb[0]))[:n]


def compute_overlaps(grid: SparseVoxelGrid, aligned_pms: list[PointMap], layout: PatchLayout) -> OverlapTable:
    """Count, for every (voxel token, patch), the patch points inside the voxel.

    Points landing in unoccupied voxels are skipped and tallied in
    ``unoccupied_points``; points outside the unit cube in ``outside_points``.
    """
    if len(aligned_pms) != layout.views:
        raise LayoutMismatch(f"{len(aligned_pms)} point maps for {layout.views} views")
    for pm in aligned_pms:
        if (pm.height, pm.width) != (layout.height, layout.width):
            raise LayoutMismatch("point map size disagrees with the patch layout")
    vol = grid.index_volume()
    patch = layout.patch_index()
    js, ks = [], []
    unoccupied = outside = 0
    for v, pm in enumerate(aligned_pms):
        pts = pm.points[pm.valid]
        idx, inside = voxel_indices(pts, grid.resolution)
        outside += int((~inside).sum())
        j = np.full(len(pts), -1, dtype=np.int64)
        j[inside] = vol[tuple(idx[inside].T)]
        hit = j >= 0
        unoccupied += int((inside & ~hit).sum())
        js.append(j[hit])
        ks.append(patch[v][pm.valid][hit])
    j = np.concatenate(js) if js else np.zeros(0, np.int64)
    k = np.concatenate(ks) if ks else np.zeros(0, np.int64)
    keys, counts = np.unique(j * layout.num_patches + k, return_counts=True)
    table = {(int(key // layout.num_patches), int(key % layout.num_patches)): int(c) for key, c in zip(keys, counts)}
    return OverlapTable(table, len(grid), layout.num_patches, unoccupied, outside)


def average_point_count(table: OverlapTable, j: int) -> float:
    """Mean overlap over the patches that overlap voxel ``j`` at all (0 if none)."""
    row = [c for (jj, _), c in table.counts.items() if jj == j and c > 0]
    return sum(row) / len(row) if row else 0.0


def compute_bias(table: OverlapTable, alpha: float = 5.0) -> BiasMatrix:
    """``alpha * max((c - APC) / (max c - APC), 0)`` per voxel row.

    Rows whose positive counts are all equal (zero denominator) or that have
    no overlap at all get zero bias.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rows: dict[int, list[tuple[int, int]]] = {}
    for (j, k), c in table.counts.items():
        if c > 0:
            rows.setdefault(j, []).append((k, c))
    values: dict[tuple[int, int], float] = {}
    for j, entries in rows.items():
        cs = [c for _, c in entries]
        apc = sum(cs) / len(cs)
        top = max(cs)
        denom = top - apc
        if denom <= 0:
            continue
        for k, c in entries:
            b = alpha * max((c - apc) / denom, 0.0)
            if b > 0:
                values[(j, k)] = b
    return BiasMatrix(values, (table.num_voxels, table.num_patches), alpha)


# ---------------------------------------------------------------------------
# attention


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d) + bias) v`` over the last two axes.

    ``d`` is the last dimension of ``q``. ``bias`` broadcasts against the score
    tensor ``(..., L, M)``; ``None`` skips the addition entirely.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + bias
    return torch.softmax(scores, dim=-1) @ v


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def biased_cross_attention(queries, keys, values, bias=None, heads: int = 1):
    """Multi-head cross-attention of query tokens ``(L, d)`` over ``(M, d)`` tokens.

    The same ``(L, M)`` bias is added to every head's scores. Inputs may be
    numpy arrays (returned as numpy) or torch tensors (differentiable).
    """
    numpy_in = not isinstance(queries, torch.Tensor)
    q, k, v = _as_tensor(queries), _as_tensor(keys), _as_tensor(values)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"bad attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    L, d = q.shape
    M = k.shape[0]
    if d % heads:
        raise ShapeMismatch(f"feature dim {d} not divisible by {heads} heads")
    if isinstance(bias, BiasMatrix):
        if bias.shape != (L, M):
            raise ShapeMismatch(f"bias shape {bias.shape} != {(L, M)}")
        bias = bias.dense()
    if bias is not None:
        bias = _as_tensor(bias, q.dtype)
        if tuple(bias.shape) != (L, M):
            raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != {(L, M)}")
    dh = d // heads
    split = lambda x: x.reshape(x.shape[0], heads, dh).transpose(0, 1)  # noqa: E731
    out = attend(split(q), split(k), split(v), bias)
    out = out.transpose(0, 1).reshape(L, d)
    return out.detach().numpy() if numpy_in else out
