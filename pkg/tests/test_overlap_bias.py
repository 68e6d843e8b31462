import math

import numpy as np
import pytest
import torch

from mixrec.errors import LayoutMismatch, ShapeMismatch
from mixrec.geometry import PointMap, SparseVoxelGrid
from mixrec.overlap_bias import (
    BiasMatrix,
    OverlapTable,
    PatchLayout,
    attend,
    average_point_count,
    biased_cross_attention,
    compute_bias,
    compute_overlaps,
)

from oracles import bias_by_definition, overlaps_triple_loop


def random_scene(rng, n=8, views=2, side=16):
    occupied = np.argwhere(rng.random((n, n, n)) < 0.3)
    grid = SparseVoxelGrid(n, occupied)
    pms = []
    for _ in range(views):
        pts = rng.uniform(-0.1, 1.1, (side, side, 3))
        # some points exactly on cell faces, where membership is decided by the lower bound
        snap = rng.random((side, side)) < 0.2
        pts[snap] = np.round(pts[snap] * n) / n
        pms.append(PointMap(pts, rng.random((side, side)) < 0.8))
    return grid, pms


def table_from_row(row):
    return OverlapTable({(0, k): c for k, c in enumerate(row) if c}, 1, len(row))


def test_layout_indices():
    layout = PatchLayout(4, 16, 8, 3)
    assert layout.patches_per_view == 8 and layout.num_patches == 24
    idx = layout.patch_index()
    assert idx.shape == (3, 16, 8)
    assert sorted(np.unique(idx)) == list(range(24))
    view, (r0, r1, c0, c1) = layout.patch_of(13)
    assert view == 1 and np.all(idx[view, r0:r1, c0:c1] == 13)
    with pytest.raises(LayoutMismatch):
        PatchLayout(3, 16, 16, 1)


def test_overlaps_hand_cases():
    grid = SparseVoxelGrid(8, [[1, 1, 1], [5, 5, 5]])
    layout = PatchLayout(4, 8, 8, 1)
    empty = PointMap(np.zeros((8, 8, 3)), np.zeros((8, 8), bool))
    assert compute_overlaps(grid, [empty], layout).counts == {}

    one = PointMap(np.full((8, 8, 3), 0.2), np.zeros((8, 8), bool))
    one.valid[5, 6] = True  # patch (1, 1) -> index 3
    assert compute_overlaps(grid, [one], layout).counts == {(0, 3): 1}

    # a planar 4x4 patch entirely inside voxel (5,5,5)
    pts = np.full((8, 8, 3), 0.9)
    a, b = np.meshgrid(np.linspace(-0.04, 0.04, 4), np.linspace(-0.04, 0.04, 4), indexing="ij")
    pts[:4, 4:] = 5.5 / 8 + np.stack([a, b, np.zeros_like(a)], -1)
    table = compute_overlaps(grid, [PointMap(pts, np.ones((8, 8), bool))], layout)
    assert table.counts == {(1, 1): 16}
    assert table.outside_points == 0 and table.unoccupied_points == 48


def test_overlaps_layout_mismatch():
    grid = SparseVoxelGrid(8, [[0, 0, 0]])
    pm = PointMap(np.zeros((8, 8, 3)), np.ones((8, 8), bool))
    with pytest.raises(LayoutMismatch):
        compute_overlaps(grid, [pm], PatchLayout(4, 16, 16, 1))
    with pytest.raises(LayoutMismatch):
        compute_overlaps(grid, [pm], PatchLayout(4, 8, 8, 2))


def test_overlaps_and_bias_match_triple_loop():
    rng = np.random.default_rng(0)
    layout = PatchLayout(4, 16, 16, 2)
    for _ in range(25):
        grid, pms = random_scene(rng)
        table = compute_overlaps(grid, pms, layout)
        assert table.counts == overlaps_triple_loop(grid.occupied, 8, pms, 4)
        ref = bias_by_definition(table.counts, len(grid), layout.num_patches, 5.0)
        assert np.abs(compute_bias(table, 5.0).dense() - ref).max() <= 1e-12


def test_apc_examples():
    assert average_point_count(table_from_row([4, 2, 0]), 0) == 3.0
    assert average_point_count(table_from_row([0, 0, 0]), 0) == 0.0
    assert average_point_count(table_from_row([7]), 0) == 7.0


def test_bias_examples():
    assert compute_bias(table_from_row([4, 2, 0]), 5.0).dense().tolist() == [[5.0, 0.0, 0.0]]
    assert compute_bias(table_from_row([3, 3]), 5.0).dense().tolist() == [[0.0, 0.0]]
    assert compute_bias(table_from_row([0, 0]), 5.0).dense().tolist() == [[0.0, 0.0]]
    b = compute_bias(table_from_row([1, 9, 4, 4]), 2.5).dense()[0]
    assert b[1] == 2.5 and b[0] == 0.0
    with pytest.raises(ValueError):
        compute_bias(table_from_row([1]), 0.0)


def test_bias_properties_on_random_tables():
    rng = np.random.default_rng(1)
    for _ in range(50):
        counts = {(j, k): int(c) for j in range(6) for k in range(10) if (c := rng.integers(0, 6) * (rng.random() < 0.4))}
        table = OverlapTable(counts, 6, 10)
        B = compute_bias(table, 5.0).dense()
        dense = table.dense()
        assert B.min() >= 0 and B.max() <= 5.0
        for j in range(6):
            row = dense[j]
            pos = row[row > 0]
            if len(np.unique(pos)) >= 2:
                assert B[j, row.argmax()] == 5.0
                assert np.all(B[j][row <= pos.mean()] == 0)
            else:
                assert np.all(B[j] == 0)


def test_top_patches_order():
    bias = BiasMatrix({(0, 3): 5.0, (0, 1): 2.0, (0, 7): 5.0, (1, 0): 1.0}, (2, 8))
    assert bias.top_patches(0, 2) == [(3, 5.0), (7, 5.0)]


def test_zero_bias_is_plain_attention_bitwise():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((5, 8)), rng.standard_normal((7, 8)), rng.standard_normal((7, 8))
    plain = biased_cross_attention(q, k, v, heads=2)
    zero = biased_cross_attention(q, k, v, np.zeros((5, 7)), heads=2)
    assert np.array_equal(plain, zero)
    empty = BiasMatrix({}, (5, 7))
    assert np.array_equal(plain, biased_cross_attention(q, k, v, empty, heads=2))


def test_two_key_closed_form():
    q = torch.ones(1, 4, dtype=torch.float64)
    k = torch.ones(2, 4, dtype=torch.float64)
    v = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]], dtype=torch.float64)
    out = biased_cross_attention(q, k, v, torch.tensor([[5.0, 0.0]], dtype=torch.float64))
    e5 = math.exp(5)
    assert abs(out[0, 0].item() - e5 / (e5 + 1)) < 1e-12
    assert abs(out[0, 1].item() - 1 / (e5 + 1)) < 1e-12


def test_constant_bias_row_is_shift_invariant():
    rng = np.random.default_rng(3)
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    shifted = biased_cross_attention(q, k, v, np.full((3, 6), 2.5))
    assert np.allclose(shifted, biased_cross_attention(q, k, v), atol=1e-14)


def test_weight_on_biased_key_grows_with_alpha():
    rng = np.random.default_rng(4)
    q, k = torch.as_tensor(rng.standard_normal((1, 4))), torch.as_tensor(rng.standard_normal((5, 4)))
    v = torch.eye(5, dtype=torch.float64)
    weights = []
    for alpha in (0.0, 1.0, 2.5, 5.0, 10.0):
        bias = torch.zeros(1, 5, dtype=torch.float64)
        bias[0, 2] = alpha
        weights.append(attend(q, k, v, bias)[0, 2].item())
    assert all(b >= a for a, b in zip(weights, weights[1:]))


def test_attention_shape_errors():
    q = np.zeros((2, 4))
    with pytest.raises(ShapeMismatch):
        biased_cross_attention(q, np.zeros((3, 5)), np.zeros((3, 5)))
    with pytest.raises(ShapeMismatch):
        biased_cross_attention(q, np.zeros((3, 4)), np.zeros((3, 4)), heads=3)
    with pytest.raises(ShapeMismatch):
        biased_cross_attention(q, np.zeros((3, 4)), np.zeros((3, 4)), BiasMatrix({}, (3, 3)))


def test_attention_gradcheck():
    rng = np.random.default_rng(5)
    q, k, v = (torch.tensor(rng.standard_normal(s), requires_grad=True) for s in ((3, 4), (5, 4), (5, 4)))
    bias = torch.as_tensor(rng.uniform(0, 5, (3, 5)))
    assert torch.autograd.gradcheck(lambda a, b, c: biased_cross_attention(a, b, c, bias, heads=2), (q, k, v), eps=1e-6, rtol=1e-4, atol=1e-8)
