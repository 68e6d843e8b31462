"""Acceptance suite: one PASS/FAIL line per criterion, at the agreed tolerances.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary. The desk-scale overfit
(criterion 10) trains for about 21 minutes on one core, so by default it checks
the committed reference run in ``tests/data/overfit_reference.json``; set
``MIXREC_FULL_RUN=1`` to retrain from scratch instead.
"""
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import torch

from mixrec.block_matching import match_blocks
from mixrec.camera import pose_accuracy, project_points, refine_camera, solve_intrinsics_lsq
from mixrec.cli import main
from mixrec.flow import euler_sample, loss_weights, make_flow_sample, train_toy
from mixrec.geometry import (
    CameraPose,
    Intrinsics,
    PointMap,
    SimilarityTransform,
    SparseVoxelGrid,
    aligned_pointmap,
    apply_pose,
    apply_similarity,
    axis_angle_matrix,
    quat_to_matrix,
    rotation_angle_deg,
)
from mixrec.model import MixModel, ModelConfig
from mixrec.overlap_bias import OverlapTable, PatchLayout, biased_cross_attention, compute_bias, compute_overlaps
from mixrec.registration import IcpConfig, align_with_orientation_trials
from mixrec.synth_data import make_scene

from oracles import bias_by_definition, overlaps_triple_loop, pose_metrics_enumerated

DATA = Path(__file__).parent / "data"


def random_rotation(rng):
    q = rng.standard_normal(4)
    return quat_to_matrix(q / np.linalg.norm(q))


def test_criterion_01_block_matching_golden(record, tmp_path, capsys):
    main(["match-blocks", "24", "36"])
    out = capsys.readouterr().out
    cfg = match_blocks(24, 36)
    C, B = cfg.pairs("C"), cfg.pairs("B")
    best = min(_timed(lambda: match_blocks(24, 36)) for _ in range(5))
    ok = (
        out == (DATA / "match_24_36.json").read_text()
        and len(C) == 18 and C[-1] == (23, 35)
        and B == [(3, 6), (7, 12), (11, 18), (15, 24), (19, 30), (22, 34)]
        and best < 1e-3
    )
    record(1, ok, f"golden match, 18 C pairs ending {C[-1]}, B {[t for t, _ in B]}, {best * 1e3:.3f} ms")


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def test_criterion_02_lambda_schedule(record):
    grid = np.linspace(0.0, 1.0, 1000)
    w = [loss_weights(t) for t in grid]
    lp = np.array([x.lambda_pts for x in w])
    hi, lo = lp[grid <= 0.25].min(), lp[grid >= 0.5].max()
    ratio = all(x.lambda_nml == 0.1 * x.lambda_pts for x in w)
    record(2, hi > 0.95 and lo < 0.05 and ratio, f"min on [0,0.25] {hi:.4f}, max on [0.5,1] {lo:.4f}, nml ratio exact {ratio}")


def _random_overlap_scene(rng, n=8, views=2, side=16):
    grid = SparseVoxelGrid(n, np.argwhere(rng.random((n, n, n)) < 0.3))
    pms = []
    for _ in range(views):
        pts = rng.uniform(-0.1, 1.1, (side, side, 3))
        snap = rng.random((side, side)) < 0.2
        pts[snap] = np.round(pts[snap] * n) / n
        pms.append(PointMap(pts, rng.random((side, side)) < 0.8))
    return grid, pms


def test_criterion_03_attention_bias_oracle(record):
    # the time limit covers the library calls; the brute-force oracle is not timed
    rng = np.random.default_rng(2024)
    layout = PatchLayout(4, 16, 16, 2)
    worst, counts_ok, elapsed = 0.0, True, 0.0
    for _ in range(200):
        grid, pms = _random_overlap_scene(rng)
        t0 = time.perf_counter()
        table = compute_overlaps(grid, pms, layout)
        bias = compute_bias(table, 5.0)
        elapsed += time.perf_counter() - t0
        counts_ok &= table.counts == overlaps_triple_loop(grid.occupied, 8, pms, 4)
        ref = bias_by_definition(table.counts, len(grid), layout.num_patches, 5.0)
        worst = max(worst, float(np.abs(bias.dense() - ref).max()))
    hand = compute_bias(OverlapTable({(0, 0): 4, (0, 1): 2}, 2, 3), 5.0).dense()
    ok = counts_ok and worst <= 1e-12 and np.array_equal(hand[0], [5.0, 0.0, 0.0]) and not hand[1].any() and elapsed < 10
    record(3, ok, f"200 scenes, counts exact {counts_ok}, max bias diff {worst:.1e}, hand row {hand[0].tolist()}, {elapsed:.1f} s")


def test_criterion_04_biased_attention(record):
    rng = np.random.default_rng(4)
    q, k, v = rng.standard_normal((5, 8)), rng.standard_normal((7, 8)), rng.standard_normal((7, 8))
    bitwise = np.array_equal(biased_cross_attention(q, k, v, heads=2), biased_cross_attention(q, k, v, np.zeros((5, 7)), heads=2))
    out = biased_cross_attention(
        torch.ones(1, 4, dtype=torch.float64), torch.ones(2, 4, dtype=torch.float64),
        torch.eye(2, 4, dtype=torch.float64), torch.tensor([[5.0, 0.0]], dtype=torch.float64),
    )
    e5 = math.exp(5)
    closed = max(abs(out[0, 0].item() - e5 / (e5 + 1)), abs(out[0, 1].item() - 1 / (e5 + 1)))
    qt, kt, vt = (torch.tensor(rng.standard_normal(s), requires_grad=True) for s in ((3, 4), (5, 4), (5, 4)))
    bias = torch.as_tensor(rng.uniform(0, 5, (3, 5)))
    grad_ok = torch.autograd.gradcheck(
        lambda a, b, c: biased_cross_attention(a, b, c, bias, heads=2), (qt, kt, vt), eps=1e-6, rtol=1e-4, atol=1e-8, raise_exception=False
    )
    record(4, bitwise and closed < 1e-12 and grad_ok, f"zero bias bitwise {bitwise}, closed form err {closed:.1e}, gradcheck {grad_ok}")


def test_criterion_05_intrinsics_recovery(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_lsq = 0.0
    for _ in range(100):
        H, W = rng.integers(8, 40, 2)
        truth = Intrinsics(*rng.uniform(40, 200, 2), *rng.uniform(5, 30, 2))
        u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
        depth = rng.uniform(0.5, 5.0, (H, W))
        pts = np.stack([(u - truth.cx) / truth.fx * depth, (v - truth.cy) / truth.fy * depth, depth], -1)
        got = solve_intrinsics_lsq(PointMap(pts, rng.random((H, W)) < 0.9))
        for a, b in zip((got.fx, got.fy, got.cx, got.cy), (truth.fx, truth.fy, truth.cx, truth.cy)):
            worst_lsq = max(worst_lsq, abs(a / b - 1))
    worst_rot, worst_f = 0.0, 0.0
    for _ in range(5):
        intr = Intrinsics(100, 100, 16, 16)
        pose = CameraPose.from_matrix(random_rotation(rng), rng.standard_normal(3))
        cam = np.stack([rng.uniform(-0.5, 0.5, 60), rng.uniform(-0.5, 0.5, 60), rng.uniform(1.5, 3.0, 60)], 1)
        world = pose.inverse().apply(cam)
        uv, _ = project_points(intr, pose, world)
        R0 = axis_angle_matrix(rng.standard_normal(3), math.radians(5)) @ pose.R
        res = refine_camera(Intrinsics(105, 105, 16, 16), CameraPose.from_matrix(R0, pose.t), (world, uv))
        worst_rot = max(worst_rot, rotation_angle_deg(res.pose.R @ pose.R.T))
        worst_f = max(worst_f, abs(res.intrinsics.fx / 100 - 1), abs(res.intrinsics.fy / 100 - 1))
    elapsed = time.perf_counter() - t0
    ok = worst_lsq < 1e-6 and worst_rot < 0.1 and worst_f < 1e-3 and elapsed < 30
    record(5, ok, f"lsq max rel err {worst_lsq:.1e}; refine from 5 deg/5%: {worst_rot:.2e} deg, focal {worst_f:.1e}; {elapsed:.1f} s")


def test_criterion_06_pose_metrics(record):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        gt = [CameraPose.from_matrix(random_rotation(rng), rng.standard_normal(3)) for _ in range(6)]
        pred = [
            CameraPose.from_matrix(axis_angle_matrix(rng.standard_normal(3), math.radians(rng.uniform(0, 40))) @ g.R, g.t + rng.normal(0, 0.3, 3))
            for g in gt
        ]
        rep = pose_accuracy(pred, gt)
        worst = max(worst, *(abs(a - b) for a, b in zip((rep.rra, rep.rta, rep.auc), pose_metrics_enumerated(pred, gt))))
    gt = [CameraPose(), CameraPose(t=[0.0, 0.0, 1.0])]
    pred = [CameraPose(), CameraPose.from_matrix(axis_angle_matrix([0, 0, 1], math.radians(20)), [0.0, 0.0, 1.0])]
    auc = pose_accuracy(pred, gt).auc
    record(6, worst < 1e-9 and abs(auc - 33.33) <= 0.01, f"max diff vs enumeration {worst:.1e}, 20 deg case AUC {auc:.4f}")


def _asymmetric_cloud(rng, n=2000):
    a = rng.uniform([0, 0, 0], [1.0, 0.3, 0.2], (n // 2, 3))
    b = rng.uniform([0, 0.3, 0], [0.3, 0.8, 0.2], (n // 4, 3))
    c = rng.uniform([0.7, 0.0, 0.2], [0.9, 0.2, 0.7], (n - n // 2 - n // 4, 3))
    return np.concatenate([a, b, c])


def test_criterion_07_registration(record):
    solved, monotone, worst = 0, True, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        src = _asymmetric_cloud(rng)
        R = axis_angle_matrix([0, 0, 1], math.radians(90 * int(rng.integers(4))))
        truth = SimilarityTransform.from_matrix(rng.uniform(0.5, 2.0), R, rng.uniform(-1, 1, 3))
        dst = truth.apply(src)
        res = align_with_orientation_trials(src, dst, IcpConfig(max_iterations=200))
        diam = float(np.linalg.norm(dst.max(0) - dst.min(0)))
        worst = max(worst, res.residual / diam)
        solved += res.residual < 1e-6 * diam
        monotone &= all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    record(7, solved == 20 and monotone, f"{solved}/20 seeds below 1e-6 diameter (worst {worst:.1e}), traces nonincreasing {monotone}")


def test_criterion_08_sampler_invariants(record):
    rng = np.random.default_rng(8)
    bitwise = True
    for _ in range(20):
        pm = PointMap(rng.standard_normal((5, 7, 3)), rng.random((5, 7)) > 0.3)
        pose = CameraPose.from_matrix(random_rotation(rng), rng.standard_normal(3))
        sim = SimilarityTransform.from_matrix(rng.uniform(0.1, 10), random_rotation(rng), rng.standard_normal(3))
        bitwise &= np.array_equal(aligned_pointmap(pm, pose, sim).points, apply_similarity(sim, apply_pose(pose, pm)).points)
    z0, eps = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    euler = max(float(np.abs(euler_sample(lambda z, t: eps - z0, z0.shape, n, noise=eps) - z0).max()) for n in (1, 5, 50))
    zt = torch.as_tensor(rng.standard_normal((2, 2, 2, 2, 4)))
    s = make_flow_sample(zt, torch.tensor([0.0, 1.0], dtype=torch.float64), 3)
    ends = torch.equal(s.z_t[0], zt[0]) and torch.equal(s.z_t[1], s.eps[1])
    record(8, bitwise and euler < 1e-12 and ends, f"aligned bitwise {bitwise}, Euler max err {euler:.1e} for 1/5/50 steps, endpoints exact {ends}")


def test_criterion_09_symmetry_and_freezing(record):
    cfg = ModelConfig()
    torch.manual_seed(9)
    m = MixModel(cfg, "mixed")
    with torch.no_grad():
        for name, p in m.named_parameters():
            if ".cross.proj.o." in name or name.startswith("sim_head"):
                p.copy_(torch.randn_like(p) * 0.1)
    m.eval()
    g = torch.Generator().manual_seed(0)
    z = torch.randn(1, 8, 8, 8, 4, generator=g)
    t = torch.rand(1, generator=g)
    img = torch.randn(1, 4, 32, 32, 3, generator=g)
    perms_ok = 0
    with torch.no_grad():
        ref = m(z, t, img)
        for perm in itertools.permutations(range(4)):
            idx = torch.tensor(perm)
            out = m(z, t, img[:, idx])
            perms_ok += (
                torch.equal(out.velocity, ref.velocity) and torch.equal(out.points, ref.points[:, idx])
                and torch.equal(out.pose_q, ref.pose_q[:, idx]) and torch.equal(out.pose_t, ref.pose_t[:, idx])
                and torch.equal(out.sim_q, ref.sim_q) and torch.equal(out.sim_t, ref.sim_t) and torch.equal(out.sim_log_s, ref.sim_log_s)
            )
    scenes = [make_scene(s) for s in range(2)]
    pre = train_toy(scenes, cfg, "pretrain_branches", steps=5, seed=1)
    mixed = train_toy(scenes, cfg, "mixed", steps=100, pretrained=pre.state, seed=2)
    kept = sum(np.array_equal(mixed.state[n], pre.state[n]) for n in mixed.frozen)
    ok = perms_ok == 24 and mixed.frozen and kept == len(mixed.frozen)
    record(9, ok, f"{perms_ok}/24 permutations exact; {kept}/{len(mixed.frozen)} frozen tensors bit-identical after 100 mixed steps")


def _overfit_result() -> dict:
    if os.environ.get("MIXREC_FULL_RUN") == "1":
        import importlib.util

        spec = importlib.util.spec_from_file_location("reference_run", Path(__file__).parents[1] / "demos" / "reference_run.py")
        mod = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(mod)
        return mod.run()
    return json.loads((DATA / "overfit_reference.json").read_text())


def test_criterion_10_desk_scale_overfit(record):
    r = _overfit_result()
    ev = r["eval"]
    ok = ev["L_fm"] < 0.05 and ev["L_pts"] < 0.02 and ev["iou_mean"] >= 0.6
    record(
        10, ok,
        f"L_fm {ev['L_fm']:.4f} (< 0.05), L_pts {ev['L_pts']:.4f} (< 0.02), IoU {ev['iou_mean']:.3f} (>= 0.6), "
        f"{r['train_seconds'] / 60:.1f} min training ({r['source']})",
    )


def _cli_run(root: Path) -> dict:
    data = root / "data"
    root.mkdir(parents=True)
    common = ["--seed", "11", "--data", str(data)]
    cfg = root / "small.json"
    cfg.write_text(json.dumps({"seed": 11, "model": {"dim": 16, "heads": 2},
                               "train": {"pretrain_steps": 4, "steps": 4, "batch_size": 2},
                               "eval": {"sample_steps": 5, "view_sets": 1, "icp_samples": 300}}))
    small = ["--config", str(cfg), "--data", str(data)]
    codes = [
        main(["gen-data", "--count", "3", "--first-seed", "20", "--misaligned", "--out", str(data)]),
        main(["match-blocks", "6", "8", "--out", str(root / "match.json"), "--diagram", str(root / "match.txt")]),
        main(["train-toy", *small, "--phase", "pretrain_branches", "--out", str(root / "pre.bin")]),
        main(["train-toy", *small, "--phase", "mixed", "--pretrained", str(root / "pre.bin"), "--out", str(root / "mix.bin"),
              "--report", str(root / "report.json")]),
        main(["sample", *small, "--checkpoint", str(root / "mix.bin"), "--out", str(root / "sample")]),
        main(["eval-pose", *small, "--checkpoint", str(root / "mix.bin"), "--out", str(root / "pose.json")]),
        main(["eval-geom", *small, "--checkpoint", str(root / "mix.bin"), "--out", str(root / "geom.json")]),
        main(["bias-demo", *common, "--scene", "21", "--views", "3", "--out", str(root / "bias")]),
    ]
    assert codes == [0] * len(codes), codes
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_cli_determinism(record, tmp_path):
    a = _cli_run(tmp_path / "a")
    b = _cli_run(tmp_path / "b")
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record(11, not diff, f"{len(a)} artifacts from 7 commands compared byte for byte; differing: {diff or 'none'}")
