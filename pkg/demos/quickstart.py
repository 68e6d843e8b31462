"""Small tour of the library: one synthetic scene, its attention bias, the block
matching, and a short two-phase training run with sampling.

    python demos/quickstart.py
"""
import numpy as np

from mixrec.block_matching import match_blocks, render_diagram
from mixrec.flow import SceneTensors, decode_occupancy, iou, load_state, sample_latents, train_toy
from mixrec.model import MixModel, ModelConfig
from mixrec.overlap_bias import PatchLayout, compute_bias, compute_overlaps
from mixrec.synth_data import make_scene, sample_views

scene = make_scene(0)
print(f"scene 0: {len(scene.shape)} occupied voxels at {scene.shape.resolution}^3, {len(scene.cameras)} cameras")

# overlap counts and bias between the shape and four neighbouring ground-truth point maps
views = sample_views(scene.cameras, 4, "nearest", 0)
layout = PatchLayout(4, 32, 32, len(views))
table = compute_overlaps(scene.shape, [scene.aligned(k) for k in views], layout)
bias = compute_bias(table, alpha=5.0)
print(f"views {views}: {len(table.counts)} voxel/patch overlaps, {len(bias.values)} biased pairs")
for j in sorted({j for j, _ in bias.values})[:3]:
    print(f"  voxel {j}: top patches {[(k, round(b, 3)) for k, b in bias.top_patches(j)[:3]]}")

print()
print(render_diagram(match_blocks(6, 8)))
print()

# a short run on two scenes; the reference run in demos/reference_run.py uses 8 scenes and 4000 steps
cfg = ModelConfig(dim=16, heads=2)
data = [SceneTensors.from_scene(make_scene(s)) for s in range(2)]
pre = train_toy(data, cfg, "pretrain_branches", steps=20)
mixed = train_toy(data, cfg, "mixed", steps=20, pretrained=pre.state)
print(f"mixed phase: {len(mixed.frozen)} frozen tensors, last L_fm {mixed.trace[-1]['L_fm']:.3f}")

model = MixModel(cfg, "mixed", mixed.match)
load_state(model, mixed.state)
model.eval()
v = sample_views(data[0].cameras, cfg.views, "mixed", 1)
z, _ = sample_latents(model, data[0].images[v][None], 10, np.random.default_rng(0))
print(f"sampled occupancy IoU after 20 steps: {iou(decode_occupancy(z[0]), decode_occupancy(scene.z0)):.3f}")
