"""Flow matching: interpolant, losses, Euler sampler, occupancy decoding and toy training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .block_matching import BlockMatchConfig
from .errors import ConfigMismatch, EmptyDataset, EmptyOverlap, ShapeMismatch
from .geometry import SparseVoxelGrid
from .model import MixModel, ModelConfig, aligned_points
from .synth_data import SHAPE_RESOLUTION, Scene, sample_views, scene_images

__all__ = [
    "FlowSample",
    "LossWeights",
    "FreezePolicy",
    "TrainResult",
    "make_flow_sample",
    "flow_loss",
    "loss_weights",
    "pointmap_normals_torch",
    "total_loss",
    "euler_sample",
    "upsample_trilinear",
    "decode_occupancy",
    "SceneTensors",
    "train_toy",
    "sample_latents",
    "evaluate_toy",
]


@dataclass
class FlowSample:
    z0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor  # scalar or (B,)
    z_t: torch.Tensor


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def make_flow_sample(z0, t, rng: np.random.Generator | int = 0) -> FlowSample:
    """``z_t = (1 - t) z_0 + t eps`` with ``eps`` drawn from ``rng``.

    ``t`` may be a scalar or one value per leading batch element. The endpoints
    are exact: ``t = 0`` returns ``z_0`` and ``t = 1`` returns ``eps`` bitwise.
    """
    z0 = torch.as_tensor(z0)
    if not z0.is_floating_point():
        z0 = z0.to(torch.float64)
    t = torch.as_tensor(t, dtype=z0.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    eps = torch.as_tensor(rng.standard_normal(tuple(z0.shape)), dtype=z0.dtype)
    tb = _bcast(t, z0)
    z_t = (1 - tb) * z0 + tb * eps
    z_t = torch.where(tb == 0, z0, torch.where(tb == 1, eps, z_t))
    return FlowSample(z0, eps, t, z_t)


def flow_loss(v_pred, sample: FlowSample, reduce: bool = True) -> torch.Tensor:
    """Mean squared error to the target velocity ``eps - z_0``.

    With ``reduce=False`` one value per leading batch element is returned.
    """
    v_pred = torch.as_tensor(v_pred)
    if v_pred.shape != sample.z0.shape:
        raise ShapeMismatch(f"velocity {tuple(v_pred.shape)} vs latent {tuple(sample.z0.shape)}")
    sq = (v_pred - (sample.eps - sample.z0)) ** 2
    return sq.mean() if reduce else sq.reshape(sq.shape[0], -1).mean(1)


@dataclass(frozen=True)
class LossWeights:
    lambda_pts: float
    lambda_nml: float


def loss_weights(t):
    """``lambda_pts = sigmoid(-24 t + 9)``, ``lambda_nml = 0.1 lambda_pts``.

    Floats give a :class:`LossWeights`; tensors give a tuple of tensors.
    """
    if isinstance(t, torch.Tensor):
        lp = torch.sigmoid(-24.0 * t + 9.0)
        return lp, 0.1 * lp
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x = -24.0 * t + 9.0
    lp = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
    return LossWeights(lp, 0.1 * lp)


def _diff_torch(P, V, axis):
    # axis counts from the (H, W, 3) end: -3 rows, -2 columns
    n = P.shape[axis]
    idx = lambda a, b: torch.arange(a, b)  # noqa: E731
    lo = torch.cat([idx(0, 1), idx(0, n - 2), idx(n - 2, n - 1)])
    hi = torch.cat([idx(1, 2), idx(2, n), idx(n - 1, n)])
    scale = torch.ones(n, dtype=P.dtype)
    scale[1:-1] = 0.5
    d = (P.index_select(axis, hi) - P.index_select(axis, lo)) * _bcast_axis(scale, P, axis)
    vax = axis + 1  # V lacks the trailing coordinate axis; border pixels get V[i] & V[i +- 1], same after the final & V
    ok = V.index_select(vax, hi) & V.index_select(vax, lo)
    return d, ok


def _bcast_axis(w, P, axis):
    shape = [1] * P.ndim
    shape[axis] = -1
    return w.reshape(shape)


def pointmap_normals_torch(points: torch.Tensor, valid: torch.Tensor):
    """Differentiable twin of :func:`mixrec.geometry.pointmap_normals` for ``(..., H, W, 3)`` maps."""
    H, W = points.shape[-3], points.shape[-2]
    if H < 2 or W < 2:
        raise ShapeMismatch("normals need H, W >= 2")
    du, ok_u = _diff_torch(points, valid, -2)
    dv, ok_v = _diff_torch(points, valid, -3)
    n = torch.cross(du, dv, dim=-1)
    norm = n.norm(dim=-1)
    ok = valid & ok_u & ok_v & (norm >= 1e-12)
    safe = torch.where(ok, norm, torch.ones_like(norm))
    return torch.where(ok[..., None], n / safe[..., None], torch.zeros_like(n)), ok


def _masked_mean(err: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-batch-element mean of ``|err|`` over masked pixels and coordinates."""
    B = err.shape[0]
    m = mask.reshape(B, -1).to(err.dtype)
    e = err.abs().mean(-1).reshape(B, -1)
    count = m.sum(1)
    return (e * m).sum(1) / count.clamp(min=1), count


def total_loss(v_pred, sample: FlowSample, pred_aligned, gt_points, gt_valid, t=None):
    """Flow loss plus time-weighted point-map and normal losses.

    Point maps are ``(B, N, H, W, 3)`` in the cube frame with a ``(B, N, H, W)``
    ground-truth mask (unbatched inputs are accepted too). ``L_pts`` is the
    mean absolute coordinate error over valid pixels, ``L_nml`` the mean
    absolute normal difference where both normals exist; an element without
    normals contributes 0 and is flagged in ``breakdown["nml_missing"]``.
    Each batch element is weighted by its own ``t``; the result is the batch
    mean. Returns ``(total, breakdown)``.
    """
    t = sample.t if t is None else torch.as_tensor(t, dtype=sample.z0.dtype)
    pred_aligned = torch.as_tensor(pred_aligned)
    gt_points = torch.as_tensor(gt_points, dtype=pred_aligned.dtype)
    gt_valid = torch.as_tensor(gt_valid, dtype=torch.bool)
    if t.ndim == 0:
        v_pred, pred_aligned, gt_points, gt_valid = (x[None] for x in (v_pred, pred_aligned, gt_points, gt_valid))
        sample = FlowSample(sample.z0[None], sample.eps[None], t[None], sample.z_t[None])
        t = t[None]
    if pred_aligned.shape != gt_points.shape or gt_valid.shape != gt_points.shape[:-1]:
        raise ShapeMismatch("predicted and ground-truth point maps disagree in shape")

    fm = flow_loss(v_pred, sample, reduce=False)
    pts, count = _masked_mean(pred_aligned - gt_points, gt_valid)
    if torch.any(count == 0):
        raise EmptyOverlap("a batch element has no valid pixels")
    n_pred, ok_pred = pointmap_normals_torch(pred_aligned, gt_valid)
    n_gt, ok_gt = pointmap_normals_torch(gt_points, gt_valid)
    nml, n_count = _masked_mean(n_pred - n_gt, ok_pred & ok_gt)
    lp, ln = loss_weights(t)
    fm_term, pts_term, nml_term = fm.mean(), (lp * pts).mean(), (ln * nml).mean()
    total = fm_term + pts_term + nml_term
    breakdown = {
        "fm": fm_term.item(),
        "pts": pts.mean().item(),
        "nml": nml.mean().item(),
        "pts_term": pts_term.item(),
        "nml_term": nml_term.item(),
        "lambda_pts": lp.mean().item(),
        "lambda_nml": ln.mean().item(),
        "nml_missing": int((n_count == 0).sum()),
        "total": total.item(),
    }
    return total, breakdown


def euler_sample(velocity_fn, shape, steps: int = 50, rng: np.random.Generator | int = 0, noise=None) -> np.ndarray:
    """Integrate from ``t = 1`` (standard normal) to ``t = 0``.

    ``z <- z - v(z, t_k) / steps`` with ``t_k = 1 - k / steps``.
    ``velocity_fn(z, t)`` takes and returns numpy arrays.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if noise is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        noise = rng.standard_normal(tuple(shape))
    z = np.array(noise, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        z = z - dt * np.asarray(velocity_fn(z, 1.0 - k / steps), dtype=np.float64)
    return z


# ---------------------------------------------------------------------------
# occupancy decoding


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers, source index clamped at the lower edge
    src = np.maximum((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_trilinear(vol: np.ndarray, size: int) -> np.ndarray:
    """Trilinear resize of a cubic volume with half-pixel centers (``align_corners=False``)."""
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        i0, i1, w = _axis_weights(out.shape[axis], size)
        shape = [1, 1, 1]
        shape[axis] = -1
        w = w.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1 - w) + np.take(out, i1, axis=axis) * w
    return out


def decode_occupancy(z, threshold: float = 0.0, resolution: int = SHAPE_RESOLUTION) -> SparseVoxelGrid:
    """Occupied voxels where the upsampled channel 0 of ``z (S, S, S, C)`` exceeds ``threshold``."""
    z = np.asarray(z, dtype=np.float64)
    return SparseVoxelGrid.from_dense(upsample_trilinear(z[..., 0], resolution) > threshold)


def iou(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    da, db = a.dense(), b.dense()
    union = (da | db).sum()
    return float((da & db).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# freezing


@dataclass
class FreezePolicy:
    """Per-parameter trainable flags for the fused model.

    A parameter trains if it has no pretrained value or sits in a
    cross-attention or mixture self-attention module; everything else stays
    frozen.
    """

    trainable: dict[str, bool]

    @classmethod
    def for_model(cls, model: MixModel, pretrained_names) -> "FreezePolicy":
        pretrained = set(pretrained_names)
        mot = _mot_attention_prefixes(model)
        flags = {}
        for name, _ in model.named_parameters():
            in_mot = ".cross." in name or any(name.startswith(p) for p in mot)
            flags[name] = name not in pretrained or in_mot
        return cls(flags)

    @property
    def frozen(self) -> list[str]:
        return [n for n, ok in self.trainable.items() if not ok]

    def apply(self, model: MixModel) -> list[torch.nn.Parameter]:
        params = []
        for name, p in model.named_parameters():
            p.requires_grad_(self.trainable[name])
            if self.trainable[name]:
                params.append(p)
        return params


def _mot_attention_prefixes(model: MixModel) -> list[str]:
    out = []
    for e in model.match.entries:
        if e.kind in "BC":
            out += [f"gen_blocks.{e.t_index}.attn.", f"xf_blocks.{e.t_index}.attn."]
        if e.kind == "C":
            out.append(f"pi3_blocks.{e.p_index}.attn.")
    return out


# ---------------------------------------------------------------------------
# toy training


@dataclass
class SceneTensors:
    """All 32 views of a scene as float32 tensors ready for batching."""

    z0: torch.Tensor  # (S, S, S, C)
    images: torch.Tensor  # (32, H, W, 3)
    local: torch.Tensor  # (32, H, W, 3) camera-space points
    world: torch.Tensor  # (32, H, W, 3) feed-forward frame
    aligned: torch.Tensor  # (32, H, W, 3) cube frame
    valid: torch.Tensor  # (32, H, W)
    cameras: list

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneTensors":
        from .geometry import apply_pose

        n = len(scene.cameras)
        f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)  # noqa: E731
        return cls(
            z0=f32(scene.z0),
            images=f32(scene_images(scene, list(range(n)))),
            local=f32([pm.points for pm in scene.point_maps]),
            world=f32([apply_pose(c[0], pm).points for c, pm in zip(scene.cameras, scene.point_maps)]),
            aligned=f32([scene.aligned(k).points for k in range(n)]),
            valid=torch.as_tensor(np.stack([pm.valid for pm in scene.point_maps])),
            cameras=scene.cameras,
        )


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    trace: list[dict] = field(default_factory=list)
    config: ModelConfig = ModelConfig()
    phase: str = "mixed"
    match: BlockMatchConfig | None = None
    frozen: list[str] = field(default_factory=list)


def _draw_batch(data: list[SceneTensors], rng: np.random.Generator, batch: int, views: int):
    picks = []
    for _ in range(batch):
        s = int(rng.integers(len(data)))
        picks.append((s, sample_views(data[s].cameras, views, "mixed", rng)))
    return picks


def _stack(data, picks, attr):
    return torch.stack([getattr(data[s], attr)[v] for s, v in picks])


def _cosine(opt, steps):
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * min(k, steps) / steps)))


def _state(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}


def load_state(model: torch.nn.Module, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy arrays into ``model``; returns the names that were loaded."""
    own = model.state_dict()
    unknown = [k for k in state if k not in own]
    if unknown:
        raise ConfigMismatch(f"checkpoint has parameters the model lacks: {unknown[:3]}")
    missing = [k for k in own if k not in state]
    if strict and missing:
        raise ConfigMismatch(f"checkpoint lacks parameters: {missing[:3]}")
    with torch.no_grad():
        for k, arr in state.items():
            if tuple(own[k].shape) != arr.shape:
                raise ConfigMismatch(f"{k}: shape {arr.shape} vs {tuple(own[k].shape)}")
            own[k].copy_(torch.as_tensor(arr))
    return list(state)


def _pi3_loss(out, local, world, valid):
    from .model import quat_to_rotmat

    Ri = quat_to_rotmat(out.pose_q)
    pred_world = torch.einsum("bnij,bnhwj->bnhwi", Ri, out.points) + out.pose_t[:, :, None, None, :]
    l_local, _ = _masked_mean(out.points - local, valid)
    l_world, _ = _masked_mean(pred_world - world, valid)
    return l_local.mean(), l_world.mean()


def train_toy(
    scenes: list[Scene] | list[SceneTensors],
    cfg: ModelConfig = ModelConfig(),
    phase: str = "mixed",
    steps: int = 100,
    lr: float = 1e-3,
    seed: int = 0,
    pretrained: dict[str, np.ndarray] | None = None,
    match: BlockMatchConfig | None = None,
    batch_size: int = 4,
    freeze: bool = True,
    progress=None,
) -> TrainResult:
    """Train the toy model.

    ``pretrain_branches`` trains the generative branch (flow loss, no images)
    and the feed-forward branch (local and world point losses) as two separate
    models for ``steps`` steps each and returns their merged weights.
    ``mixed`` builds the fused model, loads ``pretrained``, freezes according
    to :class:`FreezePolicy` (unless ``freeze`` is false) and minimizes
    :func:`total_loss`. Adam with a cosine schedule; fully determined by
    ``seed``. ``progress(row)`` is called after every step if given.
    """
    if not scenes:
        raise EmptyDataset("no training scenes")
    data = [s if isinstance(s, SceneTensors) else SceneTensors.from_scene(s) for s in scenes]
    S, C = cfg.latent_side, cfg.latent_channels
    if tuple(data[0].z0.shape) != (S, S, S, C) or data[0].images.shape[1] != cfg.image_side:
        raise ConfigMismatch("dataset does not match the model configuration")
    if phase == "pretrain_branches":
        return _pretrain(data, cfg, steps, lr, seed, batch_size, progress)
    if phase != "mixed":
        raise ValueError(f"unknown phase {phase!r}")
    if pretrained is None:
        raise ConfigMismatch("the mixed phase needs pretrained branch weights")

    torch.manual_seed(seed)
    model = MixModel(cfg, "mixed", match)
    loaded = load_state(model, pretrained, strict=False)
    policy = FreezePolicy.for_model(model, loaded if freeze else ())
    params = policy.apply(model)
    opt = torch.optim.Adam(params, lr=lr)
    sched = _cosine(opt, steps)
    rng = np.random.default_rng([seed, 2])
    trace = []
    for step in range(1, steps + 1):
        picks = _draw_batch(data, rng, batch_size, cfg.views)
        z0 = torch.stack([data[s].z0 for s, _ in picks])
        t = torch.as_tensor(rng.uniform(0.0, 1.0, batch_size), dtype=torch.float32)
        sample = make_flow_sample(z0, t, rng)
        out = model(sample.z_t, t, _stack(data, picks, "images"))
        loss, bd = total_loss(out.velocity, sample, aligned_points(out), _stack(data, picks, "aligned"), _stack(data, picks, "valid"))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step, "L_fm": bd["fm"], "L_pts": bd["pts"], "L_nml": bd["nml"], "lambda_pts": bd["lambda_pts"], "branch": "mixed"}
        trace.append(row)
        if progress:
            progress(row)
    return TrainResult(_state(model), trace, cfg, "mixed", model.match, policy.frozen)


def _pretrain(data, cfg, steps, lr, seed, batch_size, progress) -> TrainResult:
    trace = []
    torch.manual_seed(seed)
    gen = MixModel(cfg, "gen")
    pi3 = MixModel(cfg, "pi3")
    rng = np.random.default_rng([seed, 1])
    for branch, model in (("gen", gen), ("pi3", pi3)):
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        sched = _cosine(opt, steps)
        for step in range(1, steps + 1):
            picks = _draw_batch(data, rng, batch_size, cfg.views)
            row = {"step": step, "L_fm": float("nan"), "L_pts": float("nan"), "L_nml": float("nan"), "lambda_pts": float("nan"), "branch": branch}
            if branch == "gen":
                z0 = torch.stack([data[s].z0 for s, _ in picks])
                t = torch.as_tensor(rng.uniform(0.0, 1.0, batch_size), dtype=torch.float32)
                sample = make_flow_sample(z0, t, rng)
                loss = flow_loss(model(sample.z_t, t).velocity, sample)
                row["L_fm"] = loss.item()
            else:
                out = model(images=_stack(data, picks, "images"))
                l_local, l_world = _pi3_loss(out, _stack(data, picks, "local"), _stack(data, picks, "world"), _stack(data, picks, "valid"))
                loss = l_local + l_world
                row["L_pts"] = l_world.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            trace.append(row)
            if progress:
                progress(row)
    state = {**_state(gen), **_state(pi3)}
    return TrainResult(state, trace, cfg, "pretrain_branches")


# ---------------------------------------------------------------------------
# sampling and evaluation with a trained model


def sample_latents(model: MixModel, images: torch.Tensor, steps: int = 50, rng: np.random.Generator | int = 0):
    """Euler-sample one latent per batch element, conditioned on ``images (B, N, H, W, 3)``.

    Returns ``(latents (B, S, S, S, C), final ForwardOutput at t = 0 input)``.
    """
    cfg = model.cfg
    B = images.shape[0]
    shape = (B, cfg.latent_side, cfg.latent_side, cfg.latent_side, cfg.latent_channels)
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(images, dtype=dtype)

    def velocity(z, t):
        with torch.no_grad():
            zt = torch.as_tensor(z, dtype=dtype)
            return model(zt, torch.full((B,), t, dtype=dtype), images).velocity.double().numpy()

    z = euler_sample(velocity, shape, steps, rng)
    with torch.no_grad():
        out = model(torch.as_tensor(z, dtype=dtype), torch.zeros(B, dtype=dtype), images)
    return z, out


def evaluate_toy(model: MixModel, scenes: list[Scene] | list[SceneTensors], seed: int = 0, view_sets: int = 4, sample_steps: int = 50) -> dict:
    """Average unweighted losses over fixed draws and the sampled-occupancy IoU per scene.

    Losses are averaged over ``view_sets`` draws of views and ``t`` per scene.
    IoU compares the decoded sample against the decoded ground-truth latent.
    """
    data = [s if isinstance(s, SceneTensors) else SceneTensors.from_scene(s) for s in scenes]
    rng = np.random.default_rng([seed, 3])
    fms, ptss, ious = [], [], []
    model.eval()
    for d in data:
        picks_views = [sample_views(d.cameras, model.cfg.views, "mixed", rng) for _ in range(view_sets)]
        z0 = d.z0[None].expand(view_sets, *d.z0.shape)
        t = torch.as_tensor(rng.uniform(0.0, 1.0, view_sets), dtype=torch.float32)
        sample = make_flow_sample(z0, t, rng)
        images = torch.stack([d.images[v] for v in picks_views])
        with torch.no_grad():
            out = model(sample.z_t, t, images)
            _, bd = total_loss(out.velocity, sample, aligned_points(out), torch.stack([d.aligned[v] for v in picks_views]), torch.stack([d.valid[v] for v in picks_views]))
        fms.append(bd["fm"])
        ptss.append(bd["pts"])
        z, _ = sample_latents(model, images[:1], sample_steps, rng)
        ious.append(iou(decode_occupancy(z[0]), decode_occupancy(d.z0.double().numpy())))
    return {"L_fm": float(np.mean(fms)), "L_pts": float(np.mean(ptss)), "iou": ious, "iou_mean": float(np.mean(ious))}
