"""Toy mixture-of-transformers over latent, image and transform tokens.

One :class:`MixModel` class serves three roles, selected by ``branch``:

``"gen"``
    the generative flow transformer alone (latent tokens, velocity head);
``"pi3"``
    the feed-forward transformer alone (alternating local/global attention
    over image tokens, point-map and pose heads);
``"mixed"``
    both, fused according to a :class:`~mixrec.block_matching.BlockMatchConfig`,
    plus the transform token branch and its similarity head.

Parameter names are shared across roles so pretrained branch weights load
directly into the fused model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .block_matching import BlockMatchConfig, match_blocks
from .errors import ConfigMismatch, ShapeMismatch

__all__ = ["ModelConfig", "TokenBundle", "ForwardOutput", "MixModel", "quat_to_rotmat", "aligned_points"]


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 4
    n_trellis: int = 6
    n_pi3: int = 8
    latent_side: int = 8
    latent_channels: int = 4
    image_side: int = 32
    patch_size: int = 4
    views: int = 4
    mlp_ratio: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigMismatch("dim must be divisible by heads")
        if self.image_side % self.patch_size:
            raise ConfigMismatch("patch size must divide the image side")
        if self.n_pi3 % 2:
            raise ConfigMismatch("n_pi3 must be even")

    @property
    def patches_per_view(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TokenBundle:
    latent: torch.Tensor | None  # (B, S^3, d)
    image: torch.Tensor | None  # (B, N, P, d)
    transform: torch.Tensor | None  # (B, 1, d)
    temb: torch.Tensor | None  # (B, d)


@dataclass
class ForwardOutput:
    velocity: torch.Tensor | None = None  # (B, S, S, S, C)
    points: torch.Tensor | None = None  # (B, N, H, W, 3), camera space
    pose_q: torch.Tensor | None = None  # (B, N, 4), camera-to-world
    pose_t: torch.Tensor | None = None  # (B, N, 3)
    sim_log_s: torch.Tensor | None = None  # (B,)
    sim_q: torch.Tensor | None = None  # (B, 4)
    sim_t: torch.Tensor | None = None  # (B, 3)

    @property
    def sim_s(self) -> torch.Tensor:
        return torch.exp(self.sim_log_s)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Batched ``(..., 4)`` quaternions ``(w, x, y, z)`` to ``(..., 3, 3)`` matrices."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def aligned_points(out: ForwardOutput) -> torch.Tensor:
    """Apply per-view poses and then the similarity: ``s (R (R_i X + T_i) + T)``."""
    Ri = quat_to_rotmat(out.pose_q)  # (B, N, 3, 3)
    world = torch.einsum("bnij,bnhwj->bnhwi", Ri, out.points) + out.pose_t[:, :, None, None, :]
    R = quat_to_rotmat(out.sim_q)  # (B, 3, 3)
    moved = torch.einsum("bij,bnhwj->bnhwi", R, world) + out.sim_t[:, None, None, None, :]
    return out.sim_s[:, None, None, None, None] * moved


# ---------------------------------------------------------------------------
# building blocks


class QKNorm(nn.Module):
    """Per-head RMS normalization with a learned gain."""

    def __init__(self, head_dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(head_dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + 1e-6) * self.gain


class AttnProj(nn.Module):
    """Query/key/value/output projections of one modality."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.q_norm = QKNorm(dim // heads)
        self.k_norm = QKNorm(dim // heads)

    def split(self, x):
        B, n, d = x.shape
        return x.reshape(B, n, self.heads, d // self.heads).transpose(1, 2)


def mot_attention(streams, bias=None):
    """Joint self-attention across modalities with per-modality projections.

    ``streams`` is a list of ``(tokens (B, n_m, d), AttnProj)``. All tokens
    attend to all tokens; queries, keys, values and outputs use the projection
    of the modality each token belongs to.
    """
    qs, ks, vs, sizes = [], [], [], []
    for x, proj in streams:
        qs.append(proj.q_norm(proj.split(proj.q(x))))
        ks.append(proj.k_norm(proj.split(proj.k(x))))
        vs.append(proj.split(proj.v(x)))
        sizes.append(x.shape[1])
    q = torch.cat(qs, 2) if len(qs) > 1 else qs[0]
    k = torch.cat(ks, 2) if len(ks) > 1 else ks[0]
    v = torch.cat(vs, 2) if len(vs) > 1 else vs[0]
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
    B, H, n, dh = out.shape
    out = out.transpose(1, 2).reshape(B, n, H * dh)
    parts = torch.split(out, sizes, dim=1)
    return [proj.o(p) for p, (_, proj) in zip(parts, streams)]


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.proj = AttnProj(dim, heads)
        nn.init.zeros_(self.proj.o.weight)
        nn.init.zeros_(self.proj.o.bias)

    def forward(self, x, context, bias=None):
        p = self.proj
        hq, hc = self.norm_q(x), self.norm_kv(context)
        q = p.q_norm(p.split(p.q(hq)))
        k = p.k_norm(p.split(p.k(hc)))
        v = p.split(p.v(hc))
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        B, H, n, dh = out.shape
        return p.o(out.transpose(1, 2).reshape(B, n, H * dh))


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Modulation(nn.Module):
    """Time-step shift/scale/gate; a zero time embedding gives the identity modulation."""

    def __init__(self, dim: int, chunks: int):
        super().__init__()
        self.chunks = chunks
        self.proj = nn.Linear(dim, chunks * dim, bias=False)

    def forward(self, temb):
        return self.proj(F.silu(temb)).unsqueeze(1).chunk(self.chunks, dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class GenBlock(nn.Module):
    """Generative-branch block; the transform branch reuses this layout."""

    def __init__(self, dim: int, heads: int, ratio: int, cross: bool):
        super().__init__()
        self.mod = Modulation(dim, 6)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = AttnProj(dim, heads)
        self.cross = CrossAttention(dim, heads) if cross else None
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.ffn = FeedForward(dim, ratio)

    def attn_input(self, x, m):
        shift, scale = m[0], m[1]
        return _modulate(self.norm1(x), shift, scale)

    def attn_residual(self, x, out, m):
        return x + (1 + m[2]) * out

    def ffn_residual(self, x, m):
        shift, scale, gate = m[3], m[4], m[5]
        return x + (1 + gate) * self.ffn(_modulate(self.norm2(x), shift, scale))


class Pi3Block(nn.Module):
    def __init__(self, dim: int, heads: int, ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = AttnProj(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ratio)

    def ffn_residual(self, x):
        return x + self.ffn(self.norm2(x))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# ---------------------------------------------------------------------------
# the model


class MixModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), branch: str = "mixed", match: BlockMatchConfig | None = None):
        super().__init__()
        if branch not in ("gen", "pi3", "mixed"):
            raise ValueError(f"unknown branch {branch!r}")
        self.cfg, self.branch = cfg, branch
        d, h, r = cfg.dim, cfg.heads, cfg.mlp_ratio
        if branch == "mixed":
            match = match or match_blocks(cfg.n_trellis, cfg.n_pi3)
            if (match.n_trellis, match.n_pi3) != (cfg.n_trellis, cfg.n_pi3):
                raise ConfigMismatch(
                    f"matching is for ({match.n_trellis}, {match.n_pi3}), model is ({cfg.n_trellis}, {cfg.n_pi3})"
                )
        self.match = match
        kinds = {e.t_index: e.kind for e in match.entries} if match is not None else {}
        self.trace: list[tuple[str, int | None, int]] | None = None

        if branch in ("gen", "mixed"):
            S3 = cfg.latent_side**3
            self.latent_embed = nn.Linear(cfg.latent_channels, d, bias=False)
            self.latent_pos = nn.Parameter(torch.randn(S3, d) * 0.02)
            self.time_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
            self.gen_blocks = nn.ModuleList(
                GenBlock(d, h, r, cross=kinds.get(t) == "B") for t in range(cfg.n_trellis)
            )
            self.velocity_norm = nn.LayerNorm(d, elementwise_affine=False)
            self.velocity_mod = Modulation(d, 2)
            self.velocity_head = nn.Linear(d, cfg.latent_channels)
        if branch in ("pi3", "mixed"):
            p = cfg.patch_size
            self.patch_embed = nn.Linear(p * p * cfg.image_channels, d)
            self.image_pos = nn.Parameter(torch.randn(cfg.patches_per_view, d) * 0.02)
            self.pi3_blocks = nn.ModuleList(Pi3Block(d, h, r) for _ in range(cfg.n_pi3))
            self.point_norm = nn.LayerNorm(d)
            self.point_head = nn.Linear(d, p * p * 3)
            self.pose_norm = nn.LayerNorm(d)
            self.pose_head = nn.Linear(d, 7)
            with torch.no_grad():
                self.pose_head.weight.mul_(0.1)
                self.pose_head.bias.zero_()
                self.pose_head.bias[0] = 1.0
        if branch == "mixed":
            self.transform_token = nn.Parameter(torch.randn(1, d) * 0.02)
            self.xf_blocks = nn.ModuleList(
                GenBlock(d, h, r, cross=kinds.get(t) == "B") for t in range(cfg.n_trellis)
            )
            self.sim_norm = nn.LayerNorm(d)
            self.sim_head = nn.Linear(d, 8)
            with torch.no_grad():
                self.sim_head.weight.zero_()
                self.sim_head.bias.zero_()
                self.sim_head.bias[1] = 1.0

    # -- embedding ---------------------------------------------------------

    def embed_inputs(self, z_t=None, t=None, images=None) -> TokenBundle:
        """Tokenize inputs.

        ``z_t``: ``(B, S, S, S, C)``; ``t``: ``(B,)``; ``images``: ``(B, N, H, W, 3)``.
        Image tokens carry a 2D position embedding shared by all views and no
        view index, so permuting views permutes the token blocks.
        """
        cfg = self.cfg
        latent = transform = temb = image = None
        if self.branch in ("gen", "mixed"):
            if z_t is None or t is None:
                raise ShapeMismatch("latent and time are required")
            S, C = cfg.latent_side, cfg.latent_channels
            if tuple(z_t.shape[1:]) != (S, S, S, C):
                raise ShapeMismatch(f"latent must be (B, {S}, {S}, {S}, {C}), got {tuple(z_t.shape)}")
            t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1)
            if t.shape[0] != z_t.shape[0]:
                raise ShapeMismatch("one time value per batch element required")
            temb = self.time_embed(timestep_embedding(t, cfg.dim))
            latent = self.latent_embed(z_t.reshape(z_t.shape[0], S**3, C)) + self.latent_pos + temb[:, None]
        if self.branch in ("pi3", "mixed"):
            if images is None:
                raise ShapeMismatch("images are required")
            B, N, H, W, ch = images.shape
            p = cfg.patch_size
            if (H, W, ch) != (cfg.image_side, cfg.image_side, cfg.image_channels):
                raise ShapeMismatch(f"images must be (B, N, {cfg.image_side}, {cfg.image_side}, 3)")
            patches = images.reshape(B, N, H // p, p, W // p, p, ch).permute(0, 1, 2, 4, 3, 5, 6)
            patches = patches.reshape(B, N, (H // p) * (W // p), p * p * ch)
            image = self.patch_embed(patches) + self.image_pos
        if self.branch == "mixed":
            transform = self.transform_token.expand(latent.shape[0], 1, cfg.dim)
        return TokenBundle(latent, image, transform, temb)

    # -- block kinds -------------------------------------------------------

    def _pi3_attention(self, block: Pi3Block, image, local: bool):
        B, N, P, d = image.shape
        seq = image.reshape(B * N, P, d) if local else image.reshape(B, N * P, d)
        (out,) = mot_attention([(block.norm1(seq), block.attn)])
        return image + out.reshape(B, N, P, d)

    def block_forward_A(self, tok: TokenBundle, p: int) -> TokenBundle:
        """Unmatched local block: per-view self-attention and feed-forward on image tokens."""
        blk = self.pi3_blocks[p]
        image = self._pi3_attention(blk, tok.image, local=True)
        return TokenBundle(tok.latent, blk.ffn_residual(image), tok.transform, tok.temb)

    def block_forward_B(self, tok: TokenBundle, t: int, p: int) -> TokenBundle:
        """Local block plus generative block.

        The image tokens first pass the local block; latent and transform tokens
        then share a two-modality self-attention, cross-attend to the updated
        image tokens and run their own feed-forwards.
        """
        tok = self.block_forward_A(tok, p)
        gen, xf = self.gen_blocks[t], self.xf_blocks[t]
        mg, mx = gen.mod(tok.temb), xf.mod(tok.temb)
        lat, trn = tok.latent, tok.transform
        o_l, o_x = mot_attention([(gen.attn_input(lat, mg), gen.attn), (xf.attn_input(trn, mx), xf.attn)])
        lat, trn = gen.attn_residual(lat, o_l, mg), xf.attn_residual(trn, o_x, mx)
        B, N, P, d = tok.image.shape
        img = tok.image.reshape(B, N * P, d)
        lat = lat + gen.cross(lat, img)
        trn = trn + xf.cross(trn, img)
        return TokenBundle(gen.ffn_residual(lat, mg), tok.image, xf.ffn_residual(trn, mx), tok.temb)

    def block_forward_C(self, tok: TokenBundle, t: int, p: int, bias=None) -> TokenBundle:
        """Global block plus generative block: one self-attention over all three modalities."""
        gen, xf, pi = self.gen_blocks[t], self.xf_blocks[t], self.pi3_blocks[p]
        mg, mx = gen.mod(tok.temb), xf.mod(tok.temb)
        B, N, P, d = tok.image.shape
        img = tok.image.reshape(B, N * P, d)
        o_l, o_i, o_x = mot_attention(
            [
                (gen.attn_input(tok.latent, mg), gen.attn),
                (pi.norm1(img), pi.attn),
                (xf.attn_input(tok.transform, mx), xf.attn),
            ],
            bias,
        )
        lat = gen.attn_residual(tok.latent, o_l, mg)
        img = (img + o_i).reshape(B, N, P, d)
        trn = xf.attn_residual(tok.transform, o_x, mx)
        return TokenBundle(gen.ffn_residual(lat, mg), pi.ffn_residual(img), xf.ffn_residual(trn, mx), tok.temb)

    def _gen_block_alone(self, tok: TokenBundle, t: int) -> TokenBundle:
        gen = self.gen_blocks[t]
        m = gen.mod(tok.temb)
        (o,) = mot_attention([(gen.attn_input(tok.latent, m), gen.attn)])
        lat = gen.attn_residual(tok.latent, o, m)
        return TokenBundle(gen.ffn_residual(lat, m), None, None, tok.temb)

    def _pi3_block_alone(self, tok: TokenBundle, p: int) -> TokenBundle:
        blk = self.pi3_blocks[p]
        image = self._pi3_attention(blk, tok.image, local=p % 2 == 0)
        return TokenBundle(None, blk.ffn_residual(image), None, None)

    def run_blocks(self, tok: TokenBundle) -> TokenBundle:
        if self.branch == "gen":
            for t in range(self.cfg.n_trellis):
                tok = self._gen_block_alone(tok, t)
            return tok
        if self.branch == "pi3":
            for p in range(self.cfg.n_pi3):
                tok = self._pi3_block_alone(tok, p)
            return tok
        for e in self.match.entries:
            if self.trace is not None:
                self.trace.append(tuple(e))
            if e.kind == "A":
                tok = self.block_forward_A(tok, e.p_index)
            elif e.kind == "B":
                tok = self.block_forward_B(tok, e.t_index, e.p_index)
            else:
                tok = self.block_forward_C(tok, e.t_index, e.p_index)
        return tok

    # -- heads ---------------------------------------------------------------

    def decode(self, tok: TokenBundle) -> ForwardOutput:
        cfg = self.cfg
        out = ForwardOutput()
        if tok.latent is not None:
            S = cfg.latent_side
            shift, scale = self.velocity_mod(tok.temb)
            v = self.velocity_head(_modulate(self.velocity_norm(tok.latent), shift, scale))
            out.velocity = v.reshape(v.shape[0], S, S, S, cfg.latent_channels)
        if tok.image is not None:
            B, N, P, d = tok.image.shape
            p, g = cfg.patch_size, cfg.image_side // cfg.patch_size
            pts = self.point_head(self.point_norm(tok.image)).reshape(B, N, g, g, p, p, 3)
            out.points = pts.permute(0, 1, 2, 4, 3, 5, 6).reshape(B, N, g * p, g * p, 3)
            pose = self.pose_head(self.pose_norm(tok.image.mean(2)))
            out.pose_q = F.normalize(pose[..., :4], dim=-1)
            out.pose_t = pose[..., 4:]
        if tok.transform is not None:
            sim = self.sim_head(self.sim_norm(tok.transform[:, 0]))
            out.sim_log_s = sim[:, 0]
            out.sim_q = F.normalize(sim[:, 1:5], dim=-1)
            out.sim_t = sim[:, 5:]
        return out

    def forward(self, z_t=None, t=None, images=None) -> ForwardOutput:
        """Run the model on a batch.

        Views are processed in a canonical content-defined order and the
        per-view outputs are returned in the caller's order, so permuting the
        input views permutes point maps and poses and leaves the velocity and
        similarity bit-for-bit unchanged.
        """
        inv = None
        if images is not None and images.shape[1] > 1:
            order = torch.as_tensor(np.stack([_canonical_order(im) for im in images.detach().cpu().numpy()]))
            inv = torch.argsort(order, dim=1)
            images = torch.gather(images, 1, order[:, :, None, None, None].expand_as(images))
        out = self.decode(self.run_blocks(self.embed_inputs(z_t, t, images)))
        if inv is not None:
            for name in ("points", "pose_q", "pose_t"):
                x = getattr(out, name)
                idx = inv.reshape(inv.shape + (1,) * (x.ndim - 2)).expand_as(x)
                setattr(out, name, torch.gather(x, 1, idx))
        return out


def _canonical_order(views: np.ndarray) -> np.ndarray:
    keys = [np.ascontiguousarray(v).tobytes() for v in views]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)
