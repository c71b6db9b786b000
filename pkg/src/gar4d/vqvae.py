"""Discrete 4D autoencoder: per-view encoder, chunked vector quantizer, and
a spatial-temporal decoder that emits dynamic Gaussians.

The decoder has two halves: a static stage that decodes each timestep's
pooled tokens into a Gaussian frame, and an offset stage that cross-attends
Gaussian features against the full token timeline (per view, then averaged
over views), refines them through a small volumetric encoder-decoder, and
emits additive per-parameter corrections. The offset head is zero-initialized
so corrections start from the exact identity.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .gaussians import PARAM_DIM, DynamicGaussians, GaussianOffsets, apply_offsets

DOWNSAMPLE = 8


@dataclass
class VqConfig:
    image_size: int = 32
    latent_dim: int = 64       # d, before chunking
    n_chunks: int = 2          # chunks per latent vector
    codebook_size: int = 512   # entries per sub-codebook
    token_dim: int = 64        # C, continuous token width
    n_gaussians: int = 256
    d_model: int = 64          # width of the decoder attention stages
    scene_extent: float = 1.6
    voxel_res: int = 16
    commitment_weight: float = 0.25
    loss_alpha: float = 1.0
    loss_beta: float = 0.0
    loss_gamma: float = 0.1

    def __post_init__(self):
        if self.latent_dim % self.n_chunks != 0:
            raise ValueError("latent_dim must be divisible by n_chunks")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")

    @property
    def chunk_dim(self) -> int:
        return self.latent_dim // self.n_chunks

    @property
    def latent_size(self) -> int:
        return self.image_size // DOWNSAMPLE

    @property
    def tokens_per_view(self) -> int:
        return self.latent_size * self.latent_size


class FrameEncoder(nn.Module):
    """Strided conv encoder applied per (t, v) image; 8x spatial reduction."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, latent_dim, 1),
        )

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """(T, V, H, W, 3) -> (T, V, H/8, W/8, d)."""
        t, v, h, w, _ = pixels.shape
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"image size ({h}, {w}) must be divisible by {DOWNSAMPLE}")
        x = pixels.reshape(t * v, h, w, 3).permute(0, 3, 1, 2)
        z = self.net(x)
        return z.permute(0, 2, 3, 1).reshape(t, v, h // DOWNSAMPLE, w // DOWNSAMPLE, -1)


class MultiChunkQuantizer(nn.Module):
    """Each latent vector is split into n chunks, quantized per sub-codebook.

    Nearest neighbors by exact squared Euclidean distance; the straight-through
    estimator passes decoder gradients to the encoder unchanged, and the
    returned loss carries the commitment + embedding terms. Usage counters
    support dead-entry reinitialization.
    """

    def __init__(self, n_chunks: int, codebook_size: int, chunk_dim: int,
                 commitment_weight: float = 0.25):
        super().__init__()
        self.n_chunks = n_chunks
        self.codebook_size = codebook_size
        self.chunk_dim = chunk_dim
        self.commitment_weight = commitment_weight
        books = torch.randn(n_chunks, codebook_size, chunk_dim) * 0.5
        self.codebooks = nn.Parameter(books)
        self.register_buffer("usage", torch.zeros(n_chunks, codebook_size, dtype=torch.long))

    def _chunked(self, latents: torch.Tensor) -> torch.Tensor:
        return latents.reshape(*latents.shape[:-1], self.n_chunks, self.chunk_dim)

    def forward(self, latents: torch.Tensor):
        """(..., d) -> (tokens (..., n), quantized (..., d), loss scalar)."""
        z = self._chunked(latents)  # (..., n, dc)
        flat = z.reshape(-1, self.n_chunks, self.chunk_dim)
        tokens = torch.empty(flat.shape[:2], dtype=torch.long)
        quant = torch.empty_like(flat)
        for c in range(self.n_chunks):
            diff = flat[:, c].unsqueeze(1) - self.codebooks[c].unsqueeze(0)
            d2 = diff.pow(2).sum(-1)  # (P, K)
            idx = d2.argmin(dim=1)
            tokens[:, c] = idx
            quant[:, c] = self.codebooks[c][idx]
        with torch.no_grad():
            for c in range(self.n_chunks):
                self.usage[c] += torch.bincount(tokens[:, c], minlength=self.codebook_size)
        commit = F.mse_loss(flat, quant.detach()) * self.commitment_weight
        embed = F.mse_loss(flat.detach(), quant)
        quant_st = flat + (quant - flat).detach()
        tokens = tokens.reshape(*z.shape[:-1])
        quantized = quant_st.reshape(*z.shape[:-2], -1)
        return tokens, quantized, commit + embed

    def dequantize(self, tokens: torch.Tensor) -> torch.Tensor:
        """Table lookup + chunk concatenation: (..., n) -> (..., d)."""
        if tokens.shape[-1] != self.n_chunks:
            raise ValueError(f"expected {self.n_chunks} chunk indices per position")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise ValueError(
                f"token index out of range [0, {self.codebook_size}): "
                f"[{int(tokens.min())}, {int(tokens.max())}]"
            )
        parts = [self.codebooks[c][tokens[..., c]] for c in range(self.n_chunks)]
        return torch.cat(parts, dim=-1)

    def chunk_vectors(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-chunk codebook vectors without concatenation: (..., n) -> (..., n, dc)."""
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise ValueError("token index out of range")
        return torch.stack(
            [self.codebooks[c][tokens[..., c]] for c in range(self.n_chunks)], dim=-2
        )

    def reset_usage(self):
        self.usage.zero_()

    def fraction_used(self) -> float:
        return float((self.usage > 0).float().mean())

    @torch.no_grad()
    def reinit_dead_entries(self, latents: torch.Tensor, generator: torch.Generator | None = None):
        """Re-seed entries unused since the last reset from encoder outputs."""
        flat = self._chunked(latents).reshape(-1, self.n_chunks, self.chunk_dim)
        n_replaced = 0
        for c in range(self.n_chunks):
            dead = torch.nonzero(self.usage[c] == 0, as_tuple=False).squeeze(-1)
            if dead.numel() == 0:
                continue
            pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=generator)
            self.codebooks[c][dead] = flat[pick, c]
            n_replaced += int(dead.numel())
        return n_replaced


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with residual; self- or cross-attention."""

    def __init__(self, dim: int, n_heads: int = 4, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor | None = None) -> torch.Tensor:
        """(B, Nq, D) x (B, Nk, Dk) -> (B, Nq, D), residual on the queries."""
        kv_in = q_in if kv_in is None else kv_in
        b, nq, d = q_in.shape
        hd = d // self.n_heads
        q = self.to_q(self.norm_q(q_in)).view(b, nq, self.n_heads, hd).transpose(1, 2)
        kv = self.norm_kv(kv_in)
        k = self.to_k(kv).view(b, -1, self.n_heads, hd).transpose(1, 2)
        v = self.to_v(kv).view(b, -1, self.n_heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return q_in + self.out(mixed)


class TokenFactorizer(nn.Module):
    """Discrete-to-continuous projection: self-attention over each (t, v) slice."""

    def __init__(self, latent_dim: int, token_dim: int, n_heads: int = 4):
        super().__init__()
        self.attn = AttentionBlock(latent_dim, n_heads)
        self.proj = nn.Linear(latent_dim, token_dim)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        """(T, V, h, w, d) -> (T, V, N, C) with N = h*w; no cross-view mixing."""
        t, v, h, w, d = latents.shape
        x = latents.reshape(t * v, h * w, d)
        return self.proj(self.attn(x)).reshape(t, v, h * w, -1)


class StaticDecoder(nn.Module):
    """Learned queries cross-attend each timestep's pooled tokens into Gaussians."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.n_gaussians, cfg.d_model) * 0.3)
        self.in_proj = nn.Linear(cfg.token_dim, cfg.d_model)
        self.attn1 = AttentionBlock(cfg.d_model, kv_dim=cfg.d_model)
        self.attn2 = AttentionBlock(cfg.d_model, kv_dim=cfg.d_model)
        self.mlp = nn.Sequential(
            nn.LayerNorm(cfg.d_model),
            nn.Linear(cfg.d_model, 2 * cfg.d_model),
            nn.GELU(),
            nn.Linear(2 * cfg.d_model, cfg.d_model),
        )
        self.head = nn.Linear(cfg.d_model, PARAM_DIM)
        with torch.no_grad():
            # start splats mid-sized, mostly transparent-ish, unit quaternion
            self.head.bias[3:6] = math.log(0.12)
            self.head.bias[6] = 1.0
            self.head.bias[7:10] = 0.0

    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        """(T, V, N, C) -> per-timestep query features (T, n_g, d_model)."""
        t = tokens.shape[0]
        kv = self.in_proj(tokens.reshape(t, -1, tokens.shape[-1]))  # views pooled as one set
        q = self.queries.unsqueeze(0).expand(t, -1, -1)
        x = self.attn1(q, kv)
        x = self.attn2(x, kv)
        return x + self.mlp(x)

    def forward(self, tokens: torch.Tensor) -> DynamicGaussians:
        raw = self.head(self.features(tokens))  # (T, n_g, 14)
        positions = torch.tanh(raw[..., 0:3]) * self.cfg.scene_extent
        scales = torch.exp(raw[..., 3:6].clamp(-8.0, 1.5))
        rotations = F.normalize(raw[..., 6:10], dim=-1, eps=1e-8)
        opacities = torch.sigmoid(raw[..., 10])
        colors = torch.sigmoid(raw[..., 11:14])
        return DynamicGaussians(positions, scales, rotations, opacities, colors)


class VoxelRefiner(nn.Module):
    """2-level volumetric encoder-decoder over scatter-voxelized point features.

    Positions are treated as constants (nearest-voxel scatter is discrete);
    the gathered result is added back to the per-point features.
    """

    def __init__(self, dim: int, res: int, extent: float, vox_dim: int = 8):
        super().__init__()
        self.res = res
        self.extent = extent
        self.vox_in = nn.Linear(dim, vox_dim)
        self.enc = nn.Conv3d(vox_dim, 2 * vox_dim, 3, padding=1)
        self.down = nn.Conv3d(2 * vox_dim, 2 * vox_dim, 2, stride=2)
        self.up = nn.ConvTranspose3d(2 * vox_dim, 2 * vox_dim, 2, stride=2)
        self.dec = nn.Conv3d(2 * vox_dim, vox_dim, 3, padding=1)
        self.vox_out = nn.Linear(vox_dim, dim)

    def forward(self, feats: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """(T, n, D) features at (T, n, 3) world positions -> refined (T, n, D)."""
        t, n, _ = feats.shape
        r = self.res
        pos = positions.detach()
        unit = ((pos + self.extent) / (2 * self.extent)).clamp(0.0, 1.0 - 1e-6)
        idx = (unit * r).long().clamp(0, r - 1)  # (T, n, 3) as (x, y, z)
        flat_idx = (idx[..., 2] * r + idx[..., 1]) * r + idx[..., 0]

        x = self.vox_in(feats)
        vols = []
        for ti in range(t):
            grid = x.new_zeros(r * r * r, x.shape[-1])
            count = x.new_zeros(r * r * r, 1)
            grid.index_add_(0, flat_idx[ti], x[ti])
            count.index_add_(0, flat_idx[ti], torch.ones_like(x[ti, :, :1]))
            grid = grid / count.clamp_min(1.0)
            vols.append(grid.T.reshape(-1, r, r, r))  # (C, D=z, H=y, W=x)
        vol = torch.stack(vols)
        vol = self.dec(F.gelu(self.up(F.gelu(self.down(F.gelu(self.enc(vol)))))))

        # trilinear gather at the (normalized) point coordinates
        coords = unit * 2.0 - 1.0  # grid_sample convention, (x, y, z)
        grid_pts = coords.reshape(t, n, 1, 1, 3)
        sampled = F.grid_sample(vol, grid_pts, mode="bilinear", align_corners=False)
        sampled = sampled.reshape(t, -1, n).transpose(1, 2)
        return feats + self.vox_out(sampled)


class OffsetPredictor(nn.Module):
    """Temporal cross-attention of Gaussian features against each view's
    token timeline, volumetric refinement, and a zero-initialized offset head."""

    def __init__(self, cfg: VqConfig, zero_init_head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.param_embed = nn.Linear(PARAM_DIM, cfg.d_model)
        self.token_proj = nn.Linear(cfg.token_dim, cfg.d_model)
        self.cross = AttentionBlock(cfg.d_model, kv_dim=cfg.d_model)
        self.refiner = VoxelRefiner(cfg.d_model, cfg.voxel_res, cfg.scene_extent)
        self.head = nn.Linear(cfg.d_model, PARAM_DIM)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, g: DynamicGaussians, tokens: torch.Tensor) -> GaussianOffsets:
        """(gaussians over T frames, continuous tokens (T, V, N, C)) -> offsets."""
        t, v, n_tok, _ = tokens.shape
        if g.num_frames != t:
            raise ValueError(
                f"gaussians span {g.num_frames} frames but tokens span {t}"
            )
        queries = self.param_embed(g.params())  # (T, n_g, D)
        q_flat = queries.reshape(1, -1, queries.shape[-1])  # all frames attend jointly
        per_view = []
        for vi in range(v):
            kv = self.token_proj(tokens[:, vi].reshape(1, t * n_tok, -1))
            per_view.append(self.cross(q_flat, kv))
        coarse = torch.stack(per_view).mean(dim=0).reshape(t, -1, queries.shape[-1])
        refined = self.refiner(coarse, g.positions)
        return GaussianOffsets.from_flat(self.head(refined))


class PatchDiscriminator(nn.Module):
    """4-layer strided patch classifier for the optional adversarial term."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(128, 1, 3, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) -> patch logits (B, 1, h', w')."""
        return self.net(images.permute(0, 3, 1, 2))


class VqModel(nn.Module):
    """Encoder + quantizer + spatial-temporal decoder, end to end."""

    def __init__(self, cfg: VqConfig, zero_init_offsets: bool = True):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg.latent_dim)
        self.quantizer = MultiChunkQuantizer(
            cfg.n_chunks, cfg.codebook_size, cfg.chunk_dim, cfg.commitment_weight
        )
        self.factorizer = TokenFactorizer(cfg.latent_dim, cfg.token_dim)
        self.static_decoder = StaticDecoder(cfg)
        self.offset_predictor = OffsetPredictor(cfg, zero_init_head=zero_init_offsets)

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.encoder(pixels)

    def quantize(self, latents: torch.Tensor):
        return self.quantizer(latents)

    def dequantize(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.quantizer.dequantize(tokens)

    def factorize(self, tokens: torch.Tensor) -> torch.Tensor:
        """TokenGrid (T, V, h, w, n) -> continuous tokens (T, V, N, C)."""
        return self.factorizer(self.dequantize(tokens))

    def decode_latents(self, quantized: torch.Tensor):
        """Quantized latents -> (corrected, static, continuous tokens)."""
        s = self.factorizer(quantized)
        static = self.static_decoder(s)
        offsets = self.offset_predictor(static, s)
        return apply_offsets(static, offsets), static, s

    def decode_tokens(self, tokens: torch.Tensor):
        """TokenGrid -> (corrected gaussians, static gaussians, tokens S)."""
        return self.decode_latents(self.dequantize(tokens))

    def forward(self, pixels: torch.Tensor) -> dict:
        latents = self.encode(pixels)
        tokens, quantized, vq_loss = self.quantize(latents)
        corrected, static, s = self.decode_latents(quantized)
        return {
            "tokens": tokens,
            "latents": latents,
            "quantized": quantized,
            "vq_loss": vq_loss,
            "continuous": s,
            "static": static,
            "corrected": corrected,
        }


def vae_loss(
    rendered: torch.Tensor,
    truth: torch.Tensor,
    flow_pred: torch.Tensor | None = None,
    flow_true: torch.Tensor | None = None,
    disc_logits: torch.Tensor | None = None,
    weights: tuple = (1.0, 0.0, 0.1),
    commitment: torch.Tensor | float = 0.0,
):
    """Composite objective: alpha*render MSE + beta*adversarial + gamma*flow MSE,
    plus the quantizer commitment term. Returns (total, parts dict)."""
    alpha, beta, gamma = (float(x) for x in weights)
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ValueError(f"loss weights must be nonnegative, got {weights}")
    if rendered.shape != truth.shape:
        raise ValueError(f"render/truth shape mismatch: {rendered.shape} vs {truth.shape}")
    l_r = F.mse_loss(rendered, truth)
    parts = {"render": l_r}
    total = alpha * l_r
    if gamma > 0 or (flow_pred is not None and flow_true is not None):
        if flow_pred is None or flow_true is None:
            raise ValueError("flow loss requested but flow tensors missing")
        if flow_pred.shape != flow_true.shape:
            raise ValueError(
                f"flow shape mismatch: {flow_pred.shape} vs {flow_true.shape}"
            )
        l_f = F.mse_loss(flow_pred, flow_true)
        parts["flow"] = l_f
        total = total + gamma * l_f
    if beta > 0:
        if disc_logits is None:
            raise ValueError("adversarial weight is set but no discriminator logits given")
        l_g = F.softplus(-disc_logits).mean()  # non-saturating generator loss
        parts["adv"] = l_g
        total = total + beta * l_g
    total = total + commitment
    parts["commitment"] = commitment if torch.is_tensor(commitment) else torch.tensor(float(commitment))
    parts["total"] = total
    return total, parts
