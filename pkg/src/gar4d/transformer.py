"""Grouped autoregressive transformer over spatio-temporal tokens.

The sequence is [text prefix][monocular-video prefix][SEP][group 1]...[group T],
one group per timestep, ordered (view, spatial cell, chunk) inside a group.
Decoder blocks are Llama-flavored (RMSNorm pre-norm, SwiGLU, causal
self-attention) but carry no rotary phases: position is supplied additively
by a per-position encoding built from each token's camera ray (Pluecker
coordinates at latent resolution) plus its group's timestep embedding,
while prefix positions get learned segment embeddings.

Conditioning from the state container enters as extra key/value entries,
visible only to positions in the conditioned group and later (or, in
"bias" mode, as an additive bias on the group's input embeddings).
Attention is evaluated with explicit additive masks so causality holds
exactly, not just to rounding.
"""

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .cameras import pluecker_grid
from .container import ContainerConfig, StateContainer

KIND_TEXT = "text"
KIND_VIDEO = "video"
KIND_SEP = "sep"
KIND_GROUP = "group"

_SEGMENT_IDS = {KIND_TEXT: 0, KIND_VIDEO: 1, KIND_SEP: 2}


@dataclass
class StarConfig:
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 512      # one shared vocabulary per chunk position
    t_groups: int = 4
    n_views: int = 4
    latent_h: int = 4
    latent_w: int = 4
    n_chunks: int = 2
    max_seq_len: int = 768
    mlp_hidden: int = 256
    text_buckets: int = 512
    temperature: float = 1.0
    top_k: int = 50
    container: ContainerConfig = field(default_factory=ContainerConfig)
    container_mode: str = "kv"  # "kv" | "bias" | "off"

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.t_groups < 1:
            raise ValueError("need at least one group")
        if self.container_mode not in ("kv", "bias", "off"):
            raise ValueError(f"unknown container_mode {self.container_mode!r}")
        if isinstance(self.container, dict):
            self.container = ContainerConfig(**self.container)

    @property
    def spatial_per_view(self) -> int:
        return self.latent_h * self.latent_w

    @property
    def tokens_per_group(self) -> int:
        return self.n_views * self.spatial_per_view * self.n_chunks

    @property
    def n_video_tokens(self) -> int:
        return self.t_groups * self.spatial_per_view * self.n_chunks


@dataclass(frozen=True)
class PositionInfo:
    kind: str
    group: int = 0     # 1-based timestep for group tokens, 0 otherwise
    view: int = -1
    spatial: int = -1
    chunk: int = -1


@dataclass
class SequenceLayout:
    """Ordered position annotations for one assembled sequence."""

    positions: list
    n_text: int
    n_video: int
    t_groups: int
    tokens_per_group: int

    def __post_init__(self):
        seps = [i for i, p in enumerate(self.positions) if p.kind == KIND_SEP]
        if len(seps) != 1:
            raise ValueError(f"layout must contain exactly one SEP, found {len(seps)}")
        self.sep_index = seps[0]
        self.group_start = self.sep_index + 1
        groups = [p.group for p in self.positions[self.group_start:]]
        if groups != sorted(groups):
            raise ValueError("group segments must be ordered by timestep")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_group_tokens(self) -> int:
        return len(self.positions) - self.group_start

    def group_slice(self, t: int) -> slice:
        """Slice of group t (1-based) on the group-token axis."""
        if not (1 <= t <= self.t_groups):
            raise ValueError(f"group {t} out of range 1..{self.t_groups}")
        return slice((t - 1) * self.tokens_per_group, t * self.tokens_per_group)

    def group_ids(self) -> torch.Tensor:
        """(L,) group id per sequence position; 0 for prefix and SEP."""
        return torch.tensor([p.group for p in self.positions], dtype=torch.long)

    def chunk_ids(self, kind: str) -> torch.Tensor:
        return torch.tensor(
            [p.chunk for p in self.positions if p.kind == kind], dtype=torch.long
        )


def build_layout(cfg: StarConfig, n_text: int) -> SequenceLayout:
    positions = [PositionInfo(KIND_TEXT) for _ in range(n_text)]
    for t in range(1, cfg.t_groups + 1):
        for s in range(cfg.spatial_per_view):
            for c in range(cfg.n_chunks):
                positions.append(PositionInfo(KIND_VIDEO, group=0, view=0, spatial=s, chunk=c))
    positions.append(PositionInfo(KIND_SEP))
    for t in range(1, cfg.t_groups + 1):
        for v in range(cfg.n_views):
            for s in range(cfg.spatial_per_view):
                for c in range(cfg.n_chunks):
                    positions.append(
                        PositionInfo(KIND_GROUP, group=t, view=v, spatial=s, chunk=c)
                    )
    return SequenceLayout(
        positions, n_text, cfg.n_video_tokens, cfg.t_groups, cfg.tokens_per_group
    )


def flatten_group_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(..., T, V, h, w, n) -> (..., T*V*h*w*n) in layout order (t, v, spatial, chunk)."""
    return grid.reshape(*grid.shape[:-5], -1)


def unflatten_group_tokens(flat: torch.Tensor, cfg: StarConfig) -> torch.Tensor:
    return flat.reshape(
        *flat.shape[:-1], cfg.t_groups, cfg.n_views, cfg.latent_h, cfg.latent_w, cfg.n_chunks
    )


class TextEmbedder(nn.Module):
    """Whitespace tokens hashed into a small learned vocabulary, then an MLP."""

    def __init__(self, buckets: int, dim: int):
        super().__init__()
        self.buckets = buckets
        self.table = nn.Embedding(buckets, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def bucket_ids(self, prompt: str) -> list:
        return [zlib.crc32(w.encode("utf-8")) % self.buckets for w in prompt.split()]

    def forward(self, prompt: str) -> torch.Tensor:
        """One embedding per whitespace token; empty prompt -> (0, D)."""
        ids = self.bucket_ids(prompt)
        if not ids:
            return self.table.weight.new_zeros((0, self.table.weight.shape[1]))
        return self.mlp(self.table(torch.tensor(ids, dtype=torch.long)))


class TokenEmbedder(nn.Module):
    """Image-tokenizer projection: MLP over the frozen sub-codebook vector of
    each discrete token. Chunk identity rides on the codebook lookup."""

    def __init__(self, chunk_vectors: torch.Tensor, dim: int):
        super().__init__()
        self.register_buffer("chunk_vectors", chunk_vectors.detach().clone())
        self.mlp = nn.Sequential(
            nn.Linear(chunk_vectors.shape[-1], dim), nn.GELU(), nn.Linear(dim, dim)
        )

    def forward(self, tokens: torch.Tensor, chunk_ids: torch.Tensor) -> torch.Tensor:
        """tokens (..., P) with per-position chunk ids (P,) -> (..., P, D)."""
        vecs = self.chunk_vectors[chunk_ids, tokens]
        return self.mlp(vecs)


class TimestepEncoder(nn.Module):
    """Sinusoidal timestep features passed through a learned projection."""

    def __init__(self, dim: int, t_groups: int, base_dim: int = 32):
        super().__init__()
        self.t_groups = t_groups
        self.base_dim = base_dim
        self.proj = nn.Linear(base_dim, dim)

    def forward(self, t: int) -> torch.Tensor:
        if not (1 <= t <= self.t_groups):
            raise ValueError(f"timestep {t} out of range 1..{self.t_groups}")
        half = self.base_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        ang = float(t) * freqs
        return self.proj(torch.cat([torch.sin(ang), torch.cos(ang)]))


class ConditionEncoder(nn.Module):
    """Per-position additive encodings: ray + timestep for group tokens,
    learned segment embeddings for prefix/SEP positions."""

    def __init__(self, cfg: StarConfig):
        super().__init__()
        self.cfg = cfg
        self.ray_proj = nn.Linear(6, cfg.embed_dim)
        self.timestep = TimestepEncoder(cfg.embed_dim, cfg.t_groups)
        self.segments = nn.Embedding(len(_SEGMENT_IDS), cfg.embed_dim)

    def ray_table(self, cameras) -> torch.Tensor:
        """(V, h*w, 6) Pluecker rays at latent resolution."""
        grids = [
            pluecker_grid(cam, self.cfg.latent_h, self.cfg.latent_w).reshape(-1, 6)
            for cam in cameras
        ]
        return torch.as_tensor(np.stack(grids), dtype=torch.float32)

    def build(self, layout: SequenceLayout, cameras) -> torch.Tensor:
        """(L, D) additive encoding for every sequence position."""
        if len(cameras) != self.cfg.n_views:
            raise ValueError(f"expected {self.cfg.n_views} cameras, got {len(cameras)}")
        rays = self.ray_table(cameras)
        ray_enc = self.ray_proj(rays)  # (V, h*w, D)
        time_enc = torch.stack([self.timestep(t) for t in range(1, self.cfg.t_groups + 1)])
        out = []
        for p in layout.positions:
            if p.kind == KIND_GROUP:
                out.append(ray_enc[p.view, p.spatial] + time_enc[p.group - 1])
            else:
                out.append(self.segments(torch.tensor(_SEGMENT_IDS[p.kind])))
        return torch.stack(out)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class DecoderBlock(nn.Module):
    """Pre-norm causal attention (with optional extra KV entries) + SwiGLU."""

    def __init__(self, dim: int, n_heads: int, hidden: int):
        super().__init__()
        self.n_heads = n_heads
        self.attn_norm = RMSNorm(dim)
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)
        self.mlp_norm = RMSNorm(dim)
        self.w1 = nn.Linear(dim, hidden, bias=False)
        self.w3 = nn.Linear(dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, dim, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor,
                extra_kv: torch.Tensor | None = None) -> torch.Tensor:
        """x (B, L, D); mask (L, C+L) additive; extra_kv (B, C, D) raw entries."""
        b, l, d = x.shape
        hd = d // self.n_heads
        h = self.attn_norm(x)
        kv_in = h if extra_kv is None else torch.cat([self.attn_norm(extra_kv), h], dim=1)
        q = self.wq(h).view(b, l, self.n_heads, hd).transpose(1, 2)
        k = self.wk(kv_in).view(b, -1, self.n_heads, hd).transpose(1, 2)
        v = self.wv(kv_in).view(b, -1, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd) + mask
        attn = torch.softmax(scores, dim=-1)
        x = x + self.wo((attn @ v).transpose(1, 2).reshape(b, l, d))
        h2 = self.mlp_norm(x)
        return x + self.w2(F.silu(self.w1(h2)) * self.w3(h2))


def chunked_ce(logits: torch.Tensor, targets: torch.Tensor, layout: SequenceLayout):
    """Per-group mean cross-entropy, summed over groups.

    logits: (B, n_group, K) or (n_group, K) aligned to group-token targets.
    Returns (total, per-group list).
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        targets = targets.unsqueeze(0)
    if logits.shape[:2] != targets.shape:
        raise ValueError(
            f"logits {tuple(logits.shape[:2])} do not align with targets {tuple(targets.shape)}"
        )
    if targets.shape[1] != layout.n_group_tokens:
        raise ValueError(
            f"expected {layout.n_group_tokens} group positions, got {targets.shape[1]}"
        )
    per_group = []
    for t in range(1, layout.t_groups + 1):
        sl = layout.group_slice(t)
        lg = logits[:, sl].reshape(-1, logits.shape[-1])
        tg = targets[:, sl].reshape(-1)
        per_group.append(F.cross_entropy(lg, tg))
    total = torch.stack(per_group).sum()
    return total, per_group


def sample_token(logits: torch.Tensor, temperature: float, top_k: int,
                 generator: torch.Generator | None = None) -> int:
    """Temperature/top-k sampling of one token id; temperature <= 0 is greedy."""
    if temperature <= 0.0:
        return int(logits.argmax())
    scaled = logits / temperature
    if top_k and top_k < scaled.shape[-1]:
        kth = torch.topk(scaled, top_k).values[-1]
        scaled = torch.where(scaled < kth, torch.full_like(scaled, float("-inf")), scaled)
    probs = torch.softmax(scaled, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


@dataclass
class GenerationResult:
    tokens: torch.Tensor        # (T, V, h, w, n) long
    pool_trace: list            # per group t: sorted group ids pooled before predicting t


class GroupedTransformer(nn.Module):
    """Decoder-only model with group-structured conditioning."""

    def __init__(self, cfg: StarConfig, chunk_vectors: torch.Tensor):
        super().__init__()
        if chunk_vectors.shape[0] != cfg.n_chunks or chunk_vectors.shape[1] != cfg.vocab_size:
            raise ValueError(
                f"chunk vectors {tuple(chunk_vectors.shape)} do not match config "
                f"(n_chunks={cfg.n_chunks}, vocab={cfg.vocab_size})"
            )
        self.cfg = cfg
        self.text_embedder = TextEmbedder(cfg.text_buckets, cfg.embed_dim)
        self.token_embedder = TokenEmbedder(chunk_vectors, cfg.embed_dim)
        self.cond = ConditionEncoder(cfg)
        self.sep_embed = nn.Parameter(torch.randn(cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.embed_dim, cfg.n_heads, cfg.mlp_hidden)
            for _ in range(cfg.n_layers)
        )
        self.final_norm = RMSNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab_size, bias=False)
        self.container = StateContainer(cfg.embed_dim, cfg.embed_dim, cfg.container)

    # ---- embedding assembly -------------------------------------------------

    def embed_text(self, prompt: str) -> torch.Tensor:
        return self.text_embedder(prompt)

    def embed_video_tokens(self, video_tokens: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
        """(..., T, h, w, n) single-view tokens -> (..., n_video, D) prefix embeddings."""
        flat = video_tokens.reshape(*video_tokens.shape[:-4], -1)
        return self.token_embedder(flat, layout.chunk_ids(KIND_VIDEO))

    def embed_group_tokens(self, flat_tokens: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
        """(..., n_group) -> (..., n_group, D)."""
        return self.token_embedder(flat_tokens, layout.chunk_ids(KIND_GROUP)[: flat_tokens.shape[-1]])

    # ---- container bookkeeping ----------------------------------------------

    def _group_tags(self, layout: SequenceLayout, t: int):
        infos = [p for p in layout.positions[layout.group_start:] if p.group == t]
        views = np.array([p.view for p in infos], dtype=np.int64)
        pos = np.array(
            [p.spatial * self.cfg.n_chunks + p.chunk for p in infos], dtype=np.int64
        )
        return views, pos

    def container_states(self, group_embeds: torch.Tensor, layout: SequenceLayout):
        """Teacher-forced per-group states for one sample.

        group_embeds: (n_group, D) token-embedder features in layout order.
        Returns states[t-1] = container state available when predicting group t
        (so states[0] is empty and states[t-1] pools groups 1..t-1).
        """
        states = [self.container.empty_state()]
        for t in range(1, layout.t_groups):
            views, pos = self._group_tags(layout, t)
            states.append(
                self.container.update(states[-1], group_embeds[layout.group_slice(t)], t, views, pos)
            )
        return states

    def conditioning_blocks(self, states):
        """Injected conditioning per group, list of (M_t, D) tensors."""
        return [self.container.inject(s) for s in states]

    # ---- masks and the decoder stack ----------------------------------------

    def _build_mask(self, layout: SequenceLayout, block_sizes, disabled=()) -> torch.Tensor:
        """(L, C+L) additive mask: causal over the sequence, per-group container
        visibility over the extra columns (block t visible to groups >= t)."""
        l = len(layout)
        gids = layout.group_ids()
        neg = float("-inf")
        cols = []
        for t, size in enumerate(block_sizes, start=1):
            if size == 0:
                continue
            visible = (gids >= t) & torch.tensor(t not in disabled)
            cols.append(torch.where(visible, 0.0, neg).unsqueeze(1).expand(l, size))
        causal = torch.full((l, l), neg).triu(1)
        if cols:
            return torch.cat(cols + [causal], dim=1)
        return causal

    def decode(self, x: torch.Tensor, mask: torch.Tensor,
               extra_kv: torch.Tensor | None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, mask, extra_kv)
        return self.final_norm(x)

    def forward(self, seq_embed: torch.Tensor, layout: SequenceLayout,
                blocks=None, disabled_blocks=()) -> torch.Tensor:
        """Full-sequence forward.

        seq_embed: (B, L, D) input embeddings with the positional encoding
        already added. blocks: per-group conditioning, list over t=1..T of
        (B, M_t, D) (or unbatched (M_t, D)). Returns logits (B, n_group, K)
        aligned so that logits[:, j] predicts group token j.
        """
        if seq_embed.dim() == 2:
            seq_embed = seq_embed.unsqueeze(0)
        b, l, _ = seq_embed.shape
        if l > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {l} exceeds maximum {self.cfg.max_seq_len}")
        if l != len(layout):
            raise ValueError(f"embeddings span {l} positions, layout {len(layout)}")
        use_kv = self.cfg.container_mode == "kv" and blocks is not None
        if use_kv:
            blocks = [blk.unsqueeze(0) if blk.dim() == 2 else blk for blk in blocks]
            sizes = [blk.shape[1] for blk in blocks]
            nonempty = [blk for blk in blocks if blk.shape[1] > 0]
            extra = torch.cat(nonempty, dim=1) if nonempty else None
            if extra is not None and extra.shape[0] == 1 and b > 1:
                extra = extra.expand(b, -1, -1)
        else:
            sizes, extra = [], None
        mask = self._build_mask(layout, sizes, disabled_blocks)
        hidden = self.decode(seq_embed, mask, extra)
        # prediction for group token j sits at the previous sequence position
        out = hidden[:, layout.sep_index : l - 1]
        return self.head(out)

    # ---- sequence assembly ----------------------------------------------------

    def assemble(self, text_prompt: str, video_tokens: torch.Tensor,
                 group_tokens_flat: torch.Tensor, cameras):
        """Build (seq_embed (B, L, D), layout, group_embeds (B, n_group, D)).

        video_tokens: (B, T, h, w, n); group_tokens_flat: (B, n_group).
        """
        text_emb = self.embed_text(text_prompt)
        layout = build_layout(self.cfg, text_emb.shape[0])
        spe = self.cond.build(layout, cameras)
        b = group_tokens_flat.shape[0]
        video_emb = self.embed_video_tokens(video_tokens, layout)
        group_emb = self.embed_group_tokens(group_tokens_flat, layout)
        seq = torch.cat(
            [
                text_emb.unsqueeze(0).expand(b, -1, -1),
                video_emb,
                self.sep_embed.expand(b, 1, -1),
                group_emb,
            ],
            dim=1,
        )
        return seq + spe, layout, group_emb

    def training_logits(self, text_prompt: str, video_tokens: torch.Tensor,
                        group_tokens_flat: torch.Tensor, cameras):
        """Teacher-forced logits for a batch; returns (logits, layout)."""
        seq, layout, group_emb = self.assemble(
            text_prompt, video_tokens, group_tokens_flat, cameras
        )
        b = seq.shape[0]
        blocks = None
        if self.cfg.container_mode != "off":
            per_sample = [
                self.conditioning_blocks(self.container_states(group_emb[i], layout))
                for i in range(b)
            ]
            blocks = [
                torch.stack([per_sample[i][t] for i in range(b)])
                for t in range(layout.t_groups)
            ]
            if self.cfg.container_mode == "bias":
                d = seq.shape[-1]
                pieces = [seq.new_zeros(b, layout.group_start, d)]
                for t in range(1, layout.t_groups + 1):
                    blk = blocks[t - 1]
                    if blk.shape[1] == 0:
                        pieces.append(seq.new_zeros(b, layout.tokens_per_group, d))
                    else:
                        pieces.append(
                            blk.mean(dim=1, keepdim=True).expand(-1, layout.tokens_per_group, -1)
                        )
                seq = seq + torch.cat(pieces, dim=1)
                blocks = None
        return self.forward(seq, layout, blocks), layout

    # ---- autoregressive generation -------------------------------------------

    @torch.no_grad()
    def generate_many(self, vq, text_prompt: str, frames: torch.Tensor, cameras,
                      temperature: float | None = None, top_k: int | None = None,
                      seeds=None) -> list:
        """Sample token grids for a batch of monocular videos.

        frames: (B, T, H, W, 3). Seeds are per sample, so each object's draw
        stream is independent of the batch composition. Returns a list of
        GenerationResult.
        """
        cfg = self.cfg
        temperature = cfg.temperature if temperature is None else temperature
        top_k = cfg.top_k if top_k is None else top_k
        b = frames.shape[0]
        if seeds is None:
            seeds = list(range(b))
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

        text_emb = self.embed_text(text_prompt)
        layout = build_layout(cfg, text_emb.shape[0])
        spe = self.cond.build(layout, cameras)
        video_tokens = encode_video(vq, frames)  # (B, T, h, w, n)
        video_emb = self.embed_video_tokens(video_tokens, layout)
        group_chunk_ids = layout.chunk_ids(KIND_GROUP)

        prefix = torch.cat(
            [
                text_emb.unsqueeze(0).expand(b, -1, -1),
                video_emb,
                self.sep_embed.expand(b, 1, -1),
            ],
            dim=1,
        ) + spe[: layout.group_start]

        states = [self.container.empty_state() for _ in range(b)]
        traces = [[] for _ in range(b)]
        blocks: list = []  # per finished-or-current group t: (B, M_t, D)
        seq = prefix
        sampled = torch.zeros((b, layout.n_group_tokens), dtype=torch.long)
        full_mask = None

        for t in range(1, cfg.t_groups + 1):
            for i in range(b):
                traces[i].append(sorted(set(states[i].group_ids.tolist())))
            inj = [self.container.inject(states[i]) for i in range(b)]
            blocks.append(torch.stack(inj))
            bias = None
            if cfg.container_mode == "bias" and blocks[-1].shape[1] > 0:
                bias = blocks[-1].mean(dim=1)  # (B, D)

            sizes = [blk.shape[1] for blk in blocks]
            nonempty = [blk for blk in blocks if blk.shape[1] > 0]
            extra = torch.cat(nonempty, dim=1) if (nonempty and cfg.container_mode == "kv") else None
            full_mask = self._build_mask(layout, sizes if cfg.container_mode == "kv" else [])

            sl = layout.group_slice(t)
            for j in range(sl.start, sl.stop):
                l_now = seq.shape[1]
                mask = full_mask[:l_now, : (extra.shape[1] if extra is not None else 0) + l_now]
                hidden = self.decode(seq, mask, extra)
                logits = self.head(hidden[:, -1])
                ids = [
                    sample_token(logits[i], temperature, top_k, gens[i]) for i in range(b)
                ]
                tok = torch.tensor(ids, dtype=torch.long)
                sampled[:, j] = tok
                emb = self.token_embedder(tok.unsqueeze(-1), group_chunk_ids[j : j + 1])
                nxt = emb.squeeze(1) + spe[layout.group_start + j]
                if bias is not None:
                    nxt = nxt + bias
                seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)

            views, pos = self._group_tags(layout, t)
            group_emb = self.embed_group_tokens(sampled[:, sl], layout)
            states = [
                self.container.update(states[i], group_emb[i], t, views, pos)
                for i in range(b)
            ]

        results = []
        for i in range(b):
            grid = unflatten_group_tokens(sampled[i], cfg)
            results.append(GenerationResult(tokens=grid, pool_trace=traces[i]))
        return results

    @torch.no_grad()
    def generate(self, vq, text_prompt: str, frames: torch.Tensor, cameras,
                 temperature: float | None = None, top_k: int | None = None,
                 seed: int = 0) -> GenerationResult:
        """Single-object generation; see generate_many."""
        return self.generate_many(
            vq, text_prompt, frames.unsqueeze(0), cameras, temperature, top_k, [seed]
        )[0]


def encode_video(vq, frames: torch.Tensor) -> torch.Tensor:
    """Tokenize monocular frames with the frozen VQ encoder (no usage updates).

    frames: (B, T, H, W, 3) or (T, H, W, 3) -> tokens (B, T, h, w, n) / (T, h, w, n).
    """
    single = frames.dim() == 4
    if single:
        frames = frames.unsqueeze(0)
    b, t, h, w, _ = frames.shape
    with torch.no_grad():
        latents = vq.encode(frames.reshape(b * t, 1, h, w, 3))
        z = vq.quantizer._chunked(latents).reshape(
            -1, vq.quantizer.n_chunks, vq.quantizer.chunk_dim
        )
        tokens = torch.empty(z.shape[:2], dtype=torch.long)
        for c in range(vq.quantizer.n_chunks):
            d2 = (z[:, c].unsqueeze(1) - vq.quantizer.codebooks[c].unsqueeze(0)).pow(2).sum(-1)
            tokens[:, c] = d2.argmin(dim=1)
    hh, ww = latents.shape[2], latents.shape[3]
    tokens = tokens.reshape(b, t, hh, ww, -1)
    return tokens[0] if single else tokens
