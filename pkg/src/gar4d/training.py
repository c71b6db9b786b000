"""Two-stage training: the discrete autoencoder first, then the transformer
over its frozen tokens."""

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpointio import load_state_arrays, save_checkpoint, state_dict_arrays
from .config import TrainConfig
from .renderer import render_flow, render_views
from .transformer import (
    GroupedTransformer,
    StarConfig,
    chunked_ce,
    encode_video,
    flatten_group_tokens,
)
from .vqvae import PatchDiscriminator, VqConfig, VqModel, vae_loss

NEUTRAL_PROMPT = "Generate object of the following <imgs>"


@dataclass
class SceneSample:
    """One training object: pixels, ground-truth flow, cameras, background."""

    pixels: torch.Tensor      # (T, V, H, W, 3) float32
    flow: torch.Tensor        # (T-1, V, H, W, 2) float32
    cameras: list
    background: torch.Tensor  # (3,)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from base to floor*base over `total` steps."""
    if total <= 1:
        return base
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return base * (floor + (1 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def write_log(path, rows: list, header: list) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def train_vqvae(
    samples: list,
    cfg: VqConfig,
    train: TrainConfig,
    out_path=None,
    log_path=None,
    resume=None,
    model: VqModel | None = None,
):
    """Joint optimization of encoder/quantizer/decoder/offset predictor.

    Round-robins over `samples` (one full T x V matrix per step). Returns
    (model, history rows). When `resume` points at a checkpoint, weights and
    the step counter continue from it.
    """
    torch.manual_seed(train.seed)
    if model is None:
        model = VqModel(cfg)
    start_step = 0
    if resume is not None:
        from .checkpointio import load_checkpoint

        _, _, arrays, meta = load_checkpoint(resume, "vqvae", asdict(cfg))
        load_state_arrays(model, arrays)
        start_step = int(meta.get("step", 0))
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    use_disc = cfg.loss_beta > 0
    disc = PatchDiscriminator() if use_disc else None
    disc_opt = torch.optim.Adam(disc.parameters(), lr=train.lr) if use_disc else None
    reinit_gen = torch.Generator().manual_seed(train.seed + 1)

    weights = (cfg.loss_alpha, cfg.loss_beta, cfg.loss_gamma)
    history = []
    model.quantizer.reset_usage()
    for step in range(start_step, start_step + train.steps):
        sample = samples[step % len(samples)]
        lr_now = cosine_lr(train.lr, step - start_step, train.steps)
        for group in opt.param_groups:
            group["lr"] = lr_now

        out = model(sample.pixels)
        rendered = render_views(out["corrected"], sample.cameras, sample.background)
        flow_pred = None
        if cfg.loss_gamma > 0 and sample.pixels.shape[0] > 1:
            flow_pred = render_flow(out["corrected"], sample.cameras)
        disc_logits = None
        if use_disc:
            flat_fake = rendered.reshape(-1, *rendered.shape[2:])
            flat_real = sample.pixels.reshape(-1, *sample.pixels.shape[2:])
            d_loss = (
                F.softplus(-disc(flat_real)).mean()
                + F.softplus(disc(flat_fake.detach())).mean()
            )
            disc_opt.zero_grad()
            d_loss.backward()
            disc_opt.step()
            disc_logits = disc(flat_fake)
        flow_true = sample.flow if flow_pred is not None else None
        if flow_pred is None and cfg.loss_gamma > 0:
            loss, parts = vae_loss(
                rendered, sample.pixels, weights=(cfg.loss_alpha, cfg.loss_beta, 0.0),
                disc_logits=disc_logits, commitment=out["vq_loss"],
            )
        else:
            loss, parts = vae_loss(
                rendered, sample.pixels, flow_pred, flow_true,
                disc_logits=disc_logits, weights=weights, commitment=out["vq_loss"],
            )

        opt.zero_grad()
        loss.backward()
        opt.step()

        if (step + 1) % train.codebook_epoch == 0:
            model.quantizer.reinit_dead_entries(out["latents"].detach(), reinit_gen)
            model.quantizer.reset_usage()

        history.append(
            {
                "step": step,
                "lr": lr_now,
                "render": float(parts["render"].detach()),
                "flow": float(parts["flow"].detach()) if "flow" in parts else 0.0,
                "commitment": float(out["vq_loss"].detach()),
                "codebook_used": model.quantizer.fraction_used(),
                "total": float(loss.detach()),
            }
        )

    final_step = start_step + train.steps
    if out_path is not None:
        save_checkpoint(
            out_path, "vqvae", asdict(cfg), state_dict_arrays(model), {"step": final_step}
        )
    write_log(
        log_path,
        [
            [r["step"], r["lr"], r["render"], r["flow"], r["commitment"],
             r["codebook_used"], r["total"]]
            for r in history
        ],
        ["step", "lr", "render_mse", "flow_mse", "commitment", "codebook_used", "total"],
    )
    return model, history


def tokenize_samples(vq: VqModel, samples: list):
    """Frozen-encoder tokenization of every object.

    Returns (group token grids (B, T, V, h, w, n), video tokens (B, T, h, w, n))
    with the view-0 slice of each object standing in as its monocular video.
    """
    grids = []
    videos = []
    with torch.no_grad():
        for sample in samples:
            latents = vq.encode(sample.pixels)
            z = vq.quantizer._chunked(latents).reshape(
                -1, vq.quantizer.n_chunks, vq.quantizer.chunk_dim
            )
            tokens = torch.empty(z.shape[:2], dtype=torch.long)
            for c in range(vq.quantizer.n_chunks):
                d2 = (z[:, c].unsqueeze(1) - vq.quantizer.codebooks[c].unsqueeze(0)).pow(2).sum(-1)
                tokens[:, c] = d2.argmin(dim=1)
            grids.append(tokens.reshape(*latents.shape[:4], -1))
            videos.append(encode_video(vq, sample.pixels[:, 0]))
    return torch.stack(grids), torch.stack(videos)


def train_star(
    samples: list,
    vq: VqModel,
    cfg: StarConfig,
    train: TrainConfig,
    out_path=None,
    log_path=None,
    text_prompt: str = NEUTRAL_PROMPT,
    vq_config: VqConfig | None = None,
    model: GroupedTransformer | None = None,
):
    """Teacher-forced training with per-group chunked cross-entropy.

    The VQ model is frozen: the dataset is tokenized once up front and only
    transformer parameters receive gradients. All objects must share one
    camera rig (the synthetic datasets do).
    """
    torch.manual_seed(train.seed)
    vq.eval()
    for p in vq.parameters():
        p.requires_grad_(False)
    grids, videos = tokenize_samples(vq, samples)
    flat = flatten_group_tokens(grids)  # (B, n_group)
    cameras = samples[0].cameras

    if model is None:
        model = GroupedTransformer(cfg, vq.quantizer.codebooks.detach().clone())
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    order_gen = torch.Generator().manual_seed(train.seed + 2)

    n = len(samples)
    batch = min(train.batch_size, n)
    history = []
    perm = torch.randperm(n, generator=order_gen)
    cursor = 0
    for step in range(train.steps):
        lr_now = cosine_lr(train.lr, step, train.steps)
        for group in opt.param_groups:
            group["lr"] = lr_now
        if cursor + batch > n:
            perm = torch.randperm(n, generator=order_gen)
            cursor = 0
        idx = perm[cursor : cursor + batch]
        cursor += batch

        logits, layout = model.training_logits(text_prompt, videos[idx], flat[idx], cameras)
        loss, per_group = chunked_ce(logits, flat[idx], layout)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(
            {
                "step": step,
                "lr": lr_now,
                "total_ce": float(loss.detach()),
                "per_group": [float(x.detach()) for x in per_group],
            }
        )

    if out_path is not None:
        meta = {"step": train.steps}
        if vq_config is not None:
            meta["vq_config"] = asdict(vq_config)
        save_checkpoint(out_path, "star", _star_config_dict(cfg), state_dict_arrays(model), meta)
    write_log(
        log_path,
        [
            [r["step"], r["lr"], r["total_ce"], *r["per_group"]]
            for r in history
        ],
        ["step", "lr", "total_ce"] + [f"ce_group{t}" for t in range(1, cfg.t_groups + 1)],
    )
    return model, history


def _star_config_dict(cfg: StarConfig) -> dict:
    return asdict(cfg)
