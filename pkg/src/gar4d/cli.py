"""Command-line pipeline: synth, train-vqvae, train-star, generate, eval,
cluster-report. Every command is deterministic under --seed and never
mutates its input dataset."""

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import datasetio
from .cameras import make_orbit_cameras
from .checkpointio import (
    CheckpointMismatchError,
    check_config,
    load_checkpoint,
    load_state_arrays,
    load_token_grid,
    save_token_grid,
    state_dict_arrays,
)
from .config import RunConfig, load_config
from .container import ContainerConfig
from .evaluate import EvalReport, evaluate_object
from .renderer import render_flow, render_views
from .scene import SpatioTemporalMatrix, random_scene, render_scene
from .training import (
    NEUTRAL_PROMPT,
    SceneSample,
    tokenize_samples,
    train_star,
    train_vqvae,
)
from .transformer import GroupedTransformer, StarConfig, flatten_group_tokens
from .vqvae import VqConfig, VqModel


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _scene_cameras(cfg: RunConfig):
    return make_orbit_cameras(
        cfg.scene.views,
        cfg.scene.radius,
        cfg.scene.elevation,
        height=cfg.scene.image_size,
        width=cfg.scene.image_size,
        fov_y=cfg.scene.fov_y,
    )


def _load_samples(dataset_path) -> list:
    samples = []
    for obj_dir in datasetio.list_objects(dataset_path):
        matrix, flow, background = datasetio.load_dataset(obj_dir)
        samples.append(
            SceneSample(
                pixels=torch.from_numpy(matrix.pixels),
                flow=torch.from_numpy(flow),
                cameras=matrix.cameras,
                background=torch.as_tensor(background, dtype=torch.float32),
            )
        )
    return samples


def _check_dataset_dims(vq_cfg: VqConfig, samples: list) -> None:
    h, w = samples[0].pixels.shape[2:4]
    if vq_cfg.image_size != h or vq_cfg.image_size != w:
        raise CheckpointMismatchError(
            f"config mismatch at 'vqvae.image_size': checkpoint has "
            f"{vq_cfg.image_size}, dataset frames are {h}x{w}"
        )


def _load_vq(path) -> tuple[VqModel, VqConfig]:
    _, cfg_dict, arrays, _ = load_checkpoint(path, expected_kind="vqvae")
    cfg = VqConfig(**cfg_dict)
    model = VqModel(cfg)
    load_state_arrays(model, arrays)
    model.eval()
    return model, cfg


def _load_star(path) -> tuple[GroupedTransformer, StarConfig, dict]:
    _, cfg_dict, arrays, meta = load_checkpoint(path, expected_kind="star")
    cfg = StarConfig(**cfg_dict)
    # the real chunk vectors live in the state dict; size the buffer to match
    dc = arrays["token_embedder.chunk_vectors"].shape[-1]
    model = GroupedTransformer(cfg, torch.zeros(cfg.n_chunks, cfg.vocab_size, dc))
    load_state_arrays(model, arrays)
    model.eval()
    return model, cfg, meta


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.t is not None:
        cfg.scene.t_frames = args.t
    if args.views is not None:
        cfg.scene.views = args.views
    if args.size is not None:
        cfg.scene.image_size = args.size
    if args.objects is not None:
        cfg.scene.n_objects = args.objects
    cfg.scene.__post_init__()
    cfg.__post_init__()

    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    cameras = _scene_cameras(cfg)
    targets = (
        [out]
        if cfg.scene.n_objects == 1
        else [out / f"obj_{i:03d}" for i in range(cfg.scene.n_objects)]
    )
    for obj_dir in targets:
        spec = random_scene(rng, cfg.scene.t_frames)
        matrix, flow = render_scene(spec, cameras, cfg.scene.t_frames)
        datasetio.save_dataset(matrix, flow, cameras, obj_dir, spec.background)
    print(
        f"wrote {len(targets)} object(s) to {out} "
        f"(T={cfg.scene.t_frames}, V={cfg.scene.views}, "
        f"{cfg.scene.image_size}x{cfg.scene.image_size})"
    )
    return 0


def cmd_train_vqvae(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.lr is not None:
        cfg.train.lr = args.lr
    cfg.train.seed = args.seed
    samples = _load_samples(args.dataset)
    h = samples[0].pixels.shape[2]
    if cfg.vqvae.image_size != h:
        cfg.scene.image_size = h
        cfg.__post_init__()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, history = train_vqvae(
        samples,
        cfg.vqvae,
        cfg.train,
        out_path=out / "vqvae.ckpt",
        log_path=out / "vqvae_loss.txt",
        resume=args.resume,
    )
    last = history[-1]
    print(
        f"trained {len(history)} steps; final render mse {last['render']:.6f}, "
        f"flow mse {last['flow']:.6f}, commitment {last['commitment']:.6f}; "
        f"checkpoint at {out / 'vqvae.ckpt'}"
    )
    return 0


def cmd_train_star(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    cfg.train.seed = args.seed
    samples = _load_samples(args.dataset)
    vq, vq_cfg = _load_vq(args.vq)
    _check_dataset_dims(vq_cfg, samples)

    cfg.scene.t_frames = samples[0].pixels.shape[0]
    cfg.scene.views = samples[0].pixels.shape[1]
    cfg.scene.image_size = samples[0].pixels.shape[2]
    cfg.vqvae = vq_cfg
    star_cfg = cfg.star_config()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, history = train_star(
        samples,
        vq,
        star_cfg,
        cfg.train,
        out_path=out / "star.ckpt",
        log_path=out / "star_loss.txt",
        vq_config=vq_cfg,
    )
    per_group = " ".join(f"{x:.4f}" for x in history[-1]["per_group"])
    print(
        f"trained {len(history)} steps; final chunked CE {history[-1]['total_ce']:.4f} "
        f"(per group: {per_group}); checkpoint at {out / 'star.ckpt'}"
    )
    return 0


def _load_video_frames(path, expected_t: int):
    """Monocular conditioning video: dataset dir (view-0 slice) or frame files."""
    path = Path(path)
    if (path / datasetio.MANIFEST_NAME).is_file():
        matrix, _, background = datasetio.load_dataset(path)
        return (
            torch.from_numpy(matrix.pixels[:, 0]),
            matrix.cameras,
            torch.as_tensor(background, dtype=torch.float32),
        )
    frames = sorted(path.glob("*.png"))
    if len(frames) != expected_t:
        raise ValueError(
            f"{path} holds {len(frames)} frames, model expects {expected_t}"
        )
    pixels = np.stack([datasetio.load_image(p) for p in frames])
    return torch.from_numpy(pixels), None, torch.zeros(3)


def cmd_generate(args) -> int:
    stage = "load-checkpoints"
    try:
        vq, vq_cfg = _load_vq(args.vq)
        star, star_cfg, meta = _load_star(args.star)
        if meta.get("vq_config"):
            check_config(asdict(vq_cfg), meta["vq_config"], context="vq checkpoint: ")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        stage = "encode-video"
        frames, cameras, background = _load_video_frames(args.video, star_cfg.t_groups)
        if cameras is None:
            cfg = load_config(args.config, args.set or [])
            cfg.scene.views = star_cfg.n_views
            cfg.scene.image_size = vq_cfg.image_size
            cameras = _scene_cameras(cfg)
        if len(cameras) != star_cfg.n_views:
            raise ValueError(
                f"camera rig has {len(cameras)} views, model expects {star_cfg.n_views}"
            )

        stage = "sample-tokens"
        if args.from_tokens:
            tokens = torch.from_numpy(load_token_grid(args.from_tokens))
        else:
            result = star.generate(
                vq,
                args.text,
                frames,
                cameras,
                temperature=args.temperature,
                top_k=args.top_k,
                seed=args.seed,
            )
            tokens = result.tokens
        save_token_grid(out / "tokens.bin", tokens.numpy())

        stage = "decode-tokens"
        with torch.no_grad():
            corrected, _, _ = vq.decode_tokens(tokens)

        stage = "render"
        with torch.no_grad():
            pixels = render_views(corrected, cameras, background).numpy()
            flow = (
                render_flow(corrected, cameras).numpy()
                if corrected.num_frames > 1
                else np.zeros(
                    (0, len(cameras), vq_cfg.image_size, vq_cfg.image_size, 2),
                    dtype=np.float32,
                )
            )

        stage = "export"
        matrix = SpatioTemporalMatrix(pixels, cameras)
        datasetio.save_dataset(matrix, flow, cameras, out, background.numpy())
        for t in range(corrected.num_frames):
            frame = corrected.frame(t)
            np.savez(
                out / f"gaussians_t{t}.npz",
                positions=frame.positions.numpy(),
                scales=frame.scales.numpy(),
                rotations=frame.rotations.numpy(),
                opacities=frame.opacities.numpy(),
                colors=frame.colors.numpy(),
            )
        print(
            f"generated {corrected.num_frames * len(cameras)} frames "
            f"({corrected.num_frames} timesteps x {len(cameras)} views) into {out}"
        )
        return 0
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _load_generated_grid(path, like: SpatioTemporalMatrix) -> np.ndarray:
    path = Path(path)
    if (path / datasetio.MANIFEST_NAME).is_file():
        matrix, _, _ = datasetio.load_dataset(path)
        return matrix.pixels
    t_frames, views, h, w, _ = like.pixels.shape
    pixels = np.zeros_like(like.pixels)
    for t in range(t_frames):
        for v in range(views):
            frame = path / f"t{t}_v{v}.png"
            if not frame.is_file():
                raise FileNotFoundError(f"missing generated frame {frame}")
            pixels[t, v] = datasetio.load_image(frame)
    return pixels


def cmd_eval(args) -> int:
    truth_objs = datasetio.list_objects(args.truth)
    gen_root = Path(args.generated)
    rows = []
    for obj_dir in truth_objs:
        matrix, flow, _ = datasetio.load_dataset(obj_dir)
        if len(truth_objs) == 1:
            gen_dir = gen_root
            name = obj_dir.name or "object"
        else:
            gen_dir = gen_root / obj_dir.name
            name = obj_dir.name
        generated = _load_generated_grid(gen_dir, matrix)
        rows.append(evaluate_object(name, generated, matrix.pixels, flow))
    report = EvalReport(rows)
    table = report.format_table()
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table + "\n")
    return 0


def cmd_cluster_report(args) -> int:
    star, star_cfg, _ = _load_star(args.star)
    vq, vq_cfg = _load_vq(args.vq)
    samples = _load_samples(args.dataset)
    if not (0 <= args.index < len(samples)):
        raise ValueError(f"object index {args.index} out of range 0..{len(samples) - 1}")
    sample = samples[args.index]
    _check_dataset_dims(vq_cfg, [sample])

    grids, _ = tokenize_samples(vq, [sample])
    flat = flatten_group_tokens(grids)[0]
    from .transformer import build_layout

    with torch.no_grad():
        layout = build_layout(star_cfg, len(star.text_embedder.bucket_ids(NEUTRAL_PROMPT)))
        group_emb = star.embed_group_tokens(flat, layout)
        states = star.container_states(group_emb, layout)
    state = states[-1]
    if state.last_cluster is None:
        raise ValueError("pool too small for a cluster report (needs T >= 2)")
    cluster = state.last_cluster
    centers = set(int(c) for c in cluster.centers)

    lines = ["token\tgroup\tview\tposition\trho\tvarpi\tscore\tcluster\tcenter"]
    for i in range(state.pool_size):
        lines.append(
            f"{i}\t{state.group_ids[i]}\t{state.view_ids[i]}\t{state.position_ids[i]}"
            f"\t{cluster.rho[i]:.6e}\t{cluster.varpi[i]:.6e}"
            f"\t{cluster.scores[i]:.6e}\t{int(cluster.assignment[i])}"
            f"\t{'*' if i in centers else ''}"
        )
    lines.append("")
    lines.append("cluster\tsize")
    counts = np.bincount(cluster.assignment, minlength=cluster.num_clusters)
    for c, count in enumerate(counts):
        lines.append(f"{c}\t{int(count)}")
    lines.append(f"total\t{int(counts.sum())}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table + "\n")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gar4d",
        description="Grouped autoregressive generation of dynamic Gaussian objects.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI-style config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override any config key (repeatable)",
        )

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int, default=None, help="timesteps")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="image height/width")
    p.add_argument("--objects", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-vqvae", help="train the discrete autoencoder")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train_vqvae)

    p = sub.add_parser("train-star", help="train the grouped transformer")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--vq", required=True, help="frozen vqvae checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(fn=cmd_train_star)

    p = sub.add_parser("generate", help="sample a 4D object")
    common(p)
    p.add_argument("--vq", required=True)
    p.add_argument("--star", required=True)
    p.add_argument("--video", required=True, help="conditioning video (dataset dir or frame dir)")
    p.add_argument("--text", default=NEUTRAL_PROMPT)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--from-tokens", default=None, help="decode an existing token grid instead of sampling")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="score generated output against ground truth")
    common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cluster-report", help="dump container clustering diagnostics")
    common(p)
    p.add_argument("--star", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0, help="object index in the dataset")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_cluster_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"gar4d {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"gar4d {args.command}: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
