"""Reconstruction/generation metrics: PSNR, SSIM, flow-warped consistency."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.metrics import structural_similarity


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; inf on equality."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(
        structural_similarity(
            np.asarray(a, dtype=np.float64),
            np.asarray(b, dtype=np.float64),
            channel_axis=-1,
            data_range=1.0,
        )
    )


def warp_by_flow(next_frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Pull frame t+1 back onto frame t's grid: out(p) = next(p + flow(p))."""
    h, w, _ = next_frame.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    coords = [yy + flow[..., 1], xx + flow[..., 0]]
    out = np.stack(
        [
            map_coordinates(next_frame[..., ch], coords, order=1, mode="nearest")
            for ch in range(next_frame.shape[-1])
        ],
        axis=-1,
    )
    return out


def temporal_consistency(pixels: np.ndarray, flow: np.ndarray) -> float:
    """Mean SSIM between frame t and flow-warped frame t+1 over all (t, v).

    pixels: (T, V, H, W, 3); flow: (T-1, V, H, W, 2) ground-truth forward flow.
    Returns 1.0 for a single-frame sequence (nothing to compare).
    """
    t_frames, views = pixels.shape[:2]
    if t_frames < 2:
        return 1.0
    scores = []
    for t in range(t_frames - 1):
        for v in range(views):
            warped = warp_by_flow(pixels[t + 1, v], flow[t, v])
            scores.append(ssim(pixels[t, v], warped))
    return float(np.mean(scores))


@dataclass
class EvalRow:
    name: str
    psnr: float
    ssim: float
    temporal_consistency: float


@dataclass
class EvalReport:
    rows: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mean_temporal_consistency(self) -> float:
        return float(np.mean([r.temporal_consistency for r in self.rows]))

    def format_table(self) -> str:
        lines = ["object\tpsnr_db\tssim\ttemporal_consistency"]
        for r in self.rows:
            lines.append(
                f"{r.name}\t{r.psnr:.4f}\t{r.ssim:.6f}\t{r.temporal_consistency:.6f}"
            )
        lines.append(
            f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}"
            f"\t{self.mean_temporal_consistency:.6f}"
        )
        return "\n".join(lines)


def evaluate_object(name: str, generated: np.ndarray, truth: np.ndarray,
                    flow_true: np.ndarray) -> EvalRow:
    """Compare a generated (T, V, H, W, 3) grid against ground truth."""
    if generated.shape != truth.shape:
        raise ValueError(
            f"generated grid {generated.shape} does not match truth {truth.shape}"
        )
    frame_ssim = float(
        np.mean(
            [
                ssim(generated[t, v], truth[t, v])
                for t in range(truth.shape[0])
                for v in range(truth.shape[1])
            ]
        )
    )
    return EvalRow(
        name=name,
        psnr=psnr(generated, truth),
        ssim=frame_ssim,
        temporal_consistency=temporal_consistency(generated, flow_true),
    )
