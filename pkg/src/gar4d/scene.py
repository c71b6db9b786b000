"""Synthetic animated scenes: blob primitives, ground-truth renders and flow.

A scene is a handful of animated ellipsoidal blobs (piecewise-linear
keyframe trajectories) over a flat background. Blobs convert directly to
Gaussians, so ground truth is rendered with the same splatting code the
model trains against, and ground-truth optical flow is the analytic
projection of each primitive's displacement splatted with its color
weights.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .cameras import CameraPose
from .gaussians import DynamicGaussians
from .renderer import render_flow, render_views


@dataclass
class AnimatedBlob:
    """One ellipsoidal primitive with a keyframed center trajectory."""

    keyframes: list  # [(time, (x, y, z)), ...], at least one
    scale: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        if len(self.keyframes) < 1:
            raise ValueError("a blob needs at least one keyframe")
        self.keyframes = sorted(
            [(float(t), np.asarray(p, dtype=np.float64).reshape(3)) for t, p in self.keyframes],
            key=lambda kv: kv[0],
        )
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not (self.scale > 0).all():
            raise ValueError("blob scale must be positive")
        if not ((self.color >= 0) & (self.color <= 1)).all():
            raise ValueError("blob color must lie in [0, 1]")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("blob opacity must lie in [0, 1]")

    def center_at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation, clamped at the end keyframes."""
        times = np.array([kv[0] for kv in self.keyframes])
        pts = np.stack([kv[1] for kv in self.keyframes])
        return np.stack([np.interp(t, times, pts[:, k]) for k in range(3)])


@dataclass
class SceneSpec:
    blobs: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not ((self.background >= 0) & (self.background <= 1)).all():
            raise ValueError("background color must lie in [0, 1]")


@dataclass
class SpatioTemporalMatrix:
    """The T x V grid of rendered views representing one animated object."""

    pixels: np.ndarray  # (T, V, H, W, 3) float32 in [0, 1]
    cameras: list

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 5 or self.pixels.shape[-1] != 3:
            raise ValueError(f"pixels must be (T, V, H, W, 3), got {self.pixels.shape}")
        if self.pixels.shape[1] != len(self.cameras):
            raise ValueError(
                f"got {self.pixels.shape[1]} view slices for {len(self.cameras)} cameras"
            )
        for cam in self.cameras:
            if (cam.height, cam.width) != self.pixels.shape[2:4]:
                raise ValueError("camera image size does not match pixel grid")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def timesteps(self) -> int:
        return self.pixels.shape[0]

    @property
    def views(self) -> int:
        return self.pixels.shape[1]


# Ground-truth flow is a plain (T-1, V, H, W, 2) float32 array of pixel
# displacements (du, dv) from frame t to t+1.
FlowField = np.ndarray


def scene_gaussians(spec: SceneSpec, t_frames: int) -> DynamicGaussians:
    """Sample blob trajectories at integer times into a DynamicGaussians set."""
    if t_frames < 1:
        raise ValueError("need at least one frame")
    n = len(spec.blobs)
    positions = torch.zeros((t_frames, n, 3))
    scales = torch.zeros((t_frames, n, 3))
    rotations = torch.zeros((t_frames, n, 4))
    rotations[..., 0] = 1.0
    opacities = torch.zeros((t_frames, n))
    colors = torch.zeros((t_frames, n, 3))
    for t in range(t_frames):
        for i, blob in enumerate(spec.blobs):
            positions[t, i] = torch.as_tensor(blob.center_at(float(t)), dtype=torch.float32)
            scales[t, i] = torch.as_tensor(blob.scale, dtype=torch.float32)
            opacities[t, i] = float(blob.opacity)
            colors[t, i] = torch.as_tensor(blob.color, dtype=torch.float32)
    return DynamicGaussians(positions, scales, rotations, opacities, colors)


def render_scene(
    spec: SceneSpec, cameras: list, t_frames: int
) -> tuple[SpatioTemporalMatrix, FlowField]:
    """Deterministic ground-truth render grid plus analytic optical flow."""
    if t_frames < 1:
        raise ValueError("need at least one frame")
    gaussians = scene_gaussians(spec, t_frames)
    background = torch.as_tensor(spec.background, dtype=torch.float32)
    with torch.no_grad():
        pixels = render_views(gaussians, cameras, background).numpy().astype(np.float32)
        if t_frames > 1:
            flow = render_flow(gaussians, cameras).numpy().astype(np.float32)
        else:
            h, w = cameras[0].height, cameras[0].width
            flow = np.zeros((0, len(cameras), h, w, 2), dtype=np.float32)
    return SpatioTemporalMatrix(pixels, list(cameras)), flow


def reverse_time(spec: SceneSpec, t_frames: int) -> SceneSpec:
    """Scene playing backwards: keyframe times mapped t -> (T-1) - t."""
    blobs = [
        AnimatedBlob(
            keyframes=[(t_frames - 1 - t, p.copy()) for t, p in blob.keyframes],
            scale=blob.scale.copy(),
            color=blob.color.copy(),
            opacity=blob.opacity,
        )
        for blob in spec.blobs
    ]
    return SceneSpec(blobs, spec.background.copy())


def random_scene(rng: np.random.Generator, t_frames: int) -> SceneSpec:
    """A small random animated scene; everything drawn from ``rng``."""
    n_blobs = int(rng.integers(2, 5))
    blobs = []
    for _ in range(n_blobs):
        base = rng.uniform(-0.55, 0.55, size=3)
        drift = rng.uniform(-0.35, 0.35, size=3)
        keyframes = [(0.0, base), (float(max(t_frames - 1, 1)), base + drift)]
        blobs.append(
            AnimatedBlob(
                keyframes=keyframes,
                scale=rng.uniform(0.10, 0.28, size=3),
                color=rng.uniform(0.15, 1.0, size=3),
                opacity=float(rng.uniform(0.75, 1.0)),
            )
        )
    return SceneSpec(blobs, background=np.zeros(3))
