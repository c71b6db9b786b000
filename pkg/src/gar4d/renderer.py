"""Differentiable Gaussian splat renderer.

Exact per-pixel evaluation (no tiling): every splat is evaluated at every
pixel, weights are alpha * exp(-0.5 * d^T Sigma^-1 d), and compositing is
front-to-back with transmittance. Everything is plain float32 torch, so
gradients flow to means, covariances, opacities, and colors; depth only
determines the (detached) sort order.

`project`/`composite` are the single-frame reference ops. Training-sized
workloads go through `render_views`/`render_flow`, which batch every
(timestep, view) pair into one tensor pass; splats behind the near plane
are masked to zero weight there, which composites identically to dropping
them.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraPose
from .gaussians import DynamicGaussians, GaussianFrame, quat_to_rotmat

COV_EPS = 1e-4   # added as eps*I to projected covariances before inversion
NEAR_PLANE = 0.05


@dataclass
class ProjectedSplats:
    """Splats after projection, stored struct-of-arrays."""

    means: torch.Tensor      # (n, 2) pixel coordinates
    covs: torch.Tensor       # (n, 2, 2) SPD
    depths: torch.Tensor     # (n,) camera-space depth, > 0
    colors: torch.Tensor     # (n, 3)
    opacities: torch.Tensor  # (n,)

    def __len__(self) -> int:
        return self.means.shape[0]


def _camera_stack(cameras: list, dtype=torch.float32):
    """Stack camera geometry: (rot (B, 3, 3), pos (B, 3), focal (B,), pp (B, 2))."""
    rot = torch.as_tensor(np.stack([c.rotation() for c in cameras]), dtype=dtype)
    pos = torch.as_tensor(np.stack([c.position for c in cameras]), dtype=dtype)
    focal = torch.as_tensor([c.focal for c in cameras], dtype=dtype)
    pp = torch.as_tensor(np.stack([c.principal_point for c in cameras]), dtype=dtype)
    return rot, pos, focal, pp


def _project_core(positions, scales, rotations, rot, pos, focal, pp):
    """Batched projection; leading dims of positions and cameras must agree.

    positions (..., N, 3), rot (..., 3, 3), pos (..., 3), focal (...), pp (..., 2)
    -> means2d (..., N, 2), cov2d (..., N, 2, 2), depth (..., N).
    """
    cam = torch.einsum("...ij,...nj->...ni", rot, positions - pos[..., None, :])
    depth = cam[..., 2]
    z = torch.where(depth.abs() < 1e-8, torch.full_like(depth, 1e-8), depth)
    f = focal[..., None]
    means2d = f[..., None] * cam[..., :2] / z[..., None] + pp[..., None, :]

    rmat = quat_to_rotmat(rotations)
    cov_world = rmat @ torch.diag_embed(scales**2) @ rmat.transpose(-1, -2)
    cov_cam = torch.einsum("...ij,...njk,...lk->...nil", rot, cov_world, rot)
    x, y = cam[..., 0], cam[..., 1]
    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([f / z, zero, -f * x / z**2], -1),
            torch.stack([zero, f / z, -f * y / z**2], -1),
        ],
        dim=-2,
    )  # (..., N, 2, 3)
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + COV_EPS * torch.eye(2, dtype=cov2d.dtype)
    return means2d, cov2d, depth


def _project_raw(positions, scales, rotations, camera: CameraPose):
    """Single-camera projection without near-plane filtering."""
    rot, pos, focal, pp = _camera_stack([camera], dtype=positions.dtype)
    means2d, cov2d, depth = _project_core(
        positions, scales, rotations, rot[0], pos[0], focal[0], pp[0]
    )
    return means2d, cov2d, depth


def project(frame: GaussianFrame, camera: CameraPose, near: float = NEAR_PLANE) -> ProjectedSplats:
    """Perspective-project a frame; splats with depth <= near are dropped."""
    means2d, cov2d, depth = _project_raw(frame.positions, frame.scales, frame.rotations, camera)
    keep = depth > near
    return ProjectedSplats(
        means=means2d[keep],
        covs=cov2d[keep],
        depths=depth[keep],
        colors=frame.colors[keep],
        opacities=frame.opacities[keep],
    )


def _pixel_grid(h: int, w: int, dtype) -> torch.Tensor:
    """(h*w, 2) pixel-center coordinates (u, v)."""
    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype),
        torch.arange(w, dtype=dtype),
        indexing="ij",
    )
    return torch.stack([u + 0.5, v + 0.5], dim=-1).reshape(-1, 2)


def _splat_weights(means, covs, opacities, pix):
    """w = alpha * exp(-0.5 d^T Sigma^-1 d) per splat/pixel.

    means (..., N, 2), covs (..., N, 2, 2), opacities (..., N), pix (P, 2)
    -> (..., N, P). Uses the closed-form 2x2 inverse; dets are positive by
    the eps*I regularization.
    """
    a = covs[..., 0, 0].unsqueeze(-1)
    b = covs[..., 0, 1].unsqueeze(-1)
    c = covs[..., 1, 1].unsqueeze(-1)
    det = a * c - b * b
    du = pix[:, 0] - means[..., 0].unsqueeze(-1)
    dv = pix[:, 1] - means[..., 1].unsqueeze(-1)
    maha = (c * du * du - 2.0 * b * du * dv + a * dv * dv) / det
    return opacities.unsqueeze(-1) * torch.exp(-0.5 * maha)


def _composite_core(weights, payload, depths, background=None):
    """Front-to-back compositing of per-splat payloads.

    weights (..., N, P), payload (..., N, D), depths (..., N) detached sort
    keys -> (image (..., P, D), alpha (..., P)). Stable sort keeps exact
    depth ties in input order.
    """
    order = torch.argsort(depths.detach(), dim=-1, stable=True)
    weights = torch.take_along_dim(weights, order.unsqueeze(-1), dim=-2)
    payload = torch.take_along_dim(payload, order.unsqueeze(-1), dim=-2)
    ones = torch.ones_like(weights[..., :1, :])
    trans = torch.cumprod(torch.cat([ones, 1.0 - weights[..., :-1, :]], dim=-2), dim=-2)
    contrib = weights * trans  # (..., N, P)
    img = torch.einsum("...np,...nd->...pd", contrib, payload)
    alpha = contrib.sum(dim=-2)
    if background is not None:
        img = img + (1.0 - alpha).unsqueeze(-1) * background
    return img, alpha


def composite_payload(
    splats: ProjectedSplats,
    payload: torch.Tensor,
    h: int,
    w: int,
    background: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Alpha-composite arbitrary per-splat payload vectors.

    payload: (n, d) in input order. Returns ((h, w, d), alpha (h, w)).
    Background (d,) fills the remaining transmittance if given.
    """
    d_out = payload.shape[-1]
    if len(splats) == 0:
        ref = splats.means
        img = ref.new_zeros((h, w, d_out))
        if background is not None:
            img = img + background
        return img, ref.new_zeros((h, w))
    pix = _pixel_grid(h, w, splats.means.dtype)
    weights = _splat_weights(splats.means, splats.covs, splats.opacities, pix)
    img, alpha = _composite_core(weights, payload, splats.depths, background)
    return img.reshape(h, w, d_out), alpha.reshape(h, w)


def composite(
    splats: ProjectedSplats,
    h: int,
    w: int,
    background: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Composite colors front-to-back; returns ((h, w, 3) image, (h, w) alpha).

    Outputs are clamped to [0, 1]; the math already keeps them there up to
    float roundoff, so the clamp only trims ulps.
    """
    img, alpha = composite_payload(splats, splats.colors, h, w, background)
    return img.clamp(0.0, 1.0), alpha.clamp(0.0, 1.0)


def render_frame(
    frame: GaussianFrame,
    camera: CameraPose,
    background: torch.Tensor | None = None,
) -> torch.Tensor:
    """Project + composite one frame into an (H, W, 3) image."""
    img, _ = composite(project(frame, camera), camera.height, camera.width, background)
    return img


def _render_batch(positions, scales, rotations, payload, opacities, cameras,
                  h, w, background=None):
    """Shared batched path: one row per (frame, camera) pair.

    positions (B, N, 3) etc., cameras length B. Splats behind the near plane
    get zero weight, which composites identically to dropping them.
    """
    rot, pos, focal, pp = _camera_stack(cameras, dtype=positions.dtype)
    means2d, cov2d, depth = _project_core(positions, scales, rotations, rot, pos, focal, pp)
    valid = depth > NEAR_PLANE
    # sanitize invalid entries so masked weights stay finite
    safe_means = torch.where(valid.unsqueeze(-1), means2d, torch.zeros_like(means2d))
    eye = torch.eye(2, dtype=cov2d.dtype).expand_as(cov2d)
    safe_covs = torch.where(valid.unsqueeze(-1).unsqueeze(-1), cov2d, eye)
    pix = _pixel_grid(h, w, positions.dtype)
    weights = _splat_weights(safe_means, safe_covs, opacities, pix)
    weights = torch.where(valid.unsqueeze(-1), weights, torch.zeros_like(weights))
    sort_depth = torch.where(valid, depth, torch.full_like(depth, float("inf")))
    img, alpha = _composite_core(weights, payload, sort_depth, background)
    return img.reshape(-1, h, w, payload.shape[-1]), alpha.reshape(-1, h, w)


def render_views(
    gaussians: DynamicGaussians,
    cameras: list[CameraPose],
    background: torch.Tensor | None = None,
) -> torch.Tensor:
    """Render every (timestep, view) pair into a (T, V, H, W, 3) tensor."""
    t, n = gaussians.num_frames, gaussians.num_gaussians
    v = len(cameras)
    h, w = cameras[0].height, cameras[0].width

    def tile(x):
        return x.unsqueeze(1).expand(t, v, *x.shape[1:]).reshape(t * v, *x.shape[1:])

    cams = [cameras[i % v] for i in range(t * v)]
    img, _ = _render_batch(
        tile(gaussians.positions),
        tile(gaussians.scales),
        tile(gaussians.rotations),
        tile(gaussians.colors),
        tile(gaussians.opacities),
        cams,
        h,
        w,
        background,
    )
    return img.reshape(t, v, h, w, 3).clamp(0.0, 1.0)


def render_flow(gaussians: DynamicGaussians, cameras: list[CameraPose]) -> torch.Tensor:
    """Screen-space flow (T-1, V, H, W, 2) splatted with frame-t color weights.

    Per gaussian the payload is the pixel displacement of its projected mean
    from frame t to t+1; splats behind the near plane in either frame get
    zero weight so displacements stay well-defined.
    """
    t, n = gaussians.num_frames, gaussians.num_gaussians
    v = len(cameras)
    h, w = cameras[0].height, cameras[0].width
    if t < 2:
        return torch.zeros((0, v, h, w, 2))

    def tile(x):
        return x.unsqueeze(1).expand(x.shape[0], v, *x.shape[1:]).reshape(-1, *x.shape[1:])

    cams = [cameras[i % v] for i in range((t - 1) * v)]
    rot, pos, focal, pp = _camera_stack(cams, dtype=gaussians.positions.dtype)
    m0, cov0, z0 = _project_core(
        tile(gaussians.positions[:-1]), tile(gaussians.scales[:-1]),
        tile(gaussians.rotations[:-1]), rot, pos, focal, pp,
    )
    m1, _, z1 = _project_core(
        tile(gaussians.positions[1:]), tile(gaussians.scales[1:]),
        tile(gaussians.rotations[1:]), rot, pos, focal, pp,
    )
    valid = (z0 > NEAR_PLANE) & (z1 > NEAR_PLANE)
    safe_m0 = torch.where(valid.unsqueeze(-1), m0, torch.zeros_like(m0))
    safe_m1 = torch.where(valid.unsqueeze(-1), m1, torch.zeros_like(m1))
    eye = torch.eye(2, dtype=cov0.dtype).expand_as(cov0)
    safe_covs = torch.where(valid.unsqueeze(-1).unsqueeze(-1), cov0, eye)
    pix = _pixel_grid(h, w, gaussians.positions.dtype)
    weights = _splat_weights(safe_m0, safe_covs, tile(gaussians.opacities[:-1]), pix)
    weights = torch.where(valid.unsqueeze(-1), weights, torch.zeros_like(weights))
    sort_depth = torch.where(valid, z0, torch.full_like(z0, float("inf")))
    img, _ = _composite_core(weights, safe_m1 - safe_m0, sort_depth)
    return img.reshape(t - 1, v, h, w, 2)
