"""Dynamic Gaussian parameter containers and the offset-update step."""

from dataclasses import dataclass

import torch

# Tolerance of the unit-quaternion invariant; re-projection in
# apply_offsets only kicks in beyond it so that zero offsets are an
# exact identity.
QUAT_NORM_TOL = 1e-5
MIN_SCALE = 1e-8

PARAM_DIM = 14  # 3 position + 3 scale + 4 quaternion + 1 opacity + 3 color


@dataclass
class GaussianFrame:
    """One timestep of Gaussians: positions/scales/rotations/opacities/colors.

    rotations are unit quaternions in (w, x, y, z) order; scales are strictly
    positive; opacities and colors live in [0, 1].
    """

    positions: torch.Tensor   # (n, 3)
    scales: torch.Tensor      # (n, 3)
    rotations: torch.Tensor   # (n, 4)
    opacities: torch.Tensor   # (n,)
    colors: torch.Tensor      # (n, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        n = len(self)
        if self.scales.shape != (n, 3) or self.rotations.shape != (n, 4):
            raise ValueError("inconsistent gaussian parameter shapes")
        if self.opacities.shape != (n,) or self.colors.shape != (n, 3):
            raise ValueError("inconsistent gaussian parameter shapes")
        if not bool((self.scales > 0).all()):
            raise ValueError("gaussian scales must be positive")
        norms = self.rotations.norm(dim=-1)
        if not bool(((norms - 1.0).abs() <= QUAT_NORM_TOL).all()):
            raise ValueError("gaussian rotations must be unit quaternions")
        if not bool(((self.opacities >= 0) & (self.opacities <= 1)).all()):
            raise ValueError("opacities must lie in [0, 1]")
        if not bool(((self.colors >= 0) & (self.colors <= 1)).all()):
            raise ValueError("colors must lie in [0, 1]")


@dataclass
class DynamicGaussians:
    """T frames of Gaussians with point-level correspondence (same count per frame)."""

    positions: torch.Tensor   # (T, n, 3)
    scales: torch.Tensor      # (T, n, 3)
    rotations: torch.Tensor   # (T, n, 4)
    opacities: torch.Tensor   # (T, n)
    colors: torch.Tensor      # (T, n, 3)

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_gaussians(self) -> int:
        return self.positions.shape[1]

    def frame(self, t: int) -> GaussianFrame:
        return GaussianFrame(
            self.positions[t], self.scales[t], self.rotations[t],
            self.opacities[t], self.colors[t],
        )

    def params(self) -> torch.Tensor:
        """All parameters stacked as (T, n, 14)."""
        return torch.cat(
            [
                self.positions,
                self.scales,
                self.rotations,
                self.opacities.unsqueeze(-1),
                self.colors,
            ],
            dim=-1,
        )

    def detach(self) -> "DynamicGaussians":
        return DynamicGaussians(
            self.positions.detach(), self.scales.detach(), self.rotations.detach(),
            self.opacities.detach(), self.colors.detach(),
        )


@dataclass
class GaussianOffsets:
    """Per-timestep, per-gaussian additive offsets for all five parameters."""

    d_position: torch.Tensor  # (T, n, 3)
    d_scale: torch.Tensor     # (T, n, 3)
    d_rotation: torch.Tensor  # (T, n, 4)
    d_opacity: torch.Tensor   # (T, n)
    d_color: torch.Tensor     # (T, n, 3)

    @classmethod
    def from_flat(cls, flat: torch.Tensor) -> "GaussianOffsets":
        """Split a (T, n, 14) tensor into the five named offsets."""
        if flat.shape[-1] != PARAM_DIM:
            raise ValueError(f"expected {PARAM_DIM} offset channels, got {flat.shape[-1]}")
        return cls(
            d_position=flat[..., 0:3],
            d_scale=flat[..., 3:6],
            d_rotation=flat[..., 6:10],
            d_opacity=flat[..., 10],
            d_color=flat[..., 11:14],
        )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (..., 4), (w, x, y, z) -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def apply_offsets(g: DynamicGaussians, offsets: GaussianOffsets) -> DynamicGaussians:
    """Add offsets to every parameter, then re-project onto the invariants.

    Re-projection is exact on already-valid inputs: scales/opacities/colors
    are clamped (no-ops in range), and quaternions are renormalized only
    where the summed norm drifts beyond QUAT_NORM_TOL. Hence zero offsets
    return the input unchanged.
    """
    if offsets.d_position.shape != g.positions.shape:
        raise ValueError(
            f"offset shape {tuple(offsets.d_position.shape)} does not match "
            f"gaussians {tuple(g.positions.shape)}"
        )
    rot = g.rotations + offsets.d_rotation
    norm = rot.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    needs_fix = (norm - 1.0).abs() > QUAT_NORM_TOL
    rot = torch.where(needs_fix, rot / norm, rot)
    return DynamicGaussians(
        positions=g.positions + offsets.d_position,
        scales=(g.scales + offsets.d_scale).clamp_min(MIN_SCALE),
        rotations=rot,
        opacities=(g.opacities + offsets.d_opacity).clamp(0.0, 1.0),
        colors=(g.colors + offsets.d_color).clamp(0.0, 1.0),
    )
