"""gar4d: grouped autoregressive generation of dynamic 3D Gaussian objects.

A discrete spatio-temporal autoencoder turns a T x V grid of rendered views
into chunked codebook tokens and decodes them back into temporally coherent
dynamic Gaussians; a decoder-only transformer predicts those tokens group by
group (one group per timestep), conditioned on a propagated, cluster-merged
state pool of all earlier groups.
"""

__version__ = "0.1.0"

from .cameras import CameraPose, make_orbit_cameras, pluecker_grid, pluecker_ray
from .container import (
    ClusterResult,
    ContainerConfig,
    ContainerState,
    StateContainer,
    local_density,
    select_and_assign,
    separation_score,
)
from .gaussians import DynamicGaussians, GaussianFrame, GaussianOffsets, apply_offsets
from .renderer import ProjectedSplats, composite, project, render_frame, render_views
from .scene import AnimatedBlob, SceneSpec, SpatioTemporalMatrix, random_scene, render_scene
from .transformer import GroupedTransformer, SequenceLayout, StarConfig, build_layout, chunked_ce
from .vqvae import VqConfig, VqModel, vae_loss

__all__ = [
    "AnimatedBlob",
    "CameraPose",
    "ClusterResult",
    "ContainerConfig",
    "ContainerState",
    "DynamicGaussians",
    "GaussianFrame",
    "GaussianOffsets",
    "GroupedTransformer",
    "ProjectedSplats",
    "SceneSpec",
    "SequenceLayout",
    "SpatioTemporalMatrix",
    "StarConfig",
    "StateContainer",
    "VqConfig",
    "VqModel",
    "apply_offsets",
    "build_layout",
    "chunked_ce",
    "composite",
    "local_density",
    "make_orbit_cameras",
    "pluecker_grid",
    "pluecker_ray",
    "project",
    "random_scene",
    "render_frame",
    "render_scene",
    "render_views",
    "select_and_assign",
    "separation_score",
    "vae_loss",
]
