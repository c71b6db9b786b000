"""Pinhole cameras, orbit rigs, and Pluecker ray grids.

All camera math is done in float64 numpy; the renderer casts to float32
torch on its side. World coordinates are right-handed with +z up; image
coordinates are +x right, +y down with pixel centers at half-integers.
"""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_FOV_Y = math.radians(50.0)


@dataclass
class CameraPose:
    """Look-at pinhole camera.

    ``up`` is normalized on construction. ``fov_y`` is the full vertical
    field of view in radians; pixels are square.
    """

    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    fov_y: float
    height: int
    width: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        up = np.asarray(self.up, dtype=np.float64).reshape(3)
        nrm = np.linalg.norm(up)
        if nrm == 0.0:
            raise ValueError("camera up vector must be nonzero")
        self.up = up / nrm
        if np.array_equal(self.position, self.target):
            raise ValueError("camera position must differ from target")
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels, vertical FOV)."""
        return (self.height / 2.0) / math.tan(self.fov_y / 2.0)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation, rows = (right, down, forward)."""
        forward = self.target - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        nrm = np.linalg.norm(right)
        if nrm < 1e-12:
            raise ValueError("camera up is parallel to the viewing direction")
        right = right / nrm
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into camera coordinates."""
        return (points - self.position) @ self.rotation().T

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Perspective-project world points; returns ((..., 2) pixels, depth)."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        f = self.focal
        cx, cy = self.principal_point
        u = f * cam[..., 0] / z + cx
        v = f * cam[..., 1] / z + cy
        return np.stack([u, v], axis=-1), z

    def flat(self) -> np.ndarray:
        """Geometry as 9 numbers (position, target, up); fov kept separate."""
        return np.concatenate([self.position, self.target, self.up])

    @classmethod
    def from_flat(cls, values, fov_y: float, height: int, width: int) -> "CameraPose":
        values = np.asarray(values, dtype=np.float64).reshape(9)
        return cls(values[0:3], values[3:6], values[6:9], fov_y, height, width)


def make_orbit_cameras(
    v: int,
    radius: float,
    elevation: float = 0.0,
    target=(0.0, 0.0, 0.0),
    *,
    height: int = 32,
    width: int = 32,
    fov_y: float = DEFAULT_FOV_Y,
) -> list[CameraPose]:
    """``v`` cameras on a circle of ``radius`` around ``target``, all looking in.

    Azimuths are equally spaced by 2*pi/v starting at 0; ``elevation`` lifts
    the ring out of the x-y plane. Raises ValueError for v < 1 or radius <= 0.
    """
    if v < 1:
        raise ValueError(f"need at least one view, got v={v}")
    if radius <= 0.0:
        raise ValueError(f"orbit radius must be positive, got {radius}")
    target = np.asarray(target, dtype=np.float64).reshape(3)
    cameras = []
    for k in range(v):
        azim = 2.0 * math.pi * k / v
        offset = np.array(
            [
                radius * math.cos(azim) * math.cos(elevation),
                radius * math.sin(azim) * math.cos(elevation),
                radius * math.sin(elevation),
            ]
        )
        cameras.append(
            CameraPose(target + offset, target, (0.0, 0.0, 1.0), fov_y, height, width)
        )
    return cameras


def pluecker_ray(origin, direction) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a ray to Pluecker form: unit direction d and moment m = o x d."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    nrm = np.linalg.norm(direction)
    if nrm == 0.0:
        raise ValueError("ray direction must be nonzero")
    d = direction / nrm
    return d, np.cross(origin, d)


def pluecker_grid(camera: CameraPose, h: int, w: int) -> np.ndarray:
    """(h, w, 6) Pluecker coordinates of the rays through an h x w cell grid.

    One ray per cell, through the cell center, covering the camera's full
    image plane. The 6-vector is (direction, moment).
    """
    if h < 1 or w < 1:
        raise ValueError("latent grid must be at least 1x1")
    rot = camera.rotation()  # raises for degenerate cameras
    f = camera.focal
    cx, cy = camera.principal_point
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (jj + 0.5) * (camera.width / w)
    v = (ii + 0.5) * (camera.height / h)
    dirs_cam = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ rot  # camera-to-world is rot.T applied per row
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    moments = np.cross(np.broadcast_to(camera.position, dirs.shape), dirs)
    return np.concatenate([dirs, moments], axis=-1)
