"""Dataset directory format: plain-text manifest, 8-bit frames, raw flow.

Layout of one object directory:

    manifest.txt    key/value lines (dims, background, one camera per line)
    t{t}_v{v}.png   8-bit render of frame t from view v
    flow.f32        raw little-endian float32, shape (T-1, V, H, W, 2)

A multi-object dataset is a parent directory of ``obj_*`` subdirectories,
each in the format above.
"""

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraPose
from .scene import SpatioTemporalMatrix

MANIFEST_NAME = "manifest.txt"
FLOW_NAME = "flow.f32"
FORMAT_VERSION = 1


class ManifestError(ValueError):
    """Raised for malformed or inconsistent dataset manifests."""


def save_image(path, img) -> None:
    """Write a float [0,1] (H, W, 3) array as an 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def export_frame_sequence(out_dir, pixels) -> list:
    """Dump a (T, V, H, W, 3) grid as numbered t{t}_v{v}.png files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(pixels.shape[0]):
        for v in range(pixels.shape[1]):
            p = out_dir / f"t{t}_v{v}.png"
            save_image(p, pixels[t, v])
            written.append(p)
    return written


def save_dataset(matrix: SpatioTemporalMatrix, flow, cameras, path, background=None) -> None:
    """Write one object directory; `cameras` must match the matrix views."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t_frames, views = matrix.timesteps, matrix.views
    h, w = matrix.pixels.shape[2:4]
    flow = np.asarray(flow, dtype=np.float32)
    expected_flow = (max(t_frames - 1, 0), views, h, w, 2)
    if flow.shape != expected_flow:
        raise ValueError(f"flow shape {flow.shape} does not match dims {expected_flow}")
    if background is None:
        background = np.zeros(3)

    lines = [
        f"format_version {FORMAT_VERSION}",
        f"frames {t_frames}",
        f"views {views}",
        f"height {h}",
        f"width {w}",
        "background " + " ".join(repr(float(x)) for x in np.asarray(background).reshape(3)),
    ]
    for cam in cameras:
        nums = [repr(float(x)) for x in cam.flat()] + [repr(float(cam.fov_y))]
        lines.append("camera " + " ".join(nums))
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")

    export_frame_sequence(path, matrix.pixels)
    (path / FLOW_NAME).write_bytes(flow.astype("<f4").tobytes(order="C"))


def _parse_manifest(text: str, path) -> dict:
    fields: dict = {"camera": []}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key == "camera":
            vals = rest.split()
            if len(vals) != 10:
                raise ManifestError(
                    f"{path}: field 'camera' (line {lineno}) needs 10 numbers, got {len(vals)}"
                )
            try:
                fields["camera"].append([float(x) for x in vals])
            except ValueError as exc:
                raise ManifestError(f"{path}: field 'camera' (line {lineno}): {exc}") from exc
        elif key in ("format_version", "frames", "views", "height", "width"):
            try:
                fields[key] = int(rest)
            except ValueError as exc:
                raise ManifestError(f"{path}: field '{key}' is not an integer: {rest!r}") from exc
        elif key == "background":
            vals = rest.split()
            if len(vals) != 3:
                raise ManifestError(f"{path}: field 'background' needs 3 numbers")
            fields["background"] = np.array([float(x) for x in vals])
        else:
            raise ManifestError(f"{path}: unknown manifest field {key!r}")
    for required in ("format_version", "frames", "views", "height", "width"):
        if required not in fields:
            raise ManifestError(f"{path}: missing manifest field '{required}'")
    if fields["format_version"] != FORMAT_VERSION:
        raise ManifestError(
            f"{path}: field 'format_version' is {fields['format_version']}, "
            f"expected {FORMAT_VERSION}"
        )
    if len(fields["camera"]) != fields["views"]:
        raise ManifestError(
            f"{path}: field 'views' is {fields['views']} but manifest lists "
            f"{len(fields['camera'])} cameras"
        )
    return fields


def load_dataset(path) -> tuple[SpatioTemporalMatrix, np.ndarray, np.ndarray]:
    """Load one object directory -> (matrix, flow, background)."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    fields = _parse_manifest(manifest.read_text(), manifest)
    t_frames, views = fields["frames"], fields["views"]
    h, w = fields["height"], fields["width"]

    cameras = []
    for row in fields["camera"]:
        cameras.append(CameraPose.from_flat(row[:9], row[9], h, w))

    pixels = np.zeros((t_frames, views, h, w, 3), dtype=np.float32)
    for t in range(t_frames):
        for v in range(views):
            frame_path = path / f"t{t}_v{v}.png"
            if not frame_path.is_file():
                raise ManifestError(f"{path}: missing frame file {frame_path.name}")
            img = load_image(frame_path)
            if img.shape != (h, w, 3):
                raise ManifestError(
                    f"{path}: frame {frame_path.name} has shape {img.shape}, "
                    f"manifest says ({h}, {w}, 3)"
                )
            pixels[t, v] = img

    flow_path = path / FLOW_NAME
    n_flow = max(t_frames - 1, 0) * views * h * w * 2
    if not flow_path.is_file():
        raise ManifestError(f"{path}: missing flow file {FLOW_NAME}")
    raw = np.frombuffer(flow_path.read_bytes(), dtype="<f4")
    if raw.size != n_flow:
        raise ManifestError(
            f"{path}: flow file holds {raw.size} floats, dims imply {n_flow}"
        )
    flow = raw.reshape((max(t_frames - 1, 0), views, h, w, 2)).astype(np.float32)

    background = fields.get("background", np.zeros(3))
    return SpatioTemporalMatrix(pixels, cameras), flow, background


def list_objects(path) -> list:
    """Object directories of a dataset: itself if single, else obj_* children."""
    path = Path(path)
    if (path / MANIFEST_NAME).is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no dataset directory at {path}")
    subdirs = sorted(p for p in path.iterdir() if (p / MANIFEST_NAME).is_file())
    if not subdirs:
        raise ManifestError(f"{path}: no object directories with a {MANIFEST_NAME}")
    return subdirs
