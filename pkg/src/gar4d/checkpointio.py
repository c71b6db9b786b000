"""Versioned binary blobs for checkpoints and token grids.

One file = magic line + length-prefixed JSON header (format version, config
echo, array index, metadata) + the raw little-endian array bytes in index
order. Headers are serialized with sorted keys so identical state produces
identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

CKPT_MAGIC = b"GAR4DBLOB1\n"
TOKEN_MAGIC = b"GAR4DTOK1\n"
FORMAT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """Checkpoint config does not match what the caller expects."""


def _flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in cfg.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten(val, name + "."))
        else:
            out[name] = val
    return out


def check_config(stored: dict, expected: dict, context: str = "") -> None:
    """Field-level comparison; raises naming the first offending field."""
    flat_stored = _flatten(stored)
    flat_expected = _flatten(expected)
    for key in sorted(flat_expected):
        if key not in flat_stored:
            raise CheckpointMismatchError(f"{context}config field '{key}' missing from checkpoint")
        if flat_stored[key] != flat_expected[key]:
            raise CheckpointMismatchError(
                f"{context}config mismatch at '{key}': checkpoint has "
                f"{flat_stored[key]!r}, expected {flat_expected[key]!r}"
            )


def save_checkpoint(path, kind: str, config: dict, arrays: dict, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes(order="C")
        index.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "nbytes": len(raw)}
        )
        blobs.append(raw)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "config": config,
            "meta": meta or {},
            "arrays": index,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_kind: str | None = None,
                    expected_config: dict | None = None):
    """-> (kind, config, arrays, meta); validates magic/kind/config."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint blob (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointMismatchError(
                f"{path}: format_version {header.get('format_version')} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        kind = header.get("kind")
        if expected_kind is not None and kind != expected_kind:
            raise CheckpointMismatchError(
                f"{path}: checkpoint kind {kind!r}, expected {expected_kind!r}"
            )
        if expected_config is not None:
            check_config(header["config"], expected_config, context=f"{path}: ")
        arrays = {}
        for entry in header["arrays"]:
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(
                entry["shape"]
            ).copy()
    return kind, header["config"], arrays, header["meta"]


def state_dict_arrays(module: torch.nn.Module) -> dict:
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state, strict=True)


def save_token_grid(path, tokens) -> None:
    """Token grid (T, V, h, w, n) of integer indices -> dims header + int32."""
    arr = np.ascontiguousarray(np.asarray(tokens), dtype="<i4")
    if arr.ndim != 5:
        raise ValueError(f"token grid must be 5-dimensional, got shape {arr.shape}")
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "shape": list(arr.shape), "dtype": "int32"},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_token_grid(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no token grid at {path}")
    with open(path, "rb") as fh:
        if fh.read(len(TOKEN_MAGIC)) != TOKEN_MAGIC:
            raise ValueError(f"{path}: not a token grid file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<i4")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload holds {data.size} tokens, header says {shape}")
    return data.reshape(shape).astype(np.int64)
