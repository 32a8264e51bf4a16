"""Versioned binary checkpoint container.

Layout: 4-byte magic ``SGCK``, uint32 little-endian header length, a UTF-8
JSON header ``{format_version, config, params, blobs, extra}`` where params
and blobs are manifests of ``{name, shape, dtype}``, then the raw
little-endian float32 data of every manifest entry in order. Round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, DenoiserNet

MAGIC = b"SGCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed container; the message carries the failing byte offset."""


def save_checkpoint(
    path: str | Path,
    net: DenoiserNet,
    extra: dict | None = None,
    blobs: dict[str, np.ndarray] | None = None,
) -> None:
    """Write net parameters (plus optional named float32 blobs) to ``path``."""
    params = []
    payload: list[bytes] = []
    for name, tensor in net.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ValueError(f"checkpointing requires float32 parameters ({name})")
        arr = tensor.detach().numpy()
        params.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payload.append(arr.astype("<f4", copy=False).tobytes())

    blob_manifest = []
    for name in sorted(blobs or {}):
        arr = np.asarray(blobs[name], dtype=np.float32)
        blob_manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payload.append(arr.astype("<f4", copy=False).tobytes())

    header = {
        "format_version": FORMAT_VERSION,
        "config": net.config.to_dict(),
        "params": params,
        "blobs": blob_manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path: str | Path) -> tuple[DenoiserNet, dict, dict[str, np.ndarray]]:
    """Read a container back into a net, its extra dict, and named blobs."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated container ({len(raw)} bytes, need >= 8)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise FormatError(
            f"{path}: header truncated at byte offset {len(raw)} "
            f"(expected {8 + header_len} header bytes)"
        )
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header at byte offset 8: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format_version {header.get('format_version')}"
        )

    config = DenoiserConfig.from_dict(header["config"])
    net = DenoiserNet(config)

    offset = 8 + header_len
    state = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(raw):
            raise FormatError(
                f"{path}: parameter {entry['name']} truncated at byte offset {offset}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.reshape(shape).copy())
        offset += nbytes
    net.load_state_dict(state)

    blobs: dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(raw):
            raise FormatError(
                f"{path}: blob {entry['name']} truncated at byte offset {offset}"
            )
        blobs[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - offset} trailing bytes at byte offset {offset}"
        )
    return net, header["extra"], blobs
