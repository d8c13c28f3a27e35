"""Binary checkpoint container.

Layout: magic "NLQC", u32 LE format version, u64 LE length-prefixed JSON
header (encoder config, seed, parameter manifest with name/rows/cols/offset),
then raw little-endian float32 payloads in manifest order.  Offsets are
relative to the start of the payload section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import EncoderConfig, GroundingModel

MAGIC = b"NLQC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(model: GroundingModel, path) -> None:
    path = Path(path)
    manifest = []
    payloads = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p, dtype="<f4")
        manifest.append({"name": name, "rows": p.shape[0], "cols": p.shape[1], "offset": offset})
        payloads.append(raw.tobytes())
        offset += raw.nbytes
    header = json.dumps({
        "config": {
            "hidden_dim": model.config.hidden_dim,
            "num_heads": model.config.num_heads,
            "intra_layers": model.config.intra_layers,
            "cross_layers": model.config.cross_layers,
            "video_input_dim": model.config.video_input_dim,
            "text_input_dim": model.config.text_input_dim,
            "num_scales": model.config.num_scales,
            "dropout_rate": model.config.dropout_rate,
            "feedforward_dim": model.config.feedforward_dim,
        },
        "seed": model.rng_seed,
        "manifest": manifest,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in payloads:
            f.write(blob)


def load_checkpoint(path) -> GroundingModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob[16:header_end])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON header: {e}") from e

    config = EncoderConfig(**header["config"])
    payload = blob[header_end:]
    params: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        name, rows, cols = entry["name"], entry["rows"], entry["cols"]
        nbytes = rows * cols * 4
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at parameter {name!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(rows, cols)
        params[name] = arr.astype(np.float32)
    return GroundingModel(
        config=config,
        rng_seed=int(header.get("seed", 0)),
        params=params,
        dtype=np.dtype(np.float32),
    )
