"""Model checkpoint file format.

Layout: magic bytes ``EDOC``, one version byte, a 4-byte little-endian
header length, a UTF-8 JSON header listing each tensor's name, shape and
byte offset (plus the architecture needed to rebuild the model), then the
raw little-endian float32 payload for each tensor in header order.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import Model, ModelSpec, build_model

MAGIC = b"EDOC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or mismatched checkpoint file."""


def save_checkpoint(path, model: Model) -> None:
    entries = []
    payload = bytearray()
    for name, tensor in model.named_parameters().items():
        if tensor.dtype != np.float32:
            raise CheckpointError(f"checkpoint stores float32 tensors, '{name}' is {tensor.dtype}")
        entries.append({"name": name, "shape": list(tensor.shape), "offset": len(payload)})
        payload.extend(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    header = json.dumps({"spec": model.spec.to_dict(), "seed": model.seed,
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    if blob[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob[4]}")
    header_len = int.from_bytes(blob[5:9], "little")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    data = blob[9 + header_len:]
    model = build_model(ModelSpec.from_dict(header["spec"]), seed=header.get("seed", 0))
    params = model.named_parameters()
    names_in_file = [e["name"] for e in header["tensors"]]
    if set(names_in_file) != set(params):
        raise CheckpointError(f"{path}: tensor names do not match the architecture")
    for entry in header["tensors"]:
        tensor = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(
                f"{path}: tensor '{entry['name']}' shape {shape} != expected {tensor.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data[start:start + 4 * count], dtype="<f4").reshape(shape)
        tensor.data = np.ascontiguousarray(arr, dtype=np.float32)
    return model
