"""Binary checkpoint container for model parameters.

Layout (little-endian):
    bytes 0..3    magic ``SLCK``
    bytes 4..7    format version (uint32)
    bytes 8..15   header length in bytes (uint64)
    header        UTF-8 JSON: model config echo, user metadata and a tensor
                  index [{name, shape, dtype, offset, nbytes}, ...]
    payload       raw tensor bytes at the recorded offsets
    trailer       SHA-256 digest (32 bytes) over the payload

Round-trips are bit-exact; the digest is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import CheckpointError
from .network import ModelConfig, UpliftModel

MAGIC = b"SLCK"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(path, model: UpliftModel, metadata: dict | None = None) -> None:
    """Write model parameters (and buffers) with config echo and checksum."""
    tensors = {name: t.detach().cpu() for name, t in model.state_dict().items()}
    index = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": index,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_checkpoint(path):
    """Read a checkpoint; returns (state_dict, ModelConfig, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    payload = blob[16 + header_len : -32]
    digest = blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path} failed its content checksum")
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    config = ModelConfig.from_dict(header["config"])
    return state, config, header["metadata"]


def load_model(path) -> tuple[UpliftModel, dict]:
    """Instantiate an UpliftModel from a checkpoint; returns (model, metadata)."""
    state, config, metadata = load_checkpoint(path)
    model = UpliftModel(config)
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    model.load_state_dict(state)
    model.eval()
    return model, metadata
