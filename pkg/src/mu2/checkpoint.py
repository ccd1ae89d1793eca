"""Parameter checkpoints: one flat binary of float64 arrays plus a manifest.

The manifest is a text sidecar (same path with ".manifest" appended). Each line
holds the array name, its comma-joined shape, and its byte offset into the
binary, tab-separated. Arrays are stored C-order, little-endian float64.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import torch


def manifest_path(path) -> str:
    return str(path) + ".manifest"


def save_arrays(path, arrays: "OrderedDict[str, np.ndarray]") -> None:
    offset = 0
    lines = []
    with open(path, "wb") as f:
        for name, arr in arrays.items():
            if "\t" in name or "\n" in name:
                raise ValueError(f"array name {name!r} contains manifest delimiters")
            data = np.ascontiguousarray(arr, dtype="<f8")
            f.write(data.tobytes())
            shape = ",".join(str(d) for d in data.shape)
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += data.nbytes
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        blob = f.read()
    arrays = OrderedDict()
    with open(manifest_path(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"manifest line {lineno} is malformed: {line!r}")
            name, shape_str, offset_str = parts
            shape = tuple(int(d) for d in shape_str.split(",")) if shape_str else ()
            offset = int(offset_str)
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            end = offset + count * 8
            if end > len(blob):
                raise ValueError(
                    f"array {name!r} extends past end of checkpoint ({end} > {len(blob)})"
                )
            if name in arrays:
                raise ValueError(f"duplicate array name {name!r} in manifest")
            arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
    return arrays


def save_model(path, model: torch.nn.Module) -> None:
    arrays = OrderedDict(
        (name, tensor.detach().cpu().numpy()) for name, tensor in model.state_dict().items()
    )
    save_arrays(path, arrays)


def load_model(path, model: torch.nn.Module) -> None:
    """Load a checkpoint into a model, rejecting name or shape mismatches."""
    arrays = load_arrays(path)
    state = model.state_dict()
    if set(arrays) != set(state):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise ValueError(f"checkpoint names do not match model: missing {missing}, extra {extra}")
    dtype = next(model.parameters()).dtype
    new_state = OrderedDict()
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ValueError(
                f"array {name!r} has shape {tuple(arr.shape)}, model expects {tuple(state[name].shape)}"
            )
        new_state[name] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(new_state)
