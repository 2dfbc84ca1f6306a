"""Layer chains, flat parameter views, and the model file format.

Model files are versioned binaries: magic, format version, a JSON header
describing the architecture, then one little-endian float32 block holding
all parameters in declaration order. Loading verifies the header against
the expected spec and the parameter count against the payload size.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import Layer

_MAGIC = b"MBNET\x00"
_VERSION = 1


class Sequential(Layer):
    """A chain of layers applied in order; backward runs them in reverse."""

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def spec(self) -> dict:
        return {"kind": "sequential", "layers": [l.spec() for l in self.layers]}

    def param_arrays(self) -> list[np.ndarray]:
        return [a for l in self.layers for a in l.param_arrays()]

    def grad_arrays(self) -> list[np.ndarray]:
        return [a for l in self.layers for a in l.grad_arrays()]

    def zero_grads(self) -> None:
        for l in self.layers:
            l.zero_grads()

    def forward(self, x: np.ndarray) -> np.ndarray:
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, gout: np.ndarray) -> np.ndarray:
        for l in reversed(self.layers):
            gout = l.backward(gout)
        return gout

    def astype(self, dtype) -> "Sequential":
        for l in self.layers:
            l.astype(dtype)
        return self


def param_count(arrays: list[np.ndarray]) -> int:
    return int(sum(a.size for a in arrays))


def flatten_arrays(arrays: list[np.ndarray], out: np.ndarray | None = None) -> np.ndarray:
    n = param_count(arrays)
    if out is None:
        out = np.empty(n, dtype=np.float32)
    pos = 0
    for a in arrays:
        out[pos : pos + a.size] = a.ravel()
        pos += a.size
    return out


def unflatten_into(flat: np.ndarray, arrays: list[np.ndarray]) -> None:
    pos = 0
    for a in arrays:
        a[...] = flat[pos : pos + a.size].reshape(a.shape)
        pos += a.size


def save_model(path, spec: dict, arrays: list[np.ndarray]) -> None:
    header = json.dumps(spec, sort_keys=True).encode("utf-8")
    flat = flatten_arrays(arrays).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_model(path, expected_spec: dict | None = None) -> tuple[dict, np.ndarray]:
    """Read (spec, flat float32 params); reject malformed or mismatched files."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        spec = json.loads(fh.read(hlen).decode("utf-8"))
        (n,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read()
    if len(payload) != 4 * n:
        raise ValueError(f"{path}: truncated parameter block ({len(payload)} bytes, expected {4 * n})")
    if expected_spec is not None and spec != expected_spec:
        raise ValueError(f"{path}: architecture spec mismatch")
    return spec, np.frombuffer(payload, dtype="<f4").copy()
