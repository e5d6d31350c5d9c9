"""Binary parameter files.

Layout (all integers little-endian u32)::

    magic (4 bytes: b"TGCK" for weights, b"TGOP" for optimizer state)
    version = 1
    repeated until EOF:
        name length, UTF-8 name, dim0, dim1, dim2, dim3, float32 data (LE)

Optimizer files store the step counter and hyperparameters as 1x1x1x1
entries named ``@t``, ``@lr``, ... followed by ``m/<param>`` and ``v/<param>``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .optim import AdamState

WEIGHTS_MAGIC = b"TGCK"
OPTIMIZER_MAGIC = b"TGOP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], magic: bytes = WEIGHTS_MAGIC) -> bytes:
    chunks = [magic, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        if arr.ndim != 4:
            raise CheckpointError(f"{name!r}: only rank-4 arrays can be stored, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(blob: bytes, magic: bytes = WEIGHTS_MAGIC) -> dict[str, np.ndarray]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            dims = struct.unpack_from("<4I", blob, pos)
            pos += 16
            count = int(np.prod(dims))
            nbytes = 4 * count
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name!r}: data runs past end of file")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated entry: {exc}") from exc
    return out


def write_atomic(path: str | os.PathLike, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    write_atomic(path, encode(arrays, WEIGHTS_MAGIC))


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), WEIGHTS_MAGIC)


_HYPER = ("t", "lr", "beta1", "beta2", "eps")


def encode_adam(state: AdamState) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for key in _HYPER:
        # float32 cannot hold every step count exactly; split t into 16-bit halves
        if key == "t":
            arrays["@t"] = np.array([state.t >> 16, state.t & 0xFFFF], dtype=np.float32).reshape(1, 1, 1, 2)
        else:
            arrays[f"@{key}"] = np.array(getattr(state, key), dtype=np.float32).reshape(1, 1, 1, 1)
    for name in state.m:
        arrays[f"m/{name}"] = state.m[name]
        arrays[f"v/{name}"] = state.v[name]
    return encode(arrays, OPTIMIZER_MAGIC)


def decode_adam(blob: bytes, hyper: AdamState | None = None) -> AdamState:
    """Rebuild optimizer state.

    Hyperparameters stored as float32 lose precision (lr=1e-4 is not exact),
    so callers resuming a run pass the configured values via ``hyper``; only
    moments and the step counter are then taken from the file.
    """
    arrays = decode(blob, OPTIMIZER_MAGIC)
    hi, lo = arrays["@t"].reshape(2)
    if hyper is None:
        state = AdamState(
            lr=float(arrays["@lr"].item()),
            beta1=float(arrays["@beta1"].item()),
            beta2=float(arrays["@beta2"].item()),
            eps=float(arrays["@eps"].item()),
        )
    else:
        state = AdamState(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)
    state.t = (int(hi) << 16) | int(lo)
    for name, arr in arrays.items():
        if name.startswith("m/"):
            state.m[name[2:]] = arr.copy()
        elif name.startswith("v/"):
            state.v[name[2:]] = arr.copy()
    return state


def save_adam(path, state: AdamState) -> None:
    write_atomic(path, encode_adam(state))


def load_adam(path, hyper: AdamState | None = None) -> AdamState:
    return decode_adam(Path(path).read_bytes(), hyper)
