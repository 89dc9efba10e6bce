"""MDNT binary tensor files.

Layout: ``b"MDNT"``, u8 dtype code (0=f32, 1=f64), u8 ndim, ndim little-endian
u64 extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDNT"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class MdntError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    try:
        code = _CODE_OF[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise MdntError(f"MDNT stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise MdntError("too many dimensions")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise MdntError("bad magic, not an MDNT file")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise MdntError(f"unknown dtype code {code}")
    off = 6 + 8 * ndim
    if len(buf) < off:
        raise MdntError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dt = _CODES[code]
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - off != n * dt.itemsize:
        raise MdntError(f"payload is {len(buf) - off} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


INPUT_FIELDS = ("q", "k", "v", "log_alpha", "log_mu", "beta", "eta")


def save_inputs(directory, inputs) -> None:
    """Write an :class:`AttnInputs` as one ``<field>.mdnt`` file per stream."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = inputs.gates
    arrays = dict(q=inputs.q, k=inputs.k, v=inputs.v, log_alpha=g.log_alpha,
                  log_mu=g.log_mu, beta=g.beta, eta=g.eta)
    for name in INPUT_FIELDS:
        save(d / f"{name}.mdnt", arrays[name])
    if inputs.p is not None:
        save(d / "p.mdnt", inputs.p)


def load_inputs(directory, scale=None):
    from .gating import GateSeq
    from .recurrent import AttnInputs

    d = Path(directory)
    missing = [n for n in INPUT_FIELDS if not (d / f"{n}.mdnt").is_file()]
    if missing:
        raise MdntError(f"{d}: missing {', '.join(m + '.mdnt' for m in missing)}")
    a = {n: load(d / f"{n}.mdnt") for n in INPUT_FIELDS}
    p = load(d / "p.mdnt") if (d / "p.mdnt").is_file() else None
    try:
        return AttnInputs(a["q"], a["k"], a["v"],
                          GateSeq(a["log_alpha"], a["log_mu"], a["beta"], a["eta"]), scale, p)
    except ValueError as e:
        raise MdntError(f"{d}: inconsistent input files: {e}") from None
