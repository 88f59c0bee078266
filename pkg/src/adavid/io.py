"""On-disk formats. All integers and floats are little-endian.

Checkpoint (``.ckpt``)::

    b"ADAVID1\\n"
    u32 version (=1)
    u64 n, n bytes   config block: UTF-8 ``key=value`` lines, keys sorted
    u32 count        then per tensor:
        u32 n, n bytes name (UTF-8)
        u32 ndim, ndim x u64 extents
        prod(extents) x f64, row-major
    u32 count        then per text blob:
        u32 n, n bytes name; u64 n, n bytes UTF-8 payload

Clip stack (``.clip``)::

    b"ADCLIP1\\n", u32 ndim, ndim x u64 extents, f64 data

Feature record (``.cache``, one per long video and schedule)::

    b"ADFEAT1\\n", u32 n + video id, u32 S, u32 E, u32 n + schedule name,
    S*E x f64

Config files (``.cfg``) are flat ``key=value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile

import numpy as np

from .tensor import RejectedInput

CKPT_MAGIC = b"ADAVID1\n"
CLIP_MAGIC = b"ADCLIP1\n"
FEAT_MAGIC = b"ADFEAT1\n"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ config
def canonical_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_config(cfg).encode()).hexdigest()[:16]


def parse_config(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RejectedInput(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_config(path, cfg: dict) -> None:
    atomic_write(path, canonical_config(cfg).encode())


# ------------------------------------------------------------------ helpers
def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def text(self, n):
        return self.take(n).decode("utf-8")

    def array(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def _pack_str32(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return (struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes())


# -------------------------------------------------------------- checkpoints
def checkpoint_bytes(config: dict, tensors: dict, blobs: dict | None = None) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    cfg = canonical_config({k: str(v) for k, v in config.items()}).encode()
    parts += [struct.pack("<Q", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        parts += [_pack_str32(name), _pack_array(np.asarray(tensors[name]))]
    blobs = blobs or {}
    parts.append(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        payload = blobs[name].encode("utf-8")
        parts += [_pack_str32(name), struct.pack("<Q", len(payload)), payload]
    return b"".join(parts)


def save_checkpoint(path, config: dict, tensors: dict, blobs: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(config, tensors, blobs))


def load_checkpoint(path):
    """Return ``(config, tensors, blobs)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an ADAVID1 checkpoint")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = {}
    for line in r.text(r.u64()).splitlines():
        k, v = line.split("=", 1)
        config[k] = v
    tensors = {}
    for _ in range(r.u32()):
        name = r.text(r.u32())
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        tensors[name] = r.array(shape)
    blobs = {}
    for _ in range(r.u32()):
        name = r.text(r.u32())
        blobs[name] = r.text(r.u64())
    return config, tensors, blobs


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -------------------------------------------------------------------- clips
def save_clips(path, clips: np.ndarray) -> None:
    atomic_write(path, CLIP_MAGIC + _pack_array(np.asarray(clips)))


def load_clips(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CLIP_MAGIC)) != CLIP_MAGIC:
        raise FormatError(f"{path}: not a .clip file")
    ndim = r.u32()
    return r.array(tuple(r.u64() for _ in range(ndim)))


# ----------------------------------------------------------- feature cache
def feature_record_bytes(video_id: str, schedule: str, feats: np.ndarray) -> bytes:
    feats = np.asarray(feats, dtype="<f8")
    S, E = feats.shape
    return (FEAT_MAGIC + _pack_str32(video_id) + struct.pack("<II", S, E)
            + _pack_str32(schedule) + feats.tobytes())


def write_feature_record(path, video_id: str, schedule: str, feats) -> None:
    atomic_write(path, feature_record_bytes(video_id, schedule, feats))


def read_feature_record(path):
    """Return ``(video_id, schedule_name, feats[S, E])``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(FEAT_MAGIC)) != FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature record")
    vid = r.text(r.u32())
    S, E = r.u32(), r.u32()
    sched = r.text(r.u32())
    return vid, sched, r.array((S, E))
