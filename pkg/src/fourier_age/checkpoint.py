"""Binary checkpoints of a trained bundle.

Layout (little endian)::

    b"CKPT" | u32 version | u32 json_len | config JSON
    u32 blob_count
    per blob: u16 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .clip_align import AgeModel
from .config import RunConfig
from .correction import CandidateGenerator, EnsembleState, ErrorWeights
from .pipeline import Bundle

MAGIC = b"CKPT"
VERSION = 1


class UnsupportedFormatError(ValueError):
    """Wrong magic or an unknown format version."""


class CorruptCheckpointError(ValueError):
    """The file ends early or is internally inconsistent."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def _blobs(bundle: Bundle) -> dict[str, np.ndarray]:
    out = {f"model.{k}": v for k, v in bundle.model.state_dict().items()}
    for prefix, part in (("ensemble", bundle.ensemble), ("weights", bundle.weights),
                         ("generator", bundle.generator)):
        if part is not None:
            out.update({f"{prefix}.{k}": v for k, v in part.state_dict().items()})
    return out


def _extras(bundle: Bundle) -> dict:
    extras = {}
    if bundle.ensemble is not None:
        e = bundle.ensemble
        extras["ensemble"] = {"size": e.size, "k": e.k, "hidden": e.members[0].hidden.weight.shape[1],
                              "dim": e.members[0].hidden.weight.shape[0] - 1,
                              "age_center": e.age_center, "age_scale": e.age_scale, "steps": e.steps}
    if bundle.generator is not None:
        g = bundle.generator
        extras["generator"] = {"dim": g.net.hidden.weight.shape[0] - g.latent_dim,
                               "latent_dim": g.latent_dim, "hidden": g.net.hidden.weight.shape[1],
                               "offset_scale": g.offset_scale, "init_scale": g.init_scale}
    if bundle.weights is not None:
        extras["weights"] = {"h": bundle.weights.logits.shape[0]}
    return extras


def save_checkpoint(bundle: Bundle, path) -> None:
    meta = json.dumps({"config": bundle.config.to_dict(), "extras": _extras(bundle)}).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    blobs = _blobs(bundle)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"truncated while reading {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
        raise CorruptCheckpointError("truncated while reading magic", len(raw))
    magic = raw[:4]
    r.pos = 4
    if magic != MAGIC:
        raise UnsupportedFormatError(f"{path}: not a checkpoint (magic {magic!r})")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedFormatError(f"{path}: checkpoint version {version} is not supported "
                                     f"(expected {VERSION})")
    (meta_len,) = r.unpack("<I", "header length")
    start = r.pos
    try:
        meta = json.loads(r.take(meta_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"config block unreadable: {exc}", start) from exc
    (count,) = r.unpack("<I", "blob count")
    blobs = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        blobs[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise CorruptCheckpointError("trailing bytes after last blob", r.pos)
    return meta, blobs


def _sub(blobs: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in blobs.items() if k.startswith(p)}


def load_checkpoint(path) -> Bundle:
    meta, blobs = read_checkpoint(path)
    config = RunConfig.from_dict(meta["config"])
    model = AgeModel.init(config.alignment, seed=config.seed)
    model.load_state_dict(_sub(blobs, "model"))
    bundle = Bundle(config, model)
    extras = meta.get("extras", {})
    if "ensemble" in extras:
        e = extras["ensemble"]
        ens = EnsembleState.init(e["dim"], k=e["k"], size=e["size"], hidden=e["hidden"],
                                 age_center=e["age_center"], age_scale=e["age_scale"])
        ens.load_state_dict(_sub(blobs, "ensemble"))
        ens.steps = e["steps"]
        bundle.ensemble = ens
    if "weights" in extras:
        w = ErrorWeights.uniform(extras["weights"]["h"])
        w.load_state_dict(_sub(blobs, "weights"))
        bundle.weights = w
    if "generator" in extras:
        g = extras["generator"]
        gen = CandidateGenerator.init(g["dim"], g["latent_dim"], hidden=g["hidden"],
                                      offset_scale=g["offset_scale"], init_scale=g["init_scale"])
        gen.load_state_dict(_sub(blobs, "generator"))
        bundle.generator = gen
    return bundle
