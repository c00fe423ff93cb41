"""Deterministic synthetic age dataset and its on-disk format.

Each image carries a ring whose radius and a stripe texture whose spatial
frequency both grow with age, plus seeded jitter and pixel noise. Tensors
are stored as: magic ``CILF``, u32 version, u32 rank, u64 dims, then the
little-endian float32 payload. A JSON manifest sits alongside.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CILF"
FORMAT_VERSION = 1
MIN_AGE, MAX_AGE = 1, 80


class DataFormatError(ValueError):
    """A data file is missing, malformed or inconsistent with its manifest."""


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise DataFormatError(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise DataFormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off = 12 + 8 * rank
    if len(raw) < off:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - off != 4 * count:
        raise DataFormatError(f"{path}: payload has {len(raw) - off} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


@dataclass
class DatasetManifest:
    n: int
    image_shape: tuple[int, int, int]
    seed: int
    splits: dict[str, tuple[int, int]]
    ages: list[int]
    images_file: str = "images.bin"
    ages_file: str = "ages.bin"
    version: int = FORMAT_VERSION

    def validate(self) -> None:
        bounds = sorted(self.splits.values())
        pos = 0
        for lo, hi in bounds:
            if lo != pos or hi < lo:
                raise DataFormatError("splits must be disjoint and cover every sample")
            pos = hi
        if pos != self.n or len(self.ages) != self.n:
            raise DataFormatError("splits/ages do not cover the declared sample count")
        if self.ages and not (MIN_AGE <= min(self.ages) and max(self.ages) <= MAX_AGE):
            raise DataFormatError(f"ages must lie in [{MIN_AGE}, {MAX_AGE}]")

    def indices(self, split: str) -> np.ndarray:
        lo, hi = self.splits[split]
        return np.arange(lo, hi)

    def to_json(self) -> str:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["splits"] = {k: list(v) for k, v in self.splits.items()}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["image_shape"] = tuple(d["image_shape"])
        d["splits"] = {k: tuple(v) for k, v in d["splits"].items()}
        m = cls(**d)
        m.validate()
        return m


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray
    ages: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.manifest.indices(name)
        return self.images[idx], self.ages[idx]


def _split_bounds(n: int) -> dict[str, tuple[int, int]]:
    a = int(round(0.8 * n))
    b = int(round(0.9 * n))
    return {"train": (0, a), "val": (a, b), "test": (b, n)}


def render_image(age: float, size: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """One RGB image for ``age``; returns (image [size, size, 3], true ring radius)."""
    t = (age - MIN_AGE) / (MAX_AGE - MIN_AGE)
    radius = size * (0.12 + 0.30 * t) + rng.normal(0.0, 0.012 * size)
    freq = 0.06 + 0.14 * t + rng.normal(0.0, 0.006)
    cy, cx = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0, size=2)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    ring = np.exp(-0.5 * ((dist - radius) / (0.04 * size)) ** 2)
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    stripes = 0.5 + 0.5 * np.cos(2.0 * np.pi * freq * proj + rng.uniform(0, 2 * np.pi))
    img = np.stack([ring, ring * stripes, 0.5 * stripes], axis=-1)
    img += rng.normal(0.0, 0.05, size=img.shape)
    return img.astype(np.float32), float(radius)


def generate_synthetic(seed: int, n: int, size: int = 32) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 4 or size & (size - 1):
        raise ValueError("image side must be a power of two >= 4")
    rng = np.random.default_rng(seed)
    ages = rng.integers(MIN_AGE, MAX_AGE + 1, size=n)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, a in enumerate(ages):
        images[i], _ = render_image(float(a), size, rng)
    manifest = DatasetManifest(n, (size, size, 3), seed, _split_bounds(n), [int(a) for a in ages])
    manifest.validate()
    return Dataset(manifest, images, ages.astype(np.float32))


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create {out}: {exc}") from exc
    write_tensor(out / ds.manifest.images_file, ds.images)
    write_tensor(out / ds.manifest.ages_file, ds.ages)
    (out / "manifest.json").write_text(ds.manifest.to_json())
    return out


def generate_synthetic_dataset(seed: int, n: int, size: int, out_dir) -> DatasetManifest:
    ds = generate_synthetic(seed, n, size)
    save_dataset(ds, out_dir)
    return ds.manifest


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest in {root}: {exc}") from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{root / 'manifest.json'}: malformed ({exc})") from exc
    images = read_tensor(root / manifest.images_file)
    ages = read_tensor(root / manifest.ages_file)
    if images.shape != (manifest.n, *manifest.image_shape) or ages.shape != (manifest.n,):
        raise DataFormatError(f"{root}: tensor shapes disagree with manifest")
    if not np.array_equal(ages, np.asarray(manifest.ages, dtype=np.float32)):
        raise DataFormatError(f"{root}: ages file disagrees with manifest")
    return Dataset(manifest, images, ages)


def ring_radius_feature(images: np.ndarray) -> np.ndarray:
    """Handcrafted radius estimate: ring-weighted mean distance from the centre."""
    size = images.shape[1]
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    dist = np.hypot(yy - c, xx - c)
    w = np.clip(images[..., 0], 0.0, None) ** 2
    return (w * dist).sum(axis=(1, 2)) / w.sum(axis=(1, 2))
