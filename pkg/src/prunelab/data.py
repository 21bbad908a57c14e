"""Synthetic datasets, corruption transforms, and train/test distribution specs.

All corruptions act in normalized input space. Random corruptions draw
per-sample noise from a generator keyed by (seed, sample index), so applying
one to a batch gives the same result as applying it sample by sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CORRUPTION_KINDS = ("uniform-noise", "gaussian-noise", "contrast", "brightness", "pixelate", "occlusion")
IMAGE_ONLY = ("pixelate", "occlusion")

# severity 1..5 parameter ladders, normalized units
SEVERITY_LADDERS = {
    "uniform-noise": (0.4, 0.8, 1.2, 1.6, 2.0),
    "gaussian-noise": (0.25, 0.5, 0.75, 1.0, 1.25),
    "contrast": (0.8, 0.6, 0.4, 0.3, 0.2),
    "brightness": (0.2, 0.3, 0.4, 0.5, 0.6),
    # effective block size; powers of two are exact block averages
    "pixelate": (2**0.4, 2**0.5, 2**0.6, 2**0.8, 2.0),
    "occlusion": (2, 3, 4, 5, 6),
}

SYNTHETIC_KINDS = ("gaussian-clusters", "concentric-rings", "textured-patches-8x8")
SPLITS = ("train", "val", "test")

PDAT_MAGIC = b"PDAT"
PDAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    spec: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    @property
    def n(self):
        return len(self.y_train) + len(self.y_val) + len(self.y_test)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")


def _split_sizes(n):
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return n_train, n_val, n - n_train - n_val


def _textured_patches(rng, n, classes, noise=0.15):
    """8x8 gratings; class k has spatial frequency 1 + k cycles per patch
    (wrapping at 4, the Nyquist limit). Orientation, phase and contrast vary."""
    y = rng.integers(0, classes, size=n)
    freqs = 1.0 + 3.0 * np.arange(classes) / max(classes - 1, 1)
    theta = rng.choice([0.0, np.pi / 2], size=n) + rng.normal(0, 0.15, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    amp = rng.uniform(0.7, 1.3, size=n)
    r, c = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    proj = (c[None] * np.cos(theta)[:, None, None] + r[None] * np.sin(theta)[:, None, None]) / 8.0
    img = amp[:, None, None] * np.cos(2 * np.pi * freqs[y][:, None, None] * proj + phase[:, None, None])
    img += rng.normal(0, noise, size=img.shape)
    return img[:, None, :, :], y


def _gaussian_clusters(rng, n, classes, separation=10.0, dim=None):
    dim = dim or classes
    if dim < classes:
        raise ValueError("gaussian-clusters needs dim >= classes")
    centers = np.zeros((classes, dim))
    centers[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
    y = rng.integers(0, classes, size=n)
    return centers[y] + rng.normal(size=(n, dim)), y


def _concentric_rings(rng, n, classes, width=0.1):
    y = rng.integers(0, classes, size=n)
    radius = 1.0 + y + rng.normal(0, width, size=n)
    angle = rng.uniform(0, 2 * np.pi, size=n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1), y


def make_synthetic(kind, n, classes, seed, **params):
    """Reproducible labeled dataset split 60/20/20 and standardized on the train split."""
    if classes < 2 or int(classes) != classes:
        raise ValueError(f"invalid class count {classes}")
    if n < 10 * classes:
        raise ValueError(f"need n >= 10 * classes, got n={n}, classes={classes}")
    rng = np.random.default_rng([seed, 0xDA7A])
    if kind == "textured-patches-8x8":
        x, y = _textured_patches(rng, n, classes, **params)
    elif kind == "gaussian-clusters":
        x, y = _gaussian_clusters(rng, n, classes, **params)
    elif kind == "concentric-rings":
        x, y = _concentric_rings(rng, n, classes, **params)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")

    n_train, n_val, _ = _split_sizes(n)
    xs = np.split(x, [n_train, n_train + n_val])
    ys = [a.astype(np.int64) for a in np.split(y, [n_train, n_train + n_val])]
    mean = xs[0].mean(axis=0)
    std = xs[0].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xs = [(a - mean) / std for a in xs]
    spec = {"kind": kind, "n": int(n), "classes": int(classes), "seed": int(seed), **params}
    return Dataset(xs[0], ys[0], xs[1], ys[1], xs[2], ys[2], int(classes), spec, mean, std)


# ---------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int = 3
    param: float | None = None

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def strength(self):
        if self.param is not None:
            return self.param
        return SEVERITY_LADDERS[self.kind][self.severity - 1]

    @property
    def name(self):
        if self.param is not None:
            return f"{self.kind}@{self.param:g}"
        return f"{self.kind}-s{self.severity}"

    def to_dict(self):
        d = {"kind": self.kind, "severity": self.severity}
        if self.param is not None:
            d["param"] = self.param
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("severity", 3), d.get("param"))


def per_sample_seeds(seed, n):
    """Per-sample seeds that a scalar ``seed`` expands to for a batch of ``n``."""
    return np.random.default_rng([int(seed), 0x5EED]).integers(0, 2**62, size=n)


def _sample_rngs(seed, n, salt):
    seeds = np.asarray(seed, dtype=np.int64)
    if seeds.ndim == 0:
        seeds = per_sample_seeds(int(seeds), n)
    if seeds.size != n:
        raise ValueError(f"got {seeds.size} per-sample seeds for {n} samples")
    return [np.random.default_rng([int(s), salt]) for s in seeds]


def _block_average(img, b):
    n, c, h, w = img.shape
    out = np.empty_like(img)
    for r0 in range(0, h, b):
        for c0 in range(0, w, b):
            blk = img[:, :, r0 : r0 + b, c0 : c0 + b]
            out[:, :, r0 : r0 + b, c0 : c0 + b] = blk.mean(axis=(2, 3), keepdims=True)
    return out


def _pixelate(x, block):
    """k x k block averaging for power-of-two ``block``; between powers of two,
    linear interpolation along the nested chain identity -> 2x2 -> 4x4 -> ...
    Nesting makes distortion monotone in ``block``."""
    h = x.shape[2]
    sizes, b = [], 2
    while b < h:
        sizes.append(b)
        b *= 2
    sizes.append(h)
    chain = [x] + [_block_average(x, b) for b in sizes]
    t = min(max(np.log2(max(block, 1.0)), 0.0), len(chain) - 1.0)
    lo = int(np.floor(t))
    hi = min(lo + 1, len(chain) - 1)
    frac = t - lo
    if frac == 0:
        return chain[lo].copy()
    return (1 - frac) * chain[lo] + frac * chain[hi]


def apply_corruption(x, c, seed=0):
    """Corrupt batch ``x`` ([N, ...]); deterministic given ``seed``.

    ``seed`` may be a scalar or one seed per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    s = c.strength
    n = len(x)
    if c.kind in IMAGE_ONLY and x.ndim != 4:
        raise ValueError(f"{c.kind} needs image inputs [N, C, H, W], got shape {x.shape}")
    if c.kind == "contrast":
        return s * x
    if c.kind == "brightness":
        return x + s
    if c.kind == "pixelate":
        return _pixelate(x, s)
    if n == 0:
        return x.copy()
    rngs = _sample_rngs(seed, n, CORRUPTION_KINDS.index(c.kind))
    if c.kind == "uniform-noise":
        if s < 0:
            raise ValueError("uniform-noise needs eps >= 0")
        base = np.stack([r.uniform(-1.0, 1.0, size=x.shape[1:]) for r in rngs])
        return x + s * base
    if c.kind == "gaussian-noise":
        base = np.stack([r.standard_normal(size=x.shape[1:]) for r in rngs])
        return x + s * base
    # occlusion: nested square patches anchored at a seeded corner
    p = int(s)
    _, _, h, w = x.shape
    pmax = max(SEVERITY_LADDERS["occlusion"])
    out = x.copy()
    for i, r in enumerate(rngs):
        r0 = int(r.integers(0, max(h - pmax, 0) + 1))
        c0 = int(r.integers(0, max(w - pmax, 0) + 1))
        out[i, :, r0 : r0 + p, c0 : c0 + p] = 0.0
    return out


def inject_uniform_noise(x, eps, seed=0):
    """x + U(-eps, eps)^n, drawn per sample."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    return apply_corruption(x, Corruption("uniform-noise", param=float(eps)), seed)


def mix_augment(x, corruptions, seed, return_choices=False):
    """Give each sample one of len(corruptions)+1 choices (identity included) uniformly."""
    x = np.asarray(x, dtype=np.float64)
    k = len(corruptions)
    rng = np.random.default_rng([int(seed), 0xA06])
    choice = rng.integers(0, k + 1, size=len(x))
    out = x.copy()
    if k:
        seeds = rng.integers(0, 2**62, size=len(x))
        for j, c in enumerate(corruptions, start=1):
            idx = np.flatnonzero(choice == j)
            if idx.size:
                out[idx] = apply_corruption(x[idx], c, seeds[idx])
    return (out, choice) if return_choices else out


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class DistributionSpec:
    """A data source plus corruption set. ``include_clean`` adds the uncorrupted
    data as one more member (the nominal part of a robust train distribution)."""

    name: str
    corruptions: tuple = ()
    role: str = "test-dist"
    include_clean: bool = False

    def __post_init__(self):
        if self.role not in ("train-dist", "test-dist"):
            raise ValueError(f"unknown role {self.role!r}")

    def members(self):
        """(name, corruption or None) for each member; empty set means clean data."""
        out = [("clean", None)] if (self.include_clean or not self.corruptions) else []
        return out + [(c.name, c) for c in self.corruptions]


def distribution_pair(train_corruptions, test_corruptions, robust=False):
    """Build (train-dist, test-dist); corruption kinds must be mutually exclusive."""
    train_corruptions, test_corruptions = tuple(train_corruptions), tuple(test_corruptions)
    if train_corruptions and test_corruptions:
        overlap = {c.kind for c in train_corruptions} & {c.kind for c in test_corruptions}
        if overlap:
            raise ValueError(f"train and test corruption sets overlap: {sorted(overlap)}")
    train = DistributionSpec("train-dist", train_corruptions if robust else (), "train-dist", True)
    test = DistributionSpec("test-dist", test_corruptions, "test-dist", False)
    return train, test


def corrupted(x, c, seed):
    return x.copy() if c is None else apply_corruption(x, c, seed)


# ---------------------------------------------------------------- PDAT file format


def export_dataset(ds, path):
    """Header {magic, version, shape, splits}, spec JSON, then f64 inputs and u32 labels."""
    shape = ds.input_shape
    meta = json.dumps({"spec": ds.spec}, sort_keys=True).encode()
    out = bytearray(PDAT_MAGIC)
    out += struct.pack("<II", PDAT_VERSION, len(shape))
    out += struct.pack(f"<{len(shape)}I", *shape)
    out += struct.pack("<IIII", len(ds.y_train), len(ds.y_val), len(ds.y_test), ds.classes)
    out += struct.pack("<I", len(meta)) + meta
    for arr in (ds.mean, ds.std):
        a = np.zeros(shape) if arr is None else arr
        out += np.asarray(a, dtype="<f8").tobytes()
    for split in SPLITS:
        x, y = ds.split(split)
        out += np.ascontiguousarray(x, dtype="<f8").tobytes()
        out += np.asarray(y, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def import_dataset(path):
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError("truncated dataset file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != PDAT_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    version, ndim = struct.unpack("<II", take(8))
    if version != PDAT_VERSION:
        raise DatasetFormatError(f"dataset version {version} unsupported")
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
    sizes = struct.unpack("<IIII", take(16))
    classes = sizes[3]
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen))
    feat = int(np.prod(shape))
    mean = np.frombuffer(take(8 * feat), dtype="<f8").reshape(shape).copy()
    std = np.frombuffer(take(8 * feat), dtype="<f8").reshape(shape).copy()
    arrays = []
    for n in sizes[:3]:
        x = np.frombuffer(take(8 * feat * n), dtype="<f8").reshape((n,) + shape).copy()
        y = np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64)
        arrays += [x, y]
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes in dataset file")
    return Dataset(*arrays, classes=classes, spec=meta["spec"], mean=mean, std=std)
