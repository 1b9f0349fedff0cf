"""Synthetic labelled images with a tunable sensitive/target label correlation.

Each image is a noisy dark background carrying two independent visual cues:
an oriented bar for the sensitive attribute (horizontal iff a == 1) and a
bright disk for the target concept (present iff y == 1). The only coupling
between a and y is through the label joint distribution.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

DATASET_FORMAT = "patchfair-dataset"
DATASET_VERSION = 1


@dataclass
class DatasetSpec:
    n: int = 4000
    rho: float = 0.6
    noise_sigma: float = 0.1
    seed: int = 0
    side: int = 32
    p_y: float = 0.5
    background: float = 0.2
    bar_length: int = 26
    bar_width: int = 2
    bar_level: float = 0.45
    bar_spread: int | None = None
    disk_radius: float = 4.5
    disk_level: float = 0.5

    def conditionals(self) -> tuple[float, float]:
        """P(Y=1 | A=1), P(Y=1 | A=0) with P(A=1) = 1/2 and P(Y=1) = p_y."""
        return self.p_y + self.rho / 2.0, self.p_y - self.rho / 2.0


@dataclass
class Example:
    image: np.ndarray
    y: int
    a: int


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C)
    y: np.ndarray
    a: np.ndarray
    spec: DatasetSpec = field(default_factory=DatasetSpec)
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Example:
        return Example(self.images[i], int(self.y[i]), int(self.a[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.y[idx], self.a[idx], self.spec, self.ids[idx])

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


def _validate(spec: DatasetSpec):
    if spec.n < 2:
        raise ValueError("n must be at least 2")
    if not -1.0 <= spec.rho <= 1.0:
        raise ValueError(f"rho={spec.rho} outside [-1, 1]")
    p1, p0 = spec.conditionals()
    eps = 1e-12
    if not (-eps <= p1 <= 1 + eps and -eps <= p0 <= 1 + eps):
        raise ValueError(
            f"rho={spec.rho} infeasible with P(Y=1)={spec.p_y}: "
            f"P(Y=1|A=1)={p1:.3f}, P(Y=1|A=0)={p0:.3f}"
        )
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if spec.bar_length > spec.side or 2 * spec.disk_radius > spec.side:
        raise ValueError("cues do not fit in the image")


def _draw_bar(img, rng, horizontal: bool, length: int, width: int, level: float, spread=None):
    s = img.shape[0]
    if spread is None:
        along = int(rng.integers(0, s - length + 1))
        across = int(rng.integers(0, s - width + 1))
    else:
        # bar centre within +-spread of the image centre
        along = int(rng.integers(-spread, spread + 1)) + (s - length) // 2
        across = int(rng.integers(-spread, spread + 1)) + (s - width) // 2
    if horizontal:
        img[across : across + width, along : along + length] = level
    else:
        img[along : along + length, across : across + width] = level


def _draw_disk(img, rng, radius: float, level: float):
    s = img.shape[0]
    lo, hi = radius, s - 1 - radius
    r, c = rng.uniform(lo, hi, size=2)
    i = np.arange(s)
    img[((i[:, None] - r) ** 2 + (i[None, :] - c) ** 2) <= radius**2] = level


def generate(spec: DatasetSpec) -> Dataset:
    _validate(spec)
    labels = stream(spec.seed, "data", "labels")
    n = spec.n
    a = np.zeros(n, dtype=np.int64)
    a[: (n + 1) // 2] = 1
    labels.shuffle(a)
    p1, p0 = (min(max(p, 0.0), 1.0) for p in spec.conditionals())
    u = labels.random(n)
    y = np.where(a == 1, u < p1, u < p0).astype(np.int64)

    draw = stream(spec.seed, "data", "images")
    s = spec.side
    images = np.empty((n, s, s, 1))
    for k in range(n):
        img = np.full((s, s), spec.background)
        _draw_bar(img, draw, bool(a[k]), spec.bar_length, spec.bar_width, spec.bar_level, spec.bar_spread)
        if y[k]:
            _draw_disk(img, draw, spec.disk_radius, spec.disk_level)
        img = img + spec.noise_sigma * draw.standard_normal((s, s))
        images[k, :, :, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, y, a, spec)


def split(data: Dataset, fractions=(0.5, 0.25, 0.25), seed: int = 0) -> tuple[Dataset, ...]:
    """Disjoint, exhaustive partitions, each with |#(a=1) - #(a=0)| <= 1."""
    fractions = np.asarray(fractions, dtype=float)
    if abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise ValueError(f"fractions {fractions.tolist()} must be non-negative and sum to 1")
    n = len(data)
    sizes = np.floor(fractions * n + 1e-9).astype(int)
    sizes[-1] = n - sizes[:-1].sum()
    if (sizes < 2).any():
        raise ValueError(f"partition sizes {sizes.tolist()} too small to balance")

    ones = np.flatnonzero(data.a == 1)
    zeros = np.flatnonzero(data.a == 0)
    n_ones = sizes // 2
    spare = len(ones) - n_ones.sum()
    odd = np.flatnonzero(sizes % 2 == 1)
    if spare < 0 or spare > len(odd):
        raise ValueError("attribute counts cannot be balanced across partitions")
    n_ones[odd[:spare]] += 1
    n_zeros = sizes - n_ones
    if n_zeros.sum() != len(zeros):
        raise ValueError("attribute counts cannot be balanced across partitions")

    rng = stream(seed, "split")
    ones = rng.permutation(ones)
    zeros = rng.permutation(zeros)
    parts = []
    o = z = 0
    for k1, k0 in zip(n_ones, n_zeros):
        idx = np.sort(np.concatenate([ones[o : o + k1], zeros[z : z + k0]]))
        parts.append(data.subset(idx))
        o += k1
        z += k0
    return tuple(parts)


# ---------------------------------------------------------------- file format


def save_dataset(data: Dataset, path) -> str:
    """Write header line + little-endian float64 images + uint8 label table.

    Returns the payload digest.
    """
    images = data.images.astype("<f8").tobytes()
    table = np.stack([data.y, data.a], axis=1).astype(np.uint8).tobytes()
    ids = data.ids.astype("<i8").tobytes()
    payload = images + table + ids
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": asdict(data.spec),
        "counts": {
            "n": len(data),
            "a1": int(data.a.sum()),
            "y1": int(data.y.sum()),
        },
        "shape": list(data.images.shape),
        "digest": digest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return digest


def load_dataset(path) -> Dataset:
    from .imaging import DigestMismatch

    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a dataset file")
    payload = raw[nl + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["digest"]:
        raise DigestMismatch(f"{path}: dataset digest mismatch")
    shape = tuple(header["shape"])
    n = shape[0]
    n_img = int(np.prod(shape)) * 8
    images = np.frombuffer(payload[:n_img], dtype="<f8").reshape(shape).copy()
    table = np.frombuffer(payload[n_img : n_img + 2 * n], dtype=np.uint8).reshape(n, 2)
    ids = np.frombuffer(payload[n_img + 2 * n :], dtype="<i8").copy()
    return Dataset(
        images,
        table[:, 0].astype(np.int64),
        table[:, 1].astype(np.int64),
        DatasetSpec(**header["spec"]),
        ids,
    )
