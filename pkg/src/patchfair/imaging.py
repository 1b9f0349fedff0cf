"""Circular patches, random placements and differentiable overpainting.

Coordinates are (row, col) in pixel-index units. A patch of side S has its
array centre at index (S-1)/2; a placement with centre (r, c) puts the patch
bounding box at rows r - S//2 .. r - S//2 + S - 1.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

PATCH_FORMAT = "patchfair-patch/1"


class DigestMismatch(ValueError):
    pass


@dataclass
class Placement:
    theta: float
    center: tuple[int, int]


@dataclass
class Patch:
    pixels: np.ndarray  # (S, S, C) in [0, 1]
    mask: np.ndarray  # (S, S) in {0, 1}
    seed: int | None = None
    lam: float | None = None
    config_digest: str = ""

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def digest(self) -> str:
        return hashlib.sha256(self.pixels.astype("<f8").tobytes()).hexdigest()


def disk_mask(side: int, radius: float | None = None) -> np.ndarray:
    """Binary disk inscribed in a side x side array (radius side/2 by default)."""
    if radius is None:
        radius = side / 2.0
    if radius <= 0:
        return np.zeros((side, side))
    c = (side - 1) / 2.0
    i = np.arange(side) - c
    return ((i[:, None] ** 2 + i[None, :] ** 2) <= radius**2).astype(np.float64)


def new_patch(side: int, channels: int = 1, fill: float = 0.5, radius: float | None = None) -> Patch:
    return Patch(np.full((side, side, channels), float(fill)), disk_mask(side, radius))


def sample_placement(rng: np.random.Generator, image_hw: tuple[int, int], side: int) -> Placement:
    """Uniform rotation and uniform valid centre; always consumes 3 uniforms."""
    return sample_placements(rng, image_hw, side, 1)[0]


def sample_placements(rng: np.random.Generator, image_hw, side: int, n: int) -> list[Placement]:
    h, w = image_hw
    if side > min(h, w):
        raise ValueError(f"patch side {side} larger than image {h}x{w}")
    u = rng.random((n, 3))
    rows = np.minimum(np.floor(u[:, 0] * (h - side + 1)), h - side).astype(int) + side // 2
    cols = np.minimum(np.floor(u[:, 1] * (w - side + 1)), w - side).astype(int) + side // 2
    thetas = 2.0 * np.pi * u[:, 2]
    return [Placement(float(t), (int(r), int(c))) for t, r, c in zip(thetas, rows, cols)]


def _check_placement(pl: Placement, image_hw, side: int):
    h, w = image_hw
    r, c = pl.center
    top, left = r - side // 2, c - side // 2
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise ValueError(f"placement centre {pl.center} invalid for patch {side} in {h}x{w} image")
    if not np.isfinite(pl.theta):
        raise ValueError("non-finite rotation angle")


def _source_coords(side: int, theta: float, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Inverse-map patch-local (row, col) indices through a rotation by theta."""
    c0 = (side - 1) / 2.0
    ct, st = np.cos(theta), np.sin(theta)
    # snap right-angle trig so quarter turns land exactly on the grid
    ct = 0.0 if abs(ct) < 1e-12 else ct
    st = 0.0 if abs(st) < 1e-12 else st
    dr, dc = rows - c0, cols - c0
    src_r = ct * dr - st * dc + c0
    src_c = st * dr + ct * dc + c0
    return np.stack([src_r, src_c], axis=-1)


def rotate_patch(pixels: ad.Tensor, theta: float) -> ad.Tensor:
    """Rotate an (S, S, C) patch about its array centre by bilinear resampling.

    Output pixels whose preimage lies outside the source array are 0.
    """
    if not np.isfinite(theta):
        raise ValueError("non-finite rotation angle")
    s, _, ch = pixels.shape
    ii, jj = np.meshgrid(np.arange(s, dtype=float), np.arange(s, dtype=float), indexing="ij")
    grid = _source_coords(s, theta, ii, jj)
    sampled = ad.bilinear_sample(pixels, grid)
    inside = ((grid >= -0.5) & (grid <= s - 0.5)).all(axis=-1).astype(float)
    if inside.all():
        return sampled
    inside = np.repeat(inside[..., None], ch, axis=-1)
    return ad.masked_blend(inside, np.zeros(sampled.shape), sampled)


def placement_grid(image_hw, side: int, placements: list[Placement]):
    """Patch-space source coordinates (N, H, W, 2) for every image pixel."""
    h, w = image_hw
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    grids = np.empty((len(placements), h, w, 2))
    for k, pl in enumerate(placements):
        _check_placement(pl, image_hw, side)
        top, left = pl.center[0] - side // 2, pl.center[1] - side // 2
        grids[k] = _source_coords(side, pl.theta, rr - top, cc - left)
    return grids


def footprint(image_hw, mask: np.ndarray, placements: list[Placement]) -> np.ndarray:
    # a disk is invariant under rotation about its centre, so the footprint
    # is the untransformed mask translated into place
    h, w = image_hw
    side = mask.shape[0]
    out = np.zeros((len(placements), h, w))
    for k, pl in enumerate(placements):
        top, left = pl.center[0] - side // 2, pl.center[1] - side // 2
        out[k, top : top + side, left : left + side] = mask
    return out


def apply_patch_batch(images, pixels: ad.Tensor, mask: np.ndarray, placements: list[Placement]) -> ad.Tensor:
    """Overpaint one rotated patch per image. images: (N, H, W, C) constant."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w, ch = images.shape
    if len(placements) != n:
        raise ValueError(f"{len(placements)} placements for {n} images")
    s = pixels.shape[0]
    if pixels.shape[2] != ch:
        raise ad.ShapeError(f"apply_patch: patch channels {pixels.shape} vs images {images.shape}")
    grids = placement_grid((h, w), s, placements)
    fp = footprint((h, w), mask, placements)
    fp = np.repeat(fp[..., None], ch, axis=-1)
    overlay = ad.bilinear_sample(pixels, grids)
    return ad.masked_blend(fp, images, overlay)


def apply_patch(image, patch: Patch | ad.Tensor, placement: Placement, mask: np.ndarray | None = None) -> ad.Tensor:
    """Single-image form of :func:`apply_patch_batch`; returns an (H, W, C) tensor."""
    if isinstance(patch, Patch):
        mask = patch.mask if mask is None else mask
        patch = ad.Tensor(patch.pixels)
    image = np.asarray(image, dtype=np.float64)
    out = apply_patch_batch(image[None], patch, mask, [placement])
    return ad.reshape(out, image.shape)


def clamp_pixels(pixels: np.ndarray) -> np.ndarray:
    return np.clip(pixels, 0.0, 1.0)


# ---------------------------------------------------------------- file format


def save_patch(patch: Patch, path, extra: dict | None = None) -> None:
    header = {
        "format": PATCH_FORMAT,
        "side": patch.side,
        "channels": patch.channels,
        "radius": _mask_radius(patch.mask),
        "seed": patch.seed,
        "lambda": patch.lam,
        "config_digest": patch.config_digest,
        "digest": patch.digest(),
    }
    if extra:
        header.update(extra)
    header["pixels"] = base64.b64encode(patch.pixels.astype("<f8").tobytes()).decode("ascii")
    Path(path).write_text(json.dumps(header, sort_keys=True) + "\n")


def load_patch(path) -> Patch:
    header = json.loads(Path(path).read_text())
    if header.get("format") != PATCH_FORMAT:
        raise ValueError(f"{path}: not a patch file")
    s, ch = header["side"], header["channels"]
    pix = np.frombuffer(base64.b64decode(header["pixels"]), dtype="<f8").reshape(s, s, ch).copy()
    patch = Patch(
        pix,
        disk_mask(s, header.get("radius")),
        seed=header.get("seed"),
        lam=header.get("lambda"),
        config_digest=header.get("config_digest", ""),
    )
    if patch.digest() != header["digest"]:
        raise DigestMismatch(f"{path}: patch digest mismatch")
    return patch


def _mask_radius(mask: np.ndarray) -> float | None:
    s = mask.shape[0]
    if np.array_equal(mask, disk_mask(s)):
        return None
    if not mask.any():
        return 0.0
    c = (s - 1) / 2.0
    i = np.arange(s) - c
    d2 = i[:, None] ** 2 + i[None, :] ** 2
    return float(np.sqrt(d2[mask > 0].max()))
