"""Patch optimisation: group-mean gap of patched representations plus a
lambda-weighted fidelity penalty, minimised by plain SGD over random placements.

    loss = || mean r(patch(x)) | a=1  -  mean r(patch(x)) | a=0 ||^2
           + lam * mean || r(x) - r(patch(x)) ||^2
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EncoderModel, encode, encode_array
from .imaging import Patch, apply_patch_batch, clamp_pixels, disk_mask, new_patch, sample_placements
from .rng import stream
from .synthdata import Dataset

log = logging.getLogger(__name__)


class PatchDiverged(RuntimeError):
    def __init__(self, message: str, patch: Patch, log_rows: list):
        super().__init__(message)
        self.patch = patch
        self.log_rows = log_rows


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 200
    seed: int = 0
    clamp: bool = True
    side: int = 12
    init: float = 0.5
    normalize: bool = True

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LossBreakdown:
    mmd_sq: float
    fidelity: float
    lam: float
    loss: ad.Tensor | None = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return self.mmd_sq + self.lam * self.fidelity


@dataclass
class EpochLog:
    epoch: int
    mmd_sq: float
    fidelity: float
    total: float
    grad_norm: float
    digest: str


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    skipped_batches: int = 0
    steps: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mmd_sq", "fidelity", "total", "grad_norm"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.mmd_sq), repr(e.fidelity), repr(e.total), repr(e.grad_norm)])


def _is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


def _rows(x) -> int:
    return x.shape[0] if _is_tensor(x) else len(x)


def mmd_sq(reps_a1, reps_a0):
    """Squared L2 distance between the two group means.

    This is the squared supremum, over unit-norm linear witnesses, of the
    difference in group means. Tensors in give a Tensor out; arrays give a float.
    """
    if not (_is_tensor(reps_a1) or _is_tensor(reps_a0)):
        a1, a0 = np.asarray(reps_a1, float), np.asarray(reps_a0, float)
        if len(a1) == 0 or len(a0) == 0:
            raise ValueError("mmd_sq: empty group")
        d = a1.mean(axis=0) - a0.mean(axis=0)
        return float(d @ d)
    if reps_a1.shape[0] == 0 or reps_a0.shape[0] == 0:
        raise ValueError("mmd_sq: empty group")
    diff = ad.sub(ad.mean(reps_a1, 0), ad.mean(reps_a0, 0))
    return ad.sum_all(ad.square(diff))


def fidelity_loss(reps_orig, reps_patched):
    """Mean over examples of the squared L2 distance between paired representations."""
    if _rows(reps_orig) != _rows(reps_patched):
        raise ValueError("fidelity_loss: representation lists differ in length")
    if not (_is_tensor(reps_orig) or _is_tensor(reps_patched)):
        d = np.asarray(reps_orig, float) - np.asarray(reps_patched, float)
        if d.shape[0] == 0:
            raise ValueError("fidelity_loss: empty input")
        return float(np.mean(np.sum(d * d, axis=1)))
    n = reps_patched.shape[0]
    return ad.scale(ad.sum_all(ad.square(ad.sub(reps_orig, reps_patched))), 1.0 / n)


def batch_loss(
    batch: Dataset,
    pixels: ad.Tensor,
    mask: np.ndarray,
    model: EncoderModel,
    lam: float,
    rng: np.random.Generator,
    reps_orig: np.ndarray | None = None,
) -> LossBreakdown | None:
    """Objective on one batch, one fresh placement per example.

    The same placement serves both terms. Returns None (no rng draws) when the
    batch lacks one of the sensitive groups.
    """
    ones = np.flatnonzero(batch.a == 1)
    zeros = np.flatnonzero(batch.a == 0)
    if len(ones) == 0 or len(zeros) == 0:
        return None
    placements = sample_placements(rng, batch.image_hw, pixels.shape[0], len(batch))
    patched = apply_patch_batch(batch.images, pixels, mask, placements)
    reps = encode(model, patched)
    if reps_orig is None:
        reps_orig = encode_array(model, batch.images)
    gap = mmd_sq(ad.gather_rows(reps, ones), ad.gather_rows(reps, zeros))
    fid = fidelity_loss(reps.graph.constant(reps_orig), reps)
    total = ad.add(gap, ad.scale(fid, lam)) if lam != 0 else gap
    return LossBreakdown(gap.item(), fid.item(), float(lam), total)


def train_patch(
    data: Dataset,
    model: EncoderModel,
    config: TrainConfig = TrainConfig(),
    patch: Patch | None = None,
) -> tuple[Patch, TrainLog]:
    if patch is None:
        patch = new_patch(config.side, data.images.shape[3], fill=config.init)
    pixels = patch.pixels.copy()
    mask = patch.mask
    reps_all = encode_array(model, data.images)
    shuffle = stream(config.seed, "patch", "shuffle")
    placements = stream(config.seed, "patch", "placements")
    tlog = TrainLog()
    n = len(data)

    def snapshot(px) -> Patch:
        return Patch(px.copy(), mask, config.seed, config.lam, config.digest())

    for epoch in range(config.epochs):
        order = shuffle.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, config.batch):
            idx = np.sort(order[start : start + config.batch])
            g = ad.Graph()
            leaf = g.leaf(pixels)
            try:
                br = batch_loss(data.subset(idx), leaf, mask, model, config.lam, placements, reps_all[idx])
            except ad.NonFiniteError as exc:
                raise PatchDiverged(f"epoch {epoch}: {exc}", snapshot(pixels), tlog.epochs) from exc
            if br is None:
                tlog.skipped_batches += 1
                continue
            grad = g.backward(br.loss)[leaf]
            if config.normalize:
                # same minimiser; keeps one step size stable across decades of lambda
                grad = grad / (1.0 + config.lam)
            step = pixels - config.lr * grad
            if not np.isfinite(step).all():
                raise PatchDiverged(f"epoch {epoch}: non-finite patch", snapshot(pixels), tlog.epochs)
            pixels = clamp_pixels(step) if config.clamp else step
            sums += (br.mmd_sq, br.fidelity, br.total, float(np.sqrt(np.sum(grad * grad))))
            steps += 1
        tlog.steps += steps
        m = sums / max(steps, 1)
        tlog.epochs.append(EpochLog(epoch, m[0], m[1], m[2], m[3], hashlib.sha256(pixels.tobytes()).hexdigest()[:16]))
        log.debug("patch epoch %d: mmd %.4g fid %.4g total %.4g", epoch, *m[:3])
    if tlog.skipped_batches:
        log.info("skipped %d batches with a missing sensitive group", tlog.skipped_batches)
    return snapshot(pixels), tlog


def make_noise_patch(seed: int, side: int = 12, channels: int = 1) -> Patch:
    """Uniform [0, 1] pixels under the disk mask; zero outside it."""
    mask = disk_mask(side)
    u = stream(seed, "noise-patch").random((side, side, channels))
    return Patch(u * mask[..., None], mask, seed, None, "noise")


def calibrate_lambda(data: Dataset, model: EncoderModel, side: int = 12, seed: int = 0, init: float = 0.5) -> float:
    """The lambda at which the gap term equals lambda * fidelity for the initial patch."""
    patch = new_patch(side, data.images.shape[3], fill=init)
    g = ad.Graph()
    br = batch_loss(data, g.constant(patch.pixels), patch.mask, model, 0.0, stream(seed, "calibrate"))
    if br is None or br.fidelity <= 0:
        raise ValueError("cannot calibrate lambda: degenerate initial patch")
    return br.mmd_sq / br.fidelity
