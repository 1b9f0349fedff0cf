"""Linear probes and the separability / utility / parity metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import autodiff as ad
from .encoder import EncoderModel, encode_array, naive_sensitive_score
from .imaging import Patch, apply_patch_batch, sample_placements
from .rng import stream
from .synthdata import Dataset, split
from .trainer import fidelity_loss, mmd_sq

PROBE_PENALTY = 1e-4


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be a 1-D sequence of 0/1")
    return y.astype(np.int64)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + P(s+ == s-) / 2 over all positive/negative pairs."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("auc_roc needs both classes")
    ranks = rankdata(s)  # average ranks, so ties count one half
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def average_precision(scores, labels) -> float:
    """Sum over positives (descending score, ties in input order) of precision x recall step."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / n_pos)


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: float
    iterations: int = 0
    grad_norm: float = 0.0

    def logits(self, reps) -> np.ndarray:
        return np.asarray(reps, dtype=np.float64) @ self.weights + self.bias


def probe_objective(weights, bias, reps, labels, penalty: float = PROBE_PENALTY) -> float:
    """Mean logistic loss + penalty/2 * ||weights||^2 (bias unpenalised)."""
    x = np.asarray(reps, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    z = x @ weights + bias
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(loss + 0.5 * penalty * weights @ weights)


def fit_probe(reps, labels, penalty: float = PROBE_PENALTY, tol: float = 1e-8, max_iter: int = 10_000) -> LinearProbe:
    """L2-penalised logistic regression by full-batch gradient descent.

    Steps are preconditioned by the fixed curvature bound X'X/4n + penalty,
    which majorises the Hessian everywhere, so every step decreases the
    objective without a line search. The default tolerance sits well below
    1e-6 because parameter error is roughly the gradient norm times the
    inverse curvature, which is large for weakly separated classes.
    """
    y = _check_binary(labels)
    x = np.asarray(reps, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"reps shape {x.shape} does not match {len(y)} labels")
    if y.min() == y.max():
        raise ValueError("fit_probe needs both classes")
    n, k = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    reg = np.full(k + 1, penalty)
    reg[-1] = 0.0
    bound = xb.T @ xb / (4.0 * n) + np.diag(reg)
    bound_inv = np.linalg.inv(bound + 1e-12 * np.eye(k + 1))
    theta = np.zeros(k + 1)
    yf = y.astype(np.float64)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        z = xb @ theta
        grad = xb.T @ (expit(z) - yf) / n + reg * theta
        gnorm = float(np.sqrt(grad @ grad))
        if gnorm <= tol:
            break
        theta = theta - bound_inv @ grad
    return LinearProbe(theta[:k].copy(), float(theta[k]), it, gnorm)


# ---------------------------------------------------------------- patch evaluation


@dataclass
class MetricReport:
    probe_auc: float
    target_ap: float
    naive_auc: float
    cross_auc: float
    adv_vendor_auc: float
    vendor_dp_auc: float
    mmd_sq: float
    fidelity: float
    probe_logit_abs: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EvalSummary:
    reports: list[MetricReport]

    def _stack(self) -> np.ndarray:
        return np.array([[getattr(r, n) for n in MetricReport.names()] for r in self.reports])

    @property
    def mean(self) -> dict[str, float]:
        return dict(zip(MetricReport.names(), self._stack().mean(axis=0).tolist()))

    @property
    def std(self) -> dict[str, float]:
        return dict(zip(MetricReport.names(), self._stack().std(axis=0).tolist()))


def probe_halves(data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Balanced (probe-train, held-out) halves of an evaluation split."""
    fit, held = split(data, (0.5, 0.5), seed=seed)
    return fit, held


def patched_reps(
    model: EncoderModel, data: Dataset, patch: Patch | None, rng: np.random.Generator, mode: str = "all"
) -> np.ndarray:
    """Representations after patching; mode='voluntary' patches only a == 1 examples.

    Placements are always drawn for every example so that the stream stays
    aligned across modes.
    """
    if mode not in ("all", "voluntary"):
        raise ValueError(f"unknown mode {mode!r}")
    if patch is None:
        return encode_array(model, data.images)
    placements = sample_placements(rng, data.image_hw, patch.side, len(data))
    images = apply_patch_batch(data.images, ad.Tensor(patch.pixels), patch.mask, placements).data
    if mode == "voluntary":
        images = np.where((data.a == 1)[:, None, None, None], images, data.images)
    return encode_array(model, images)


def _one_eval(model, fit, held, base_fit, base_held, cross_probe, patch, rng, mode) -> MetricReport:
    r_fit = patched_reps(model, fit, patch, rng, mode)
    r_held = patched_reps(model, held, patch, rng, mode)
    a_probe = fit_probe(r_fit, fit.a)
    a_logits = a_probe.logits(r_held)
    probe_auc = auc_roc(a_logits, held.a)
    y_probe = fit_probe(r_fit, fit.y)
    vendor_scores = y_probe.logits(r_held)
    r_all = np.concatenate([r_fit, r_held])
    base_all = np.concatenate([base_fit, base_held])
    a_all = np.concatenate([fit.a, held.a])
    return MetricReport(
        probe_auc=probe_auc,
        target_ap=average_precision(r_held[:, model.target_index], held.y),
        naive_auc=auc_roc(naive_sensitive_score(r_held, model), held.a),
        cross_auc=auc_roc(cross_probe.logits(r_held), held.a),
        adv_vendor_auc=probe_auc,
        vendor_dp_auc=auc_roc(vendor_scores, held.a),
        mmd_sq=mmd_sq(r_all[a_all == 1], r_all[a_all == 0]),
        fidelity=fidelity_loss(base_all, r_all),
        probe_logit_abs=float(np.mean(np.abs(a_logits))),
    )


def evaluate_patch(
    patch: Patch | None,
    model: EncoderModel,
    data: Dataset,
    n_evals: int = 25,
    seed: int = 0,
    stream_name=("eval",),
    mode: str = "all",
    split_seed: int = 0,
) -> EvalSummary:
    """Evaluate a patch ``n_evals`` times with fresh placements each time.

    Every evaluation refits the sensitive-attribute probe and the target
    vendor on patched probe-train representations and scores the held-out half.
    ``patch=None`` evaluates unpatched images.
    """
    fit, held = probe_halves(data, split_seed)
    base_fit = encode_array(model, fit.images)
    base_held = encode_array(model, held.images)
    cross_probe = fit_probe(base_fit, fit.a)
    reports = []
    for j in range(n_evals):
        rng = stream(seed, *stream_name, j)
        reports.append(_one_eval(model, fit, held, base_fit, base_held, cross_probe, patch, rng, mode))
    return EvalSummary(reports)


def dp_bound_report(patch: Patch | None, model: EncoderModel, data: Dataset, seed: int = 0) -> tuple[float, float]:
    """(adversarial-vendor A-AUC, target-vendor A-AUC) on patched representations."""
    r = evaluate_patch(patch, model, data, n_evals=1, seed=seed, stream_name=("dp",)).reports[0]
    return r.adv_vendor_auc, r.vendor_dp_auc
