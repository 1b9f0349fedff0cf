"""The data owner's frozen encoder: image -> k = 3 logits (target, a+, a-)."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .imaging import DigestMismatch
from .rng import stream
from .synthdata import Dataset

log = logging.getLogger(__name__)

ENCODER_FORMAT = "patchfair-encoder/1"
TARGET_INDEX, SENS_POS_INDEX, SENS_NEG_INDEX = 0, 1, 2


class EncoderDiverged(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    epochs: int = 12
    batch: int = 64
    lr: float = 3e-3
    seed: int = 0
    channels: tuple[int, int] = (8, 16)
    hidden: int = 32


@dataclass
class EncoderModel:
    input_shape: tuple[int, int, int]
    weights: dict[str, np.ndarray]
    architecture: list[dict] = field(default_factory=list)
    k: int = 3
    target_index: int = TARGET_INDEX
    sens_pos_index: int = SENS_POS_INDEX
    sens_neg_index: int = SENS_NEG_INDEX

    def __post_init__(self):
        for w in self.weights.values():
            w.setflags(write=False)
        if not self.architecture:
            self.architecture = describe(self.input_shape, self.weights)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].astype("<f8").tobytes())
        return h.hexdigest()


def describe(input_shape, weights) -> list[dict]:
    h, w, _ = input_shape
    c1, c2 = weights["conv1_w"].shape[3], weights["conv2_w"].shape[3]
    h1, w1 = ad.conv_output_size(h, 2), ad.conv_output_size(w, 2)
    h2, w2 = ad.conv_output_size(h1, 2), ad.conv_output_size(w1, 2)
    return [
        {"layer": "conv2d", "kernel": [3, 3], "channels": c1, "stride": 2, "out": [h1, w1, c1]},
        {"layer": "relu"},
        {"layer": "conv2d", "kernel": [3, 3], "channels": c2, "stride": 2, "out": [h2, w2, c2]},
        {"layer": "relu"},
        {"layer": "flatten", "out": [h2 * w2 * c2]},
    ] + (
        [{"layer": "dense", "out": [weights["hidden_w"].shape[1]]}, {"layer": "relu"}]
        if "hidden_w" in weights
        else []
    ) + [{"layer": "dense", "out": [weights["dense_w"].shape[1]]}]


def init_weights(input_shape, channels=(8, 16), k: int = 3, seed: int = 0, hidden: int = 0) -> dict[str, np.ndarray]:
    rng = stream(seed, "encoder", "init")
    h, w, cin = input_shape
    c1, c2 = channels
    flat = ad.conv_output_size(ad.conv_output_size(h, 2), 2) * ad.conv_output_size(
        ad.conv_output_size(w, 2), 2
    ) * c2
    weights = {
        "conv1_w": rng.standard_normal((3, 3, cin, c1)) * np.sqrt(2.0 / (9 * cin)),
        "conv1_b": np.zeros(c1),
        "conv2_w": rng.standard_normal((3, 3, c1, c2)) * np.sqrt(2.0 / (9 * c1)),
        "conv2_b": np.zeros(c2),
    }
    if hidden:
        weights["hidden_w"] = rng.standard_normal((flat, hidden)) * np.sqrt(2.0 / flat)
        weights["hidden_b"] = np.zeros(hidden)
        flat = hidden
    weights["dense_w"] = rng.standard_normal((flat, k)) * np.sqrt(1.0 / flat)
    weights["dense_b"] = np.zeros(k)
    return weights


def forward(params: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    """(N, H, W, C) images -> (N, k) logits."""
    z = ad.relu(ad.bias_add(ad.conv2d(x, params["conv1_w"], stride=2), params["conv1_b"]))
    z = ad.relu(ad.bias_add(ad.conv2d(z, params["conv2_w"], stride=2), params["conv2_b"]))
    z = ad.reshape(z, (z.shape[0], int(np.prod(z.shape[1:]))))
    if "hidden_w" in params:
        z = ad.relu(ad.bias_add(ad.matmul(z, params["hidden_w"]), params["hidden_b"]))
    return ad.bias_add(ad.matmul(z, params["dense_w"]), params["dense_b"])


def encode(model: EncoderModel, images) -> ad.Tensor:
    """Logits for one (H, W, C) image or a (N, H, W, C) batch.

    Weights enter the graph as constants, so gradients reach only whatever
    differentiable leaves produced ``images``.
    """
    if not isinstance(images, ad.Tensor):
        images = ad.Tensor(images)
    single = images.data.ndim == 3
    x = ad.reshape(images, (1,) + images.shape) if single else images
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ad.ShapeError(f"encode: input shape {images.shape} vs model {tuple(model.input_shape)}")
    g = x.graph if x.graph is not None else ad.Graph()
    if x.graph is None:
        x = g.constant(x.data)
    params = {name: g.constant(w) for name, w in model.weights.items()}
    out = forward(params, x)
    return ad.reshape(out, (model.k,)) if single else out


def encode_array(model: EncoderModel, images, chunk: int = 512) -> np.ndarray:
    """Logits as a plain array, evaluated in fixed-size chunks."""
    images = np.asarray(images, dtype=np.float64)
    return np.concatenate(
        [encode(model, images[i : i + chunk]).data for i in range(0, len(images), chunk)], axis=0
    )


def naive_sensitive_score(rep, model: EncoderModel | None = None):
    """logit(a+) - logit(a-) for one representation or a row-stacked batch."""
    rep = np.asarray(rep, dtype=np.float64)
    pos = SENS_POS_INDEX if model is None else model.sens_pos_index
    neg = SENS_NEG_INDEX if model is None else model.sens_neg_index
    return rep[..., pos] - rep[..., neg]


def label_targets(data: Dataset) -> np.ndarray:
    t = np.zeros((len(data), 3))
    t[:, TARGET_INDEX] = data.y
    t[:, SENS_POS_INDEX] = data.a
    t[:, SENS_NEG_INDEX] = 1 - data.a
    return t


def sigmoid_xent(logits: ad.Tensor, targets) -> ad.Tensor:
    """Mean independent per-label sigmoid cross-entropy."""
    t = np.asarray(targets, dtype=np.float64)
    per = ad.sub(ad.softplus(logits), ad.mul(logits, t))
    return ad.scale(ad.sum_all(per), 1.0 / t.size)


def train_encoder(train: Dataset, config: EncoderConfig = EncoderConfig()) -> EncoderModel:
    if len(train) == 0:
        raise ValueError("empty training split")
    input_shape = tuple(train.images.shape[1:])
    weights = init_weights(input_shape, config.channels, 3, config.seed, config.hidden)
    targets = label_targets(train)
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v = {k: np.zeros_like(w) for k, w in weights.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    shuffle = stream(config.seed, "encoder", "shuffle")
    step = 0
    n = len(train)
    for epoch in range(config.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            images = train.images[idx]
            g = ad.Graph()
            params = {k: g.leaf(w) for k, w in weights.items()}
            try:
                loss = sigmoid_xent(forward(params, g.constant(images)), targets[idx])
            except ad.NonFiniteError as exc:
                raise EncoderDiverged(f"epoch {epoch}: {exc}") from exc
            grads = g.backward(loss)
            step += 1
            for name, p in params.items():
                gr = grads[p]
                m[name] = b1 * m[name] + (1 - b1) * gr
                v[name] = b2 * v[name] + (1 - b2) * gr * gr
                mh = m[name] / (1 - b1**step)
                vh = v[name] / (1 - b2**step)
                weights[name] = weights[name] - config.lr * mh / (np.sqrt(vh) + eps)
            total += loss.item() * len(idx)
        if not np.isfinite(total):
            raise EncoderDiverged(f"epoch {epoch}: non-finite loss")
        log.info("encoder epoch %d loss %.5f", epoch, total / n)
    return EncoderModel(input_shape, weights)


# ---------------------------------------------------------------- file format


def save_encoder(model: EncoderModel, path) -> str:
    doc = {
        "format": ENCODER_FORMAT,
        "input_shape": list(model.input_shape),
        "architecture": model.architecture,
        "k": model.k,
        "target_index": model.target_index,
        "sens_pos_index": model.sens_pos_index,
        "sens_neg_index": model.sens_neg_index,
        "weights": {
            name: {
                "shape": list(w.shape),
                "data": base64.b64encode(w.astype("<f8").tobytes()).decode("ascii"),
            }
            for name, w in sorted(model.weights.items())
        },
        "digest": model.digest(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
    return doc["digest"]


def load_encoder(path) -> EncoderModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ENCODER_FORMAT:
        raise ValueError(f"{path}: not an encoder file")
    weights = {
        name: np.frombuffer(base64.b64decode(e["data"]), dtype="<f8").reshape(e["shape"]).copy()
        for name, e in doc["weights"].items()
    }
    model = EncoderModel(
        tuple(doc["input_shape"]),
        weights,
        doc["architecture"],
        doc["k"],
        doc["target_index"],
        doc["sens_pos_index"],
        doc["sens_neg_index"],
    )
    if model.digest() != doc["digest"]:
        raise DigestMismatch(f"{path}: encoder digest mismatch")
    return model
