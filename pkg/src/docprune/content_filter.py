"""Content detector: per-token content probabilities and threshold machinery.

Two detector variants share one interface. The oracle reads ground-truth
patch labels from a synthetic document and returns exact {0, 1}
probabilities. The learned variant embeds each raw patch with a private
linear map (frozen, never shared with the encoder) and scores it with a
trainable two-layer sigmoid MLP.

Training uses plain full-batch gradient descent on weighted binary
cross-entropy. Blank background dominates document pages, so the positive
class is upweighted by the corpus negative/positive ratio by default;
without that the high-recall target stalls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import weights_io
from .patching import PatchEmbed, ProbabilityMap, flatten_patches, patch_embed_init
from .rng import Rng
from .synthdoc import LabeledImage
from .tensor import (FlopCounter, LossCurve, Mlp2, bce_loss, linear,
                     mlp2_backward, mlp2_forward, mlp2_init)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Per-stage content thresholds plus the instruction threshold."""

    eps_c: tuple[float, ...]
    eps_i: float

    def __post_init__(self):
        for e in (*self.eps_c, self.eps_i):
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"threshold {e} outside [0, 1]")
        if any(a > b for a, b in zip(self.eps_c, self.eps_c[1:])):
            raise ValueError(
                f"content thresholds must be non-decreasing, got {self.eps_c}")

    @staticmethod
    def default() -> "ThresholdSchedule":
        return ThresholdSchedule(eps_c=(0.25, 0.25, 0.5, 0.5), eps_i=0.5)

    @staticmethod
    def zero(n_stages: int = 4) -> "ThresholdSchedule":
        return ThresholdSchedule(eps_c=(0.0,) * n_stages, eps_i=0.0)


@dataclass
class DetectorModel:
    variant: str                      # "oracle" or "mlp"
    patch_size: int
    embed: PatchEmbed | None = None   # detector-private, frozen
    mlp: Mlp2 | None = None


def oracle_detector(patch_size: int) -> DetectorModel:
    return DetectorModel(variant="oracle", patch_size=patch_size)


def mlp_detector(seed: int, patch_size: int, feat_dim: int = 32,
                 hidden: int = 32) -> DetectorModel:
    rng = Rng(seed).derive("detector")
    return DetectorModel(
        variant="mlp",
        patch_size=patch_size,
        embed=patch_embed_init(rng.derive("embed"), patch_size, feat_dim),
        mlp=mlp2_init(rng.derive("mlp"), feat_dim, hidden, 1),
    )


def detector_features(model: DetectorModel, image: np.ndarray) -> np.ndarray:
    flat = flatten_patches(image, model.patch_size)
    return flat @ model.embed.weight + model.embed.bias


def detect(model: DetectorModel, doc: LabeledImage | np.ndarray,
           counter: FlopCounter | None = None) -> ProbabilityMap:
    """One content probability per patch token."""
    if model.variant == "oracle":
        if not isinstance(doc, LabeledImage):
            raise ValueError("oracle detector requires a labelled document")
        labels = doc.patch_labels(model.patch_size)
        return ProbabilityMap(labels.astype(np.float64).ravel(), binarized=True)
    image = doc.image if isinstance(doc, LabeledImage) else doc
    flat = flatten_patches(image, model.patch_size)
    feats = linear(flat, model.embed.weight, model.embed.bias, counter)
    probs, _ = mlp2_forward(feats, model.mlp, counter, sigmoid_out=True)
    return ProbabilityMap(probs.ravel(), binarized=False)


def binarize(p: ProbabilityMap, eps: float) -> ProbabilityMap:
    """p_i -> 1 if p_i >= eps else 0; the boundary value is kept."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"threshold {eps} outside [0, 1]")
    return ProbabilityMap((p.values >= eps).astype(np.float64), binarized=True)


def _training_set(model: DetectorModel, corpus: list[LabeledImage]):
    feats = np.vstack([detector_features(model, d.image) for d in corpus])
    labels = np.concatenate(
        [d.patch_labels(model.patch_size).ravel() for d in corpus])
    return feats, labels.astype(np.float64).reshape(-1, 1)


def train_detector(model: DetectorModel, corpus: list[LabeledImage],
                   epochs: int = 30, lr: float = 1e-2,
                   pos_weight: float | str = "auto") -> tuple[DetectorModel, LossCurve]:
    """Fit the MLP head; the private embed stays frozen.

    Gradients are the analytic mlp2_backward values, so every update is
    covered by the finite-difference checks in the test suite.
    """
    if model.variant != "mlp":
        raise ValueError("only the mlp detector variant is trainable")
    x, y = _training_set(model, corpus)
    if pos_weight == "auto":
        pos = float(y.sum())
        pos_weight = (y.size - pos) / pos if pos > 0 else 1.0
    curve = LossCurve()
    mlp = model.mlp
    for _ in range(epochs):
        pred, cache = mlp2_forward(x, mlp, sigmoid_out=True)
        curve.append(bce_loss(pred, y, pos_weight))
        g = mlp2_backward(cache, mlp, y, pos_weight)
        mlp.w1 -= lr * g["dw1"]
        mlp.b1 -= lr * g["db1"]
        mlp.w2 -= lr * g["dw2"]
        mlp.b2 -= lr * g["db2"]
    return model, curve


def evaluate_detector(model: DetectorModel, corpus: list[LabeledImage],
                      threshold: float) -> dict[str, float]:
    """Recall/precision of kept tokens against ground-truth patch labels."""
    tp = fp = fn = 0
    for doc in corpus:
        labels = doc.patch_labels(model.patch_size).ravel()
        kept = binarize(detect(model, doc), threshold).values.astype(bool)
        tp += int(np.sum(kept & labels))
        fp += int(np.sum(kept & ~labels))
        fn += int(np.sum(~kept & labels))
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return {"recall": recall, "precision": precision}


def save_detector(path, model: DetectorModel) -> None:
    if model.variant != "mlp":
        raise ValueError("only mlp detector weights are serialisable")
    arrays = {
        "meta": np.array([model.patch_size, model.embed.dim], dtype=np.float64),
        "embed_w": model.embed.weight,
        "embed_b": model.embed.bias,
        "w1": model.mlp.w1,
        "b1": model.mlp.b1,
        "w2": model.mlp.w2,
        "b2": model.mlp.b2,
    }
    weights_io.write_weights(path, weights_io.KIND_DETECTOR, arrays)


def load_detector(path) -> DetectorModel:
    kind, arrays = weights_io.read_weights(path)
    if kind != weights_io.KIND_DETECTOR:
        raise ValueError(f"weight file {path} is not a detector (kind {kind})")
    patch_size = int(arrays["meta"][0])
    embed = PatchEmbed(patch_size, arrays["embed_w"], arrays["embed_b"])
    mlp = Mlp2(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"])
    return DetectorModel("mlp", patch_size, embed, mlp)
