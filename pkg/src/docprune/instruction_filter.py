"""Instruction filtering: fuse visual and instruction tokens, keep relevant ones.

A single full-attention transformer layer runs over the concatenation
[V; I] of visual and instruction tokens, then a 2-layer sigmoid MLP
scores each fused visual token for instruction relevance. Visual tokens
scoring below the threshold are dropped; instruction tokens are never
dropped and pass through to the decoder untouched.

Instructions are sequences of small integer ids over a 256-entry toy
vocabulary. Most of the embedding table is seeded random; the ids that
mark row and column spans borrow the grid position ladders so spatial
matches show up as inner products after fusion. Training updates the
classifier MLP only, with the fusion layer frozen at its seeded init, so
every gradient is covered by the finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import weights_io
from .encoder import BlockWeights, _cat, block_init
from .rng import Rng
from .tensor import (FlopCounter, LossCurve, Mlp2, attention, bce_loss,
                     gelu, layernorm, linear, mlp2_backward, mlp2_forward,
                     mlp2_init)

VOCAB_SIZE = 256
MAX_INSTRUCTION_LEN = 32

# vocabulary layout: ids 1-3 name region kinds; 32+b / 64+b mark the
# quantized row / column bins an instruction's target area covers
ROW_TOKEN_BASE = 32
COL_TOKEN_BASE = 64
N_BINS = 8


@dataclass(frozen=True)
class InstructionSpec:
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.token_ids) == 0:
            raise ValueError("instruction must be non-empty")
        if len(self.token_ids) > MAX_INSTRUCTION_LEN:
            raise ValueError(
                f"instruction length {len(self.token_ids)} exceeds "
                f"{MAX_INSTRUCTION_LEN}")
        bad = [t for t in self.token_ids if not 0 <= t < VOCAB_SIZE]
        if bad:
            raise ValueError(f"token ids outside [0, {VOCAB_SIZE}): {bad}")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class IfmModel:
    embed: np.ndarray            # VOCAB_SIZE x dim lookup table, frozen
    fusion: BlockWeights         # one SA + FFN layer, frozen
    clf: Mlp2                    # relevance classifier, trainable
    eps_i: float = 0.5
    use_positions: bool = True   # sinusoidal encodings over [V; I]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]


def ifm_init(seed: int, dim: int, ffn_ratio: int = 2, eps_i: float = 0.5,
             use_positions: bool = True) -> IfmModel:
    if not 0.0 <= eps_i <= 1.0:
        raise ValueError(f"eps_i {eps_i} outside [0, 1]")
    rng = Rng(seed).derive("ifm")
    # unit-range embeddings keep instruction content comparable in
    # magnitude to the position encodings it competes with after fusion
    embed = rng.derive("embed").uniforms(VOCAB_SIZE * dim, -1.0, 1.0)
    embed = embed.reshape(VOCAB_SIZE, dim)
    # span tokens reuse the grid position ladders: a row token's embedding
    # matches the row half of every cell encoding in its bin, so spatial
    # relevance is a similarity relation rather than an arbitrary code the
    # frozen fusion layer would have to decode
    half = dim // 2
    bins = np.arange(N_BINS, dtype=np.float64)
    embed[ROW_TOKEN_BASE:ROW_TOKEN_BASE + N_BINS] = 0.0
    embed[ROW_TOKEN_BASE:ROW_TOKEN_BASE + N_BINS, :half] = _ladder(bins, half)
    embed[COL_TOKEN_BASE:COL_TOKEN_BASE + N_BINS] = 0.0
    embed[COL_TOKEN_BASE:COL_TOKEN_BASE + N_BINS, half:] = _ladder(
        bins, dim - half)
    return IfmModel(
        embed=embed,
        fusion=block_init(rng.derive("fusion"), dim, ffn_ratio),
        clf=mlp2_init(rng.derive("clf"), dim, 4 * dim, 1),
        eps_i=eps_i,
        use_positions=use_positions,
    )


def embed_instruction(model: IfmModel, spec: InstructionSpec) -> np.ndarray:
    return model.embed[list(spec.token_ids)]


def _ladder(pos: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(0, dim, 2).astype(np.float64)
    angle = pos[:, None] / np.power(10000.0, i / dim)
    pe = np.zeros((pos.size, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def _sinusoid(n: int, dim: int) -> np.ndarray:
    return _ladder(np.arange(n, dtype=np.float64), dim)


def grid_positions(indices: np.ndarray, side: int, dim: int) -> np.ndarray:
    """2D positional encoding for grid cells: half the dims encode the row,
    half the column, each with the usual sin/cos ladder."""
    half = dim // 2
    r, c = np.divmod(np.asarray(indices), side)
    return np.concatenate([_ladder(r.astype(np.float64), half),
                           _ladder(c.astype(np.float64), dim - half)], axis=1)


def fuse(model: IfmModel, v: np.ndarray, instr: np.ndarray,
         counter: FlopCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Self-attention + FFN over [V; I]; returns the fused halves (V', I')."""
    if instr.shape[0] == 0:
        raise ValueError("instruction token matrix must be non-empty")
    if v.shape[1] != model.dim or instr.shape[1] != model.dim:
        raise ValueError(
            f"fusion dim mismatch: model {model.dim}, V {v.shape}, "
            f"I {instr.shape}")
    bw = model.fusion
    nv = v.shape[0]
    x = np.vstack([v, instr])
    if model.use_positions:
        # order stamp for the instruction rows; visual tokens arrive with
        # spatial encodings already added upstream
        x[nv:] += _sinusoid(x.shape[0], model.dim)[nv:]
    with _cat(counter, "ifm"):
        a = layernorm(x, bw.ln1_g, bw.ln1_b, counter=counter)
        att = attention(linear(a, bw.wq, bw.bq, counter),
                        linear(a, bw.wk, bw.bk, counter),
                        linear(a, bw.wv, bw.bv, counter), counter)
        x = x + linear(att, bw.wo, bw.bo, counter)
        a2 = layernorm(x, bw.ln2_g, bw.ln2_b, counter=counter)
        x = x + linear(gelu(linear(a2, bw.w1, bw.b1, counter), counter),
                       bw.w2, bw.b2, counter)
    return x[:nv], x[nv:]


@dataclass
class FilterResult:
    kept_indices: np.ndarray      # strictly increasing original positions
    relevance_scores: np.ndarray  # one sigmoid score per visual token
    kept_tokens: np.ndarray

    def __post_init__(self):
        if self.kept_indices.size and np.any(np.diff(self.kept_indices) <= 0):
            raise ValueError("kept_indices must be strictly increasing")


def filter_tokens(model: IfmModel, v_fused: np.ndarray,
                  v_orig: np.ndarray | None = None, eps: float | None = None,
                  counter: FlopCounter | None = None) -> FilterResult:
    """Score fused visual tokens and keep those at or above the threshold.

    kept_tokens are rows of v_orig when provided (the decoder consumes the
    original projected tokens, not the fused features), else of v_fused.
    """
    eps = model.eps_i if eps is None else eps
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"threshold {eps} outside [0, 1]")
    with _cat(counter, "ifm"):
        scores, _ = mlp2_forward(v_fused, model.clf, counter, sigmoid_out=True)
    scores = scores.ravel()
    kept = np.flatnonzero(scores >= eps)
    source = v_fused if v_orig is None else v_orig
    return FilterResult(kept_indices=kept, relevance_scores=scores,
                        kept_tokens=source[kept])


def train_ifm(model: IfmModel, samples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
              epochs: int = 50, lr: float = 0.05,
              pos_weight: float | str = 1.0) -> tuple[IfmModel, LossCurve]:
    """Fit the relevance classifier on (V, I, labels) samples.

    The fusion layer stays frozen, so fused features are precomputed once
    per sample and the classifier trains full-batch on the stacked rows.
    """
    feats = []
    labels = []
    for v, instr, y in samples:
        vp, _ = fuse(model, v, instr)
        feats.append(vp)
        labels.append(np.asarray(y, dtype=np.float64).reshape(-1, 1))
        if feats[-1].shape[0] != labels[-1].shape[0]:
            raise ValueError(
                f"sample has {feats[-1].shape[0]} tokens but "
                f"{labels[-1].shape[0]} labels")
    x = np.vstack(feats)
    y = np.vstack(labels)
    if pos_weight == "auto":
        pos = float(y.sum())
        pos_weight = (y.size - pos) / pos if pos > 0 else 1.0
    curve = LossCurve()
    clf = model.clf
    for _ in range(epochs):
        pred, cache = mlp2_forward(x, clf, sigmoid_out=True)
        curve.append(bce_loss(pred, y, pos_weight))
        g = mlp2_backward(cache, clf, y, pos_weight)
        clf.w1 -= lr * g["dw1"]
        clf.b1 -= lr * g["db1"]
        clf.w2 -= lr * g["dw2"]
        clf.b2 -= lr * g["db2"]
    return model, curve


def evaluate_ifm(model: IfmModel,
                 samples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
                 eps: float | None = None) -> dict[str, float]:
    """Recall/precision of kept tokens against relevance labels."""
    tp = fp = fn = 0
    for v, instr, y in samples:
        vp, _ = fuse(model, v, instr)
        res = filter_tokens(model, vp, eps=eps)
        kept = np.zeros(v.shape[0], dtype=bool)
        kept[res.kept_indices] = True
        yb = np.asarray(y, dtype=bool).ravel()
        tp += int(np.sum(kept & yb))
        fp += int(np.sum(kept & ~yb))
        fn += int(np.sum(~kept & yb))
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return {"recall": recall, "precision": precision}


_FUSION_FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                  "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def save_ifm(path, model: IfmModel) -> None:
    arrays = {
        "meta": np.array([model.dim, model.eps_i,
                          1.0 if model.use_positions else 0.0]),
        "embed": model.embed,
        "clf_w1": model.clf.w1,
        "clf_b1": model.clf.b1,
        "clf_w2": model.clf.w2,
        "clf_b2": model.clf.b2,
    }
    for name in _FUSION_FIELDS:
        arrays[f"fuse_{name}"] = getattr(model.fusion, name)
    weights_io.write_weights(path, weights_io.KIND_IFM, arrays)


def load_ifm(path) -> IfmModel:
    kind, arrays = weights_io.read_weights(path)
    if kind != weights_io.KIND_IFM:
        raise ValueError(f"weight file {path} is not an IFM (kind {kind})")
    fusion = BlockWeights(**{n: arrays[f"fuse_{n}"] for n in _FUSION_FIELDS})
    clf = Mlp2(arrays["clf_w1"], arrays["clf_b1"],
               arrays["clf_w2"], arrays["clf_b2"])
    meta = arrays["meta"]
    return IfmModel(embed=arrays["embed"], fusion=fusion, clf=clf,
                    eps_i=float(meta[1]), use_positions=bool(meta[2] > 0.5))
