"""Bag-level aggregator architectures and closed-form size/cost accounting.

All four aggregators share one pipeline: compress raw instance features
with a fully connected ReLU layer, aggregate the N x D embedding into a
single bag representation, then classify with an affine map.

aggregators
    abmil      gated attention with a single head over the full embedding
    madmil     the embedding is zero-padded to M * ceil(D/M) columns and
               split into M contiguous slices, each scored by its own
               gated-attention head; the per-head weighted sums are
               concatenated and the zero padding columns dropped, so the
               classifier always sees a 1 x D representation
    mean_pool  column-wise mean of the embedding
    max_pool   column-wise max of the embedding

Parameters live as plain float64 ndarrays; ``forward`` wraps them in
fresh tape leaves per bag, so a training step is: forward, backward, read
leaf gradients, update the arrays in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    EmptyBagError,
    ShapeError,
    Tensor,
    concat_columns,
    pad_columns,
    slice_columns,
    softmax_over_instances,
)

AGGREGATORS = ("abmil", "madmil", "mean_pool", "max_pool")
ATTENTION_AGGREGATORS = ("abmil", "madmil")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description from which parameters, counts and FLOPs
    are all derived.

    ``attention_hidden`` is the hidden width of the abmil attention
    module.  madmil heads always use ceil(head_width / 2).
    """

    input_dim: int
    embed_dim: int
    classes: int
    aggregator: str
    heads: int = 1
    attention_hidden: int = 256

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(
                f"unknown aggregator {self.aggregator!r}, expected one of {AGGREGATORS}"
            )
        if self.input_dim < 1 or self.embed_dim < 1:
            raise ValueError("input_dim and embed_dim must be positive")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.aggregator != "madmil" and self.heads != 1:
            raise ValueError(f"{self.aggregator} uses a single head, got heads={self.heads}")
        if self.attention_hidden < 1:
            raise ValueError("attention_hidden must be positive")

    @property
    def is_attention(self) -> bool:
        return self.aggregator in ATTENTION_AGGREGATORS

    @property
    def head_width(self) -> int:
        """Columns each attention head sees (d); ceil(D/M) for madmil."""
        if self.aggregator == "madmil":
            return math.ceil(self.embed_dim / self.heads)
        return self.embed_dim

    @property
    def head_hidden(self) -> int:
        """Attention hidden width per head (a)."""
        if self.aggregator == "madmil":
            return math.ceil(self.head_width / 2)
        return self.attention_hidden

    @property
    def padded_dim(self) -> int:
        """Embedding width after zero padding for the head split."""
        if self.aggregator == "madmil":
            return self.heads * self.head_width
        return self.embed_dim


@dataclass
class GatedAttentionHead:
    """Learnable triple (V, U, w) of one gated-attention head plus biases.

    Fields may hold ndarrays (stored parameters) or Tensors (tape leaves).
    ``b_w`` shifts the scores inside the softmax; the shift cancels, but
    the scalar is a real parameter and is counted as such.
    """

    v: object  # a x d
    u: object  # a x d
    w: object  # a x 1
    b_v: object  # a x 1
    b_u: object  # a x 1
    b_w: object  # 1 x 1


@dataclass
class ModelParams:
    """All trainable arrays of one model, in a fixed flat order."""

    compress_w: object  # D x input_dim
    compress_b: object  # 1 x D
    heads: list = field(default_factory=list)
    classifier_w: object = None  # C x D
    classifier_b: object = None  # 1 x C

    def flat(self):
        """Yield (name, array_or_tensor) pairs in deterministic order."""
        yield "compress_w", self.compress_w
        yield "compress_b", self.compress_b
        for i, head in enumerate(self.heads):
            for f in fields(GatedAttentionHead):
                yield f"head{i}.{f.name}", getattr(head, f.name)
        yield "classifier_w", self.classifier_w
        yield "classifier_b", self.classifier_b

    def n_scalars(self) -> int:
        return sum(arr.size for _, arr in self.flat())

    def copy(self) -> "ModelParams":
        return ModelParams(
            compress_w=self.compress_w.copy(),
            compress_b=self.compress_b.copy(),
            heads=[
                GatedAttentionHead(
                    v=h.v.copy(), u=h.u.copy(), w=h.w.copy(),
                    b_v=h.b_v.copy(), b_u=h.b_u.copy(), b_w=h.b_w.copy(),
                )
                for h in self.heads
            ],
            classifier_w=self.classifier_w.copy(),
            classifier_b=self.classifier_b.copy(),
        )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.

    Draw order is fixed (compression, heads in order, classifier), so the
    same (config, seed) always yields bit-identical parameters.
    """
    rng = np.random.default_rng(seed)

    def uniform(rows, cols, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(rows, cols))

    d_in, d_emb, n_cls = config.input_dim, config.embed_dim, config.classes
    compress_w = uniform(d_emb, d_in, d_in, d_emb)
    heads = []
    if config.is_attention:
        d, a = config.head_width, config.head_hidden
        for _ in range(config.heads):
            heads.append(
                GatedAttentionHead(
                    v=uniform(a, d, d, a),
                    u=uniform(a, d, d, a),
                    w=uniform(a, 1, a, 1),
                    b_v=np.zeros((a, 1)),
                    b_u=np.zeros((a, 1)),
                    b_w=np.zeros((1, 1)),
                )
            )
    classifier_w = uniform(n_cls, d_emb, d_emb, n_cls)
    return ModelParams(
        compress_w=compress_w,
        compress_b=np.zeros((1, d_emb)),
        heads=heads,
        classifier_w=classifier_w,
        classifier_b=np.zeros((1, n_cls)),
    )


def _leaves(params: ModelParams) -> ModelParams:
    return ModelParams(
        compress_w=Tensor(params.compress_w),
        compress_b=Tensor(params.compress_b),
        heads=[
            GatedAttentionHead(
                v=Tensor(h.v), u=Tensor(h.u), w=Tensor(h.w),
                b_v=Tensor(h.b_v), b_u=Tensor(h.b_u), b_w=Tensor(h.b_w),
            )
            for h in params.heads
        ],
        classifier_w=Tensor(params.classifier_w),
        classifier_b=Tensor(params.classifier_b),
    )


def compress(leaves: ModelParams, x: Tensor) -> Tensor:
    """Fully connected ReLU layer: N x input_dim -> N x D."""
    return x.matmul(leaves.compress_w.transpose()).add_rowvec(leaves.compress_b).relu()


def gated_attention(head: GatedAttentionHead, h: Tensor) -> Tensor:
    """Instance weights of one head: softmax over
    w^T (tanh(V f^T + b_V) * sigm(U f^T + b_U)) + b_w."""
    gate_t = h.matmul(head.v.transpose()).add_rowvec(head.b_v.transpose()).tanh()
    gate_s = h.matmul(head.u.transpose()).add_rowvec(head.b_u.transpose()).sigm()
    scores = gate_t.mul(gate_s).matmul(head.w).add_rowvec(head.b_w)
    return softmax_over_instances(scores)


def split_heads(h: Tensor, m: int) -> list[Tensor]:
    """Split N x D into M contiguous N x ceil(D/M) slices, zero-padding
    the last columns when M does not divide D."""
    if m < 1:
        raise ValueError(f"head count must be >= 1, got {m}")
    width = math.ceil(h.cols / m)
    padded = pad_columns(h, m * width) if m * width != h.cols else h
    return [slice_columns(padded, i * width, (i + 1) * width) for i in range(m)]


def aggregate(config: ModelConfig, leaves: ModelParams, h: Tensor):
    """Reduce the N x D embedding to a 1 x D bag representation.

    Returns (z, attention) where attention holds one N x 1 weight column
    per head (empty for the pooling baselines).
    """
    if h.rows == 0:
        raise EmptyBagError("aggregate over an empty bag")
    if config.aggregator == "mean_pool":
        return h.mean_rows(), []
    if config.aggregator == "max_pool":
        return h.max_rows(), []
    if config.aggregator == "abmil":
        att = gated_attention(leaves.heads[0], h)
        return att.transpose().matmul(h), [att]
    parts = split_heads(h, config.heads)
    weights = [gated_attention(head, part) for head, part in zip(leaves.heads, parts)]
    pooled = [att.transpose().matmul(part) for att, part in zip(weights, parts)]
    z = concat_columns(pooled)
    if z.cols != config.embed_dim:
        # drop the zero padding columns so the classifier input is D wide
        z = slice_columns(z, 0, config.embed_dim)
    return z, weights


@dataclass
class ForwardPass:
    """One bag's tape: final logits, per-head attention, parameter leaves."""

    logits: Tensor
    attention: list
    leaves: ModelParams


def forward(config: ModelConfig, params: ModelParams, x) -> ForwardPass:
    """Differentiable compress -> aggregate -> classify on one bag."""
    xt = x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)
    if xt.rows == 0:
        raise EmptyBagError("forward on an empty bag")
    if xt.cols != config.input_dim:
        raise ShapeError(
            f"bag has {xt.cols} feature columns, model expects {config.input_dim}"
        )
    leaves = _leaves(params)
    h = compress(leaves, xt)
    z, attention = aggregate(config, leaves, h)
    logits = z.matmul(leaves.classifier_w.transpose()).add_rowvec(leaves.classifier_b)
    return ForwardPass(logits=logits, attention=attention, leaves=leaves)


# -- tape-free evaluation path ------------------------------------------


def _sigm(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _head_weights(head: GatedAttentionHead, h: np.ndarray) -> np.ndarray:
    gates = np.tanh(h @ head.v.T + head.b_v.T) * _sigm(h @ head.u.T + head.b_u.T)
    scores = gates @ head.w + head.b_w
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def predict_logits(config: ModelConfig, params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Plain-ndarray forward, identical arithmetic to the tape path."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyBagError("forward on an empty bag")
    if x.shape[1] != config.input_dim:
        raise ShapeError(
            f"bag has {x.shape[1]} feature columns, model expects {config.input_dim}"
        )
    h = np.maximum(x @ params.compress_w.T + params.compress_b, 0.0)
    if config.aggregator == "mean_pool":
        z = h.mean(axis=0, keepdims=True)
    elif config.aggregator == "max_pool":
        z = h.max(axis=0, keepdims=True)
    elif config.aggregator == "abmil":
        z = _head_weights(params.heads[0], h).T @ h
    else:
        width = config.head_width
        if config.padded_dim != h.shape[1]:
            padded = np.zeros((h.shape[0], config.padded_dim))
            padded[:, : h.shape[1]] = h
            h = padded
        pooled = []
        for i, head in enumerate(params.heads):
            part = h[:, i * width : (i + 1) * width]
            pooled.append(_head_weights(head, part).T @ part)
        z = np.concatenate(pooled, axis=1)[:, : config.embed_dim]
    return z @ params.classifier_w.T + params.classifier_b


def predict_proba(config: ModelConfig, params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for one bag, as a length-C vector."""
    logits = predict_logits(config, params, x)[0]
    e = np.exp(logits - logits.max())
    return e / e.sum()


def attention_weights(config: ModelConfig, params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Per-head attention weights as an N x M matrix (tape-free)."""
    if not config.is_attention:
        raise ValueError(f"{config.aggregator} has no attention weights")
    x = np.asarray(x, dtype=np.float64)
    h = np.maximum(x @ params.compress_w.T + params.compress_b, 0.0)
    if config.aggregator == "abmil":
        return _head_weights(params.heads[0], h)
    width = config.head_width
    if config.padded_dim != h.shape[1]:
        padded = np.zeros((h.shape[0], config.padded_dim))
        padded[:, : h.shape[1]] = h
        h = padded
    cols = [
        _head_weights(head, h[:, i * width : (i + 1) * width])
        for i, head in enumerate(params.heads)
    ]
    return np.concatenate(cols, axis=1)


def bag_loss(config: ModelConfig, params: ModelParams, x: np.ndarray, label: int) -> float:
    """Cross-entropy of one bag without building a tape."""
    row = predict_logits(config, params, x)[0]
    m = row.max()
    return float(m + np.log(np.exp(row - m).sum()) - row[label])


# -- accounting ----------------------------------------------------------


def param_count(config: ModelConfig) -> int:
    """Exact trainable scalar count from the architecture description."""
    total = config.input_dim * config.embed_dim + config.embed_dim
    if config.is_attention:
        d, a = config.head_width, config.head_hidden
        total += config.heads * (2 * (d * a + a) + a + 1)
    total += config.embed_dim * config.classes + config.classes
    return total


def flops(config: ModelConfig, n_instances: int) -> int:
    """Multiply-accumulate count for one bag of ``n_instances``.

    Counts the linear maps only: compression, the V/U/w products of each
    attention head, and the classifier.  Biases, nonlinearities, softmax
    and the pooling reductions are excluded.
    """
    if n_instances < 1:
        raise ValueError(f"n_instances must be >= 1, got {n_instances}")
    total = n_instances * config.input_dim * config.embed_dim
    if config.is_attention:
        d, a = config.head_width, config.head_hidden
        total += n_instances * config.heads * (2 * d * a + a)
    total += config.embed_dim * config.classes
    return total
