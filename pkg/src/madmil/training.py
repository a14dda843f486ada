"""Adam training over bag sets with validation-based model selection.

One optimizer step per bag (batch size 1, bags have variable instance
counts).  Weight decay is the coupled form: decay is added to the
gradient before the moment updates.  After every epoch the mean
validation cross-entropy is recorded; the returned parameters are the
snapshot from the epoch with the lowest validation loss, earliest epoch
winning ties.  Everything is deterministic per seed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .models import (
    GatedAttentionHead,
    ModelConfig,
    ModelParams,
    bag_loss,
    flops,
    forward,
    init_params,
    param_count,
    predict_proba,
)
from .tensor import cross_entropy


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class RunResult:
    best_params: ModelParams
    best_epoch: int
    history: list
    test_metrics: dict | None = None

    @property
    def best_val_loss(self) -> float:
        return min(h.val_loss for h in self.history)


class Adam:
    """Adam with coupled L2 weight decay over one flat parameter vector."""

    def __init__(self, size, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self._scratch = np.empty(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray):
        """One update in place; ``grad`` is scratch and gets overwritten."""
        self.t += 1
        scratch = self._scratch
        if self.weight_decay:
            np.multiply(theta, self.weight_decay, out=scratch)
            grad += scratch
        self.m *= self.beta1
        np.multiply(grad, 1.0 - self.beta1, out=scratch)
        self.m += scratch
        self.v *= self.beta2
        np.multiply(grad, grad, out=grad)
        grad *= 1.0 - self.beta2
        self.v += grad
        # theta -= lr * (m / c1) / (sqrt(v / c2) + eps), constants folded
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        np.sqrt(self.v, out=scratch)
        scratch *= c1 / np.sqrt(c2)
        scratch += c1 * self.eps
        np.divide(self.m, scratch, out=scratch)
        scratch *= self.lr
        theta -= scratch


def _flatten_params(params: ModelParams):
    """Repack parameter arrays as views into one flat buffer.

    Returns (flat, view_params, segments); updating ``flat`` in place is
    visible through every view.
    """
    entries = list(params.flat())
    total = sum(arr.size for _, arr in entries)
    flat = np.empty(total)
    views = []
    segments = []
    offset = 0
    for _, arr in entries:
        view = flat[offset : offset + arr.size].reshape(arr.shape)
        view[...] = arr
        views.append(view)
        segments.append((offset, arr.size))
        offset += arr.size
    return flat, _rebuild_like(params, views), segments


def _rebuild_like(template: ModelParams, arrays) -> ModelParams:
    """Assemble a ModelParams with the template's structure from a flat
    list of arrays in ``flat()`` order."""
    it = iter(arrays)
    return ModelParams(
        compress_w=next(it),
        compress_b=next(it),
        heads=[
            GatedAttentionHead(
                v=next(it), u=next(it), w=next(it),
                b_v=next(it), b_u=next(it), b_w=next(it),
            )
            for _ in template.heads
        ],
        classifier_w=next(it),
        classifier_b=next(it),
    )


def _epoch_order(rng, n_bags: int, shuffle: bool) -> np.ndarray:
    return rng.permutation(n_bags) if shuffle else np.arange(n_bags)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_bags,
    val_bags,
) -> RunResult:
    """Optimize one model; returns the best-validation-epoch snapshot."""
    if not train_bags or not val_bags:
        raise ValueError("train and validation bag sets must be nonempty")
    flat, params, segments = _flatten_params(
        init_params(model_config, train_config.seed)
    )
    grad_flat = np.empty_like(flat)
    adam = Adam(
        flat.size,
        lr=train_config.learning_rate,
        weight_decay=train_config.weight_decay,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
    )
    # separate stream from init_params so adding epochs never shifts init
    shuffle_rng = np.random.default_rng((train_config.seed, 0x5EED))
    history = []
    best_loss = np.inf
    best_epoch = 0
    best_flat = flat.copy()
    for epoch in range(1, train_config.epochs + 1):
        epoch_losses = []
        for i in _epoch_order(shuffle_rng, len(train_bags), train_config.shuffle):
            bag = train_bags[i]
            pass_ = forward(model_config, params, bag.x)
            loss = cross_entropy(pass_.logits, bag.label)
            loss_value = float(loss.value[0, 0])
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, bag {bag.bag_id}"
                )
            loss.backward()
            for (offset, size), (_, leaf) in zip(segments, pass_.leaves.flat()):
                segment = grad_flat[offset : offset + size]
                if leaf.grad is None:
                    segment[:] = 0.0
                else:
                    segment.reshape(leaf.grad.shape)[...] = leaf.grad
            adam.step(flat, grad_flat)
            epoch_losses.append(loss_value)
        val_loss = _mean_loss(model_config, params, val_bags, epoch)
        history.append(
            EpochStats(epoch=epoch, train_loss=float(np.mean(epoch_losses)), val_loss=val_loss)
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_flat = flat.copy()
    best_params = _rebuild_like(
        params,
        [best_flat[o : o + s].reshape(view.shape)
         for (o, s), (_, view) in zip(segments, params.flat())],
    )
    return RunResult(best_params=best_params, best_epoch=best_epoch, history=history)


def _mean_loss(model_config, params, bags, epoch) -> float:
    total = 0.0
    for bag in bags:
        loss = bag_loss(model_config, params, bag.x, bag.label)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite validation loss at epoch {epoch}, bag {bag.bag_id}"
            )
        total += loss
    return total / len(bags)


def evaluate(model_config: ModelConfig, params: ModelParams, bags) -> tuple[list, dict]:
    """Score every bag and compute auc / f1 / accuracy."""
    predictions = [
        metrics.ScoredPrediction(
            bag_id=bag.bag_id,
            label=bag.label,
            scores=predict_proba(model_config, params, bag.x),
        )
        for bag in bags
    ]
    summary = {
        "auc": metrics.roc_auc(predictions),
        "f1": metrics.macro_f1(predictions),
        "accuracy": metrics.accuracy(predictions),
    }
    return predictions, summary


METRIC_NAMES = ("auc", "f1", "accuracy")


@dataclass
class SeedSweepResult:
    runs: list  # RunResult per seed, test_metrics filled in
    summary: dict  # metric -> (mean, sample std)


def sweep_seeds(
    model_config: ModelConfig,
    train_config: TrainConfig,
    splits,
    n_seeds: int,
) -> SeedSweepResult:
    """Independent runs for seeds 0..n_seeds-1, aggregated as mean and
    sample standard deviation per metric."""
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    runs = []
    for seed in range(n_seeds):
        run = train(model_config, replace(train_config, seed=seed),
                    splits.train, splits.val)
        _, run.test_metrics = evaluate(model_config, run.best_params, splits.test)
        runs.append(run)
    summary = {
        name: metrics.mean_std([r.test_metrics[name] for r in runs])
        for name in METRIC_NAMES
    }
    return SeedSweepResult(runs=runs, summary=summary)


@dataclass
class GridEntry:
    learning_rate: float
    weight_decay: float
    mean_val_loss: float
    runs: list


@dataclass
class GridSearchResult:
    best_learning_rate: float
    best_weight_decay: float
    entries: list
    best_runs: list  # winning pair's runs with test metrics filled in
    summary: dict


# the experiment defaults: small, overridable
MNIST_LR_GRID = (5e-4, 1e-4, 5e-5)
MNIST_WD_GRID = (1e-4, 1e-5)
FEATURE_LR_GRID = (1e-4,)
FEATURE_WD_GRID = (1e-5, 1e-4, 1e-3)


def grid_search(
    model_config: ModelConfig,
    train_config: TrainConfig,
    splits,
    lr_grid,
    wd_grid,
    n_seeds: int = 1,
) -> GridSearchResult:
    """Exhaustive (learning rate x weight decay) search.

    Every pair is trained for all seeds; the pair with the lowest mean
    best-validation loss wins, first in declared grid order on ties.
    Test metrics are computed for the winning pair's runs only.
    """
    lr_grid, wd_grid = list(lr_grid), list(wd_grid)
    if not lr_grid or not wd_grid:
        raise ValueError("grids must be nonempty")
    entries = []
    best = None
    for lr, wd in itertools.product(lr_grid, wd_grid):
        cfg = replace(train_config, learning_rate=lr, weight_decay=wd)
        runs = [
            train(model_config, replace(cfg, seed=seed), splits.train, splits.val)
            for seed in range(n_seeds)
        ]
        entry = GridEntry(
            learning_rate=lr,
            weight_decay=wd,
            mean_val_loss=float(np.mean([r.best_val_loss for r in runs])),
            runs=runs,
        )
        entries.append(entry)
        if best is None or entry.mean_val_loss < best.mean_val_loss:
            best = entry
    for run in best.runs:
        _, run.test_metrics = evaluate(model_config, run.best_params, splits.test)
    summary = {
        name: metrics.mean_std([r.test_metrics[name] for r in best.runs])
        for name in METRIC_NAMES
    }
    return GridSearchResult(
        best_learning_rate=best.learning_rate,
        best_weight_decay=best.weight_decay,
        entries=entries,
        best_runs=best.runs,
        summary=summary,
    )


@dataclass
class HeadSweepEntry:
    heads: int
    mean_val_loss: float
    mean_auc: float
    mean_f1: float
    params: int
    flops: int
    sweep: SeedSweepResult


@dataclass
class HeadSweepResult:
    selected_heads: int
    entries: list


def sweep_heads(
    model_config: ModelConfig,
    head_counts,
    train_config: TrainConfig,
    splits,
    n_seeds: int = 1,
    flops_instances: int = 120,
) -> HeadSweepResult:
    """Train one multi-head model per candidate M and pick the M with the
    lowest mean best-validation loss (smallest M on ties)."""
    head_counts = list(head_counts)
    if not head_counts:
        raise ValueError("head_counts must be nonempty")
    if model_config.aggregator != "madmil":
        raise ValueError("head sweeps only apply to the madmil aggregator")
    entries = []
    for m in head_counts:
        cfg = replace(model_config, heads=m)
        sweep = sweep_seeds(cfg, train_config, splits, n_seeds)
        entries.append(
            HeadSweepEntry(
                heads=m,
                mean_val_loss=float(np.mean([r.best_val_loss for r in sweep.runs])),
                mean_auc=sweep.summary["auc"][0],
                mean_f1=sweep.summary["f1"][0],
                params=param_count(cfg),
                flops=flops(cfg, flops_instances),
                sweep=sweep,
            )
        )
    selected = min(entries, key=lambda e: (e.mean_val_loss, e.heads))
    return HeadSweepResult(selected_heads=selected.heads, entries=entries)
