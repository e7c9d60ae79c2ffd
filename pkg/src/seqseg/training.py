"""Dice-distance loss, Adam, early stopping and the epoch loop.

The loss over a minibatch is the negative class-weighted Dice distance
averaged over its contexts; with a single class and unit weight it lives in
[-1, 0] and -1 means perfect agreement.  Training is deterministic for a
fixed seed: the shuffle order, minibatch assembly and parameter updates all
derive from the seeded generator and pure numpy ops.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, TrainingAborted
from .tensor import Tensor, no_grad

DICE_SMOOTHING = 1e-6


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    patience: int = 100
    batch_size: int = 4
    max_epochs: int = 200
    seed: int = 0
    min_improvement: float = 1e-5
    # optional early exit once the training loss reaches a target; None runs
    # to patience/max_epochs exactly as configured
    target_train_loss: float = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be >= 1")


def dice_distance(probabilities, mask):
    """Soft Dice overlap 2*sum(mask*p) / sum(mask + p), smoothed by 1e-6.

    Differentiable; returns a scalar tensor in [0, 1] (1 at perfect overlap).
    """
    if not isinstance(probabilities, Tensor):
        probabilities = Tensor(probabilities)
    if not isinstance(mask, Tensor):
        mask = Tensor(np.asarray(mask, dtype=probabilities.data.dtype))
    if probabilities.shape != mask.shape:
        raise ValueError(f"dice_distance: shape mismatch {probabilities.shape} vs {mask.shape}")
    intersection = (mask * probabilities).sum()
    total = mask.sum() + probabilities.sum()
    return (intersection * 2.0 + DICE_SMOOTHING) / (total + DICE_SMOOTHING)


def foreground_frequency(masks):
    """Foreground-pixel frequency of a minibatch, the multi-class weight hook."""
    total = sum(np.asarray(m).size for m in masks)
    fg = sum(float(np.asarray(m).sum()) for m in masks)
    return fg / total if total else 0.0


def batch_loss(outputs, masks, class_weight=1.0):
    """Negative weighted Dice distance averaged over the minibatch."""
    if len(outputs) == 0:
        raise ValueError("batch_loss: empty minibatch")
    if len(outputs) != len(masks):
        raise ValueError(f"batch_loss: {len(outputs)} outputs vs {len(masks)} masks")
    if class_weight <= 0:
        raise ValueError(f"class weight must be positive, got {class_weight}")
    total = None
    for out, mask in zip(outputs, masks):
        d = dice_distance(out, mask)
        total = d if total is None else total + d
    return total * (-1.0 / (class_weight * len(outputs)))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, named_params):
        named = list(named_params)
        m = {name: np.zeros_like(t.data) for name, t in named}
        v = {name: np.zeros_like(t.data) for name, t in named}
        return cls(m=m, v=v)


def adam_step(params, grads, state, config):
    """Bias-corrected Adam update, applied in place.

    params: iterable of (name, Tensor); grads: {name: array}.  Raises
    NumericsError on any non-finite gradient.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, t in params:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        # in place: the parameter keeps its (aligned) buffer across steps
        t.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)).astype(
            t.data.dtype, copy=False
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class FitResult:
    best_state: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def _sample_loss(net, sample):
    x, y = sample
    xs = [Tensor(x[t]) for t in range(x.shape[0])]
    out = net.forward_sequence(xs)
    target = y[None] if y.ndim == 2 else y
    return dice_distance(out, Tensor(np.asarray(target, dtype=out.data.dtype)))


def evaluate_loss(net, samples):
    """Loss of the current parameters on a sample list, without training."""
    with no_grad():
        total = 0.0
        for sample in samples:
            total += _sample_loss(net, sample).item()
    return -total / len(samples)


def fit(net, train_samples, val_samples, config):
    """Train with per-epoch shuffling and patience-based early stopping.

    Monitors the validation loss, or the training loss when the validation
    set is empty.  Improvement means a decrease of at least
    ``config.min_improvement``.  Returns the best parameter state (also
    restored into the network) and the full per-epoch history.
    """
    if len(train_samples) == 0:
        raise ValueError("fit: empty training set")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = AdamState.for_params(net.named_params())
    history = []
    best_state = net.state_dict()
    best_loss = np.inf
    best_epoch = 0
    epochs_since_improvement = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_samples))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            net.zero_grad()
            total = None
            for sample in batch:
                d = _sample_loss(net, sample)
                total = d if total is None else total + d
            loss = total * (-1.0 / len(batch))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}", best_state=best_state, history=history
                )
            loss.backward()
            grads = {}
            for name, t in net.named_params():
                grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
            try:
                adam_step(net.named_params(), grads, state, config)
            except NumericsError as exc:
                raise TrainingAborted(str(exc), best_state=best_state, history=history) from exc
            batch_losses.append(loss_val)
        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_loss(net, val_samples) if val_samples else float("nan")
        monitored = val_loss if val_samples else train_loss
        history.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0))

        if monitored < best_loss - config.min_improvement:
            best_loss = monitored
            best_state = net.state_dict()
            best_epoch = epoch
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
        if epochs_since_improvement >= config.patience:
            stopped_early = True
            break
        if config.target_train_loss is not None and train_loss <= config.target_train_loss:
            break

    net.load_state(best_state)
    return FitResult(
        best_state=best_state,
        history=history,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time"])
        for rec in history:
            writer.writerow([rec.epoch, f"{rec.train_loss:.8f}", f"{rec.val_loss:.8f}", f"{rec.wall_time:.3f}"])
