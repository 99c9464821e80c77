"""Losses, Adam, learning-rate plateau decay, early stopping and the train loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, NonFiniteError, TrainingError
from .griddata import MovieDataset, make_example
from .models import (
    NeroParams,
    PomponiaParams,
    leaf_tensors,
    nero_forward,
    pomponia_forward,
    volume_mask,
)


def mse_loss(pred, target) -> tc.Tensor:
    return tc.squared_error_mean(pred, target)


def masked_mse(pred, target, mask) -> tc.Tensor:
    return tc.squared_error_mean(pred, target, mask)


def mask_cross_entropy(pred_mask, true_mask, eps=1e-7) -> tc.Tensor:
    return tc.binary_cross_entropy(pred_mask, true_mask, eps)


# -- Adam -----------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    step = state.step + 1
    c1 = 1 - BETA1**step
    c2 = 1 - BETA2**step
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m = BETA1 * state.m.get(name, 0.0) + (1 - BETA1) * g
        v = BETA2 * state.v.get(name, 0.0) + (1 - BETA2) * g * g
        m_out[name], v_out[name] = m, v
        if lr == 0:
            new_params[name] = p
        else:
            new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return new_params, AdamState(m_out, v_out, step)


# -- schedules ------------------------------------------------------------


def plateau_decay_epochs(val_history, patience):
    """Epoch indices at which a plateau decay fires for this history.

    The counter of non-improving epochs (strict ``<``) fires once it exceeds
    ``patience`` and then restarts from zero.
    """
    if patience < 1:
        raise ConfigurationError(f"patience must be >= 1, got {patience}")
    best = np.inf
    counter = 0
    fired = []
    for epoch, v in enumerate(val_history):
        if v < best:
            best = v
            counter = 0
        else:
            counter += 1
        if counter > patience:
            fired.append(epoch)
            counter = 0
    return fired


def plateau_schedule(val_history, patience=2, factor=0.2, lr=1e-3):
    """Learning rate for the next epoch given the validation losses so far."""
    fired = plateau_decay_epochs(val_history, patience)
    if fired and fired[-1] == len(val_history) - 1:
        return lr * factor
    return lr


def epochs_without_improvement(val_history):
    best = np.inf
    since = 0
    for v in val_history:
        if v < best:
            best, since = v, 0
        else:
            since += 1
    return since


def sample_epoch_days(all_days, fraction, rng):
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"epoch day fraction must lie in (0, 1], got {fraction}")
    days = list(all_days)
    if not days:
        raise ConfigurationError("no days to sample from")
    k = max(1, round(fraction * len(days)))
    picked = rng.choice(len(days), size=k, replace=False)
    return [days[i] for i in picked]


# -- training driver --------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epoch_day_fraction: float = 0.2
    plateau_patience: int = 2
    plateau_factor: float = 0.2
    early_stop_patience: int = 5
    max_epochs: int = 50
    seed: int = 0

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not 0 < self.epoch_day_fraction <= 1:
            raise ConfigurationError("epoch_day_fraction must lie in (0, 1]")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")


@dataclass
class TrainLog:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.val_mse)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "lr", "is_best"])
        for i, (t, v, lr) in enumerate(zip(self.train_mse, self.val_mse, self.lr)):
            w.writerow([i, repr(float(t)), repr(float(v)), repr(float(lr)), int(i == self.best_epoch)])
        return buf.getvalue()


def forward_loss(params, example, tensors):
    """Training objective for one example and the prediction it scores."""
    target = example.targets
    if isinstance(params, PomponiaParams):
        y_final, warped, y_value = pomponia_forward(example, params, tensors)
        true_mask = volume_mask(target)
        loss = tc.add(mse_loss(y_final, target), mask_cross_entropy(
            tc.broadcast_to(warped, true_mask.shape), true_mask))
        spread = np.broadcast_to(true_mask[..., None], target.shape)
        loss = tc.add(loss, masked_mse(y_value, target, spread))
        return loss, y_final
    y = nero_forward(example, params, tensors)
    return mse_loss(y, target), y


def predict(params, example) -> np.ndarray:
    if isinstance(params, PomponiaParams):
        return pomponia_forward(example, params)[0].data
    return nero_forward(example, params).data


def gradient_step(params, example):
    """Loss value and gradient map for one example."""
    tensors = leaf_tensors(params.arrays)
    with tc.Tape() as tape:
        loss, _ = forward_loss(params, example, tensors)
    return loss.item(), tc.reverse_gradients(tape, loss, tensors.values())


def examples_for(dataset, days, slots, h, n_hour_bins):
    return [make_example(dataset, d, s, h, n_hour_bins) for d in days for s in slots]


def validation_mse(params, examples, threads=1) -> float:
    """Mean per-example MSE, reduced in a fixed order."""
    def one(ex):
        return float(np.mean((predict(params, ex) - ex.targets) ** 2))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            losses = list(pool.map(one, examples))
    else:
        losses = [one(ex) for ex in examples]
    return float(np.sum(losses)) / len(losses)


def train(params, dataset: MovieDataset, train_days, val_days, config: TrainConfig,
          slots, val_loss_fn=None, threads=1, callback=None):
    """Fit ``params`` with per-example Adam steps; returns (best params, log).

    ``val_loss_fn(params, epoch)`` replaces the validation MSE when given.
    """
    config.validate()
    train_days, val_days = list(train_days), list(val_days)
    if not train_days or not val_days:
        raise ConfigurationError("train and validation splits must be non-empty")
    if not slots:
        raise ConfigurationError("no target slots configured")
    cfg = params.config
    nbins = params.value.n_hour_bins if isinstance(params, PomponiaParams) else params.n_hour_bins
    rng = np.random.default_rng(config.seed)
    val_examples = None
    if val_loss_fn is None:
        val_examples = examples_for(dataset, val_days, slots, cfg.history, nbins)

    arrays = dict(params.arrays)
    state = AdamState()
    lr = config.learning_rate
    log = TrainLog()
    best_arrays = arrays
    for epoch in range(config.max_epochs):
        days = sample_epoch_days(train_days, config.epoch_day_fraction, rng)
        current = params.with_arrays(arrays)
        total, count = 0.0, 0
        try:
            for day in days:
                for slot in slots:
                    ex = make_example(dataset, day, slot, cfg.history, nbins)
                    loss, grads = gradient_step(current, ex)
                    arrays, state = adam_step(arrays, grads, state, lr)
                    current = params.with_arrays(arrays)
                    total += loss
                    count += 1
            if val_loss_fn is None:
                val = validation_mse(current, val_examples, threads)
            else:
                val = float(val_loss_fn(current, epoch))
        except NonFiniteError as e:
            raise TrainingError(f"training diverged in epoch {epoch}: {e}") from e
        except TrainingError as e:
            raise TrainingError(f"epoch {epoch}: {e}") from e
        if not np.isfinite(val):
            raise TrainingError(f"validation loss is not finite in epoch {epoch}")
        log.train_mse.append(total / count)
        log.val_mse.append(val)
        log.lr.append(lr)
        if val == min(log.val_mse) and (log.best_epoch < 0 or val < log.val_mse[log.best_epoch]):
            log.best_epoch = epoch
            best_arrays = arrays
        if callback is not None:
            callback(epoch, log)
        if epochs_without_improvement(log.val_mse) > config.early_stop_patience:
            break
        lr = plateau_schedule(log.val_mse, config.plateau_patience, config.plateau_factor, lr)
    return params.with_arrays(best_arrays), log
