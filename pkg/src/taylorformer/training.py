"""Maximum-likelihood training with shuffled targets and Adam.

Each step permutes the target rows of the batch (fresh permutations per
sequence), runs the network, and takes an Adam step on the mean negative
log likelihood. Validation uses the unshuffled target order so model
selection is stable; the best-validation parameters are kept.
"""

from __future__ import annotations

import copy
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .network import forward, gaussian_nll, save_checkpoint
from .tasks import (
    STREAM_DATA,
    STREAM_INIT,
    STREAM_STEP,
    context_size_range,
    permute_targets,
    rng_stream,
    sample_training_batch,
    update_stream_hash,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_HEADER = "iteration,train_nll,val_nll,lr"
TIMINGS_HEADER = "iteration,wall_seconds"


@dataclass
class TrainConfig:
    """Optimization settings; learning_rate=None picks a per-data default
    (1e-4 for generated process tasks, 3e-4 for series forecasting)."""

    learning_rate: float | None = 1e-4
    batch_size: int = 16
    max_iterations: int = 3000
    val_interval: int = 300
    patience: int = 0  # validation events without improvement; 0 = off
    n_perm_samples: int = 1
    master_seed: int = 0
    dropout: float = 0.05
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("batch_size", "max_iterations", "val_interval", "n_perm_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter table."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def shuffle_targets(batch, rng):
    """Fresh uniform permutation of (x, y) target rows per sequence."""
    x = batch.x.copy()
    y = batch.y.copy()
    nc = batch.n_context
    for b in range(batch.batch_size):
        perm = rng.permutation(batch.n_target)
        x[b, nc:] = batch.x[b, nc:][perm]
        y[b, nc:] = batch.y[b, nc:][perm]
    return type(batch)(x, y, batch.n_context, batch.n_target)


def clip_gradients(grads, max_norm):
    """Scale the gradient map in place to a global norm cap."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_update(params, grads, state, lr):
    """Standard bias-corrected Adam step, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


def train_step(params, state, batch, model_config, train_config, rng):
    """One optimization step; returns the training NLL for the batch."""
    losses = []
    for _ in range(train_config.n_perm_samples):
        shuffled = shuffle_targets(batch, rng)
        pred = forward(
            shuffled,
            params,
            model_config,
            rng,
            dropout=train_config.dropout,
            dropout_rng=rng,
        )
        losses.append(gaussian_nll(pred, shuffled.target_y()))
    loss = losses[0]
    for extra in losses[1:]:
        loss = ad.add(loss, extra)
    if len(losses) > 1:
        loss = ad.mul(loss, 1.0 / len(losses))
    ad.zero_grads(params)
    grads = ad.gradients(loss, params)
    clip_gradients(grads, train_config.clip_norm)
    adam_update(params, grads, state, train_config.learning_rate)
    return float(loss.data)


@dataclass
class TrainResult:
    best_params: dict
    last_params: dict
    metrics: list = field(default_factory=list)  # (iter, train, val, lr) rows
    timings: list = field(default_factory=list)  # (iter, wall_seconds) rows
    best_val_nll: float = math.inf
    best_iteration: int = 0
    data_stream_hash: str = ""


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for it, train, val, lr in rows:
            fh.write(f"{it},{train!r},{val!r},{lr!r}\n")


def read_metrics_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        assert fh.readline().strip() == METRICS_HEADER
        for line in fh:
            it, train, val, lr = line.strip().split(",")
            rows.append((int(it), float(train), float(val), float(lr)))
    return rows


def train_loop(
    train_tasks,
    val_tasks,
    model_config,
    train_config,
    run_dir=None,
    meta=None,
):
    """Iterate train_step, validate on a fixed schedule, keep the best.

    Writes metrics.csv, timings.csv, best.ckpt and last.ckpt into run_dir
    when given. The incoming batch stream is hashed so experiment variants
    can prove they consumed identical data.
    """
    from .evaluation import eval_nll  # local import, avoids a module cycle

    if train_config.learning_rate is None:
        raise ConfigError("learning_rate must be resolved before training")
    seed = train_config.master_seed
    data_rng = rng_stream(seed, STREAM_DATA)
    init_rng = rng_stream(seed, STREAM_INIT)
    reroll = context_size_range(train_tasks)

    from .network import init_params

    params = init_params(model_config, init_rng)
    state = AdamState.for_params(params)
    hasher = hashlib.sha256()
    result = TrainResult(best_params={}, last_params={})
    window = []
    stale = 0
    started = time.perf_counter()
    last_logged = 0

    for it in range(1, train_config.max_iterations + 1):
        batch = sample_training_batch(
            train_tasks, train_config.batch_size, data_rng, reroll
        )
        update_stream_hash(hasher, batch)
        step_rng = rng_stream(seed, STREAM_STEP, it)
        try:
            loss = train_step(
                params, state, batch, model_config, train_config, step_rng
            )
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        window.append(loss)
        at_interval = it % train_config.val_interval == 0
        if at_interval or it == train_config.max_iterations:
            val_nll = eval_nll(params, model_config, val_tasks)
            row = (
                it,
                float(np.mean(window)),
                val_nll,
                train_config.learning_rate,
            )
            result.metrics.append(row)
            result.timings.append((it, time.perf_counter() - started))
            window = []
            last_logged = it
            if val_nll < result.best_val_nll:
                result.best_val_nll = val_nll
                result.best_iteration = it
                result.best_params = {
                    k: p.data.copy() for k, p in params.items()
                }
                stale = 0
            else:
                stale += 1
                if train_config.patience and stale >= train_config.patience:
                    break

    result.last_params = {k: p.data.copy() for k, p in params.items()}
    if not result.best_params:
        result.best_params = copy.deepcopy(result.last_params)
    result.data_stream_hash = hasher.hexdigest()

    if run_dir is not None:
        from pathlib import Path

        from .autodiff import Tensor

        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(run_dir / "metrics.csv", result.metrics)
        with open(run_dir / "timings.csv", "w", encoding="utf-8") as fh:
            fh.write(TIMINGS_HEADER + "\n")
            for it, wall in result.timings:
                fh.write(f"{it},{wall:.3f}\n")
        base_meta = {
            "seed": seed,
            "data_stream_hash": result.data_stream_hash,
            **(meta or {}),
        }
        save_checkpoint(
            run_dir / "best.ckpt",
            {k: Tensor(v, requires_grad=True) for k, v in result.best_params.items()},
            model_config,
            {
                **base_meta,
                "val_nll": result.best_val_nll,
                "iteration": result.best_iteration,
            },
        )
        save_checkpoint(
            run_dir / "last.ckpt",
            {k: Tensor(v, requires_grad=True) for k, v in result.last_params.items()},
            model_config,
            base_meta,
        )
    return result


def global_mean_baseline_nll(train_tasks, eval_tasks):
    """NLL of the constant Gaussian fitted to the training observations."""
    pool = np.concatenate([t.y.reshape(-1) for t in train_tasks])
    mean = pool.mean()
    std = pool.std()
    total, count = 0.0, 0
    for t in eval_tasks:
        y = t.target_y()
        z = (y - mean) / std
        total += float((np.log(std) + ad.HALF_LOG_2PI + 0.5 * z * z).sum())
        count += y.size
    return total / count
