"""Evaluation: teacher-forced likelihood, autoregressive rollouts,
permutation-consistency reports and the ablation matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import no_grad
from .errors import ConfigError, ContractError
from .network import (
    forward,
    gaussian_nll_values,
    matched_config,
    parameter_count,
)
from .tasks import (
    STREAM_TIES,
    TaskBatch,
    permute_targets,
    rng_stream,
    stack_tasks,
)

ABLATION_VARIANTS = (
    ("base", False, False),
    ("mha_x", True, False),
    ("local_taylor", False, True),
    ("full", True, True),
)


def _grouped(tasks):
    """Group single-sequence tasks by split so they can run as batches."""
    groups = {}
    for t in tasks:
        groups.setdefault((t.n_context, t.n_target), []).append(t)
    for members in groups.values():
        yield stack_tasks(members)


def eval_nll(params, config, tasks, tie_seed=0):
    """Teacher-forced mean NLL per target point over a task collection."""
    if not tasks:
        raise ContractError("eval_nll: no tasks given")
    total, count = 0.0, 0
    with no_grad():
        for batch in _grouped(tasks):
            pred = forward(batch, params, config, rng_stream(tie_seed, STREAM_TIES))
            values = gaussian_nll_values(
                pred.mu.data, pred.sigma.data, batch.target_y()
            )
            total += float(values.sum())
            count += values.size
    return total / count


def eval_nll_incremental(params, config, task, tie_seed=0):
    """Per-step evaluation: reveal one target at a time and score it.

    Sums the per-step NLLs; with the leakage-free mask this matches the
    one-shot teacher-forced pass.
    """
    nc = task.n_context
    total, count = 0.0, 0
    with no_grad():
        for k in range(task.n_target):
            sub = TaskBatch(
                task.x[:, : nc + k + 1], task.y[:, : nc + k + 1], nc, k + 1
            )
            pred = forward(sub, params, config, rng_stream(tie_seed, STREAM_TIES))
            values = gaussian_nll_values(
                pred.mu.data[:, -1:, :],
                pred.sigma.data[:, -1:, :],
                sub.target_y()[:, -1:, :],
            )
            total += float(values.sum())
            count += values.size
    return total / count


@dataclass
class Trajectories:
    """Autoregressive rollout output for one sequence."""

    mus: np.ndarray  # [n_draws, n_target]
    sigmas: np.ndarray  # [n_draws, n_target]
    draws: np.ndarray  # [n_draws, n_target], equals mus in mean mode

    @property
    def n_draws(self):
        return self.mus.shape[0]


def autoregressive_generate(params, config, task, mode="mean", n_draws=1, rng=None):
    """Roll out the targets in their given order.

    Each step conditions on the context plus everything generated so far,
    recomputing features; mode "mean" feeds the predictive mean (and forces
    a single draw), mode "sample" feeds Gaussian draws.
    """
    if mode not in ("mean", "sample"):
        raise ConfigError(f"mode must be 'mean' or 'sample', got {mode!r}")
    if task.batch_size != 1:
        raise ContractError("autoregressive_generate expects a single sequence")
    if mode == "mean":
        n_draws = 1
    if rng is None:
        rng = np.random.default_rng(0)
    nc, nt = task.n_context, task.n_target
    mus = np.zeros((n_draws, nt))
    sigmas = np.zeros((n_draws, nt))
    draws = np.zeros((n_draws, nt))
    with no_grad():
        for d in range(n_draws):
            work = task.y.copy()
            for k in range(nt):
                sub = TaskBatch(
                    task.x[:, : nc + k + 1], work[:, : nc + k + 1], nc, k + 1
                )
                pred = forward(sub, params, config, rng_stream(0, STREAM_TIES))
                mu = float(pred.mu.data[0, -1, 0])
                sigma = float(pred.sigma.data[0, -1, 0])
                value = mu if mode == "mean" else rng.normal(mu, sigma)
                mus[d, k] = mu
                sigmas[d, k] = sigma
                draws[d, k] = value
                work[0, nc + k, 0] = value
    return Trajectories(mus, sigmas, draws)


def eval_mse(params, config, tasks, tie_seed=0):
    """Mean squared error of mean-fed rollouts, in standardized y units."""
    if not tasks:
        raise ContractError("eval_mse: no tasks given")
    total, count = 0.0, 0
    for task in tasks:
        rollout = autoregressive_generate(params, config, task, mode="mean")
        err = rollout.mus[0] - task.target_y()[0, :, 0]
        total += float((err * err).sum())
        count += err.size
    return total / count


CONSISTENCY_SCHEMA = {
    "type": "object",
    "required": ["n_perm", "count", "stds", "mean", "ci95", "histogram"],
    "properties": {
        "n_perm": {"type": "integer", "minimum": 2},
        "count": {"type": "integer", "minimum": 1},
        "stds": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "mean": {"type": "number", "minimum": 0},
        "ci95": {
            "type": "array",
            "items": {"type": "number"},
            "minItems": 2,
            "maxItems": 2,
        },
        "histogram": {
            "type": "object",
            "required": ["bin_edges", "counts"],
            "properties": {
                "bin_edges": {"type": "array", "items": {"type": "number"}},
                "counts": {"type": "array", "items": {"type": "integer"}},
            },
        },
    },
}


@dataclass
class ConsistencyReport:
    """Spread of joint target log likelihood under target permutations."""

    stds: np.ndarray
    mean: float
    ci_low: float
    ci_high: float
    bin_edges: np.ndarray
    counts: np.ndarray
    n_perm: int

    def to_dict(self):
        return {
            "n_perm": int(self.n_perm),
            "count": int(len(self.stds)),
            "stds": [float(s) for s in self.stds],
            "mean": float(self.mean),
            "ci95": [float(self.ci_low), float(self.ci_high)],
            "histogram": {
                "bin_edges": [float(e) for e in self.bin_edges],
                "counts": [int(c) for c in self.counts],
            },
        }

    def save_json(self, path):
        payload = self.to_dict()
        import jsonschema

        jsonschema.validate(payload, CONSISTENCY_SCHEMA)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def model_joint_loglik(params, config, task, tie_seed=0):
    """Joint log likelihood of the targets under teacher forcing.

    Per-point log densities are summed in sorted order, so a predictor that
    ignores target order produces bitwise-identical values across
    permutations.
    """
    with no_grad():
        pred = forward(task, params, config, rng_stream(tie_seed, STREAM_TIES))
    values = -gaussian_nll_values(pred.mu.data, pred.sigma.data, task.target_y())
    return float(np.sort(values.reshape(-1)).sum())


def consistency_report(joint_loglik, tasks, n_perm=40, seed=0, n_bins=30):
    """Std of the joint target log likelihood across random permutations,
    per held-out sequence, with percentile bounds and a histogram."""
    if n_perm < 2:
        raise ConfigError(f"n_perm must be >= 2, got {n_perm}")
    stds = []
    for index, task in enumerate(tasks):
        rng = rng_stream(seed, index)
        values = []
        for _ in range(n_perm):
            perm = rng.permutation(task.n_target)
            values.append(joint_loglik(permute_targets(task, perm)))
        values = np.asarray(values)
        # exact zero for an order-invariant predictor instead of mean noise
        stds.append(0.0 if values.max() == values.min() else float(values.std()))
    stds = np.asarray(stds)
    top = max(float(stds.max()), 1e-12)
    edges = np.linspace(0.0, top, n_bins + 1)
    counts, _ = np.histogram(stds, bins=edges)
    return ConsistencyReport(
        stds=stds,
        mean=float(stds.mean()),
        ci_low=float(np.percentile(stds, 2.5)),
        ci_high=float(np.percentile(stds, 97.5)),
        bin_edges=edges,
        counts=counts,
        n_perm=n_perm,
    )


def ablation_matrix(train_tasks, val_tasks, full_config, train_config, run_root=None):
    """Train the four flag variants at matched size on identical data.

    Returns {variant: TrainResult}; raises if the variants did not consume
    identical batch streams or if their sizes drift past five percent.
    """
    from .training import train_loop  # local import, avoids a module cycle

    full = replace(full_config, use_mha_x=True, use_local_taylor=True)
    target = parameter_count(full)
    results = {}
    configs = {}
    for name, use_x, use_lt in ABLATION_VARIANTS:
        config = matched_config(full, use_x, use_lt)
        count = parameter_count(config)
        if abs(count - target) > 0.05 * target:
            raise ConfigError(
                f"variant {name} has {count} parameters, too far from {target}"
            )
        configs[name] = config
        run_dir = None if run_root is None else f"{run_root}/{name}"
        results[name] = train_loop(
            train_tasks, val_tasks, config, train_config, run_dir=run_dir
        )
    hashes = {r.data_stream_hash for r in results.values()}
    if len(hashes) != 1:
        raise ContractError("ablation variants consumed different data streams")
    return results, configs
