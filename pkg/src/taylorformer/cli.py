"""Command-line entry point.

Commands: generate-data, train, evaluate, sample, consistency, ablate.
Every setting is a flat key with a default; a key=value config file
overrides defaults and command-line flags override the file. Each run
writes its fully resolved configuration next to its outputs, and that
snapshot alone re-runs the command identically. Exit codes: 0 success,
1 configuration/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TaylorformerError
from .network import ModelConfig, load_checkpoint
from .tasks import load_tasks, rng_stream, save_tasks
from .training import TrainConfig

STREAM_WINDOWS = 101
STREAM_SAMPLING = 102

# key -> (default, parser); "auto"/"none" sentinels resolve at run time
_BOOL = {"true": True, "false": False, "1": True, "0": False}


def _parse_bool(raw):
    try:
        return _BOOL[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {raw!r}") from None


def _parse_float_or_auto(raw):
    raw = raw.strip().lower()
    return None if raw in ("auto", "none") else float(raw)


def _parse_int_or_none(raw):
    raw = raw.strip().lower()
    return None if raw == "none" else int(raw)


KEY_SPECS = {
    "seed": (0, int),
    # paths
    "data": ("", str),
    "val_data": ("", str),
    "out": ("", str),
    "checkpoint": ("", str),  # comma separated for evaluate
    # generation
    "kind": ("rbf", str),
    "count": (20000, int),
    "n_points": (100, int),
    "x_low": (-2.0, float),
    "x_high": (2.0, float),
    "nc_low": (3, int),
    "nc_high": (97, int),
    "sine_period": (64.0, float),
    "sine_noise": (0.05, float),
    "periodic_squared_distance": (True, _parse_bool),
    # model
    "n_layers": (4, int),
    "n_heads": (4, int),
    "d_model": (64, int),
    "d_ff": (None, _parse_int_or_none),
    "d_embed": (32, int),
    "p": (0, int),
    "q": (1, int),
    "sigma_floor": (0.01, float),
    "use_mha_x": (True, _parse_bool),
    "use_local_taylor": (True, _parse_bool),
    "delta_t": (0.1, float),
    "t_max": (4.0, float),
    "include_raw_x": (False, _parse_bool),
    # training
    "learning_rate": (None, _parse_float_or_auto),  # auto: 1e-4 tasks, 3e-4 csv
    "batch_size": (16, int),
    "max_iterations": (3000, int),
    "val_interval": (300, int),
    "patience": (0, int),
    "n_perm_samples": (1, int),
    "dropout": (0.05, float),
    "clip_norm": (10.0, float),
    "val_count": (200, int),
    # forecasting windows
    "n_context": (32, int),
    "n_target": (16, int),
    "train_ratio": (0.72, float),
    "val_ratio": (0.08, float),
    "test_ratio": (0.20, float),
    "train_windows": (2000, int),
    "split": ("test", str),
    # evaluation / reporting
    "metrics": ("nll,mse", str),
    "n_draws": (20, int),
    "mode": ("sample", str),
    "n_perm": (40, int),
    "n_sequences": (0, int),  # 0 = all
}

MODEL_KEYS = (
    "n_layers", "n_heads", "d_model", "d_ff", "d_embed", "p", "q",
    "sigma_floor", "use_mha_x", "use_local_taylor", "delta_t", "t_max",
    "include_raw_x",
)
TRAIN_KEYS = (
    "learning_rate", "batch_size", "max_iterations", "val_interval",
    "patience", "n_perm_samples", "dropout", "clip_norm",
)
WINDOW_KEYS = (
    "n_context", "n_target", "train_ratio", "val_ratio", "test_ratio",
    "train_windows",
)

COMMAND_KEYS = {
    "generate-data": (
        "seed", "kind", "count", "out", "n_points", "x_low", "x_high",
        "nc_low", "nc_high", "sine_period", "sine_noise",
        "periodic_squared_distance",
    ),
    "train": (
        "seed", "data", "val_data", "out", "val_count",
        *MODEL_KEYS, *TRAIN_KEYS, *WINDOW_KEYS,
    ),
    "evaluate": ("seed", "data", "checkpoint", "out", "metrics", "split",
                 "n_sequences"),
    "sample": ("seed", "data", "checkpoint", "out", "n_draws", "mode",
               "split", "n_sequences"),
    "consistency": ("seed", "data", "checkpoint", "out", "n_perm", "split",
                    "n_sequences"),
    "ablate": (
        "seed", "data", "val_data", "out", "val_count",
        *MODEL_KEYS, *TRAIN_KEYS, *WINDOW_KEYS,
    ),
}


class UsageError(ConfigError):
    """Bad command line or config file."""


def read_config_file(path, allowed):
    """Parse key=value lines; unknown keys and bad values are reported
    together."""
    values = {}
    problems = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            problems.append(f"{path}:{lineno}: expected key=value, got {text!r}")
            continue
        key, raw = (part.strip() for part in text.split("=", 1))
        if key == "command":
            continue
        if key not in allowed:
            problems.append(f"{path}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = KEY_SPECS[key][1](raw)
        except ValueError as exc:
            problems.append(f"{path}:{lineno}: {key}: {exc}")
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    return values


def resolve_config(command, args):
    """defaults < config file < command-line flags."""
    allowed = COMMAND_KEYS[command]
    resolved = {key: KEY_SPECS[key][0] for key in allowed}
    if args.config:
        resolved.update(read_config_file(args.config, set(allowed)))
    problems = []
    for key in allowed:
        raw = getattr(args, key.replace("-", "_"), None)
        if raw is None:
            continue
        try:
            resolved[key] = KEY_SPECS[key][1](raw)
        except ValueError as exc:
            problems.append(f"--{key.replace('_', '-')}: {exc}")
    if problems:
        raise UsageError("invalid flags:\n  " + "\n  ".join(problems))
    return resolved


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(path, command, resolved):
    lines = [f"command={command}"]
    lines += [f"{k}={format_value(resolved[k])}" for k in sorted(resolved)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def prepare_run_dir(path, seed):
    """Create the run directory; never reuse an existing one."""
    if not path:
        raise UsageError("--out is required")
    base = Path(path)
    candidate = base
    if candidate.exists():
        stamp = time.strftime("%Y%m%d%H%M%S")
        candidate = Path(f"{base}-{stamp}-s{seed}")
        counter = 0
        while candidate.exists():
            counter += 1
            candidate = Path(f"{base}-{stamp}-s{seed}-{counter}")
    candidate.mkdir(parents=True)
    return candidate


def model_config_from(resolved):
    return ModelConfig(
        n_layers=resolved["n_layers"],
        n_heads=resolved["n_heads"],
        d_model=resolved["d_model"],
        d_ff=resolved["d_ff"],
        d_embed=resolved["d_embed"],
        p=resolved["p"],
        q=resolved["q"],
        sigma_floor=resolved["sigma_floor"],
        use_mha_x=resolved["use_mha_x"],
        use_local_taylor=resolved["use_local_taylor"],
        delta_t=resolved["delta_t"],
        t_max=resolved["t_max"],
        include_raw_x=resolved["include_raw_x"],
    )


def train_config_from(resolved):
    return TrainConfig(
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        max_iterations=resolved["max_iterations"],
        val_interval=resolved["val_interval"],
        patience=resolved["patience"],
        n_perm_samples=resolved["n_perm_samples"],
        master_seed=resolved["seed"],
        dropout=resolved["dropout"],
        clip_norm=resolved["clip_norm"],
    )


def _require_file(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")


def is_series_path(path):
    return str(path).lower().endswith(".csv")


def load_training_data(resolved):
    """(train_tasks, val_tasks, meta, resolved_lr) for either data kind."""
    from .series import load_series_csv, make_forecast_tasks

    path = resolved["data"]
    _require_file(path, "data")
    if is_series_path(path):
        t, y = load_series_csv(path)
        ratios = (
            resolved["train_ratio"], resolved["val_ratio"], resolved["test_ratio"]
        )
        split = make_forecast_tasks(
            t,
            y,
            resolved["n_context"],
            resolved["n_target"],
            ratios=ratios,
            train_windows=resolved["train_windows"],
            rng=rng_stream(resolved["seed"], STREAM_WINDOWS),
        )
        meta = {
            "data_kind": "series",
            "y_mean": split.y_mean,
            "y_std": split.y_std,
            "n_context": resolved["n_context"],
            "n_target": resolved["n_target"],
            "ratios": list(ratios),
        }
        return split.train, split.val, meta, 3e-4
    train_tasks, file_meta = load_tasks(path)
    if resolved["val_data"]:
        _require_file(resolved["val_data"], "val_data")
        val_tasks, _ = load_tasks(resolved["val_data"])
    else:
        held = resolved["val_count"]
        if held < 1 or held >= len(train_tasks):
            raise UsageError(
                f"val_count {held} does not leave both training and "
                f"validation sequences (dataset has {len(train_tasks)})"
            )
        val_tasks = train_tasks[-held:]
        train_tasks = train_tasks[:-held]
    meta = {"data_kind": "tasks", "source_kind": file_meta.get("kind", "")}
    return train_tasks, val_tasks, meta, 1e-4


def load_eval_tasks(resolved, meta):
    """Held-out tasks for evaluate/sample/consistency."""
    from .series import load_series_csv, make_forecast_tasks

    path = resolved["data"]
    _require_file(path, "data")
    if is_series_path(path):
        if meta.get("data_kind") != "series":
            raise ConfigError(
                "checkpoint was not trained on series data; cannot window a CSV"
            )
        t, y = load_series_csv(path)
        split = make_forecast_tasks(
            t,
            y,
            int(meta["n_context"]),
            int(meta["n_target"]),
            ratios=tuple(meta["ratios"]),
            train_windows=1,
            rng=rng_stream(resolved["seed"], STREAM_WINDOWS),
            stats=(meta["y_mean"], meta["y_std"]),
        )
        tasks = {"val": split.val, "test": split.test}.get(resolved["split"])
        if tasks is None:
            raise UsageError(
                f"split must be val or test for series data, got "
                f"{resolved['split']!r}"
            )
    else:
        tasks, _ = load_tasks(path)
    limit = resolved.get("n_sequences", 0)
    if limit:
        tasks = tasks[:limit]
    if not tasks:
        raise DataError(f"no evaluation tasks in {path}")
    return tasks


def cmd_generate_data(resolved):
    from .gp import sample_gp_tasks
    from .series import synth_sine_series, write_series_csv

    out = resolved["out"]
    if not out:
        raise UsageError("--out is required")
    kind = resolved["kind"]
    seed = resolved["seed"]
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    if kind == "sine":
        t, y = synth_sine_series(
            resolved["count"],
            resolved["sine_period"],
            resolved["sine_noise"],
            rng_stream(seed, STREAM_SAMPLING),
        )
        write_series_csv(out, t, y)
    elif kind in ("rbf", "matern52", "periodic"):
        tasks = sample_gp_tasks(
            kind,
            resolved["count"],
            seed,
            n_points=resolved["n_points"],
            x_low=resolved["x_low"],
            x_high=resolved["x_high"],
            nc_low=resolved["nc_low"],
            nc_high=resolved["nc_high"],
            squared_distance_period=resolved["periodic_squared_distance"],
        )
        save_tasks(out, tasks, kind=kind, seed=seed)
    else:
        raise UsageError(f"unknown data kind {kind!r}")
    write_snapshot(f"{out}.manifest", "generate-data", resolved)
    print(f"wrote {resolved['count']} {kind} records to {out}")
    return 0


def cmd_train(resolved):
    from .figures import save_training_curves
    from .training import train_loop

    train_tasks, val_tasks, meta, auto_lr = load_training_data(resolved)
    if resolved["learning_rate"] is None:
        resolved["learning_rate"] = auto_lr
    run_dir = prepare_run_dir(resolved["out"], resolved["seed"])
    write_snapshot(run_dir / "config.txt", "train", resolved)
    model_config = model_config_from(resolved)
    train_config = train_config_from(resolved)
    result = train_loop(
        train_tasks, val_tasks, model_config, train_config,
        run_dir=run_dir, meta=meta,
    )
    save_training_curves(result.metrics, run_dir / "training_curves.png")
    print(
        f"run dir {run_dir}: best validation NLL {result.best_val_nll:.6f} "
        f"at iteration {result.best_iteration}"
    )
    return 0


def _checkpoint_list(resolved):
    raw = resolved["checkpoint"]
    if not raw:
        raise UsageError("--checkpoint is required")
    paths = [p.strip() for p in raw.split(",") if p.strip()]
    for p in paths:
        _require_file(p, "checkpoint")
    return paths


def cmd_evaluate(resolved):
    from .evaluation import eval_mse, eval_nll

    paths = _checkpoint_list(resolved)
    wanted = [m.strip() for m in resolved["metrics"].split(",") if m.strip()]
    for m in wanted:
        if m not in ("nll", "mse"):
            raise UsageError(f"unknown metric {m!r} (expected nll and/or mse)")
    run_dir = prepare_run_dir(resolved["out"], resolved["seed"])
    write_snapshot(run_dir / "config.txt", "evaluate", resolved)
    loaded = [load_checkpoint(p) for p in paths]
    tasks = load_eval_tasks(resolved, loaded[0][2])
    ncs = {t.n_context for t in tasks}
    nts = {t.n_target for t in tasks}
    nc = ncs.pop() if len(ncs) == 1 else -1
    nt = nts.pop() if len(nts) == 1 else -1
    rows = []
    for metric in wanted:
        fn = eval_nll if metric == "nll" else eval_mse
        values = [fn(params, config, tasks) for params, config, _ in loaded]
        rows.append(
            (
                resolved["data"], nc, nt, metric,
                float(np.mean(values)), float(np.std(values)), len(values),
            )
        )
    report = run_dir / "report.csv"
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("dataset,n_context,n_target,metric,value,std,seed_count\n")
        for row in rows:
            dataset, c, t, metric, value, std, n = row
            fh.write(f"{dataset},{c},{t},{metric},{value!r},{std!r},{n}\n")
    for row in rows:
        print(f"{row[3]}: {row[4]:.6f} +- {row[5]:.6f} over {row[6]} checkpoint(s)")
    print(f"report written to {report}")
    return 0


def cmd_sample(resolved):
    from .evaluation import autoregressive_generate
    from .figures import save_trajectory_plot

    paths = _checkpoint_list(resolved)
    params, config, meta = load_checkpoint(paths[0])
    tasks = load_eval_tasks(resolved, meta)
    if resolved["mode"] not in ("mean", "sample"):
        raise UsageError(f"mode must be mean or sample, got {resolved['mode']!r}")
    limit = resolved["n_sequences"] or 4
    tasks = tasks[:limit]
    run_dir = prepare_run_dir(resolved["out"], resolved["seed"])
    write_snapshot(run_dir / "config.txt", "sample", resolved)
    cases = []
    csv_path = run_dir / "trajectories.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("seq_id,draw_id,step,x,y_true,mu,sigma,y_drawn\n")
        for seq_id, task in enumerate(tasks):
            out = autoregressive_generate(
                params,
                config,
                task,
                mode=resolved["mode"],
                n_draws=resolved["n_draws"],
                rng=rng_stream(resolved["seed"], STREAM_SAMPLING, seq_id),
            )
            cases.append((task, out))
            nc = task.n_context
            for d in range(out.n_draws):
                for k in range(task.n_target):
                    fh.write(
                        f"{seq_id},{d},{k},{float(task.x[0, nc + k, 0])!r},"
                        f"{float(task.y[0, nc + k, 0])!r},{float(out.mus[d, k])!r},"
                        f"{float(out.sigmas[d, k])!r},{float(out.draws[d, k])!r}\n"
                    )
    save_trajectory_plot(cases, run_dir / "trajectories.png")
    print(f"wrote {csv_path} for {len(cases)} sequence(s)")
    return 0


def cmd_consistency(resolved):
    from .evaluation import consistency_report, model_joint_loglik
    from .figures import save_consistency_histogram

    paths = _checkpoint_list(resolved)
    params, config, meta = load_checkpoint(paths[0])
    tasks = load_eval_tasks(resolved, meta)
    run_dir = prepare_run_dir(resolved["out"], resolved["seed"])
    write_snapshot(run_dir / "config.txt", "consistency", resolved)
    report = consistency_report(
        lambda task: model_joint_loglik(params, config, task),
        tasks,
        n_perm=resolved["n_perm"],
        seed=resolved["seed"],
    )
    report.save_json(run_dir / "consistency.json")
    save_consistency_histogram(report, run_dir / "consistency_hist.png")
    print(
        f"consistency over {len(tasks)} sequences: mean std {report.mean:.6f}, "
        f"95% interval [{report.ci_low:.6f}, {report.ci_high:.6f}]"
    )
    return 0


def cmd_ablate(resolved):
    from .evaluation import ablation_matrix
    from .figures import save_ablation_curves

    train_tasks, val_tasks, _, auto_lr = load_training_data(resolved)
    if resolved["learning_rate"] is None:
        resolved["learning_rate"] = auto_lr
    run_dir = prepare_run_dir(resolved["out"], resolved["seed"])
    write_snapshot(run_dir / "config.txt", "ablate", resolved)
    results, configs = ablation_matrix(
        train_tasks,
        val_tasks,
        model_config_from(resolved),
        train_config_from(resolved),
        run_root=run_dir,
    )
    comparison = run_dir / "comparison.csv"
    with open(comparison, "w", encoding="utf-8") as fh:
        fh.write("variant,iteration,train_nll,val_nll,lr\n")
        for name, result in results.items():
            for it, train, val, lr in result.metrics:
                fh.write(f"{name},{it},{train!r},{val!r},{lr!r}\n")
    save_ablation_curves(
        {name: r.metrics for name, r in results.items()},
        run_dir / "ablation_curves.png",
    )
    digest = next(iter({r.data_stream_hash for r in results.values()}))
    for name, result in results.items():
        print(f"{name}: best validation NLL {result.best_val_nll:.6f}")
    print(f"shared data stream {digest[:16]}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "consistency": cmd_consistency,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="taylorformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMAND_KEYS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default="", help="key=value config file")
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        resolved = resolve_config(args.command, args)
        return COMMANDS[args.command](resolved)
    except (UsageError, ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TaylorformerError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - report, keep the contract exit code
        import traceback

        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
