"""The Taylorformer network.

Two attention channels run in parallel over the same mask: a joint channel
(standard masked multi-head attention over x/y-derived features) and an
index-only channel whose final layer attends with the raw observations as
values, making that output a learnt linear smoothing of y. Their outputs
are concatenated into a two-channel head; the mean half gets the local
Taylor terms added back, the scale half goes through a softplus floor.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .features import (
    assemble_qkv_xy,
    assemble_x_features,
    local_taylor_mean,
    representation_extractor,
)

CHECKPOINT_MAGIC = "taylorformer-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    n_layers counts attention layers per channel; d_model is the shared
    layer width, split evenly across heads; d_embed is the positional
    encoding width; p and q are the Taylor truncation orders for the
    hard-coded mean terms and the network features respectively.
    """

    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int | None = None  # defaults to 2 * d_model
    d_embed: int = 32
    p: int = 0
    q: int = 1
    sigma_floor: float = 0.01
    use_mha_x: bool = True
    use_local_taylor: bool = True
    delta_t: float = 0.1
    t_max: float = 4.0
    include_raw_x: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_embed <= 0 or self.d_embed % 2 != 0:
            raise ConfigError(f"d_embed must be positive and even, got {self.d_embed}")
        if self.p not in (0, 1) or self.q not in (0, 1):
            raise ConfigError(f"p and q must be 0 or 1, got p={self.p}, q={self.q}")
        if not 0.0 < self.sigma_floor < 1.0:
            raise ConfigError(f"sigma_floor must be in (0, 1), got {self.sigma_floor}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def ff_width(self):
        return self.d_ff if self.d_ff is not None else 2 * self.d_model

    @property
    def q_effective(self):
        return self.q if self.use_local_taylor else 0

    @property
    def x_feature_width(self):
        return self.d_embed + (1 if self.include_raw_x else 0) + 2 * self.q_effective

    @property
    def xy_feature_width(self):
        q = self.q_effective
        return self.x_feature_width + (1 + 2 * q) + 2 * q + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GaussianPrediction:
    """Per-target-point predictive mean and scale (target rows only)."""

    mu: Tensor
    sigma: Tensor
    sigma_floor: float = 0.0


def _channels(config):
    return ("x", "xy") if config.use_mha_x else ("xy",)


def param_shapes(config):
    """Ordered (name, shape) table; init and checkpoints both follow it."""
    shapes = []
    for ch in _channels(config):
        in_width = (
            config.x_feature_width if ch == "x" else config.xy_feature_width
        )
        for li in range(config.n_layers):
            prefix = f"{ch}.{li}"
            d_in = in_width if li == 0 else config.d_model
            d_v_in = d_in
            # the first joint layer's keys end in a constant-1 label column;
            # softmax is invariant to the row shift it would induce, so the
            # key projection skips it rather than carry zero-gradient weights
            d_k_in = d_in - 1 if (ch == "xy" and li == 0) else d_in
            if ch == "x" and li == config.n_layers - 1:
                d_v_in = 1  # final layer attends with raw observations
            for h in range(config.n_heads):
                shapes.append((f"{prefix}.head{h}.wq", (d_in, config.d_head)))
                shapes.append((f"{prefix}.head{h}.wk", (d_k_in, config.d_head)))
                shapes.append((f"{prefix}.head{h}.wv", (d_v_in, config.d_head)))
            shapes.append(
                (f"{prefix}.wo", (config.n_heads * config.d_head, config.d_model))
            )
            if li == 0:
                # first layer needs a projection so the residual add works
                shapes.append((f"{prefix}.in_proj.w", (in_width, config.d_model)))
                shapes.append((f"{prefix}.in_proj.b", (config.d_model,)))
            shapes.append((f"{prefix}.ln1.gain", (config.d_model,)))
            shapes.append((f"{prefix}.ln1.bias", (config.d_model,)))
            shapes.append((f"{prefix}.ff.w1", (config.d_model, config.ff_width)))
            shapes.append((f"{prefix}.ff.b1", (config.ff_width,)))
            shapes.append((f"{prefix}.ff.w2", (config.ff_width, config.d_model)))
            shapes.append((f"{prefix}.ff.b2", (config.d_model,)))
            shapes.append((f"{prefix}.ln2.gain", (config.d_model,)))
            shapes.append((f"{prefix}.ln2.bias", (config.d_model,)))
    head_in = config.d_model * (2 if config.use_mha_x else 1)
    shapes.append(("out.w", (head_in, 2)))
    shapes.append(("out.b", (2,)))
    return shapes


def parameter_count(config):
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


def init_params(config, rng):
    """Uniform fan-in init for weights, zeros for biases, unit LN gains."""
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith((".bias", ".b", ".b1", ".b2")):
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def _no_dropout(t):
    return t


def make_dropout(rate, rng):
    """Inverted dropout as multiplication by a constant mask."""
    if rate <= 0.0 or rng is None:
        return _no_dropout
    keep = 1.0 - rate

    def drop(t):
        mask = (rng.random(t.data.shape) < keep) / keep
        return ad.mul(t, Tensor(mask))

    return drop


def mha_unit(
    q_in, k_in, v_in, mask, params, prefix, n_heads, d_head, return_weights=False
):
    """Multi-head masked scaled dot-product attention with output projection."""
    scale = 1.0 / math.sqrt(d_head)
    heads = []
    weights = []
    for h in range(n_heads):
        qh = ad.matmul(q_in, params[f"{prefix}.head{h}.wq"])
        kh = ad.matmul(k_in, params[f"{prefix}.head{h}.wk"])
        vh = ad.matmul(v_in, params[f"{prefix}.head{h}.wv"])
        scores = ad.mul(ad.matmul(qh, ad.transpose_last(kh)), scale)
        attn = ad.masked_softmax(scores, mask)
        heads.append(ad.matmul(attn, vh))
        if return_weights:
            weights.append(attn)
    out = ad.matmul(ad.concat_last(heads), params[f"{prefix}.wo"])
    if return_weights:
        return out, weights
    return out


def _run_channel(
    ch, q0, k0, v0, final_v, mask, params, config, drop, capture=None
):
    """One attention stack.

    Layer 0 consumes the assembled feature rows; later layers chain their
    own outputs. When final_v is given the last layer attends with it as
    values (the raw observations for the index-only channel).
    """
    out = None
    for li in range(config.n_layers):
        prefix = f"{ch}.{li}"
        last = li == config.n_layers - 1
        if li == 0:
            q_in, k_in, v_in = q0, k0, v0
        else:
            q_in = k_in = v_in = out
        if last and final_v is not None:
            v_in = final_v
        if capture is not None:
            attn, head_weights = mha_unit(
                q_in, k_in, v_in, mask, params, prefix, config.n_heads,
                config.d_head, return_weights=True,
            )
            capture.setdefault("weights", []).append(
                [w.data for w in head_weights]
            )
            if last:
                capture["final_attn"] = attn
        else:
            attn = mha_unit(
                q_in, k_in, v_in, mask, params, prefix, config.n_heads,
                config.d_head,
            )
        attn = drop(attn)
        residual = (
            ad.dense(q_in, params[f"{prefix}.in_proj.w"], params[f"{prefix}.in_proj.b"])
            if li == 0
            else q_in
        )
        out = ad.layer_norm(
            ad.add(attn, residual),
            params[f"{prefix}.ln1.gain"],
            params[f"{prefix}.ln1.bias"],
            config.ln_eps,
        )
        ff = ad.affine(
            ad.dense(out, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"]),
            params[f"{prefix}.ff.w2"],
            params[f"{prefix}.ff.b2"],
        )
        ff = drop(ff)
        out = ad.layer_norm(
            ad.add(out, ff),
            params[f"{prefix}.ln2.gain"],
            params[f"{prefix}.ln2.bias"],
            config.ln_eps,
        )
    return out


def mha_x_block(x_fe, y, mask, params, config, drop=_no_dropout, capture=None):
    """Index-only channel: self-attention on x features, final layer
    attends with the raw observations as values."""
    x_t = Tensor(x_fe)
    return _run_channel(
        "x", x_t, x_t, x_t, Tensor(y), mask, params, config, drop, capture
    )


def mha_xy_block(queries, keys, values, mask, params, config, drop=_no_dropout):
    """Joint channel: masked self-attention over the assembled feature rows.

    The trailing label column of the key rows is constant, so the key
    projection consumes everything before it.
    """
    key_t = Tensor(keys[..., :-1])
    return _run_channel(
        "xy", Tensor(queries), key_t, Tensor(values), None, mask,
        params, config, drop,
    )


def sigma_transform(raw, sigma_floor):
    """Strictly positive scale: floor + (1 - floor) * softplus(raw)."""
    return ad.add(ad.mul(ad.softplus(raw), 1.0 - sigma_floor), sigma_floor)


def forward_features(batch, fp, params, config, dropout=0.0, dropout_rng=None):
    """Network pass over a precomputed feature pack."""
    drop = make_dropout(dropout, dropout_rng)
    queries, keys, values = assemble_qkv_xy(fp)
    o_xy = mha_xy_block(queries, keys, values, fp.mask, params, config, drop)
    if config.use_mha_x:
        o_x = mha_x_block(
            assemble_x_features(fp), batch.y, fp.mask, params, config, drop
        )
        merged = ad.concat_last([o_x, o_xy])
    else:
        merged = o_xy
    head = ad.affine(merged, params["out.w"], params["out.b"])
    head_t = ad.narrow(head, 1, batch.n_context, batch.n_target)
    a = ad.narrow(head_t, -1, 0, 1)
    b = ad.narrow(head_t, -1, 1, 1)
    mu = local_taylor_mean(a, fp, config.p) if config.use_local_taylor else a
    sigma = sigma_transform(b, config.sigma_floor)
    if not (np.isfinite(mu.data).all() and np.isfinite(sigma.data).all()):
        raise NumericError(
            f"non-finite prediction (batch_size={batch.batch_size}, "
            f"n_context={batch.n_context}, n_target={batch.n_target})"
        )
    return GaussianPrediction(mu, sigma, config.sigma_floor)


def forward(batch, params, config, rng, dropout=0.0, dropout_rng=None):
    """Full pass: extract features, run both channels, emit (mu, sigma)
    for the target rows in batch order."""
    fp = representation_extractor(
        batch,
        config.q_effective,
        rng,
        config.d_embed,
        config.delta_t,
        config.t_max,
        config.include_raw_x,
    )
    return forward_features(batch, fp, params, config, dropout, dropout_rng)


def gaussian_nll(pred, y_target):
    """Mean negative log density over batch and target points."""
    y = np.asarray(y_target, dtype=np.float64)
    if y.shape != pred.mu.data.shape:
        raise ShapeError(
            f"gaussian_nll: targets {y.shape} vs predictions {pred.mu.data.shape}"
        )
    if pred.sigma_floor > 0.0 and (
        pred.sigma.data < pred.sigma_floor * (1.0 - 1e-12)
    ).any():
        raise ContractError("gaussian_nll: sigma below the configured floor")
    z = ad.div(ad.sub(Tensor(y), pred.mu), pred.sigma)
    elems = ad.add(
        ad.add(ad.log(pred.sigma), ad.HALF_LOG_2PI), ad.mul(ad.mul(z, z), 0.5)
    )
    return ad.mean_all(elems)


def gaussian_nll_values(mu, sigma, y):
    """Per-point negative log density, plain arrays."""
    z = (y - mu) / sigma
    return np.log(sigma) + ad.HALF_LOG_2PI + 0.5 * z * z


def matched_config(full_config, use_mha_x, use_local_taylor, tolerance=0.05):
    """Variant config with flags switched and widths adjusted so the
    parameter count matches the full model within `tolerance`.

    d_model is scanned over multiples of n_heads and d_ff fine-tunes the
    remainder, since the count is linear in d_ff.
    """
    target = parameter_count(full_config)
    if use_mha_x and use_local_taylor:
        return full_config
    best = None
    for d_model in range(
        full_config.n_heads, 4 * full_config.d_model + 1, full_config.n_heads
    ):
        trial = replace(
            full_config,
            d_model=d_model,
            d_ff=1,
            use_mha_x=use_mha_x,
            use_local_taylor=use_local_taylor,
        )
        c1 = parameter_count(trial)
        slope = parameter_count(replace(trial, d_ff=2)) - c1
        guess = max(1, round((target - c1) / slope) + 1)
        for d_ff in (guess - 1, guess, guess + 1):
            if d_ff < 1:
                continue
            count = parameter_count(replace(trial, d_ff=d_ff))
            score = abs(count - target)
            if best is None or score < best[0]:
                best = (score, replace(trial, d_ff=d_ff), count)
    score, config, count = best
    if score > tolerance * target:
        raise ConfigError(
            f"could not match parameter count {target} within "
            f"{tolerance:.0%}: closest variant has {count}"
        )
    return config


def save_checkpoint(path, params, config, meta=None):
    """Plain-text manifest (config, meta, parameter table) followed by
    little-endian float64 parameter blocks in manifest order."""
    shapes = param_shapes(config)
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
    payload = {"config": config.to_dict(), "meta": meta or {}}
    buf.write((json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))
    for name, shape in shapes:
        if name not in params:
            raise ContractError(f"checkpoint: missing parameter {name}")
        if params[name].data.shape != shape:
            raise ContractError(
                f"checkpoint: parameter {name} has shape "
                f"{params[name].data.shape}, expected {shape}"
            )
        dims = " ".join(str(s) for s in shape)
        buf.write(f"param {name} {dims}\n".encode("ascii"))
    buf.write(b"data\n")
    for name, _ in shapes:
        buf.write(params[name].data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, meta).

    Shapes in the file are validated against the stored config.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {magic[1]}")
        payload = json.loads(fh.readline().decode("utf-8"))
        config = ModelConfig.from_dict(payload["config"])
        listed = []
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "data":
                break
            if not line.startswith("param "):
                raise ConfigError(f"{path}: malformed manifest line {line!r}")
            fields = line.split()
            listed.append((fields[1], tuple(int(s) for s in fields[2:])))
        raw = fh.read()
    expected_shapes = param_shapes(config)
    if listed != [(n, s) for n, s in expected_shapes]:
        raise ConfigError(f"{path}: parameter table does not match the config")
    total = sum(int(np.prod(s)) for _, s in listed) * 8
    if len(raw) != total:
        raise ConfigError(
            f"{path}: expected {total} payload bytes, found {len(raw)}"
        )
    params = {}
    offset = 0
    for name, shape in listed:
        n = int(np.prod(shape))
        block = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        params[name] = Tensor(block.reshape(shape).copy(), requires_grad=True)
        offset += n * 8
    return params, config, payload["meta"]
