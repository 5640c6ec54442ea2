"""Local Taylor feature machinery.

For every position the extractor finds the nearest already-seen neighbour
(context points, plus earlier targets for target rows), takes its value,
the index/value deltas against it and a finite-difference slope estimate,
and packs them next to a continuous positional encoding of the index.
These features feed the attention channels; the neighbour value (and
optionally the slope term) is also added back onto the network's mean
output, so the network only has to model the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

# Below this index gap the slope estimate is set to zero instead of
# dividing by a near-zero delta.
DEGENERATE_DX = 1e-8


def positional_encode(t, d, delta_t, t_max):
    """Interleaved sin/cos encoding of continuous indices.

    Pair i of the output is (sin(a_i), cos(a_i)) with
    a_i = (t / delta_t) / (t_max / delta_t) ** (2 i / d).
    t has shape [..., 1]; the result replaces the last axis with d.
    """
    if d <= 0 or d % 2 != 0:
        raise ConfigError(f"embedding width must be positive and even, got {d}")
    if delta_t <= 0 or t_max <= 0:
        raise ConfigError(
            f"encoding scales must be positive, got delta_t={delta_t}, "
            f"t_max={t_max}"
        )
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(d // 2, dtype=np.float64)
    arg = (t / delta_t) / (t_max / delta_t) ** (2.0 * k / d)
    out = np.empty(t.shape[:-1] + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def build_mask(n_context, n_target):
    """Attention mask: context rows see all of the context and nothing
    else; target row i sees the context plus strictly earlier targets.

    Boolean [length, length], True = may attend. Targets exclude
    themselves: their own key row carries their true value.
    """
    if n_context < 1 or n_target < 1:
        raise ConfigError(
            f"mask needs n_context >= 1 and n_target >= 1, got "
            f"({n_context}, {n_target})"
        )
    length = n_context + n_target
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return ((i < n_context) & (j < n_context)) | ((i >= n_context) & (j < i))


def neighbour_eligibility(n_context, n_target):
    """Which positions may serve as a nearest seen neighbour: like the
    attention mask, except context rows exclude themselves."""
    length = n_context + n_target
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return ((i < n_context) & (j < n_context) & (j != i)) | (
        (i >= n_context) & (j < i)
    )


def nearest_seen_neighbour(x, n_context, i, rng):
    """Index of the closest eligible point to position i.

    Eligible points are the other context positions (for context i) or the
    context plus strictly earlier targets (for target i). Exact distance
    ties are broken uniformly at random.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if i < n_context:
        candidates = [j for j in range(n_context) if j != i]
    else:
        candidates = list(range(i))
    if not candidates:
        raise ContractError(
            f"position {i} has no eligible neighbour (n_context={n_context})"
        )
    dist = np.abs(x[candidates] - x[i])
    best = dist.min()
    tied = [c for c, dc in zip(candidates, dist) if dc == best]
    if len(tied) == 1:
        return tied[0]
    return int(tied[rng.integers(len(tied))])


def neighbour_map(x, n_context, n_target, rng):
    """Vectorized nearest-seen-neighbour indices for a batch.

    x: [B, length, 1]. Returns int array [B, length]; -1 marks the single
    degenerate case of a lone context point, which has no neighbour.
    """
    xs = np.asarray(x, dtype=np.float64)[..., 0]
    batch, length = xs.shape
    eligible = neighbour_eligibility(n_context, n_target)
    dist = np.abs(xs[:, :, None] - xs[:, None, :])
    dist = np.where(eligible[None, :, :], dist, np.inf)
    idx = np.argmin(dist, axis=2)
    row_min = dist.min(axis=2)
    no_neighbour = ~np.isfinite(row_min)
    idx[no_neighbour] = -1
    tie_counts = np.where(
        no_neighbour, 1, (dist == row_min[:, :, None]).sum(axis=2)
    )
    for b, i in zip(*np.nonzero(tie_counts > 1)):
        tied = np.nonzero(dist[b, i] == row_min[b, i])[0]
        idx[b, i] = tied[rng.integers(len(tied))]
    return idx


@dataclass
class FeaturePack:
    """Extractor outputs for one batch.

    x_fe / y_fe / y_seen follow the attention input layout; y_near,
    dx_near and d_near keep the raw Taylor terms for the mean residual.
    y_fe holds true values everywhere; query assembly zeroes target rows.
    """

    n_context: int
    n_target: int
    neighbour_index: np.ndarray  # [B, L]
    x_fe: np.ndarray  # [B, L, d (+1) + 2q]
    y_fe: np.ndarray  # [B, L, 1 + 2q]
    y_seen: np.ndarray  # [B, L, 2q]
    label: np.ndarray  # [B, L, 1], 1 = context
    mask: np.ndarray  # [L, L] bool
    y_near: np.ndarray  # [B, L, 1]
    dx_near: np.ndarray  # [B, L, 1]
    d_near: np.ndarray  # [B, L, 1]


def representation_extractor(
    batch, q, rng, d_embed, delta_t, t_max, include_raw_x=False
):
    """Build the per-position feature pack for a batch.

    q = 0 keeps only the positional encoding (plus optionally raw x); q = 1
    adds the neighbour value/delta/slope features.
    """
    if q not in (0, 1):
        raise ConfigError(f"q must be 0 or 1, got {q}")
    x, y = batch.x, batch.y
    nc, nt = batch.n_context, batch.n_target
    b, length, _ = x.shape

    idx = neighbour_map(x, nc, nt, rng)
    safe = np.maximum(idx, 0)
    has = idx >= 0
    xs, ys = x[..., 0], y[..., 0]
    x_near = np.where(has, np.take_along_axis(xs, safe, axis=1), 0.0)
    y_near = np.where(has, np.take_along_axis(ys, safe, axis=1), 0.0)
    dx = np.where(has, xs - x_near, 0.0)
    dy = np.where(has, ys - y_near, 0.0)
    tiny = np.abs(dx) < DEGENERATE_DX
    slope = np.where(tiny, 0.0, dy / np.where(tiny, 1.0, dx))
    d_near = np.where(has, np.take_along_axis(slope, safe, axis=1), 0.0)

    pe = positional_encode(x, d_embed, delta_t, t_max)
    x_parts = [pe]
    if include_raw_x:
        x_parts.append(x)
    y_parts = [y]
    if q == 1:
        x_parts += [x_near[..., None], dx[..., None]]
        y_parts += [dy[..., None], slope[..., None]]
        y_seen = np.concatenate([y_near[..., None], d_near[..., None]], axis=-1)
    else:
        y_seen = np.zeros((b, length, 0))

    label = np.zeros((b, length, 1))
    label[:, :nc, :] = 1.0
    return FeaturePack(
        n_context=nc,
        n_target=nt,
        neighbour_index=idx,
        x_fe=np.concatenate(x_parts, axis=-1),
        y_fe=np.concatenate(y_parts, axis=-1),
        y_seen=y_seen,
        label=label,
        mask=build_mask(nc, nt),
        y_near=y_near[..., None],
        dx_near=dx[..., None],
        d_near=d_near[..., None],
    )


def assemble_qkv_xy(fp):
    """Query/key/value rows for the joint channel.

    Queries: (x_fe, y_fe, y_seen, 1) on context rows, (x_fe, 0, y_seen, 0)
    on target rows so a target's own value never enters its query. Keys and
    values carry the full features everywhere; the mask keeps later rows
    invisible.
    """
    masked_y_fe = np.where(fp.label > 0, fp.y_fe, 0.0)
    queries = np.concatenate([fp.x_fe, masked_y_fe, fp.y_seen, fp.label], axis=-1)
    ones = np.ones_like(fp.label)
    keys = np.concatenate([fp.x_fe, fp.y_fe, fp.y_seen, ones], axis=-1)
    return queries, keys, keys.copy()


def assemble_x_features(fp):
    """First-layer Q = K = V of the index-only channel."""
    return fp.x_fe


def local_taylor_mean(a, fp, p):
    """Add the hard-coded Taylor terms onto the network's mean output.

    a: network output on target rows, [B, n_target, 1]. p = 0 adds the
    nearest seen value; p = 1 adds the slope term as well (exact for
    linear data).
    """
    if p not in (0, 1):
        raise ConfigError(f"p must be 0 or 1, got {p}")
    nc = fp.n_context
    term = fp.y_near[:, nc:, :]
    if p == 1:
        term = term + fp.dx_near[:, nc:, :] * fp.d_near[:, nc:, :]
    return ad.add(a, ad.Tensor(term))
