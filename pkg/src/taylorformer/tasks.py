"""Task containers, persistence and batch assembly.

A task is a sequence of (x, y) pairs laid out context-first: positions
0..n_context-1 are observed, the rest are targets. Generated task sets are
persisted as a one-line plain-text manifest followed by little-endian
float64 records, one [n_context, x..., y...] block per sequence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

TASKFILE_MAGIC = "taylorformer-tasks"
TASKFILE_VERSION = 1

# Stream labels so every consumer of randomness gets an independent,
# reproducible generator derived from one master seed.
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_STEP = 3
STREAM_TIES = 4
STREAM_SEQUENCE = 5


def rng_stream(master_seed, *key):
    """Independent generator derived from (master seed, key ints)."""
    parts = [int(master_seed), *(int(k) for k in key)]
    if any(p < 0 for p in parts):
        raise ContractError(f"rng stream keys must be non-negative, got {parts}")
    return np.random.default_rng(np.random.SeedSequence(parts))


@dataclass
class TaskBatch:
    """A batch of sequences sharing one context/target split.

    x, y: float64 arrays of shape [B, length, 1], context rows first.
    """

    x: np.ndarray
    y: np.ndarray
    n_context: int
    n_target: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.n_context < 1 or self.n_target < 1:
            raise ContractError(
                f"need n_context >= 1 and n_target >= 1, got "
                f"({self.n_context}, {self.n_target})"
            )
        expect = (self.x.shape[0], self.n_context + self.n_target, 1)
        if self.x.shape != expect or self.y.shape != expect:
            raise ContractError(
                f"task arrays must have shape {expect}, got x {self.x.shape} "
                f"and y {self.y.shape}"
            )
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ContractError("task arrays must be finite")

    @property
    def length(self):
        return self.n_context + self.n_target

    @property
    def batch_size(self):
        return self.x.shape[0]

    def target_y(self):
        return self.y[:, self.n_context :, :]

    def with_split(self, n_context):
        """Same data, reinterpreted with a different context length."""
        return TaskBatch(self.x, self.y, n_context, self.length - n_context)


def stack_tasks(tasks):
    """Stack single-split tasks into one batch."""
    first = tasks[0]
    for t in tasks[1:]:
        if (t.n_context, t.n_target) != (first.n_context, first.n_target):
            raise ContractError("stack_tasks: mixed context/target splits")
    return TaskBatch(
        np.concatenate([t.x for t in tasks], axis=0),
        np.concatenate([t.y for t in tasks], axis=0),
        first.n_context,
        first.n_target,
    )


def permute_targets(batch, perm):
    """Apply one permutation to the target rows of every sequence."""
    perm = np.asarray(perm)
    if perm.shape != (batch.n_target,):
        raise ContractError(
            f"permutation length {perm.shape} does not match n_target "
            f"{batch.n_target}"
        )
    x = batch.x.copy()
    y = batch.y.copy()
    nc = batch.n_context
    x[:, nc:] = batch.x[:, nc:][:, perm]
    y[:, nc:] = batch.y[:, nc:][:, perm]
    return TaskBatch(x, y, batch.n_context, batch.n_target)


def save_tasks(path, tasks, kind, seed):
    """Write sequences to the flat binary task format."""
    length = tasks[0].length
    with open(path, "wb") as fh:
        header = (
            f"{TASKFILE_MAGIC} {TASKFILE_VERSION} kind={kind} "
            f"count={len(tasks)} length={length} seed={seed}\n"
        )
        fh.write(header.encode("ascii"))
        for t in tasks:
            if t.batch_size != 1:
                raise ContractError("task files store one sequence per record")
            if t.length != length:
                raise ContractError("task files require a uniform sequence length")
            rec = np.concatenate(
                [[float(t.n_context)], t.x[0, :, 0], t.y[0, :, 0]]
            ).astype("<f8")
            fh.write(rec.tobytes())


def load_tasks(path):
    """Read a task file back into a list of single-sequence batches."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        fields = header.split()
        if len(fields) < 2 or fields[0] != TASKFILE_MAGIC:
            raise DataError(f"{path}: not a task file (header {header[:40]!r})")
        if int(fields[1]) != TASKFILE_VERSION:
            raise DataError(f"{path}: unsupported task file version {fields[1]}")
        meta = dict(f.split("=", 1) for f in fields[2:])
        count = int(meta["count"])
        length = int(meta["length"])
        raw = fh.read()
    rec_len = 1 + 2 * length
    expected = count * rec_len * 8
    if len(raw) != expected:
        raise DataError(
            f"{path}: expected {expected} payload bytes, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f8").reshape(count, rec_len)
    tasks = []
    for rec in flat:
        nc = int(rec[0])
        x = rec[1 : 1 + length].reshape(1, length, 1)
        y = rec[1 + length :].reshape(1, length, 1)
        tasks.append(TaskBatch(x.copy(), y.copy(), nc, length - nc))
    return tasks, meta


def context_size_range(tasks):
    """(lo, hi) of stored context sizes, or None when they are uniform."""
    sizes = {t.n_context for t in tasks}
    if len(sizes) == 1:
        return None
    return min(sizes), max(sizes)


def sample_training_batch(tasks, batch_size, rng, reroll_range=None):
    """Draw a training batch.

    Sequences are drawn with replacement. When the dataset holds mixed
    context sizes, the batch gets a fresh context size drawn uniformly from
    `reroll_range` so all members share one split; a uniform dataset is
    stacked as stored.
    """
    picks = rng.integers(0, len(tasks), size=batch_size)
    chosen = [tasks[int(i)] for i in picks]
    if reroll_range is not None:
        lo, hi = reroll_range
        nc = int(rng.integers(lo, hi + 1))
        chosen = [t.with_split(nc) for t in chosen]
    return stack_tasks(chosen)


def update_stream_hash(hasher, batch):
    """Feed one batch into a data-stream digest."""
    hasher.update(np.int64(batch.n_context).tobytes())
    hasher.update(batch.x.astype("<f8").tobytes())
    hasher.update(batch.y.astype("<f8").tobytes())


def stream_digest(batches):
    h = hashlib.sha256()
    for b in batches:
        update_stream_hash(h, b)
    return h.hexdigest()
