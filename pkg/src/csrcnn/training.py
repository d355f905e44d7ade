"""SGD with momentum, the step-decay learning-rate schedule and the train loops."""

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import CONV_GROUP, DECONV_GROUP
from .model import cascade_backward


def lr_at(a0, m, n):
    """Learning rate after ``m`` of ``n`` iterations: a0 * 0.1**floor(m / (0.8 n)).

    The exponent is computed as the integer ``(5 m) // (4 n)`` so the switch
    happens exactly at m = ceil(0.8 n).
    """
    if n <= 0:
        raise ConfigError(f"total iterations must be positive, got {n}")
    if m < 0:
        raise ConfigError(f"iteration index must be non-negative, got {m}")
    return a0 / 10 ** ((5 * m) // (4 * n))


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 1000
    lr_conv: float = 1e-3
    lr_deconv: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    phase: str = "scratch"

    def validate(self):
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.lr_conv <= 0 or self.lr_deconv <= 0:
            raise ConfigError("base learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.phase not in ("scratch", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        return self

    @property
    def base_lr(self):
        return {CONV_GROUP: self.lr_conv, DECONV_GROUP: self.lr_deconv}

    def lrs(self, m):
        return {g: lr_at(a0, m, self.total_iters) for g, a0 in self.base_lr.items()}


class HistoryRow(NamedTuple):
    iter: int
    total_loss: float
    stage_losses: tuple
    lr_conv: float
    lr_deconv: float
    phase: str = "scratch"


def sgd_step(model, config, m):
    """One momentum update at iteration ``m``, then clear the gradients."""
    lrs = config.lrs(m)
    mu = config.momentum
    for _, p in model.named_layers():
        lr = lrs[p.lr_group]
        for name, value, grad in p.params():
            v = p.velocity[name]
            v *= mu
            v -= lr * grad
            value += v
        p.zero_grad()


def batch_indices(num_samples, batch_size, seed, m):
    """Sample indices of batch ``m``: consecutive slices of per-epoch permutations.

    Epoch ``e`` is ordered by ``default_rng((seed, e))``, so any batch can be
    reproduced from the iteration counter alone.
    """
    start = m * batch_size
    idx = []
    epoch = None
    for pos in range(start, start + batch_size):
        e, off = divmod(pos, num_samples)
        if e != epoch:
            perm = np.random.default_rng((seed, e)).permutation(num_samples)
            epoch = e
        idx.append(int(perm[off]))
    return idx


def collate(samples, dtype=np.float32):
    x = np.stack([s.input for s in samples]).astype(dtype, copy=False)
    k = len(samples[0].targets)
    targets = [np.stack([s.targets[i] for s in samples]).astype(dtype, copy=False)
               for i in range(k)]
    return x, targets


def train(model, dataset, config, iters=None, callback=None):
    """Train from ``model.iteration`` towards ``config.total_iters``.

    ``iters`` caps the number of steps taken in this call (used to resume from
    checkpoints). Returns one :class:`HistoryRow` per step; the loss is the
    one computed on that step's batch before the update.
    """
    config.validate()
    n = config.total_iters
    stop = n if iters is None else min(n, model.iteration + iters)
    history = []
    if model.iteration >= stop:
        return history
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    if len(dataset[0].targets) != model.stage_count:
        raise ShapeError(f"samples carry {len(dataset[0].targets)} targets "
                         f"for a {model.stage_count}-stage model")
    while model.iteration < stop:
        m = model.iteration
        idx = batch_indices(len(dataset), config.batch_size, config.seed, m)
        x, targets = collate([dataset[i] for i in idx], model.dtype)
        res = cascade_backward(model, x, targets)
        lrs = config.lrs(m)
        row = HistoryRow(m, res.total, tuple(res.per_stage),
                         lrs[CONV_GROUP], lrs[DECONV_GROUP], config.phase)
        history.append(row)
        sgd_step(model, config, m)
        model.iteration = m + 1
        if callback is not None:
            callback(row)
    return history


def two_phase_train(model, set91, general100, config, finetune_iters, callback=None):
    """Train from scratch on ``set91``, then fine-tune on the union.

    The fine-tune phase halves both base learning rates and restarts the
    schedule over ``finetune_iters`` iterations.
    """
    history = train(model, set91, replace(config, phase="scratch"), callback=callback)
    if finetune_iters <= 0:
        return history
    phase2 = replace(config, total_iters=finetune_iters, phase="finetune",
                     lr_conv=config.lr_conv / 2, lr_deconv=config.lr_deconv / 2)
    model.iteration = 0
    union = list(set91) + list(general100)
    history += train(model, union, phase2, callback=callback)
    return history


def format_history(rows, stage_count=None):
    """Plain-text table: iter, phase, total loss, per-stage losses, both lrs."""
    if stage_count is None:
        stage_count = len(rows[0].stage_losses) if rows else 0
    head = ["iter", "phase", "loss"] + [f"L{k}" for k in range(stage_count)] + ["lr_conv", "lr_deconv"]
    lines = ["\t".join(head)]
    for r in rows:
        cells = [str(r.iter), r.phase, repr(r.total_loss)]
        cells += [repr(v) for v in r.stage_losses]
        cells += [repr(r.lr_conv), repr(r.lr_deconv)]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_history(text):
    lines = text.strip().splitlines()
    k = len(lines[0].split("\t")) - 5
    rows = []
    for line in lines[1:]:
        c = line.split("\t")
        rows.append(HistoryRow(int(c[0]), float(c[2]), tuple(float(v) for v in c[3:3 + k]),
                               float(c[3 + k]), float(c[4 + k]), c[1]))
    return rows
