"""FSRCNN stages chained into a multi-scale cascade, with the summed L1 loss.

A stage is a plain list of :class:`~csrcnn.layers.LayerParams`::

    Conv(5, d, 1) PReLU  Conv(1, s, d) PReLU  [Conv(3, s, s) PReLU] x m
    Conv(1, d, s) PReLU  DeConv(9, 1, d) stride u

Stage ``k`` of a cascade upsamples by ``u_k``; each stage output is both
scored against its own target and fed to the next stage.
"""

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .tensor import mean_abs_diff


@dataclass(frozen=True)
class StageConfig:
    d: int = 56
    s: int = 12
    m: int = 4
    upscale: int = 2

    def validate(self):
        if self.d < 1 or self.s < 1 or self.m < 0:
            raise ConfigError(f"invalid layer widths in {self}")
        if self.s > self.d:
            raise ConfigError(f"shrink width s={self.s} exceeds feature width d={self.d}")
        if self.upscale < 2:
            raise ConfigError(f"stage upscale must be >= 2, got {self.upscale}")
        return self


def build_stage(cfg, seed, dtype=np.float32):
    """Assemble and MSRA-initialize one FSRCNN stage."""
    cfg.validate()
    d, s = cfg.d, cfg.s
    stage = [L.LayerParams.conv(1, d, 5, dtype), L.LayerParams.prelu(d, dtype),
             L.LayerParams.conv(d, s, 1, dtype), L.LayerParams.prelu(s, dtype)]
    for _ in range(cfg.m):
        stage += [L.LayerParams.conv(s, s, 3, dtype), L.LayerParams.prelu(s, dtype)]
    stage += [L.LayerParams.conv(s, d, 1, dtype), L.LayerParams.prelu(d, dtype),
              L.LayerParams.deconv(d, 1, 9, cfg.upscale, dtype=dtype)]
    for i, p in enumerate(stage):
        L.msra_init(p, (seed, i))
    return stage


def stage_param_count(cfg):
    """Closed form: sum of k*k*in*out + out over weighted layers, plus slopes."""
    d, s, m = cfg.d, cfg.s, cfg.m
    convs = [(5, 1, d), (1, d, s)] + [(3, s, s)] * m + [(1, s, d), (9, d, 1)]
    prelu = 2 * d + (m + 1) * s
    return sum(k * k * i * o + o for k, i, o in convs) + prelu


@dataclass(eq=False)
class CascadeModel:
    configs: tuple
    stages: list
    seed: int = 0
    iteration: int = 0

    @property
    def stage_count(self):
        return len(self.stages)

    @property
    def upscales(self):
        return tuple(c.upscale for c in self.configs)

    @property
    def total_upscale(self):
        return int(np.prod(self.upscales))

    @property
    def scale_ratios(self):
        """r_0..r_K as exact fractions of the HR size (r_K == 1)."""
        ratios = [Fraction(1)]
        for u in reversed(self.upscales):
            ratios.insert(0, ratios[0] / u)
        return tuple(ratios)

    @property
    def dtype(self):
        return self.stages[0][0].weight.dtype

    def named_layers(self):
        for k, stage in enumerate(self.stages):
            for i, p in enumerate(stage):
                yield f"stage{k}.layer{i}", p

    def named_params(self):
        """Yield ``(name, value, grad, velocity)`` for every trainable array."""
        for prefix, p in self.named_layers():
            for name, value, grad in p.params():
                yield f"{prefix}.{name}", value, grad, p.velocity[name]

    def zero_grad(self):
        for _, p in self.named_layers():
            p.zero_grad()

    def num_params(self):
        return sum(v.size for _, v, _, _ in self.named_params())

    def astype(self, dtype):
        return replace(self, stages=[[p.astype(dtype) for p in st] for st in self.stages])


def build_cascade(configs=None, seed=0, dtype=np.float32, stage_count=3):
    """Build a cascade; ``configs`` defaults to ``stage_count`` x StageConfig()."""
    if configs is None:
        configs = [StageConfig()] * stage_count
    configs = tuple(c.validate() for c in configs)
    if not configs:
        raise ConfigError("a cascade needs at least one stage")
    seeds = np.random.SeedSequence(seed).spawn(len(configs))
    stages = [build_stage(c, int(ss.generate_state(1)[0]), dtype)
              for c, ss in zip(configs, seeds)]
    return CascadeModel(configs, stages, seed=seed)


def ablation_upscales(stage_count, factor):
    """Per-stage upscales for a K-stage net evaluated at ``factor``.

    Stages upscale by 2; when 2**K falls short of ``factor`` the first stage
    absorbs the remainder (one x4 stage for a single-stage net at x4).
    """
    if stage_count < 1:
        raise ConfigError("stage_count must be >= 1")
    rest = 2 ** (stage_count - 1)
    if factor <= 2 * rest:
        return (2,) * stage_count
    first = Fraction(factor) / rest
    if first.denominator != 1:
        raise ConfigError(f"cannot split factor {factor} over {stage_count} stages")
    return (int(first),) + (2,) * (stage_count - 1)


def stage_forward(stage, x, cache=None):
    for p in stage:
        if cache is not None:
            cache.append(x)
        x = L.forward(x, p)
    return x


def stage_backward(stage, cache, grad):
    for p, x in zip(reversed(stage), reversed(cache)):
        grad = L.backward(x, p, grad)
    return grad


def cascade_forward(model, x, start=0, caches=None):
    """Run stages ``start..K-1``; return every stage output in order.

    ``caches``, when given, receives one list of layer inputs per stage run.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"cascade input must be (n, 1, h, w), got {x.shape}")
    x = np.asarray(x, dtype=model.dtype)
    outputs = []
    for stage in model.stages[start:]:
        cache = None
        if caches is not None:
            cache = []
            caches.append(cache)
        x = stage_forward(stage, x, cache)
        outputs.append(x)
    return outputs


def stage_loss(pred, target):
    """Mean absolute pixel error; over a batch this is the mean of per-image means."""
    return mean_abs_diff(pred, target)


def stage_loss_grad(pred, target):
    # np.sign(0) == 0: the subgradient at an exact match is zero.
    return (np.sign(pred - target) / pred.size).astype(pred.dtype)


def total_loss(outputs, targets):
    """Return ``(sum of stage losses, per-stage list)``, summed in stage order."""
    if len(outputs) != len(targets):
        raise ShapeError(f"{len(outputs)} outputs vs {len(targets)} targets")
    per_stage = [stage_loss(o, t) for o, t in zip(outputs, targets)]
    total = 0.0
    for value in per_stage:
        total += value
    return total, per_stage


class BackwardResult(NamedTuple):
    total: float
    per_stage: list
    grad_input: np.ndarray


def cascade_backward(model, x, targets, stage_weights=None):
    """Forward, score and backpropagate through the whole cascade.

    Parameter gradients are accumulated into the layers' buffers. Each stage
    output receives its own loss gradient plus whatever flows back from the
    later stages it feeds. ``stage_weights`` scales the per-stage loss terms
    (all ones by default).
    """
    caches = []
    outputs = cascade_forward(model, x, caches=caches)
    targets = [np.asarray(t, dtype=model.dtype) for t in targets]
    for o, t in zip(outputs, targets):
        if o.shape != t.shape:
            raise ShapeError(f"stage output {o.shape} does not match target {t.shape}")
    total, per_stage = total_loss(outputs, targets)
    weights = stage_weights or [1.0] * len(outputs)

    grad = None
    for k in reversed(range(len(outputs))):
        direct = stage_loss_grad(outputs[k], targets[k]) * weights[k]
        grad = direct if grad is None else grad + direct
        grad = stage_backward(model.stages[k], caches[k], grad)
    return BackwardResult(total, per_stage, grad)


def gradcheck_cascade(model, x, targets, epsilon=1e-4):
    """Finite-difference check of every parameter and input pixel (float64)."""
    arrays = [x] + [v for _, v, _, _ in model.named_params()]

    def loss():
        return total_loss(cascade_forward(model, x), targets)[0]

    def grads():
        model.zero_grad()
        res = cascade_backward(model, x, targets)
        return [res.grad_input] + [g for _, _, g, _ in model.named_params()]

    return L.gradcheck(loss, grads, arrays, epsilon)


TOY_STAGE = StageConfig(d=4, s=2, m=1)


def toy_gradcheck_problem(seed=0, stage_count=3, size=6, margin=0.05):
    """A small float64 cascade plus input/targets kept away from every kink.

    Conv biases feeding a PReLU are shifted per channel so that each channel's
    activations sit at least ``margin`` above zero (even channels) or below
    zero (odd channels), exercising both branches. Targets are offset from the
    outputs by at least ``margin`` so the L1 loss is smooth too.
    """
    rng = np.random.default_rng(seed)
    model = build_cascade([TOY_STAGE] * stage_count, seed=seed, dtype=np.float64)
    x = rng.random((1, 1, size, size))
    h = x
    for stage in model.stages:
        for p, nxt in zip(stage, stage[1:] + [None]):
            if p.kind == L.CONV and nxt is not None and nxt.kind == L.PRELU:
                p.bias[...] = 0
                pre = L.forward(h, p)
                lo, hi = pre.min(axis=(0, 2, 3)), pre.max(axis=(0, 2, 3))
                even = np.arange(p.bias.size) % 2 == 0
                p.bias[...] = np.where(even, margin - lo, -margin - hi)
            h = L.forward(h, p)
    targets = []
    for out in cascade_forward(model, x):
        offset = rng.uniform(margin, 10 * margin, out.shape)
        targets.append(out + offset * rng.choice([-1, 1], out.shape))
    return model, x, targets


def prelu_input_margin(model, x):
    """Smallest |activation input| over every PReLU layer for input ``x``."""
    caches = []
    cascade_forward(model, x, caches=caches)
    return min(float(np.abs(inp).min())
               for stage, cache in zip(model.stages, caches)
               for p, inp in zip(stage, cache) if p.kind == L.PRELU)


class TrainSample(NamedTuple):
    """LR input plus the ladder of targets, each shaped (1, h, w)."""

    input: np.ndarray
    targets: tuple
    provenance: str = ""
