"""Convolution, transposed convolution and PReLU with hand-written gradients.

Every layer is described by a :class:`LayerParams` holding its parameters,
gradient buffers and SGD velocity buffers. Forward and backward passes are
free functions taking the layer input explicitly, so a network only has to
remember the inputs it fed each layer.

Convolutions are cross-correlations (no kernel flip). Both directions are
lowered to one matrix product over im2col patch columns; transposed
convolution reuses the same column layout with the roles of gather and
scatter swapped.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import pad2d

CONV = "conv"
DECONV = "deconv"
PRELU = "prelu"

CONV_GROUP = "conv_group"
DECONV_GROUP = "deconv_group"

PRELU_INIT = 0.25


@dataclass(eq=False)
class LayerParams:
    """Parameters, gradients and optimizer state of one layer.

    ``weight`` is (out_c, in_c, k, k) for a convolution and
    (in_c, out_c, k, k) for a transposed convolution. PReLU layers only carry
    ``slopes``.
    """

    kind: str
    weight: np.ndarray = None
    bias: np.ndarray = None
    slopes: np.ndarray = None
    stride: int = 1
    pad: int = 0
    out_pad: int = 0
    lr_group: str = CONV_GROUP
    grads: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.param_names():
            value = getattr(self, name)
            self.grads.setdefault(name, np.zeros_like(value))
            self.velocity.setdefault(name, np.zeros_like(value))

    @classmethod
    def conv(cls, in_c, out_c, k, dtype=np.float32):
        return cls(CONV,
                   weight=np.zeros((out_c, in_c, k, k), dtype=dtype),
                   bias=np.zeros(out_c, dtype=dtype),
                   pad=k // 2)

    @classmethod
    def deconv(cls, in_c, out_c, k, stride, pad=None, out_pad=None,
               dtype=np.float32):
        # Defaults make the output exactly ``stride`` times the input for odd k.
        pad = (k - 1) // 2 if pad is None else pad
        out_pad = stride - 1 if out_pad is None else out_pad
        return cls(DECONV,
                   weight=np.zeros((in_c, out_c, k, k), dtype=dtype),
                   bias=np.zeros(out_c, dtype=dtype),
                   stride=stride, pad=pad, out_pad=out_pad,
                   lr_group=DECONV_GROUP)

    @classmethod
    def prelu(cls, channels, dtype=np.float32):
        return cls(PRELU, slopes=np.full(channels, PRELU_INIT, dtype=dtype))

    @property
    def kernel_size(self):
        return None if self.weight is None else self.weight.shape[-1]

    @property
    def in_channels(self):
        if self.kind == PRELU:
            return self.slopes.shape[0]
        return self.weight.shape[1] if self.kind == CONV else self.weight.shape[0]

    @property
    def out_channels(self):
        if self.kind == PRELU:
            return self.slopes.shape[0]
        return self.weight.shape[0] if self.kind == CONV else self.weight.shape[1]

    def param_names(self):
        if self.kind == PRELU:
            return ("slopes",)
        return ("weight", "bias")

    def params(self):
        """Yield ``(name, value, grad)`` for every trainable array."""
        for name in self.param_names():
            yield name, getattr(self, name), self.grads[name]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def num_params(self):
        return sum(v.size for _, v, _ in self.params())

    def astype(self, dtype):
        """Return a copy with every buffer cast to ``dtype``."""
        cast = lambda a: None if a is None else a.astype(dtype)
        return LayerParams(
            self.kind, cast(self.weight), cast(self.bias), cast(self.slopes),
            self.stride, self.pad, self.out_pad, self.lr_group,
            {k: cast(v) for k, v in self.grads.items()},
            {k: cast(v) for k, v in self.velocity.items()})


def conv_output_size(size, k, pad, stride=1):
    return (size + 2 * pad - k) // stride + 1


def deconv_output_size(size, k, stride, pad, out_pad):
    return (size - 1) * stride - 2 * pad + k + out_pad


def _im2col(xp, k, oh, ow, stride=1):
    """Gather (C*k*k, N*oh*ow) patch columns from a padded (N, C, H, W) array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    span_h = (oh - 1) * stride + 1
    span_w = (ow - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + span_h:stride, j:j + span_w:stride]
    return cols.reshape(c * k * k, n * oh * ow)


def _col2im(cols, shape, k, oh, ow, stride=1):
    """Scatter-add columns back; inverse bookkeeping of :func:`_im2col`.

    Returns a (C, N, H, W) array.
    """
    c, n, h, w = shape
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    span_h = (oh - 1) * stride + 1
    span_w = (ow - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, i, j]
    return out


def conv2d_forward(x, p, pad=None):
    pad = p.pad if pad is None else pad
    w = p.weight
    out_c, in_c, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != in_c:
        raise ShapeError(f"conv expects {in_c} input channels, got shape {x.shape}")
    xp = pad2d(x, pad) if pad else x
    n = x.shape[0]
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {k} with pad {pad}")
    out = w.reshape(out_c, -1) @ _im2col(xp, k, oh, ow)
    out = out.reshape(out_c, n, oh, ow).transpose(1, 0, 2, 3) + p.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, p, grad_out, pad=None, input_grad=True):
    """Return dL/dx and accumulate dL/dW, dL/db into ``p.grads``.

    With ``input_grad=False`` only the parameter gradients are computed and
    ``None`` is returned.
    """
    pad = p.pad if pad is None else pad
    w = p.weight
    out_c, in_c, k, _ = w.shape
    n, _, h, wd = x.shape
    oh, ow = conv_output_size(h, k, pad), conv_output_size(wd, k, pad)
    if grad_out.shape != (n, out_c, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, out_c, oh, ow)}")
    xp = pad2d(x, pad) if pad else x

    g2 = grad_out.transpose(1, 0, 2, 3).reshape(out_c, -1)
    p.grads["bias"] += g2.sum(axis=1)
    p.grads["weight"] += (g2 @ _im2col(xp, k, oh, ow).T).reshape(w.shape)
    if not input_grad:
        return None
    gcols = w.reshape(out_c, -1).T @ g2
    gxp = _col2im(gcols, (in_c, n, h + 2 * pad, wd + 2 * pad), k, oh, ow)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))


def _deconv_geometry(x_shape, p, stride, pad, out_pad):
    k = p.weight.shape[-1]
    h, w = x_shape[2:]
    oh = deconv_output_size(h, k, stride, pad, out_pad)
    ow = deconv_output_size(w, k, stride, pad, out_pad)
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"transposed convolution with k={k}, stride={stride}, pad={pad}, "
            f"out_pad={out_pad} gives non-positive output size {oh}x{ow}")
    # Extent of the uncropped scatter target, widened if out_pad reaches past it.
    fh = max((h - 1) * stride + k, pad + oh)
    fw = max((w - 1) * stride + k, pad + ow)
    return k, oh, ow, fh, fw


def deconv2d_forward(x, p, stride=None, pad=None, out_pad=None):
    stride = p.stride if stride is None else stride
    pad = p.pad if pad is None else pad
    out_pad = p.out_pad if out_pad is None else out_pad
    in_c, out_c = p.weight.shape[:2]
    if x.ndim != 4 or x.shape[1] != in_c:
        raise ShapeError(f"deconv expects {in_c} input channels, got shape {x.shape}")
    n, _, h, w = x.shape
    k, oh, ow, fh, fw = _deconv_geometry(x.shape, p, stride, pad, out_pad)

    # every input pixel times every kernel tap, scattered onto the stride grid
    taps = p.weight.reshape(in_c, -1).T @ x.transpose(1, 0, 2, 3).reshape(in_c, -1)
    full = _col2im(taps, (out_c, n, fh, fw), k, h, w, stride)
    out = full[:, :, pad:pad + oh, pad:pad + ow].transpose(1, 0, 2, 3)
    out = out + p.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv2d_backward(x, p, grad_out, stride=None, pad=None, out_pad=None):
    """Return dL/dx and accumulate dL/dW, dL/db into ``p.grads``.

    The input gradient is the strided correlation of ``grad_out`` with the
    weights, i.e. the forward pass of the convolution this layer transposes.
    """
    stride = p.stride if stride is None else stride
    pad = p.pad if pad is None else pad
    out_pad = p.out_pad if out_pad is None else out_pad
    in_c, out_c = p.weight.shape[:2]
    n, _, h, w = x.shape
    k, oh, ow, fh, fw = _deconv_geometry(x.shape, p, stride, pad, out_pad)
    if grad_out.shape != (n, out_c, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, out_c, oh, ow)}")

    gfull = np.zeros((n, out_c, fh, fw), dtype=grad_out.dtype)
    gfull[:, :, pad:pad + oh, pad:pad + ow] = grad_out
    cols = _im2col(gfull, k, h, w, stride)
    xt = x.transpose(1, 0, 2, 3).reshape(in_c, -1)

    p.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
    p.grads["weight"] += (xt @ cols.T).reshape(p.weight.shape)
    gx = p.weight.reshape(in_c, -1) @ cols
    return np.ascontiguousarray(gx.reshape(in_c, n, h, w).transpose(1, 0, 2, 3))


def prelu_forward(x, p):
    a = p.slopes
    if x.ndim != 4 or x.shape[1] != a.shape[0]:
        raise ShapeError(f"{a.shape[0]} PReLU slopes for input of shape {x.shape}")
    return np.where(x > 0, x, a[None, :, None, None] * x)


def prelu_backward(x, p, grad_out):
    """Subgradient at exactly zero takes the negative branch."""
    a = p.slopes
    if grad_out.shape != x.shape or x.shape[1] != a.shape[0]:
        raise ShapeError(f"grad_out {grad_out.shape} vs input {x.shape}, {a.shape[0]} slopes")
    pos = x > 0
    p.grads["slopes"] += np.where(pos, 0, grad_out * x).sum(axis=(0, 2, 3))
    return np.where(pos, grad_out, a[None, :, None, None] * grad_out)


def forward(x, p):
    """Dispatch on ``p.kind`` using the layer's stored geometry."""
    if p.kind == CONV:
        return conv2d_forward(x, p)
    if p.kind == DECONV:
        return deconv2d_forward(x, p)
    return prelu_forward(x, p)


def backward(x, p, grad_out):
    if p.kind == CONV:
        return conv2d_backward(x, p, grad_out)
    if p.kind == DECONV:
        return deconv2d_backward(x, p, grad_out)
    return prelu_backward(x, p, grad_out)


def msra_init(p, rng_seed):
    """He-normal weights (variance 2/fan_in, fan_in = k*k*in_c), zero bias.

    PReLU layers are reset to the default slope. ``rng_seed`` may be an int
    or anything :func:`numpy.random.default_rng` accepts.
    """
    if p.kind == PRELU:
        p.slopes[...] = PRELU_INIT
        return
    rng = np.random.default_rng(rng_seed)
    k = p.weight.shape[-1]
    fan_in = k * k * p.in_channels
    std = np.sqrt(2.0 / fan_in)
    p.weight[...] = rng.normal(0.0, std, size=p.weight.shape)
    p.bias[...] = 0


def gradcheck(loss_fn, grad_fn, arrays, epsilon=1e-4):
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` evaluates the scalar loss at the current contents of
    ``arrays`` (perturbed in place), and ``grad_fn()`` returns the analytic
    gradients in the same order. Returns the maximum relative error with
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    analytic = [np.array(g, dtype=np.float64) for g in grad_fn()]
    worst = 0.0
    for arr, ga in zip(arrays, analytic):
        if arr.dtype != np.float64:
            raise TypeError("gradcheck requires float64 arrays")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError("gradcheck arrays must be contiguous")
        ga = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), 1e-8)
            worst = max(worst, err)
    return worst


def gradcheck_layer(p, x, epsilon=1e-4, seed=0):
    """Finite-difference check of one layer under a random linear probe loss.

    ``p`` and ``x`` must be float64. The loss is ``sum(forward(x) * g)`` for
    a fixed random ``g``, so ``g`` is exactly the upstream gradient.
    """
    probe = np.random.default_rng(seed).standard_normal(forward(x, p).shape)

    def loss():
        return float(np.sum(forward(x, p) * probe))

    def grads():
        p.zero_grad()
        gx = backward(x, p, probe)
        return [gx] + [g for _, _, g in p.params()]

    return gradcheck(loss, grads, [x] + [v for _, v, _ in p.params()], epsilon)
