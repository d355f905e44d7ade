"""PSNR/SSIM, scale-routed inference and the benchmark report."""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImageY, bicubic_resample, quantize, save_image_y
from .errors import ConfigError, ShapeError
from .model import cascade_forward

METHODS = ("csrcnn", "bicubic", "identity")


def _plane(img):
    return img.values if isinstance(img, ImageY) else np.asarray(img, dtype=np.float64)


def _cropped_pair(a, b, crop_border):
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if crop_border < 0:
        raise ConfigError("crop_border must be >= 0")
    if crop_border:
        a = a[crop_border:-crop_border, crop_border:-crop_border]
        b = b[crop_border:-crop_border, crop_border:-crop_border]
    if a.size == 0:
        raise ConfigError(f"crop_border {crop_border} leaves nothing to compare")
    return a, b


def psnr(a, b, crop_border=0):
    """PSNR in dB with peak 1.0; ``math.inf`` for identical images."""
    a, b = _cropped_pair(a, b, crop_border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    r = size // 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    rows = sliding_window_view(x, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim_map(a, b, size=11, sigma=1.5):
    """Local SSIM at every window position lying fully inside the image."""
    g = gaussian_window(size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, crop_border=0):
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), peak 1.0."""
    a, b = _cropped_pair(a, b, crop_border)
    if min(a.shape) < 11:
        raise ConfigError(f"SSIM needs at least 11x11 pixels after cropping, got {a.shape}")
    return float(ssim_map(a, b).mean())


def entry_stage(model, factor):
    """Earliest stage whose remaining cascade upscales by at most ``factor``.

    The LR image is then bicubic-enlarged to that stage's input size (factor 3
    on a x2/x2/x2 cascade enters the last stage at half the HR size). Factors
    below the last stage's upscale fall back to the last stage.
    """
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    for k in range(model.stage_count):
        if 1 / model.scale_ratios[k] <= factor:
            return k
    return model.stage_count - 1


def run_model(model, values, start=0):
    x = np.asarray(values, dtype=model.dtype)[None, None]
    return cascade_forward(model, x, start=start)[-1][0, 0].astype(np.float64)


def route_and_superresolve(model, lr, factor, hr_shape=None):
    """Upscale ``lr`` to ``hr_shape`` by entering the cascade at the right stage.

    The LR image is bicubic-resized to the entry stage's input size
    ``r_k * (H, W)`` (rounded), then passed through the remaining stages. If
    rounding leaves the output off by a pixel it is resized to ``hr_shape``.
    """
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    lr_img = lr if isinstance(lr, ImageY) else ImageY(lr)
    if hr_shape is None:
        hr_shape = (round(lr_img.h * factor), round(lr_img.w * factor))
    H, W = hr_shape
    k = entry_stage(model, factor)
    r = model.scale_ratios[k]
    in_h, in_w = max(1, round(H * r)), max(1, round(W * r))
    tags = [f"enter-stage{k}"]
    src = lr_img.values
    if (in_h, in_w) != src.shape:
        src = bicubic_resample(src, in_h, in_w)
        tags.append(f"pre-resize{in_h}x{in_w}")
    out = run_model(model, src, start=k)
    if out.shape != (H, W):
        out = bicubic_resample(np.clip(out, 0, 1), H, W)
        tags.append(f"post-resize{H}x{W}")
    return ImageY(np.clip(out, 0.0, 1.0), lr_img.provenance + tuple(tags))


def make_lr(hr, factor):
    h, w = _plane(hr).shape
    return bicubic_resample(hr, max(1, round(h / factor)), max(1, round(w / factor)))


def super_resolve(method, model, lr, factor, hr_shape):
    if method == "bicubic":
        return bicubic_resample(lr, *hr_shape)
    if method == "csrcnn":
        if model is None:
            raise ConfigError("method 'csrcnn' needs a model")
        return route_and_superresolve(model, lr, factor, hr_shape)
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class EvalReport:
    """Per-image metrics plus (dataset, factor, method) means."""

    detail: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, dataset, factor, method, image, p, s):
        self.detail.append((dataset, factor, method, image, p, s))

    @property
    def rows(self):
        groups = {}
        for dataset, factor, method, _, p, s in self.detail:
            groups.setdefault((dataset, factor, method), []).append((p, s))
        return {key: (float(np.mean([p for p, _ in v])), float(np.mean([s for _, s in v])))
                for key, v in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2]))}

    def methods(self):
        return sorted({m for _, _, m, _, _, _ in self.detail}, key=_method_order)

    def text_table(self):
        """Aligned table: one line per (dataset, factor), PSNR/SSIM per method."""
        rows = self.rows
        methods = self.methods()
        keys = sorted({(d, f) for d, f, _ in rows}, key=lambda k: (k[1], k[0]))
        head = ["Test-dataset", "Upscaling factor"] + [m.upper() if m != "bicubic" else "Bicubic" for m in methods]
        lines = [head]
        for d, f in keys:
            cells = [d, f"x{_fmt_factor(f)}"]
            for m in methods:
                if (d, f, m) in rows:
                    p, s = rows[(d, f, m)]
                    cell = f"{p:.2f}/{s:.4f}"
                    if m == "csrcnn" and _needs_preresize(f):
                        cell += "*"
                    cells.append(cell)
                else:
                    cells.append("-")
            lines.append(cells)
        widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
        out = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines]
        if any(m == "csrcnn" and _needs_preresize(f) for _, f, m in rows):
            out.append("* LR input bicubic pre-resized to the entry stage size")
        for k, v in self.config.items():
            out.append(f"# {k}={v}")
        return "\n".join(out) + "\n"

    def delimited(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "factor", "method", "image", "psnr", "ssim"])
        for row in self.detail:
            d, f, m, img, p, s = row
            w.writerow([d, _fmt_factor(f), m, img, repr(p), repr(s)])
        return buf.getvalue()


def _method_order(m):
    return METHODS.index(m) if m in METHODS else len(METHODS)


def _fmt_factor(f):
    return str(int(f)) if float(f).is_integer() else str(f)


def _needs_preresize(factor):
    f = float(factor)
    return not (f.is_integer() and int(f) & (int(f) - 1) == 0)


def benchmark(model, datasets, factors, methods=("bicubic", "csrcnn"), emit_dir=None):
    """Evaluate ``methods`` on every (dataset, factor).

    ``datasets`` maps a name to a list of ``(image_name, ImageY)`` HR images
    already cropped to the model structure. HR and SR are quantized to the
    8-bit grid; metrics skip a border of ``factor`` pixels.
    """
    report = EvalReport(config={"channel": "Y (BT.601)", "crop_border": "scale factor",
                                "quantize": "8-bit"})
    for name, images in datasets.items():
        if images is None:
            raise ConfigError(f"missing dataset {name}")
        for factor in factors:
            border = int(math.ceil(factor))
            for image_name, hr in images:
                hr_values = quantize(_plane(hr))
                lr = make_lr(hr_values, factor)
                for method in methods:
                    if method == "identity":
                        sr = hr_values
                    else:
                        sr = quantize(_plane(super_resolve(method, model, lr, factor, hr_values.shape)))
                    report.add(name, factor, method, image_name,
                               psnr(sr, hr_values, border), ssim(sr, hr_values, border))
                    if emit_dir is not None:
                        stem = os.path.splitext(os.path.basename(image_name))[0]
                        save_image_y(sr, os.path.join(emit_dir, f"{name}_{stem}_x{_fmt_factor(factor)}_{method}.png"))
    return report
