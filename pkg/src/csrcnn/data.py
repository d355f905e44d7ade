"""Luminance images, bicubic resampling, augmentation and training-sample ladders."""

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError
from .model import TrainSample

IMAGE_EXTENSIONS = (".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff")
AUGMENT_SCALES = (1.0, 0.9, 0.8, 0.7, 0.6)
AUGMENT_ROTATIONS = (0, 90, 180, 270)


@dataclass
class ImageY:
    """A luminance plane with values in [0, 1] and a record of how it was made."""

    values: np.ndarray
    provenance: tuple = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"ImageY needs a non-empty 2-D array, got {self.values.shape}")

    @property
    def h(self):
        return self.values.shape[0]

    @property
    def w(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def derive(self, values, tag):
        return ImageY(values, self.provenance + (tag,))


def rgb_to_y(rgb):
    """BT.601 studio-swing luma of RGB values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255 + 16 / 255
    return np.clip(y, 0.0, 1.0)


def load_image_y(path):
    path = os.fspath(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1"):
                y = np.asarray(im.convert("L"), dtype=np.float64) / 255
            elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
                y = np.asarray(im, dtype=np.float64) / 65535
            elif im.mode == "F":
                y = np.asarray(im, dtype=np.float64)
            else:
                y = rgb_to_y(np.asarray(im.convert("RGB"), dtype=np.float64) / 255)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return ImageY(np.clip(y, 0.0, 1.0), (path,))


def quantize(values):
    """Round to the 8-bit grid, staying in normalized units."""
    return np.round(np.clip(values, 0.0, 1.0) * 255) / 255


def save_image_y(img, path):
    values = img.values if isinstance(img, ImageY) else np.asarray(img)
    Image.fromarray((quantize(values) * 255).astype(np.uint8), mode="L").save(path)


def cubic_kernel(x, a=-0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(in_len, out_len, antialias=True):
    """(out_len, in_len) matrix of bicubic weights along one axis.

    Output sample ``d`` sits at source coordinate ``(d + 0.5) * in/out - 0.5``.
    Out-of-range taps are clamped to the border pixel. When shrinking with
    ``antialias`` the kernel is stretched by ``in/out`` (as MATLAB's
    ``imresize`` does). Each row is normalized to sum to one.
    """
    scale = out_len / in_len
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    src = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(src - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((src[:, None] - idx) / stretch) / stretch
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_len - 1).ravel()), weights.ravel())
    return mat


def bicubic_resample(img, out_h, out_w, antialias=True):
    """Separable bicubic resize (rows then columns), clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be positive, got {out_h}x{out_w}")
    values = img.values if isinstance(img, ImageY) else np.asarray(img, dtype=np.float64)
    h, w = values.shape
    out = values
    if out_h != h:
        out = resize_matrix(h, out_h, antialias) @ out
    if out_w != w:
        out = out @ resize_matrix(w, out_w, antialias).T
    out = np.clip(out, 0.0, 1.0)
    if isinstance(img, ImageY):
        return img.derive(out, f"bicubic{out_h}x{out_w}")
    return out


def rotate(img, degrees):
    """Counter-clockwise rotation by a multiple of 90 degrees."""
    return img.derive(np.ascontiguousarray(np.rot90(img.values, degrees // 90)), f"rot{degrees}")


def augment(img):
    """The source plus 3 rotations, each at 5 scales: 20 variants."""
    out = []
    for s in AUGMENT_SCALES:
        if s == 1.0:
            scaled = img.derive(img.values, "scale1.0")
        else:
            h, w = max(1, round(img.h * s)), max(1, round(img.w * s))
            scaled = bicubic_resample(img, h, w)
            scaled.provenance = img.provenance + (f"scale{s}",)
        for deg in AUGMENT_ROTATIONS:
            out.append(rotate(scaled, deg))
    return out


def default_ladder(base_scale):
    """LR factors for the cascade input and every intermediate target."""
    ladder = []
    f = base_scale
    while f > 1:
        ladder.append(f)
        f //= 2
    return tuple(ladder)


def model_ladder(model):
    return tuple(int(1 / r) for r in model.scale_ratios[:-1])


def make_samples(img, hr_patch=96, stride=48, base_scale=8, ladder=None):
    """Tile ``img`` into HR crops and build each crop's resolution ladder.

    Every lower-resolution level is a bicubic downscale of the HR crop itself.
    Returns an empty list when the image is smaller than one patch.
    """
    ladder = default_ladder(base_scale) if ladder is None else tuple(ladder)
    for f in ladder:
        if hr_patch % f:
            raise ConfigError(f"hr_patch {hr_patch} not divisible by ladder factor {f}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    samples = []
    for top in range(0, img.h - hr_patch + 1, stride):
        for left in range(0, img.w - hr_patch + 1, stride):
            crop = img.values[top:top + hr_patch, left:left + hr_patch]
            levels = [bicubic_resample(crop, hr_patch // f, hr_patch // f) for f in ladder]
            levels.append(crop.copy())
            levels = [lv.astype(np.float32)[None] for lv in levels]
            tag = "/".join(img.provenance) + f"@{top},{left}"
            samples.append(TrainSample(levels[0], tuple(levels[1:]), tag))
    return samples


def modcrop(img, base):
    """Center-crop so both sides are multiples of ``base``."""
    h, w = (img.h // base) * base, (img.w // base) * base
    if h < 1 or w < 1:
        raise ConfigError(f"image {img.h}x{img.w} smaller than base scale {base}")
    top, left = (img.h - h) // 2, (img.w - w) // 2
    return img.derive(img.values[top:top + h, left:left + w], f"crop{top},{left},{h}x{w}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: str
    role: str = "train"

    def validate(self):
        if self.role not in ("train", "test"):
            raise ConfigError(f"dataset role must be train or test, got {self.role!r}")
        return self


def list_images(root):
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root {root} does not exist")
    return sorted(os.path.join(root, f) for f in os.listdir(root)
                  if f.lower().endswith(IMAGE_EXTENSIONS))


@dataclass
class PreparedDataset:
    spec: DatasetSpec
    manifest: list
    samples: list = field(default_factory=list)
    images: list = field(default_factory=list)

    def manifest_text(self):
        return "".join(line + "\n" for line in self.manifest)


def prepare_dataset(spec, hr_patch=96, stride=48, base_scale=8, ladder=None):
    """Load, augment and tile a training set, or model-crop a test set.

    Manifest lines are tab-separated: source path, transform tags, and the
    crop offset/size. Image order follows sorted file names.
    """
    spec.validate()
    paths = list_images(spec.root)
    if not paths:
        raise ConfigError(f"empty dataset: no images under {spec.root}")
    prepared = PreparedDataset(spec, [])
    for path in paths:
        img = load_image_y(path)
        rel = os.path.relpath(path, spec.root)
        if spec.role == "test":
            cropped = modcrop(img, base_scale)
            prepared.images.append((rel, cropped))
            prepared.manifest.append(f"{rel}\t{cropped.provenance[-1]}\t{cropped.h}x{cropped.w}")
            continue
        for variant in augment(img):
            tags = ",".join(variant.provenance[1:])
            for s in make_samples(variant, hr_patch, stride, base_scale, ladder):
                offset = s.provenance.rsplit("@", 1)[1]
                prepared.samples.append(s._replace(provenance=f"{rel}:{tags}@{offset}"))
                prepared.manifest.append(f"{rel}\t{tags}\t{offset}\t{hr_patch}")
    return prepared
