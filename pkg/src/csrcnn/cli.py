"""Command-line entry point: prepare, train, eval, sr and gradcheck.

Settings come from built-in defaults, then an optional ``key=value`` file
(``--config``), then command-line flags; later sources win. ``--print-config``
echoes the merged settings in the same ``key=value`` form and exits.
"""

import argparse
import dataclasses
import hashlib
import io
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import layers as L
from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .data import DatasetSpec, list_images, load_image_y, model_ladder, prepare_dataset, save_image_y
from .errors import ConfigError, FormatError, ShapeError
from .evaluate import METHODS, benchmark, route_and_superresolve
from .model import (
    StageConfig, TrainSample, ablation_upscales, build_cascade, cascade_backward,
    cascade_forward, toy_gradcheck_problem, total_loss)
from .training import TrainConfig, format_history, train, two_phase_train

COMMANDS = ("prepare", "train", "eval", "sr", "gradcheck")
GRADCHECK_TOLERANCE = 1e-4
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    data_root: str = "data"
    train_set: str = "T91"
    finetune_set: str = "General100"
    test_sets: tuple = ("Set5", "Set14", "BSD200")
    datasets: tuple = ()
    stages: int = 3
    scale: int = 8
    d: int = 56
    s: int = 12
    m: int = 4
    iters: int = 1000
    finetune_iters: int = 500
    single_phase: bool = False
    batch: int = 16
    lr_conv: float = 1e-3
    lr_deconv: float = 1e-4
    momentum: float = 0.9
    hr_patch: int = 96
    stride: int = 48
    seed: int = 0
    factors: tuple = (2.0, 3.0, 4.0)
    methods: tuple = ("bicubic", "csrcnn")
    emit_images: bool = False
    out_dir: str = "runs"
    checkpoint: str = ""
    input: str = ""
    output: str = ""
    factor: float = 2.0
    hr_shape: tuple = ()
    log_every: int = 100

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if any(f <= 0 for f in self.factors) or self.factor <= 0:
            raise ConfigError("scale factors must be positive")
        if self.hr_shape and len(self.hr_shape) != 2:
            raise ConfigError("hr_shape must be HxW")
        self.stage_configs()
        self.train_config().validate()
        return self

    def stage_configs(self):
        return [StageConfig(self.d, self.s, self.m, u).validate()
                for u in ablation_upscales(self.stages, self.scale)]

    def train_config(self, iters=None):
        return TrainConfig(total_iters=self.iters if iters is None else iters,
                           lr_conv=self.lr_conv, lr_deconv=self.lr_deconv,
                           momentum=self.momentum, batch_size=self.batch, seed=self.seed)

    def checkpoint_path(self):
        return self.checkpoint or os.path.join(self.out_dir, "model.csrc")

    def resolve(self, name):
        """A dataset argument is a directory path or a name under ``data_root``."""
        return name if os.path.isdir(name) else os.path.join(self.data_root, name)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TUPLE_ITEM = {"test_sets": str, "datasets": str, "methods": str, "factors": float, "hr_shape": int}


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            sep = "x" if key == "hr_shape" else ","
            return tuple(_TUPLE_ITEM[key](v.strip()) for v in text.split(sep) if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _format_value(key, value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ("x" if key == "hr_shape" else ",").join(_format_value(key, v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, base=None):
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, value)
    return dataclasses.replace(base or RunConfig(), **updates)


def format_config(cfg):
    return "".join(f"{f.name}={_format_value(f.name, getattr(cfg, f.name))}\n" for f in fields(cfg))


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key=value settings file; flags override it")
    common.add_argument("--print-config", action="store_true", help="echo merged settings and exit")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--data-root", help="default: $CSRCNN_DATA_ROOT or ./data")
    common.add_argument("--stages", type=int, choices=(1, 2, 3), help="cascade depth")
    common.add_argument("--scale", type=int, help="total upscale the cascade is built for")
    common.add_argument("--d", type=int)
    common.add_argument("--s", type=int)
    common.add_argument("--m", type=int)
    common.add_argument("--iters", type=int)
    common.add_argument("--finetune-iters", type=int)
    common.add_argument("--single-phase", action="store_const", const="true")
    common.add_argument("--batch", type=int)
    common.add_argument("--lr-conv", type=float)
    common.add_argument("--lr-deconv", type=float)
    common.add_argument("--momentum", type=float)
    common.add_argument("--hr-patch", type=int)
    common.add_argument("--stride", type=int)
    common.add_argument("--train-set")
    common.add_argument("--finetune-set")
    common.add_argument("--test-sets", help="comma-separated names or paths")
    common.add_argument("--datasets", help="prepare only these: path[:train|test],...")
    common.add_argument("--factors", help="comma-separated, e.g. 2,3,4")
    common.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    common.add_argument("--emit-images", action="store_const", const="true")
    common.add_argument("--checkpoint")
    common.add_argument("--factor", type=float)
    common.add_argument("--hr-shape", help="HxW target size for sr")
    common.add_argument("--log-every", type=int)
    parser = argparse.ArgumentParser(prog="csrcnn", description="Cascaded FSRCNN super-resolution.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build training samples and test crops")
    sub.add_parser("train", parents=[common], help="train a cascade")
    sub.add_parser("eval", parents=[common], help="PSNR/SSIM benchmark report")
    p = sub.add_parser("sr", parents=[common], help="super-resolve one image")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--perturb-backward", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def config_from_args(args, environ=None):
    environ = os.environ if environ is None else environ
    base = RunConfig(command=args.command, data_root=environ.get("CSRCNN_DATA_ROOT", "data"))
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = parse_config_text(f.read(), base)
        base = dataclasses.replace(base, command=args.command)
    updates = {}
    for key, value in vars(args).items():
        if key in ("command", "config", "print_config", "perturb_backward") or value is None:
            continue
        updates[key] = _parse_value(key, str(value)) if isinstance(value, str) else value
    return dataclasses.replace(base, **updates).validate()


def _samples_to_bytes(samples):
    records = [("input", np.stack([s.input for s in samples]))]
    for k in range(len(samples[0].targets)):
        records.append((f"target{k}", np.stack([s.targets[k] for s in samples])))
    buf = io.BytesIO()
    write_container(buf, [], records)
    return buf.getvalue()


def _samples_from_bytes(data, provenance):
    _, records, _, _ = read_container(data)
    x = records["input"]
    k = len(records) - 1
    targets = [records[f"target{i}"] for i in range(k)]
    return [TrainSample(x[i], tuple(t[i] for t in targets), provenance[i]) for i in range(len(x))]


def _cache_key(spec, cfg, ladder, base_scale):
    h = hashlib.sha256()
    h.update(repr((spec.role, cfg.hr_patch, cfg.stride, base_scale, ladder)).encode())
    for path in list_images(spec.root):
        st = os.stat(path)
        h.update(f"{os.path.basename(path)}:{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()[:16]


def load_prepared(cfg, name, role, log=print):
    """Prepare one dataset, reusing the cache under ``out_dir/prepared``.

    Returns training samples for the train role and ``(name, ImageY)`` crops
    for the test role.
    """
    spec = DatasetSpec(os.path.basename(os.path.normpath(name)), cfg.resolve(name), role).validate()
    model = build_cascade(cfg.stage_configs(), seed=cfg.seed)
    base_scale = int(model.total_upscale)
    ladder = model_ladder(model)
    key = _cache_key(spec, cfg, ladder, base_scale)
    cache_dir = os.path.join(cfg.out_dir, "prepared")
    stem = os.path.join(cache_dir, f"{spec.name}-{role}-{key}")
    if role == "train" and os.path.exists(stem + ".manifest") and os.path.exists(stem + ".csrc"):
        with open(stem + ".manifest") as f:
            manifest = f.read()
        provenance = [":".join(line.split("\t")[:2]) + "@" + line.split("\t")[2]
                      for line in manifest.splitlines()]
        with open(stem + ".csrc", "rb") as f:
            samples = _samples_from_bytes(f.read(), provenance)
        log(f"{spec.name}: cache hit, {len(samples)} samples ({stem}.manifest)")
        return samples
    prepared = prepare_dataset(spec, cfg.hr_patch, cfg.stride, base_scale, ladder)
    os.makedirs(cache_dir, exist_ok=True)
    with open(stem + ".manifest", "w") as f:
        f.write(prepared.manifest_text())
    if role == "test":
        log(f"{spec.name}: {len(prepared.images)} test images cropped to multiples of {base_scale}")
        return prepared.images
    if not prepared.samples:
        raise ConfigError(f"empty dataset: {spec.root} yields no {cfg.hr_patch}x{cfg.hr_patch} patches")
    with open(stem + ".csrc", "wb") as f:
        f.write(_samples_to_bytes(prepared.samples))
    log(f"{spec.name}: {len(prepared.samples)} samples ({stem}.manifest)")
    return prepared.samples


def cmd_prepare(cfg):
    if cfg.datasets:
        jobs = [tuple(d.rsplit(":", 1)) if d.endswith((":train", ":test")) else (d, "train")
                for d in cfg.datasets]
    else:
        jobs = [(cfg.train_set, "train")]
        if not cfg.single_phase:
            jobs.append((cfg.finetune_set, "train"))
        jobs += [(t, "test") for t in cfg.test_sets]
    for name, role in jobs:
        load_prepared(cfg, name, role)
    return EXIT_OK


def cmd_train(cfg):
    model = build_cascade(cfg.stage_configs(), seed=cfg.seed)
    set91 = load_prepared(cfg, cfg.train_set, "train")

    def progress(row):
        if cfg.log_every and row.iter % cfg.log_every == 0:
            losses = " ".join(f"{v:.5f}" for v in row.stage_losses)
            print(f"[{row.phase}] iter {row.iter} loss {row.total_loss:.5f} ({losses}) lr {row.lr_conv:g}")

    if cfg.single_phase or cfg.finetune_iters <= 0:
        history = train(model, set91, cfg.train_config(), callback=progress)
    else:
        g100 = load_prepared(cfg, cfg.finetune_set, "train")
        history = two_phase_train(model, set91, g100, cfg.train_config(), cfg.finetune_iters, progress)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = cfg.checkpoint_path()
    save_checkpoint(model, path)
    hist_path = os.path.join(cfg.out_dir, "history.tsv")
    with open(hist_path, "w") as f:
        f.write(format_history(history, model.stage_count))
    print(f"wrote {path} and {hist_path}")
    return EXIT_OK


def _load_model(cfg):
    path = cfg.checkpoint_path()
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(cfg):
    model = _load_model(cfg) if "csrcnn" in cfg.methods else None
    datasets = {}
    for name in cfg.test_sets:
        datasets[os.path.basename(os.path.normpath(name))] = load_prepared(cfg, name, "test")
    emit = None
    if cfg.emit_images:
        emit = os.path.join(cfg.out_dir, "images")
        os.makedirs(emit, exist_ok=True)
    report = benchmark(model, datasets, cfg.factors, cfg.methods, emit)
    os.makedirs(cfg.out_dir, exist_ok=True)
    table = report.text_table()
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as f:
        f.write(table)
    with open(os.path.join(cfg.out_dir, "report.csv"), "w") as f:
        f.write(report.delimited())
    print(table, end="")
    return EXIT_OK


def cmd_sr(cfg):
    lr = load_image_y(cfg.input)
    model = _load_model(cfg)
    hr_shape = cfg.hr_shape or (round(lr.h * cfg.factor), round(lr.w * cfg.factor))
    out = route_and_superresolve(model, lr, cfg.factor, hr_shape)
    entry = None
    for tag in out.provenance[1:]:
        if tag.startswith("enter-stage"):
            entry = int(tag[len("enter-stage"):])
            print(f"entering the cascade at stage {entry} of {model.stage_count}")
        elif tag.startswith("pre-resize"):
            ratio = float(1 / model.scale_ratios[entry])
            print(f"pre-resize: LR bicubic-resized to {tag[len('pre-resize'):]} "
                  f"(HR size / {ratio:g}) before entering stage {entry}")
        elif tag.startswith("post-resize"):
            print(f"post-resize: output resized to {tag[len('post-resize'):]}")
    path = cfg.output or os.path.join(cfg.out_dir, "sr.png")
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    save_image_y(out, path)
    print(f"wrote {path} ({out.h}x{out.w})")
    return EXIT_OK


def gradcheck_suite(seed=0, perturb=0.0):
    """Max relative finite-difference error per layer kind and for the toy cascade.

    ``perturb`` scales every analytic gradient by ``1 + perturb``; it exists so
    tests can confirm that a broken backward pass is caught.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 + perturb
    results = {}

    def check_layer(p, x):
        probe = rng.standard_normal(L.forward(x, p).shape)

        def loss():
            return float(np.sum(L.forward(x, p) * probe))

        def grads():
            p.zero_grad()
            gx = L.backward(x, p, probe)
            return [scale * g for g in [gx] + [g for _, _, g in p.params()]]

        return L.gradcheck(loss, grads, [x] + [v for _, v, _ in p.params()])

    errs = []
    for k in (1, 3, 5):
        p = L.LayerParams.conv(2, 3, k, np.float64)
        L.msra_init(p, seed + k)
        p.bias[...] = rng.standard_normal(p.bias.shape)
        errs.append(check_layer(p, rng.standard_normal((2, 2, 6, 5))))
    results[L.CONV] = max(errs)
    errs = []
    for k, stride in ((9, 2), (5, 1), (3, 4)):
        p = L.LayerParams.deconv(2, 1, k, stride, dtype=np.float64)
        L.msra_init(p, seed + k)
        errs.append(check_layer(p, rng.standard_normal((2, 2, 4, 3))))
    results[L.DECONV] = max(errs)
    p = L.LayerParams.prelu(3, np.float64)
    p.slopes[...] = rng.uniform(0.05, 0.5, 3)
    x = rng.uniform(1e-2, 1.0, (2, 3, 4, 4)) * rng.choice([-1, 1], (2, 3, 4, 4))
    results[L.PRELU] = check_layer(p, x)

    model, x, targets = toy_gradcheck_problem(seed=seed)

    def loss():
        return total_loss(cascade_forward(model, x), targets)[0]

    def grads():
        model.zero_grad()
        res = cascade_backward(model, x, targets)
        return [scale * g for g in [res.grad_input] + [g for _, _, g, _ in model.named_params()]]

    arrays = [x] + [v for _, v, _, _ in model.named_params()]
    results["cascade"] = L.gradcheck(loss, grads, arrays)
    return results


def cmd_gradcheck(cfg, perturb=0.0):
    results = gradcheck_suite(cfg.seed, perturb)
    ok = True
    for kind, err in results.items():
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{kind:8s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        if getattr(args, "print_config", False):
            print(format_config(cfg), end="")
            return EXIT_OK
        if cfg.command == "prepare":
            return cmd_prepare(cfg)
        if cfg.command == "train":
            return cmd_train(cfg)
        if cfg.command == "eval":
            return cmd_eval(cfg)
        if cfg.command == "sr":
            return cmd_sr(cfg)
        return cmd_gradcheck(cfg, args.perturb_backward)
    except (ConfigError, ShapeError, FormatError, OSError) as exc:
        print(f"csrcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
