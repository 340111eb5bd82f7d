"""Command-line entry point.

Subcommands::

    phantom      write seeded synthetic image/mask pairs
    correct      remove the multiplicative intensity field
    augment      elastic deformation + rotations + flips of image/mask pairs
    train        training stage: correct -> augment -> train -> checkpoint
    infer        inference stage: correct -> predict -> postprocess
    postprocess  clean a binary mask or probability map into instances
    evaluate     pixel and object metrics as CSV
    pipeline     phantoms -> training stage -> inference stage -> report

Every option that belongs to a module config can also come from a
``key = value`` file given with ``--config``; flags override the file.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Set ``TUBULESEG_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""

import argparse
import colorsys
import contextlib
import hashlib
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import imagedata as io
from .augmentation import AugmentationConfig, iter_augment_pair
from .inhomogeneity import CorrectionConfig, correct, estimate_field
from .metrics import evaluate, reports_to_csv
from .network.checkpoint import ArchitectureMismatchError, load_checkpoint, save_checkpoint
from .network.model import DESK_BASE_CHANNELS, FULL_BASE_CHANNELS, architecture_hash, predict
from .network.training import DatasetError, NonFiniteLossError, TrainConfig, train
from .phantom import PhantomConfig, PhantomError, desk_gamma, generate_dataset
from .postprocess import PostprocessConfig, postprocess

log = logging.getLogger("tubuleseg")

LOG_ENV = "TUBULESEG_LOG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".pgm")


class UsageError(Exception):
    """Bad command line or configuration file."""


class DataError(Exception):
    """Missing or inconsistent input files."""


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.exc = exc


@contextlib.contextmanager
def stage(name):
    """Tag any error raised inside the block with the stage name."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def stage_seed(master, name):
    """64-bit seed of one stage, derived from the master seed by hashing."""
    digest = hashlib.sha256(f"{int(master)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    scale: str = "desk"
    size: int = 64
    n_train: int = 5
    n_test: int = 20
    correction_sigma: Optional[float] = None
    correction_iters: int = 5
    # None = take the value of the scale preset
    augment_n: Optional[int] = None
    augment_spacing: Optional[float] = None
    augment_max_disp: Optional[float] = None
    train_lr: Optional[float] = None
    train_momentum: Optional[float] = None
    train_epochs: Optional[int] = None
    train_max_iterations: Optional[int] = None
    postprocess_gamma: Optional[int] = None
    flood_fill: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.scale not in SCALE_PRESETS:
            raise UsageError(f"scale must be one of {sorted(SCALE_PRESETS)}, got {self.scale!r}")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")

    def resolved(self):
        """Copy with every preset-backed field filled in."""
        preset = dict(SCALE_PRESETS[self.scale])
        if preset["postprocess_gamma"] is None:
            preset["postprocess_gamma"] = desk_gamma(self.size)
        updates = {k: v for k, v in preset.items() if getattr(self, k) is None}
        return replace(self, **updates)

    @property
    def base_channels(self):
        return DESK_BASE_CHANNELS if self.scale == "desk" else FULL_BASE_CHANNELS

    def correction(self):
        return CorrectionConfig(smoothing_sigma=self.correction_sigma,
                                iterations=self.correction_iters)

    def augmentation(self):
        c = self.resolved()
        return AugmentationConfig(c.augment_n, c.augment_spacing, c.augment_max_disp,
                                  rng_seed=stage_seed(self.seed, "augment"))

    def training(self):
        c = self.resolved()
        return TrainConfig(learning_rate=c.train_lr, momentum=c.train_momentum,
                           epochs=c.train_epochs, rng_seed=stage_seed(self.seed, "train"),
                           base_channels=self.base_channels,
                           max_iterations=c.train_max_iterations)

    def postprocessing(self):
        return PostprocessConfig(gamma=self.resolved().postprocess_gamma, flood_fill=self.flood_fill)


# full: the published training setup; desk: 64x64 phantoms, trained in minutes
SCALE_PRESETS = {
    "full": dict(augment_n=100, augment_spacing=64, augment_max_disp=15, train_lr=1e-5,
                 train_momentum=0.9, train_epochs=200, train_max_iterations=None,
                 postprocess_gamma=100),
    "desk": dict(augment_n=10, augment_spacing=16, augment_max_disp=10, train_lr=0.1,
                 train_momentum=0.9, train_epochs=200, train_max_iterations=3000,
                 postprocess_gamma=None),
}


def _field_types():
    out = {}
    for f in fields(PipelineConfig):
        t = f.type
        if t in (bool, "bool"):
            out[f.name] = bool
        elif "float" in str(t):
            out[f.name] = float
        elif "int" in str(t):
            out[f.name] = int
        else:
            out[f.name] = str
    return out


_FIELD_TYPES = _field_types()
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if text.lower() == "none":
        return None
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return PipelineConfig(**values)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def image_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no PNG/PGM images in {d}")
    return files


def paired_files(image_dir, mask_dir):
    """``(image, mask)`` paths matched by file name."""
    pairs = []
    for img in image_files(image_dir):
        mask = Path(mask_dir) / img.name
        if not mask.is_file():
            raise DataError(f"no mask for {img.name} in {mask_dir}")
        pairs.append((img, mask))
    return pairs


def read_pairs(image_dir, mask_dir):
    return [(io.load_gray(i), io.load_instance_mask(m)) for i, m in paired_files(image_dir, mask_dir)]


def write_pair(out_dir, name, img, labels):
    io.save_gray(img, Path(out_dir) / "images" / name, bit_depth=16)
    io.save_instance_mask(labels, Path(out_dir) / "masks" / name)


def _mkdirs(*dirs):
    for d in dirs:
        Path(d).mkdir(parents=True, exist_ok=True)


def label_palette(n):
    """Deterministic, well-separated RGB colors (golden-ratio hue steps)."""
    cols = [colorsys.hsv_to_rgb((0.1 + k * 0.618033988749895) % 1.0, 0.85, 1.0) for k in range(n)]
    return np.array(cols, dtype=np.float64).reshape(n, 3) * 255.0


def overlay(img, labels, alpha=0.5):
    """Gray image with every instance tinted in its own color."""
    gray = np.repeat(np.asarray(img, dtype=np.float64)[..., None] * 255.0, 3, axis=2)
    labels = np.asarray(labels)
    m = labels > 0
    if m.any():
        colors = label_palette(int(labels.max()))
        gray[m] = (1 - alpha) * gray[m] + alpha * colors[labels[m] - 1]
    return np.floor(gray + 0.5).astype(np.uint8)


def correct_image(img, cfg):
    """Per-plane correction of one 2D image."""
    return correct(img, estimate_field(img, cfg.correction()), cfg.correction().epsilon)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass
class TrainingResult:
    checkpoint: Path
    loss_csv: Path
    model: object
    losses: list
    n_training_pairs: int


def write_loss_csv(losses, path):
    lines = ["iteration,loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(losses)]
    tmp = Path(path).with_name(f".{Path(path).name}.tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def run_training_stage(cfg, image_dir, mask_dir, out_dir, callback=None):
    """Correct, augment and train; writes ``model.tseg`` and ``loss.csv``."""
    out_dir = Path(out_dir)
    _mkdirs(out_dir)
    with stage("load"):
        pairs = read_pairs(image_dir, mask_dir)
    with stage("correct"):
        pairs = [(correct_image(img, cfg), lab) for img, lab in pairs]
    with stage("augment"):
        aug_cfg = cfg.augmentation()
        if aug_cfg.n_deformations == 0:
            data = pairs
        else:
            children = np.random.SeedSequence(aug_cfg.rng_seed).spawn(len(pairs))
            data = []
            for (img, lab), child in zip(pairs, children):
                rng = np.random.default_rng(child)
                data.extend((i, l) for _, i, l in iter_augment_pair(img, lab, aug_cfg, rng))
        log.info("training on %d pairs", len(data))
    with stage("train"):
        model, losses = train(data, cfg.training(), callback=callback)
    with stage("save"):
        ckpt = out_dir / "model.tseg"
        save_checkpoint(model, ckpt)
        loss_csv = out_dir / "loss.csv"
        write_loss_csv(losses, loss_csv)
    return TrainingResult(ckpt, loss_csv, model, losses, len(data))


def _check_scale(model, cfg):
    expected = architecture_hash(cfg.base_channels)
    if model.arch_hash != expected:
        raise ArchitectureMismatchError(
            f"checkpoint architecture (base {model.base_channels}) does not match scale {cfg.scale!r}")


def segment_image(model, img, cfg):
    """correct -> predict -> postprocess for one 2D image."""
    return postprocess(predict(model, correct_image(img, cfg)), cfg.postprocessing())


def run_inference_stage(cfg, checkpoint, images, out_dir, gt_dir=None):
    """Segment every image file; writes ``masks/``, ``overlays/`` and, when
    `gt_dir` is given, ``report.csv``. Returns the reports (or None)."""
    out_dir = Path(out_dir)
    with stage("load-model"):
        model = load_checkpoint(checkpoint)
        _check_scale(model, cfg)
    _mkdirs(out_dir / "masks", out_dir / "overlays")

    def one(path):
        with stage(f"infer {Path(path).name}"):
            img = io.load_gray(path)
            labels = segment_image(model, img, cfg)
            io.save_instance_mask(labels, out_dir / "masks" / Path(path).with_suffix(".png").name)
            io.save_rgb(overlay(img, labels), out_dir / "overlays" / Path(path).with_suffix(".png").name)
            return labels

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(one, images))
    else:
        results = [one(p) for p in images]
    if gt_dir is None:
        return None
    with stage("evaluate"):
        reports = []
        for path, labels in zip(images, results):
            gt = Path(gt_dir) / Path(path).name
            if not gt.is_file():
                raise DataError(f"no groundtruth for {Path(path).name} in {gt_dir}")
            reports.append(evaluate(labels, io.load_instance_mask(gt), Path(path).name))
        reports_to_csv(reports, out_dir / "report.csv")
    return reports


def write_phantoms(out_dir, n, size, seed, prefix="phantom"):
    out_dir = Path(out_dir)
    _mkdirs(out_dir / "images", out_dir / "masks")
    names = []
    for k, (img, labels) in enumerate(generate_dataset(n, PhantomConfig(size=size), seed)):
        name = f"{prefix}_{k:04d}.png"
        write_pair(out_dir, name, img, labels)
        names.append(name)
    return names


def summarize(reports):
    keys = ("pa", "f1", "od", "oh")
    return {k: float(np.nanmean([getattr(r, k) for r in reports])) for k in keys}


def run_pipeline(cfg, out_dir, callback=None):
    out_dir = Path(out_dir)
    with stage("phantom"):
        write_phantoms(out_dir / "train", cfg.n_train, cfg.size, stage_seed(cfg.seed, "phantom-train"))
        write_phantoms(out_dir / "test", cfg.n_test, cfg.size, stage_seed(cfg.seed, "phantom-test"))
    result = run_training_stage(cfg, out_dir / "train" / "images", out_dir / "train" / "masks",
                                out_dir / "model", callback=callback)
    reports = run_inference_stage(cfg, result.checkpoint, image_files(out_dir / "test" / "images"),
                                  out_dir / "infer", gt_dir=out_dir / "test" / "masks")
    return result, reports


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> (config key, type)
_CONFIG_FLAGS = {
    "seed": ("seed", int), "scale": ("scale", str), "size": ("size", int),
    "sigma": ("correction_sigma", float), "iters": ("correction_iters", int),
    "n": ("augment_n", int), "spacing": ("augment_spacing", float),
    "max_disp": ("augment_max_disp", float), "lr": ("train_lr", float),
    "momentum": ("train_momentum", float), "epochs": ("train_epochs", int),
    "max_iterations": ("train_max_iterations", int), "gamma": ("postprocess_gamma", int),
    "workers": ("workers", int),
}


def _add(p, *names):
    for name in names:
        _, kind = _CONFIG_FLAGS[name]
        flag = "--" + name.replace("_", "-")
        if name == "scale":
            p.add_argument(flag, choices=sorted(SCALE_PRESETS))
        else:
            p.add_argument(flag, type=kind)


def build_parser():
    parser = _Parser(prog="tubuleseg", description="Tubule segmentation from microscopy images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value configuration file")
        return p

    p = cmd("phantom", "write synthetic image/mask pairs")
    p.add_argument("--n", dest="count", type=int, default=20)
    p.add_argument("--out", required=True)
    _add(p, "size", "seed")

    p = cmd("correct", "remove the intensity field from an image or stack directory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add(p, "sigma", "iters")

    p = cmd("augment", "augment image/mask pairs")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    _add(p, "n", "seed", "spacing", "max_disp", "scale")

    p = cmd("train", "training stage: correct, augment, train")
    p.add_argument("--data", required=True, help="directory with images/ and masks/")
    p.add_argument("--out", required=True, help="output directory for model.tseg and loss.csv")
    _add(p, "epochs", "lr", "momentum", "seed", "scale", "max_iterations", "n",
         "spacing", "max_disp", "sigma", "iters")

    p = cmd("infer", "inference stage: correct, predict, postprocess")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="mask file (single image) or output directory")
    p.add_argument("--gt", help="groundtruth mask directory; enables report.csv")
    p.add_argument("--flood-fill", action="store_true", default=None)
    _add(p, "scale", "gamma", "sigma", "iters", "workers", "size")

    p = cmd("postprocess", "clean a binary mask or probability map")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob", action="store_true", help="input is a probability map (threshold 0.5)")
    p.add_argument("--flood-fill", action="store_true", default=None)
    _add(p, "gamma", "scale", "size")

    p = cmd("evaluate", "pixel and object metrics")
    p.add_argument("--seg", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)

    p = cmd("pipeline", "phantoms, training stage, inference stage, report")
    p.add_argument("--out", required=True)
    p.add_argument("--flood-fill", action="store_true", default=None)
    _add(p, "seed", "scale", "size", "lr", "momentum", "epochs", "max_iterations", "n",
         "spacing", "max_disp", "sigma", "iters", "gamma", "workers")
    return parser


def config_from_args(args):
    overrides = {key: getattr(args, name) for name, (key, _) in _CONFIG_FLAGS.items()
                 if hasattr(args, name)}
    if getattr(args, "flood_fill", None):
        overrides["flood_fill"] = True
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args, cfg):
    with stage("phantom"):
        names = write_phantoms(args.out, args.count, cfg.size, stage_seed(cfg.seed, "phantom"))
    print(f"wrote {len(names)} phantom pairs to {args.out}")


def cmd_correct(args, cfg):
    with stage("correct"):
        stack, files = io.load_stack(args.inp)
        field = estimate_field(stack, cfg.correction())
        corrected = correct(stack, field, cfg.correction().epsilon)
        _mkdirs(args.out)
        for plane, f in zip(corrected, files):
            io.save_gray(plane, Path(args.out) / Path(f).with_suffix(".png").name, bit_depth=16)
    print(f"corrected {len(files)} plane(s) into {args.out}")


def cmd_augment(args, cfg):
    out = Path(args.out)
    with stage("augment"):
        pairs = paired_files(args.images, args.masks)
        aug_cfg = cfg.augmentation()
        _mkdirs(out / "images", out / "masks")
        children = np.random.SeedSequence(aug_cfg.rng_seed).spawn(len(pairs))
        count = 0
        for (ip, mp), child in zip(pairs, children):
            img, lab = io.load_gray(ip), io.load_instance_mask(mp)
            for tag, ai, al in iter_augment_pair(img, lab, aug_cfg, np.random.default_rng(child)):
                write_pair(out, f"{ip.stem}_{tag}.png", ai, al)
                count += 1
    print(f"wrote {count} augmented pairs to {out}")


def cmd_train(args, cfg):
    data = Path(args.data)
    result = run_training_stage(cfg, data / "images", data / "masks", args.out)
    print(f"trained {len(result.losses)} iterations on {result.n_training_pairs} pairs; "
          f"final loss {result.losses[-1]:.4f}; checkpoint {result.checkpoint}")


def cmd_infer(args, cfg):
    inp = Path(args.inp)
    if inp.is_dir():
        reports = run_inference_stage(cfg, args.model, image_files(inp), args.out, args.gt)
        if reports:
            print(" ".join(f"{k}={v:.4f}" for k, v in summarize(reports).items()))
        print(f"masks written to {Path(args.out) / 'masks'}")
        return
    with stage("load-model"):
        model = load_checkpoint(args.model)
        _check_scale(model, cfg)
    with stage("infer"):
        img = io.load_gray(inp)
        labels = segment_image(model, img, cfg)
        out = Path(args.out)
        io.save_instance_mask(labels, out)
        io.save_rgb(overlay(img, labels), out.with_name(f"{out.stem}_overlay.png"))
    print(f"{int(labels.max())} objects written to {out}")


def cmd_postprocess(args, cfg):
    with stage("postprocess"):
        data = io.load_gray(args.inp)
        binary = data > 0.5 if args.prob else data > 0
        labels = postprocess(binary.astype(np.uint8), cfg.postprocessing())
        io.save_instance_mask(labels, args.out)
    print(f"{int(labels.max())} objects written to {args.out}")


def cmd_evaluate(args, cfg):
    with stage("evaluate"):
        reports = []
        for seg in image_files(args.seg):
            gt = Path(args.gt) / seg.name
            if not gt.is_file():
                raise DataError(f"no groundtruth for {seg.name} in {args.gt}")
            reports.append(evaluate(io.load_instance_mask(seg), io.load_instance_mask(gt), seg.name))
        reports_to_csv(reports, args.out)
    print(" ".join(f"{k}={v:.4f}" for k, v in summarize(reports).items()))


def cmd_pipeline(args, cfg):
    result, reports = run_pipeline(cfg, args.out)
    print(f"trained {len(result.losses)} iterations; final loss {result.losses[-1]:.4f}")
    print(" ".join(f"{k}={v:.4f}" for k, v in summarize(reports).items()))
    print(f"report written to {Path(args.out) / 'infer' / 'report.csv'}")


COMMANDS = {
    "phantom": cmd_phantom, "correct": cmd_correct, "augment": cmd_augment,
    "train": cmd_train, "infer": cmd_infer, "postprocess": cmd_postprocess,
    "evaluate": cmd_evaluate, "pipeline": cmd_pipeline,
}

_DATA_ERRORS = (DataError, DatasetError, PhantomError, io.ImageIOError, OSError, ValueError)


def exit_code_for(exc):
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NonFiniteLossError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    return None


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.resolved()
        COMMANDS[args.command](args, cfg)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"tubuleseg: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
