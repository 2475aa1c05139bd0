"""Command-line interface: ``shark {train,derain,eval,cornermap,synth,version}``.

Options may also come from a ``key = value`` config file given with
``--config``; explicit flags win over the file, which wins over defaults.
Commands that write to an output directory also write the effective
settings there as ``effective_config.txt``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import (
    IMAGE_SUFFIXES,
    DatasetManifest,
    ImagePair,
    ManifestEntry,
    RainSynthesisParams,
    discover,
    load_image,
    load_pairs,
    resize_to,
    save_gray,
    save_image,
    synthesize_rain,
    synthetic_scene,
    write_manifest,
)
from .estimator import derain_image
from .exceptions import CheckpointError, ConfigError, SharkError
from .losses import HarrisParams, LossWeights, corner_map_hard, harris_response
from .metrics import evaluate_dataset
from .network import ModelConfig, params_from_arrays
from .trainer import TrainConfig, train

logger = logging.getLogger("shark")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
CONFIG_ECHO = "effective_config.txt"


class CliUsageError(Exception):
    """Bad paths or settings detected before any work starts."""


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# name -> (type, default); these are the keys accepted in config files
SETTINGS = {
    "train": {
        "epochs": (int, 500), "batch_size": (int, 4), "seed": (int, 0),
        "lr": (float, 1e-4), "beta1": (float, 0.9), "beta2": (float, 0.999), "eps": (float, 1e-8),
        "lr_decay": (float, 1.0),
        "lambda1": (float, 10.0), "lambda2": (float, 5.0), "lambda3": (float, 5.0),
        "use_ssim": (_bool, True), "use_harris": (_bool, True),
        "k": (float, 0.08), "tau": (float, 0.01), "soft_beta": (float, 50.0), "gauss_sigma": (float, 1.0),
        "base_channels": (int, 16), "cbam_reduction": (int, 8),
        "image_size": (_opt_int, None), "max_steps": (_opt_int, None),
        "checkpoint_interval": (int, 0), "validation_interval": (int, 1),
    },
    "derain": {"resize": (_opt_int, None), "base_channels": (_opt_int, None), "cbam_reduction": (_opt_int, None)},
    "eval": {"resize": (_opt_int, None), "method": (str, "SHARK"), "dataset": (str, "test")},
    "cornermap": {"k": (float, 0.08), "tau": (float, 0.01), "gauss_sigma": (float, 1.0)},
    "synth": {
        "count": (int, 10), "size": (int, 64), "seed": (int, 0), "streak_count": (int, 60),
        "length": (float, 12.0), "angle": (float, 10.0), "intensity": (float, 0.6), "width": (float, 1.0),
    },
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise CliUsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliUsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def effective_settings(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file values, then explicit flags."""
    table = SETTINGS[command]
    settings = {k: default for k, (_, default) in table.items()}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in table:
                raise CliUsageError(f"unknown setting {key!r} for {command}")
            try:
                settings[key] = table[key][0](value)
            except ValueError as exc:
                raise CliUsageError(f"bad value for {key}: {exc}") from exc
    for key in table:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def write_echo(out_dir: Path, command: str, settings: dict, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# shark {__version__} {command}"]
    for key in ("data", "val", "checkpoint", "inputs", "input", "clean", "out"):
        if getattr(args, key, None) is not None:
            value = getattr(args, key)
            value = " ".join(map(str, value)) if isinstance(value, list) else value
            lines.append(f"# {key}: {value}")
    lines += [f"{k} = {'none' if v is None else v}" for k, v in sorted(settings.items())]
    (out_dir / CONFIG_ECHO).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise CliUsageError(f"{what} directory not found: {path}")
    return path


def _dataset(path, split: str, what: str) -> DatasetManifest:
    root = Path(path)
    if root.is_file():
        from .data import read_manifest

        manifest = read_manifest(root, split)
    else:
        manifest = discover(_require_dir(root, what), split)
    if not manifest.entries:
        raise CliUsageError(f"no rainy/clean pairs found under {path}")
    return manifest


def _image_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.is_file():
            files.append(p)
        else:
            raise CliUsageError(f"input not found: {p}")
    if not files:
        raise CliUsageError("no input images found")
    return files


def _load_model(path, settings=None):
    ckpt = load_checkpoint(path)
    settings = settings or {}
    for key in ("base_channels", "cbam_reduction"):
        wanted = settings.get(key)
        if wanted is not None and wanted != getattr(ckpt.config, key):
            raise CheckpointError(f"checkpoint has {key}={getattr(ckpt.config, key)}, requested {wanted}")
    return params_from_arrays(ckpt.config, ckpt.params, requires_grad=False)


# -- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    s = effective_settings("train", args)
    try:
        config = TrainConfig(
            epochs=s["epochs"], batch_size=s["batch_size"], seed=s["seed"], lr=s["lr"],
            beta1=s["beta1"], beta2=s["beta2"], eps=s["eps"], lr_decay=s["lr_decay"],
            weights=LossWeights(s["lambda1"], s["lambda2"], s["lambda3"], s["use_ssim"], s["use_harris"]),
            harris=HarrisParams(k=s["k"], tau=s["tau"], soft_beta=s["soft_beta"], gauss_sigma=s["gauss_sigma"]),
            model=ModelConfig(s["base_channels"], s["cbam_reduction"]),
            image_size=(s["image_size"], s["image_size"]) if s["image_size"] else None,
            max_steps=s["max_steps"],
            checkpoint_interval=s["checkpoint_interval"],
            validation_interval=s["validation_interval"],
        )
    except ConfigError as exc:
        raise CliUsageError(str(exc)) from exc
    train_set = _dataset(args.data, "train", "training data")
    val_set = _dataset(args.val, "test", "validation data") if args.val else None
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    write_echo(out, "train", s, args)

    def report(row):
        if row["step"] % args.log_every == 0:
            logger.info("step %d epoch %d total %.5f", row["step"], row["epoch"], row["total"])

    result = train(config, train_set, val_set, out_dir=out, resume=resume, on_step=report)
    print(f"trained {result.checkpoint.step} steps; checkpoint: {out / 'last.ckpt'}")
    if result.best_psnr is not None:
        print(f"best validation PSNR: {result.best_psnr:.3f} dB")
    return EXIT_OK


def cmd_derain(args) -> int:
    s = effective_settings("derain", args)
    files = _image_files(args.inputs)
    if not Path(args.checkpoint).is_file():
        raise CliUsageError(f"checkpoint not found: {args.checkpoint}")
    params = _load_model(args.checkpoint, s)
    out = Path(args.out)
    write_echo(out, "derain", s, args)
    for f in files:
        restored = derain_image(load_image(f), params, s["resize"])
        save_image(restored, out / f"{f.stem}.png")
    print(f"wrote {len(files)} image(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    s = effective_settings("eval", args)
    manifest = _dataset(args.data, "test", "test data")
    if not Path(args.checkpoint).is_file():
        raise CliUsageError(f"checkpoint not found: {args.checkpoint}")
    params = _load_model(args.checkpoint)
    pairs, warnings = load_pairs(manifest, skip_errors=True)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    report = evaluate_dataset(lambda x: derain_image(x, params, s["resize"]), pairs)
    report.warnings = warnings
    out = Path(args.out)
    write_echo(out, "eval", s, args)
    report.write(out, s["method"], s["dataset"])
    print(f"{report.count} pairs: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_cornermap(args) -> int:
    s = effective_settings("cornermap", args)
    src = Path(args.input)
    if not src.is_file():
        raise CliUsageError(f"input not found: {src}")
    try:
        p = HarrisParams(k=s["k"], tau=s["tau"], gauss_sigma=s["gauss_sigma"])
    except ConfigError as exc:
        raise CliUsageError(str(exc)) from exc
    image = load_image(src)
    r = harris_response(image, p)
    corners = corner_map_hard(r, p)[0, 0]
    resp = r.data[0, 0].astype(np.float64)
    span = resp.max() - resp.min()
    shown = (resp - resp.min()) / span if span > 0 else np.zeros_like(resp)
    out = Path(args.out)
    write_echo(out, "cornermap", s, args)
    save_gray(shown, out / f"{src.stem}_response.png")
    save_gray(corners, out / f"{src.stem}_corners.png")
    print(f"{int(corners.sum())} corner pixels")
    return EXIT_OK


def cmd_synth(args) -> int:
    s = effective_settings("synth", args)
    try:
        base = RainSynthesisParams(
            streak_count=s["streak_count"], length=s["length"], angle=s["angle"],
            intensity=s["intensity"], seed=s["seed"], width=s["width"],
        )
    except ConfigError as exc:
        raise CliUsageError(str(exc)) from exc
    if args.clean:
        sources = [(f.stem, lambda f=f: load_image(f)) for f in _image_files([args.clean])]
    else:
        if s["count"] < 1 or s["size"] < 1:
            raise CliUsageError("count and size must be >= 1")
        sources = [
            (f"{i:04d}", lambda i=i: synthetic_scene(s["size"], s["size"], seed=s["seed"] + i))
            for i in range(s["count"])
        ]
    out = Path(args.out)
    write_echo(out, "synth", s, args)
    entries = []
    for i, (name, load) in enumerate(sources):
        clean = load()
        p = RainSynthesisParams(base.streak_count, base.length, base.angle, base.intensity, base.seed + i, base.width)
        rainy = synthesize_rain(clean, p)
        save_image(clean, out / "clean" / f"{name}.png")
        save_image(rainy, out / "rainy" / f"{name}.png")
        entries.append(ManifestEntry(name, out / "rainy" / f"{name}.png", out / "clean" / f"{name}.png"))
    write_manifest(DatasetManifest(out, entries), out / "manifest.tsv")
    print(f"wrote {len(entries)} pairs to {out}")
    return EXIT_OK


def cmd_version(args) -> int:
    print(__version__)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shark", description="Single-image rain removal.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="key = value settings file (flags take precedence)")

    t = sub.add_parser("train", help="train a model on paired rainy/clean images")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest file")
    t.add_argument("--val", help="validation dataset directory or manifest")
    t.add_argument("--out", default="runs/shark", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=10, help="log every N steps (with -v)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--eps", type=float)
    t.add_argument("--lr-decay", type=float, help="per-epoch learning-rate factor (1 = constant)")
    t.add_argument("--lambda1", type=float, help="L1 weight")
    t.add_argument("--lambda2", type=float, help="SSIM loss weight")
    t.add_argument("--lambda3", type=float, help="Harris loss weight")
    t.add_argument("--no-ssim", dest="use_ssim", action="store_const", const=False)
    t.add_argument("--no-harris", dest="use_harris", action="store_const", const=False)
    t.add_argument("--k", type=float, help="Harris sensitivity")
    t.add_argument("--tau", type=float, help="corner threshold as a fraction of max(R)")
    t.add_argument("--soft-beta", type=float, help="sharpness of the soft corner map")
    t.add_argument("--gauss-sigma", type=float, help="structure-tensor smoothing sigma")
    t.add_argument("--base-channels", type=int)
    t.add_argument("--cbam-reduction", type=int)
    t.add_argument("--image-size", type=int, help="resize training images to N x N")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--validation-interval", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", help="restore rainy images with a trained checkpoint")
    common(d)
    d.add_argument("inputs", nargs="+", help="PNG files or directories")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--resize", type=int, help="process at N x N, then scale back")
    d.add_argument("--base-channels", type=int, help="expected model width (checked)")
    d.add_argument("--cbam-reduction", type=int, help="expected reduction (checked)")
    d.set_defaults(func=cmd_derain)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a paired test set")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--resize", type=int)
    e.add_argument("--method")
    e.add_argument("--dataset")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cornermap", help="write Harris response and corner-map PNGs")
    common(c)
    c.add_argument("input")
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=float)
    c.add_argument("--tau", type=float)
    c.add_argument("--gauss-sigma", type=float)
    c.set_defaults(func=cmd_cornermap)

    s = sub.add_parser("synth", help="generate a paired synthetic rain dataset")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--clean", help="folder of clean PNGs (default: generated scenes)")
    s.add_argument("--count", type=int, help="number of generated scenes")
    s.add_argument("--size", type=int, help="side of generated scenes")
    s.add_argument("--seed", type=int)
    s.add_argument("--streak-count", type=int)
    s.add_argument("--length", type=float)
    s.add_argument("--angle", type=float)
    s.add_argument("--intensity", type=float)
    s.add_argument("--width", type=float)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("version", help="print the package version")
    v.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"shark {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SharkError, OSError) as exc:
        print(f"shark {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
