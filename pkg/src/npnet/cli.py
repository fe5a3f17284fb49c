"""Command-line entry point: ``npnet <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, DatasetSpec, load_image, load_split, write_synthetic
from .gradcheck import gradcheck
from .metrics import evaluate, predict_labels
from .model import ConfigError, ModelConfig, build_npnet, count_macs, count_params
from .train import NonFiniteLossError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# lr / batch size per dataset as reported for the original experiments;
# target None keeps the native resolution
PRESETS = {
    "cvc": {"layout": "cvc", "lr": 1e-4, "batch_size": 2, "target_size": None},
    "skin": {"layout": "skin", "lr": 1e-3, "batch_size": 4, "target_size": "224x224"},
    "luna": {"layout": "luna", "lr": 1e-3, "batch_size": 2, "target_size": None},
}

DEFAULTS = {
    "layout": "generic",
    "target_size": None,
    "epochs": 100,
    "lr": 1e-3,
    "batch_size": 2,
    "seed": 0,
    "attention": "cam",
    "widths": "32,64,128",
    "reduction": 16,
    "split_fraction": 0.8,
    "checkpoint_every": 0,
}

ABLATION_LABELS = {"none": "no", "se": "senet", "cam": "cam"}

log = logging.getLogger("npnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_size(text: str) -> tuple[int, int]:
    """``"WxH"`` -> ``(h, w)``."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like WxH, got {text!r}") from None
    return h, w


def parse_widths(text: str) -> tuple[int, int, int]:
    try:
        widths = tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"widths must be three comma-separated integers, got {text!r}") from None
    if len(widths) != 3:
        raise UsageError(f"widths must be three comma-separated integers, got {text!r}")
    return widths


# -- argument plumbing ---------------------------------------------------------


def _model_flags(p):
    p.add_argument("--attention", choices=["none", "se", "cam"])
    p.add_argument("--widths", help="three channel widths, e.g. 32,64,128")
    p.add_argument("--reduction", type=int, help="attention reduction ratio")


def _data_flags(p, required=True):
    p.add_argument("--data-dir", required=required)
    p.add_argument("--layout", choices=["cvc", "skin", "luna", "generic"])
    p.add_argument("--target-size", help="resize to WxH (multiples of 8)")
    p.add_argument("--split-fraction", type=float)
    p.add_argument("--seed", type=int, help="seeds the split, init and shuffling")


def _train_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    _model_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="npnet", description="Non-pooling segmentation network")
    parser.add_argument("--config", help="JSON file of flag values; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train on the seeded train split")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="append per-epoch log lines here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the seeded test split")
    p.add_argument("--ckpt", required=True)
    _data_flags(p)
    p.add_argument("--report", help="write the TSV report here")

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="binary mask PNG")
    p.add_argument("--overlay", help="optional overlay PNG")

    p = sub.add_parser("analyze", help="parameter and MAC counts")
    _model_flags(p)
    p.add_argument("--input-size", required=True, action="append", help="WxH; may be repeated")
    p.add_argument("--format", choices=["table", "tsv"], default="table")

    p = sub.add_parser("ablate", help="train and compare the three attention variants")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--out-dir", help="keep per-variant checkpoints here")
    p.add_argument("--report", help="write the comparison table here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic rectangle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve(args, parser) -> dict:
    """Merge built-in defaults < preset < config file < explicit flags."""
    explicit = {k: v for k, v in vars(args).items() if v is not None}
    merged = dict(DEFAULTS)
    from_file = {}
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = sorted(set(from_file) - set(vars(args)) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"config file {args.config}: unknown keys {unknown}")
    preset = explicit.get("preset") or from_file.get("preset")
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        merged.update(PRESETS[preset])
    merged.update(from_file)
    merged.update(explicit)
    return merged


def _model_config(opts) -> ModelConfig:
    return ModelConfig(
        widths=parse_widths(opts["widths"]),
        reduction=int(opts["reduction"]),
        attention=opts["attention"],
    )


def _dataset_spec(opts) -> DatasetSpec:
    target = opts.get("target_size")
    try:
        return DatasetSpec(
            root=opts["data_dir"],
            layout=opts["layout"],
            target_size=parse_size(target) if target else None,
            split_fraction=float(opts["split_fraction"]),
            split_seed=int(opts["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(opts, out=None, log_path=None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(opts["epochs"]),
            learning_rate=float(opts["lr"]),
            batch_size=int(opts["batch_size"]),
            seed=int(opts["seed"]),
            checkpoint_path=out,
            checkpoint_every=int(opts["checkpoint_every"]),
            log_path=log_path,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _pairs(samples):
    return [(image, mask) for _, image, mask in samples]


def _named(samples):
    return [(rec.image_path.stem, image, mask) for rec, image, mask in samples]


# -- commands --------------------------------------------------------------------


def cmd_train(opts, out):
    spec = _dataset_spec(opts)
    model = build_npnet(_model_config(opts), seed=int(opts["seed"]))
    train_set, test_set = load_split(spec)
    log.info("train %d / test %d samples", len(train_set), len(test_set))
    history = train(model, _pairs(train_set), _train_config(opts, opts["out"], opts.get("log")))
    out.write(f"trained {len(history)} epochs, final loss {history[-1].mean_loss:.6f}; checkpoint {opts['out']}\n")


def cmd_eval(opts, out):
    spec = _dataset_spec(opts)
    model = load_checkpoint(opts["ckpt"])
    _, test_set = load_split(spec)
    report = evaluate(model, _named(test_set))
    text = report.to_tsv()
    if opts.get("report"):
        Path(opts["report"]).write_text(text)
    out.write(text)


def cmd_predict(opts, out):
    model = load_checkpoint(opts["ckpt"])
    image = load_image(opts["input"])
    h, w = image.shape[1:]
    th, tw = max(8, round(h / 8) * 8), max(8, round(w / 8) * 8)
    x = image if (th, tw) == (h, w) else ops.bilinear_resize(image[None], th, tw)[0]
    labels = predict_labels(model, x[None])[0].astype(np.uint8)
    mask = Image.fromarray(labels * 255)
    if (th, tw) != (h, w):
        mask = mask.resize((w, h), Image.NEAREST)
    mask.save(opts["out"])
    if opts.get("overlay"):
        rgb = image.transpose(1, 2, 0)
        fg = np.asarray(mask) > 0
        blended = rgb.copy()
        blended[fg] = 0.5 * rgb[fg] + 0.5 * np.array([1.0, 0.0, 0.0], dtype=rgb.dtype)
        Image.fromarray(np.round(blended * 255).astype(np.uint8)).save(opts["overlay"])
    out.write(f"foreground pixels: {int(np.count_nonzero(np.asarray(mask)))} of {h * w}\n")


def analyze_text(model, sizes, fmt="table") -> str:
    params = count_params(model)
    lines = []
    for h, w in sizes:
        report = count_macs(model, h, w)
        if fmt == "tsv":
            lines.append("layer\tin_channels\tout_channels\tkernel\tout_h\tout_w\tmacs")
            for r in report.layers:
                lines.append(f"{r.name}\t{r.in_channels}\t{r.out_channels}\t{r.kernel}\t{r.out_h}\t{r.out_w}\t{r.macs}")
            lines.append(f"TOTAL_PARAMS\t\t\t\t\t\t{params}")
            lines.append(f"TOTAL_MACS_{w}x{h}\t\t\t\t\t\t{report.total}")
        else:
            lines.append(f"input {w}x{h}")
            lines.append(f"{'layer':<22}{'cin':>6}{'cout':>6}{'k':>3}{'out':>11}{'MACs':>15}")
            for r in report.layers:
                lines.append(
                    f"{r.name:<22}{r.in_channels:>6}{r.out_channels:>6}{r.kernel:>3}"
                    f"{f'{r.out_h}x{r.out_w}':>11}{r.macs:>15,}"
                )
            lines.append(f"params: {params} ({params / 1e6:.3f} M)")
            lines.append(f"MACs:   {report.total} ({report.total / 1e9:.3f} G)")
            lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def cmd_analyze(opts, out):
    model = build_npnet(_model_config(opts))
    sizes = [parse_size(s) for s in opts["input_size"]]
    for h, w in sizes:
        if h % 8 or w % 8:
            raise UsageError(f"input size {w}x{h} must be divisible by 8")
    out.write(analyze_text(model, sizes, opts["format"]))


def run_ablation(train_set, test_set, opts, out_dir=None) -> list[tuple[str, float, float]]:
    rows = []
    for variant in ("none", "se", "cam"):
        cfg = replace(_model_config({**opts, "attention": "cam"}), attention=variant)
        model = build_npnet(cfg, seed=int(opts["seed"]))
        ckpt = str(Path(out_dir) / f"{variant}.npnt") if out_dir else None
        train(model, _pairs(train_set), _train_config(opts, ckpt))
        report = evaluate(model, _named(test_set))
        iou, dice = report.mean
        rows.append((ABLATION_LABELS[variant], iou, dice))
    return rows


def ablation_table(rows) -> str:
    lines = ["attention\tiou\tdice"]
    lines += [f"{label}\t{iou:.4f}\t{dice:.4f}" for label, iou, dice in rows]
    return "\n".join(lines) + "\n"


def cmd_ablate(opts, out):
    spec = _dataset_spec(opts)
    train_set, test_set = load_split(spec)
    if opts.get("out_dir"):
        Path(opts["out_dir"]).mkdir(parents=True, exist_ok=True)
    text = ablation_table(run_ablation(train_set, test_set, opts, opts.get("out_dir")))
    if opts.get("report"):
        Path(opts["report"]).write_text(text)
    out.write(text)


def cmd_gradcheck(opts, out):
    report = gradcheck(seed=int(opts["seed"]))
    out.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_synth(opts, out):
    root = write_synthetic(opts["out"], int(opts["count"]), int(opts["size"]), int(opts["seed"]))
    out.write(f"wrote {opts['count']} samples to {root}\n")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        opts = resolve(args, parser)
        return COMMANDS[args.command](opts, out) or EXIT_OK
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        err.write(f"usage error: invalid model configuration: {exc}\n")
        return EXIT_USAGE
    except (DataError, CheckpointError, ops.ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        err.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NonFiniteLossError as exc:
        err.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
