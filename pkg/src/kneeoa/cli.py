"""Command-line entry point: ``kneeoa <subcommand> [options]``.

Option values resolve in this order: command-line flag, the subcommand's
section of ``--config`` (INI, ``key = value``, keys named like the long
flags with dashes or underscores), ``OA_DATA_ROOT`` for the data root, then
built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (
    PAPER_UNFREEZE_LAST,
    Classifier,
    FreezePolicy,
    TrainProtocol,
    apply_lora,
    pretrain_backbone,
    train_stage1,
    train_stage2,
    transfer,
)
from .dataset import AugmentPlan, assemble_augmented, read_manifest, scan_tree, stratified_split, write_manifest
from .diffusion import DenoiserNet, DiffusionTrainConfig, SampleRequest, build_schedule, sample, write_generated
from .explain import grad_cam, overlay
from .harness import (
    ExperimentReport,
    ExperimentRow,
    ExperimentSpec,
    emit_report,
    evaluate,
    external_upscale,
    load_images,
    run_experiment,
    train_grade_models,
)
from .imaging import IMAGE_SUFFIXES, ClaheParams, clahe, read_image, resize, write_image, write_rgb
from .synthetic import proxy_corpus

log = logging.getLogger("kneeoa")

DEFAULTS = {
    "seed": 0,
    "timesteps": 1000,
    "ddim_steps": 50,
    "eta": 0.0,
    "per_class_count": 200,
    "unfreeze_last": 1,
    "lora_rank": 0,
    "epochs_stage1": 3,
    "epochs_stage2": 7,
    "batch": 8,
    "lr": 1e-3,
    "size": 32,
    "tile": 8,
    "clip": 0.03,
    "epochs": 5,
    "base_channels": 32,
    "embed_dim": 128,
    "diffusion_size": 16,
    "min_steps": 0,
    "count": 200,
    "upscale_size": 256,
    "final_size": 224,
    "blend": 0.5,
    "class_": None,
    "layer": None,
    "split": "test",
    "format": "markdown",
    "model_name": "DeskCNN",
    "per_class": 40,
    "variant": "all",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "seed": dict(type=int, help="random seed (default 0)"),
        "data": dict(type=Path, help="dataset root with 0..4 grade folders (or OA_DATA_ROOT)"),
        "timesteps": dict(type=int, help="diffusion steps T (default 1000)"),
        "ddim_steps": dict(type=int, help="DDIM sampling steps S (default 50)"),
        "eta": dict(type=float, help="DDIM stochasticity (default 0)"),
        "per_class_count": dict(type=int, help="generated images per grade 1-4 (default 200)"),
        "unfreeze_last": dict(type=int, help=f"backbone layers unfrozen in stage 2 (default 1; {PAPER_UNFREEZE_LAST} at full scale)"),
        "lora_rank": dict(type=int, help="LoRA rank on the first head layer, 0 disables (default 0)"),
        "epochs_stage1": dict(type=int, help="frozen-backbone epochs (default 3)"),
        "epochs_stage2": dict(type=int, help="fine-tuning epochs (default 7)"),
        "batch": dict(type=int, help="batch size (default 8)"),
        "lr": dict(type=float, help="learning rate (default 1e-3)"),
        "size": dict(type=int, help="classifier input size (default 32)"),
        "tile": dict(type=int, help="CLAHE tile size in pixels (default 8)"),
        "clip": dict(type=float, help="CLAHE clip limit (default 0.03)"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kneeoa", description="Knee OA grading pipeline at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", type=Path, help="INI file with per-subcommand sections")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="CLAHE every image under a tree")
    p.add_argument("--in", dest="dir_in", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p, "tile", "clip")

    p = sub.add_parser("diff-train", help="train per-grade denoisers on the train split")
    p.add_argument("--out", type=Path, required=True, help="directory for grade{g}.nngc")
    p.add_argument("--grade", type=int, action="append", help="grade to train (repeatable; default 1-4)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--diffusion-size", dest="diffusion_size", type=int, default=None)
    p.add_argument("--min-steps", dest="min_steps", type=int, default=None)
    _common(p, "data", "seed", "timesteps", "batch", "lr")

    p = sub.add_parser("diff-sample", help="generate images from one denoiser")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--grade", type=int, required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _common(p, "seed", "timesteps", "ddim_steps", "eta")

    p = sub.add_parser("upscale", help="enlarge images (external command or built-in Lanczos)")
    p.add_argument("--in", dest="dir_in", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--command", dest="template", help="external upscaler template with {in} and {out}")
    p.add_argument("--upscale-size", dest="upscale_size", type=int, default=None)
    p.add_argument("--final-size", dest="final_size", type=int, default=None)

    p = sub.add_parser("assemble", help="split a tree and append generated images to train")
    p.add_argument("--generated", type=Path, help="directory with {grade}/ generated images")
    p.add_argument("--out", type=Path, required=True, help="manifest TSV to write")
    _common(p, "data", "seed", "per_class_count")

    p = sub.add_parser("pretrain", help="pretrain a backbone on the texture proxy task")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    _common(p, "seed", "size", "batch", "lr")

    p = sub.add_parser("train", help="two-stage fine-tuning on the train split")
    p.add_argument("--manifest", type=Path, help="manifest TSV (default: split --data by seed)")
    p.add_argument("--pretrained", type=Path, help="backbone checkpoint from `pretrain`")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clahe", action="store_true", help="apply CLAHE to original-origin images")
    _common(p, "data", "seed", "size", "unfreeze_last", "lora_rank", "epochs_stage1", "epochs_stage2",
            "batch", "lr", "tile", "clip")

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=("train", "test", "valid"), default=None)
    p.add_argument("--clahe", action="store_true")
    _common(p, "data", "seed", "tile", "clip")

    p = sub.add_parser("gradcam", help="write a Grad-CAM overlay")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--class", dest="class_", type=int, help="target grade (default: predicted)")
    p.add_argument("--layer", type=int, help="backbone stage index (default: last)")
    p.add_argument("--blend", type=float, default=None)
    p.add_argument("--out", type=Path, required=True, help=".ppm or .png")

    p = sub.add_parser("experiment", help="run original / preprocessed / augmented cells")
    p.add_argument("--variant", choices=("original", "preprocessed", "augmented", "all"), default=None)
    p.add_argument("--diffusion-dir", dest="diffusion_dir", type=Path)
    p.add_argument("--work-dir", dest="work_dir", type=Path)
    p.add_argument("--pretrained", type=Path)
    p.add_argument("--results", type=Path, required=True, help="directory for per-cell JSON")
    p.add_argument("--model-name", dest="model_name", default=None)
    p.add_argument("--upscale-size", dest="upscale_size", type=int, default=None)
    _common(p, "data", "seed", "timesteps", "ddim_steps", "eta", "per_class_count", "unfreeze_last", "lora_rank",
            "epochs_stage1", "epochs_stage2", "batch", "lr", "size", "tile", "clip")

    p = sub.add_parser("report", help="render results as the comparison table")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--format", choices=("markdown", "csv"), default=None)
    p.add_argument("--split", choices=("test", "valid"), default=None)
    p.add_argument("--out", type=Path)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[command]


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace, env=os.environ) -> argparse.Namespace:
    """Fill unset options from the config file, the environment, then defaults."""
    section = {}
    if args.config is not None:
        cfg = configparser.ConfigParser()
        if not cfg.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        if cfg.has_section(args.command):
            section = {k.replace("-", "_"): v for k, v in cfg.items(args.command)}
        else:
            section = {k.replace("-", "_"): v for k, v in cfg.defaults().items()}
    types = {a.dest: a.type for a in _subparser(parser, args.command)._actions}
    for dest in list(vars(args)):
        if getattr(args, dest) is not None:
            continue
        if dest in section:
            conv = types.get(dest) or str
            setattr(args, dest, conv(section[dest]))
        elif dest == "data" and env.get("OA_DATA_ROOT"):
            args.data = Path(env["OA_DATA_ROOT"])
        elif dest in DEFAULTS:
            setattr(args, dest, DEFAULTS[dest])
    return args


def _require_data(args) -> Path:
    if args.data is None:
        raise UsageError("no dataset root: pass --data, set it in the config file, or export OA_DATA_ROOT")
    return args.data


def _protocol(args) -> TrainProtocol:
    return TrainProtocol(args.epochs_stage1, args.epochs_stage2, args.batch, args.lr, args.seed)


def _clahe_params(args) -> ClaheParams:
    return ClaheParams(args.tile, args.tile, args.clip)


def _manifest(args):
    if getattr(args, "manifest", None) is not None:
        return read_manifest(args.manifest)
    return stratified_split(scan_tree(_require_data(args)), seed=args.seed)


# -- subcommands ----------------------------------------------------------------

def cmd_prep(args) -> int:
    params = _clahe_params(args)
    count = 0
    for src in sorted(p for p in args.dir_in.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
        dst = args.out / src.relative_to(args.dir_in)
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_image(dst, clahe(read_image(src), params))
        count += 1
    print(f"prep: {count} images written to {args.out}")
    return 0


def cmd_diff_train(args) -> int:
    manifest = _manifest(args)
    cfg = DiffusionTrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
                               timesteps=args.timesteps, base_channels=args.base_channels, embed_dim=args.embed_dim)
    paths = train_grade_models(manifest, args.out, cfg, args.diffusion_size, None,
                               tuple(args.grade or (1, 2, 3, 4)), args.min_steps)
    for p in paths:
        print(f"diff-train: wrote {p}")
    return 0


def cmd_diff_sample(args) -> int:
    net = DenoiserNet.load(args.model)
    imgs = sample(net, build_schedule(args.timesteps), SampleRequest(args.count, args.ddim_steps, args.eta, args.seed))
    write_generated(imgs, args.out, args.grade)
    print(f"diff-sample: {len(imgs)} images in {args.out / str(args.grade)}")
    return 0


def cmd_upscale(args) -> int:
    summary = external_upscale(args.dir_in, args.out, args.template, args.upscale_size, args.final_size)
    print(f"upscale: {summary.processed} processed, {len(summary.failures)} failed")
    for path, err in summary.failures:
        print(f"  {path}: {err}", file=sys.stderr)
    return 1 if summary.failures else 0


def cmd_assemble(args) -> int:
    manifest = stratified_split(scan_tree(_require_data(args)), seed=args.seed)
    if args.generated is not None:
        manifest = assemble_augmented(manifest, args.generated, AugmentPlan.uniform(args.per_class_count))
    write_manifest(args.out, manifest)
    print(f"assemble: {len(manifest)} samples ({len(manifest.split('train'))} train) -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    imgs, labels = proxy_corpus(args.per_class, args.size, seed=args.seed + 5)
    model, hist = pretrain_backbone(imgs, labels, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                                    seed=args.seed)
    model.save(args.out)
    print(f"pretrain: loss {[round(h, 4) for h in hist]} -> {args.out}")
    return 0


def _load_split(manifest, split, size, params):
    members = manifest.split(split)
    imgs = []
    for s in members:
        imgs.extend(load_images([s], size, None if s.origin == "generated" else params))
    return imgs, np.array([s.grade for s in members])


def cmd_train(args) -> int:
    manifest = _manifest(args)
    params = _clahe_params(args) if args.clahe else None
    imgs, labels = _load_split(manifest, "train", args.size, params)
    if args.pretrained is not None:
        model = transfer(Classifier.load(args.pretrained), seed=args.seed)
    else:
        model = Classifier(args.size, seed=args.seed)
    if args.lora_rank:
        apply_lora(model, ["head.fc1"], rank=args.lora_rank, seed=args.seed)
    h1 = train_stage1(model, imgs, labels, _protocol(args))
    h2 = train_stage2(model, imgs, labels, _protocol(args), FreezePolicy(args.unfreeze_last))
    model.save(args.out)
    print(f"train: stage1 {[round(h, 4) for h in h1]} stage2 {[round(h, 4) for h in h2]} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = Classifier.load(args.checkpoint)
    params = _clahe_params(args) if args.clahe else None
    imgs, labels = _load_split(_manifest(args), args.split, model.input_size, params)
    print(json.dumps(evaluate(model, imgs, labels).to_dict(), indent=2))
    return 0


def cmd_gradcam(args) -> int:
    model = Classifier.load(args.checkpoint)
    img = read_image(args.image)
    if (img.width, img.height) != (model.input_size, model.input_size):
        img = resize(img, model.input_size, model.input_size)
    target = args.class_ if args.class_ is not None else int(model.predict_proba([img])[0].argmax())
    cam = grad_cam(model, img, target, args.layer)
    write_rgb(args.out, overlay(img, cam, args.blend))
    print(f"gradcam: class {target}, layer {cam.layer} -> {args.out}")
    return 0


def cmd_experiment(args) -> int:
    variants = ("original", "preprocessed", "augmented") if args.variant == "all" else (args.variant,)
    args.results.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport()
    for variant in variants:
        spec = ExperimentSpec(
            variant, _require_data(args), diffusion_dir=args.diffusion_dir, work_dir=args.work_dir,
            model_name=args.model_name, protocol=_protocol(args), policy=FreezePolicy(args.unfreeze_last),
            lora_rank=args.lora_rank, seed=args.seed, input_size=args.size, clahe=_clahe_params(args),
            plan=AugmentPlan.uniform(args.per_class_count), ddim_steps=args.ddim_steps, eta=args.eta,
            timesteps=args.timesteps, upscale_size=args.upscale_size or 2 * args.size, pretrained=args.pretrained)
        row = run_experiment(spec)
        row.save(args.results / f"{args.model_name}_{variant}_seed{args.seed}.json")
        report.add(row)
        log.info("%s/%s: test %.3f valid %.3f", args.model_name, variant, row.test.accuracy, row.valid.accuracy)
    print(emit_report(report), end="")
    return 0


def cmd_report(args) -> int:
    report = ExperimentReport()
    for path in sorted(args.results.glob("*.json")):
        report.add(ExperimentRow.load(path))
    text = emit_report(report, args.format, args.split)
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


COMMANDS = {
    "prep": cmd_prep,
    "diff-train": cmd_diff_train,
    "diff-sample": cmd_diff_sample,
    "upscale": cmd_upscale,
    "assemble": cmd_assemble,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolve(parser, args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"kneeoa {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
