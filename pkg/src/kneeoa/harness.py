"""Metrics, the three-variant experiment runner, report emission and the upscaler hook.

Variants:

* ``original``: raw images from the split manifest.
* ``preprocessed``: the same images after CLAHE.
* ``augmented``: CLAHE images plus diffusion-generated training images,
  enlarged through the Lanczos chain and resized to the classifier input.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import (
    Classifier,
    FreezePolicy,
    TrainProtocol,
    apply_lora,
    pretrain_backbone,
    train_stage1,
    train_stage2,
    transfer,
)
from .dataset import (
    DEFAULT_RATIOS,
    GRADES,
    VARIANTS,
    AugmentPlan,
    Manifest,
    assemble_augmented,
    scan_tree,
    stratified_split,
)
from .diffusion import (
    DenoiserNet,
    DiffusionTrainConfig,
    SampleRequest,
    build_schedule,
    sample,
    train_denoiser,
    write_generated,
)
from .imaging import (
    IMAGE_SUFFIXES,
    ClaheParams,
    GrayImage,
    ResampleFilter,
    clahe,
    read_image,
    resize,
    upscale_chain,
    write_image,
)
from .synthetic import proxy_corpus

log = logging.getLogger(__name__)

VARIANT_TITLES = {"original": "Original", "preprocessed": "Preprocessed", "augmented": "Augmented"}


class ContractError(ValueError):
    pass


class MissingModelError(FileNotFoundError):
    pass


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    per_class_recall: tuple[float, ...]
    macro_f1: float
    confusion: np.ndarray = field(compare=False)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_recall": list(self.per_class_recall),
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metrics":
        return cls(float(d["accuracy"]), tuple(float(r) for r in d["per_class_recall"]), float(d["macro_f1"]),
                   np.array(d["confusion"], dtype=np.int64))


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int = len(GRADES)) -> Metrics:
    """Confusion matrix (rows true, columns predicted) with derived scores."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions but {len(labels)} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"{name} outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm)
    recall = [_ratio(tp[c], cm[c].sum()) for c in range(n_classes)]
    precision = [_ratio(tp[c], cm[:, c].sum()) for c in range(n_classes)]
    f1 = [_ratio(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return Metrics(_ratio(tp.sum(), cm.sum()), tuple(recall), float(np.mean(f1)), cm)


def evaluate(model: Classifier, images, labels) -> Metrics:
    preds = model.predict_proba(images).argmax(axis=1) if len(labels) else np.zeros(0, dtype=int)
    return confusion(preds, labels, model.n_classes)


# -- experiment ---------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    """Everything one (model, variant) cell needs; ``seed`` drives every random stage."""

    variant: str
    data_root: Path
    diffusion_dir: Path | None = None
    work_dir: Path | None = None
    model_name: str = "DeskCNN"
    protocol: TrainProtocol = TrainProtocol()
    policy: FreezePolicy = FreezePolicy(1)
    lora_rank: int = 0
    seed: int = 0
    input_size: int = 32
    clahe: ClaheParams = ClaheParams()
    plan: AugmentPlan = AugmentPlan()
    ratios: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_RATIOS))
    ddim_steps: int = 50
    eta: float = 0.0
    timesteps: int = 1000
    upscale_size: int = 64
    pretrained: Path | None = None
    pretrain_epochs: int = 3
    pretrain_per_class: int = 40

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "data_root", Path(self.data_root))


@dataclass
class ExperimentRow:
    model: str
    variant: str
    accuracy: float
    test: Metrics | None = None
    valid: Metrics | None = None
    train_count: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "variant": self.variant,
            "accuracy": self.accuracy,
            "train_count": self.train_count,
            "test": None if self.test is None else self.test.to_dict(),
            "valid": None if self.valid is None else self.valid.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentRow":
        return cls(d["model"], d["variant"], float(d["accuracy"]),
                   None if d.get("test") is None else Metrics.from_dict(d["test"]),
                   None if d.get("valid") is None else Metrics.from_dict(d["valid"]),
                   int(d.get("train_count", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentRow":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow] = field(default_factory=list)

    def add(self, row: ExperimentRow) -> None:
        if any(r.model == row.model and r.variant == row.variant for r in self.rows):
            raise ContractError(f"duplicate report cell ({row.model}, {row.variant})")
        self.rows.append(row)

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def cell(self, model: str, variant: str) -> ExperimentRow | None:
        return next((r for r in self.rows if r.model == model and r.variant == variant), None)


def diffusion_model_path(model_dir, grade: int) -> Path:
    return Path(model_dir) / f"grade{grade}.nngc"


def load_images(samples, size: int, params: ClaheParams | None = None) -> list[GrayImage]:
    """Read samples, optionally CLAHE them, and bring them to ``size x size``."""
    out = []
    for s in samples:
        img = read_image(s.image_ref)
        if params is not None:
            img = clahe(img, params)
        if img.width != size or img.height != size:
            img = resize(img, size, size, ResampleFilter.LANCZOS3)
        out.append(img)
    return out


def split_manifest(spec: ExperimentSpec) -> Manifest:
    return stratified_split(scan_tree(spec.data_root), spec.ratios, spec.seed)


def train_grade_models(manifest: Manifest, model_dir, config: DiffusionTrainConfig, image_size: int = 16,
                       params: ClaheParams | None = ClaheParams(), grades: Sequence[int] = (1, 2, 3, 4),
                       min_steps: int = 0) -> list[Path]:
    """Train one denoiser per grade on that grade's CLAHE'd train images.

    ``min_steps`` raises the epoch count for small grades so every model sees
    at least that many optimizer steps.
    """
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for grade in grades:
        members = [s for s in manifest.split("train") if s.grade == grade]
        imgs = load_images(members, image_size, params)
        steps_per_epoch = max(1, -(-len(imgs) // config.batch_size))
        epochs = max(config.epochs, -(-min_steps // steps_per_epoch))
        net, hist = train_denoiser(imgs, replace(config, epochs=epochs, seed=config.seed * 10 + grade))
        log.info("grade %d denoiser: %d images, loss %s", grade, len(imgs), [round(h, 4) for h in hist])
        path = diffusion_model_path(model_dir, grade)
        net.save(path)
        paths.append(path)
    return paths


def generate_augmentation(model_dir, out_dir, plan: AugmentPlan, final_size: int, upscale_size: int,
                          ddim_steps: int = 50, eta: float = 0.0, seed: int = 0, timesteps: int = 1000) -> Path:
    """Sample each grade's quota, push it through the Lanczos chain, and write ``out_dir/{grade}/``."""
    needed = [g for g, n in plan.per_grade_counts.items() if n > 0]
    for grade in needed:
        if not diffusion_model_path(model_dir, grade).is_file():
            raise MissingModelError(
                f"no trained diffusion model for grade {grade}: expected {diffusion_model_path(model_dir, grade)}"
                f" (train it with `kneeoa diff-train --grade {grade}`)")
    schedule = build_schedule(timesteps)
    for grade in needed:
        net = DenoiserNet.load(diffusion_model_path(model_dir, grade))
        request = SampleRequest(plan.per_grade_counts[grade], ddim_steps, eta, seed * 100_000 + grade * 10_000)
        images = [upscale_chain(img, upscale_size, final_size) for img in sample(net, schedule, request)]
        write_generated(images, out_dir, grade)
    return Path(out_dir)


def build_classifier(spec: ExperimentSpec) -> Classifier:
    if spec.pretrained is not None:
        base = Classifier.load(spec.pretrained)
    else:
        proxy = proxy_corpus(spec.pretrain_per_class, spec.input_size, seed=spec.seed + 5)
        base, _ = pretrain_backbone(*proxy, epochs=spec.pretrain_epochs, seed=spec.seed)
    model = transfer(base, seed=spec.seed)
    if spec.lora_rank:
        apply_lora(model, ["head.fc1"], rank=spec.lora_rank, seed=spec.seed)
    return model


def run_experiment(spec: ExperimentSpec) -> ExperimentRow:
    """Build the variant's data, fine-tune in two stages, and score test and valid splits."""
    manifest = split_manifest(spec).with_variant(spec.variant)
    params = None if spec.variant == "original" else spec.clahe
    with tempfile.TemporaryDirectory() as tmp:
        if spec.variant == "augmented":
            if spec.diffusion_dir is None:
                raise MissingModelError("augmented variant needs diffusion_dir with per-grade denoisers")
            root = Path(spec.work_dir) if spec.work_dir is not None else Path(tmp)
            gen_dir = root / f"generated-seed{spec.seed}"
            generate_augmentation(spec.diffusion_dir, gen_dir, spec.plan, spec.input_size, spec.upscale_size,
                                  spec.ddim_steps, spec.eta, spec.seed, spec.timesteps)
            manifest = assemble_augmented(manifest, gen_dir, spec.plan)
        train = manifest.split("train")
        # generated images already went through CLAHE before diffusion training
        train_imgs = _load_mixed(train, spec.input_size, params)
    train_labels = np.array([s.grade for s in train])
    model = build_classifier(spec)
    train_stage1(model, train_imgs, train_labels, spec.protocol)
    train_stage2(model, train_imgs, train_labels, spec.protocol, spec.policy)
    scores = {}
    for split in ("test", "valid"):
        members = manifest.split(split)
        scores[split] = evaluate(model, load_images(members, spec.input_size, params), [s.grade for s in members])
    return ExperimentRow(spec.model_name, spec.variant, scores["test"].accuracy, scores["test"], scores["valid"],
                         len(train))


def _load_mixed(samples, size: int, params: ClaheParams | None) -> list[GrayImage]:
    out = []
    for s in samples:
        out.extend(load_images([s], size, None if s.origin == "generated" else params))
    return out


# -- report -------------------------------------------------------------------

def percent(fraction: float) -> int:
    """Whole percent, truncated toward zero."""
    return int(np.floor(fraction * 100 + 1e-9))


def _cells(report: ExperimentReport, split: str) -> list[list[str]]:
    rows = []
    for model in report.models():
        cells = [model]
        for variant in VARIANTS:
            row = report.cell(model, variant)
            if row is None:
                cells.append("-")
                continue
            acc = row.accuracy
            if split == "valid":
                if row.valid is None:
                    cells.append("-")
                    continue
                acc = row.valid.accuracy
            cells.append(f"{percent(acc)}%")
        rows.append(cells)
    return rows


def emit_report(report: ExperimentReport, fmt: str = "markdown", split: str = "test") -> str:
    """Render one row per model with a column per variant."""
    header = ["Model"] + [VARIANT_TITLES[v] for v in VARIANTS]
    rows = _cells(report, split)
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    raise ContractError(f"unknown report format {fmt!r}")


# -- external upscaler ----------------------------------------------------------

@dataclass
class UpscaleSummary:
    processed: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


def _image_paths(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def external_upscale(dir_in, dir_out, command_template: str | None = None, upscale_size: int = 256,
                     final_size: int = 224, timeout: float | None = 600) -> UpscaleSummary:
    """Enlarge every image under ``dir_in`` into ``dir_out``, keeping relative paths.

    With a template such as ``"my-sr {in} {out}"`` the external program does
    the enlargement; otherwise the built-in Lanczos step to ``upscale_size``
    runs.  Both paths finish with a Lanczos resize to ``final_size``.
    """
    if command_template is not None and ("{in}" not in command_template or "{out}" not in command_template):
        raise ContractError("command template must contain {in} and {out}")
    dir_in, dir_out = Path(dir_in), Path(dir_out)
    summary = UpscaleSummary()
    with tempfile.TemporaryDirectory() as tmp:
        for i, src in enumerate(_image_paths(dir_in)):
            dst = dir_out / src.relative_to(dir_in)
            try:
                if command_template is None:
                    out = upscale_chain(read_image(src), upscale_size, final_size)
                else:
                    mid = Path(tmp) / f"{i:06d}{src.suffix}"
                    cmd = command_template.replace("{in}", shlex.quote(str(src))).replace("{out}", shlex.quote(str(mid)))
                    proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True, timeout=timeout)
                    if proc.returncode != 0:
                        raise RuntimeError(f"exit status {proc.returncode}: {proc.stderr.strip()[:200]}")
                    out = resize(read_image(mid), final_size, final_size, ResampleFilter.LANCZOS3)
                dst.parent.mkdir(parents=True, exist_ok=True)
                write_image(dst, out)
                summary.processed += 1
            except Exception as exc:  # noqa: BLE001 - every per-file failure is collected
                log.warning("upscale failed for %s: %s", src, exc)
                summary.failures.append((str(src), str(exc)))
    return summary
