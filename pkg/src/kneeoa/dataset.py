"""Dataset catalog: scanning, stratified splits, and augmented assembly.

On-disk layout is ``root/{0..4}/*.pgm``; the grade comes from the directory.
Manifests are immutable and serialize to one tab-separated record per line.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .imaging import IMAGE_SUFFIXES, ImageError, read_image

log = logging.getLogger(__name__)

GRADES = (0, 1, 2, 3, 4)
SPLITS = ("train", "test", "valid")
UNASSIGNED = "unassigned"
ORIGINS = ("original", "generated")
VARIANTS = ("original", "preprocessed", "augmented")
DEFAULT_RATIOS = {"train": 0.75, "test": 0.15, "valid": 0.10}


class LayoutError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    image_ref: str
    grade: int
    split: str = UNASSIGNED
    origin: str = "original"

    def __post_init__(self):
        if self.grade not in GRADES:
            raise ValueError(f"grade must be one of {GRADES}, got {self.grade}")
        if self.split not in SPLITS + (UNASSIGNED,):
            raise ValueError(f"unknown split {self.split!r}")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == "generated" and self.split in ("test", "valid"):
            raise ValueError(f"generated sample {self.id} cannot be in the {self.split} split")


@dataclass(frozen=True)
class Manifest:
    samples: tuple[Sample, ...] = ()
    variant: str = "original"
    seed: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        ordered = tuple(sorted(self.samples, key=lambda s: s.id))
        ids = [s.id for s in ordered]
        dupes = [k for k, n in Counter(ids).items() if n > 1]
        if dupes:
            raise ValueError(f"duplicate sample ids: {dupes[:5]}")
        object.__setattr__(self, "samples", ordered)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def with_variant(self, variant: str) -> "Manifest":
        return replace(self, variant=variant)


@dataclass(frozen=True)
class AugmentPlan:
    """Number of generated images to add per grade (grade 0 gets none by default)."""

    per_grade_counts: Mapping[int, int] = field(default_factory=lambda: {1: 200, 2: 200, 3: 200, 4: 200})

    def __post_init__(self):
        counts = {int(g): int(n) for g, n in self.per_grade_counts.items()}
        for g, n in counts.items():
            if g not in GRADES:
                raise ValueError(f"unknown grade {g} in augment plan")
            if n < 0:
                raise ValueError(f"negative count for grade {g}")
        object.__setattr__(self, "per_grade_counts", {g: counts.get(g, 0) for g in GRADES})

    @classmethod
    def uniform(cls, count: int, grades: Iterable[int] = (1, 2, 3, 4)) -> "AugmentPlan":
        return cls({g: count for g in grades})

    def total(self) -> int:
        return sum(self.per_grade_counts.values())


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_tree(root, check_readable: bool = True) -> Manifest:
    """Catalog ``root/{grade}/*`` images; unreadable files are logged and skipped."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"{root} is not a directory")
    samples = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name not in {str(g) for g in GRADES}:
            raise LayoutError(f"unexpected subdirectory {sub.name!r} under {root} (expected 0..4)")
        grade = int(sub.name)
        for path in _image_files(sub):
            if check_readable:
                try:
                    read_image(path)
                except (ImageError, OSError, ValueError) as exc:
                    log.warning("skipping unreadable image %s: %s", path, exc)
                    continue
            samples.append(Sample(id=f"{grade}/{path.stem}", image_ref=str(path), grade=grade))
    return Manifest(tuple(samples), variant="original")


def split_sizes(n: int, ratios: Mapping[str, float] = DEFAULT_RATIOS) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` items.

    Each split gets the floor of its share; leftover items go to the splits
    with the largest fractional parts, ties resolved train, test, valid.
    Every count is therefore within 1 of its exact target.
    """
    exact = {k: n * ratios[k] for k in SPLITS}
    sizes = {k: int(np.floor(exact[k] + 1e-9)) for k in SPLITS}
    leftover = n - sum(sizes.values())
    by_fraction = sorted(SPLITS, key=lambda k: -(exact[k] - sizes[k]))
    for k in by_fraction[:leftover]:
        sizes[k] += 1
    return sizes


def stratified_split(manifest: Manifest, ratios: Mapping[str, float] = DEFAULT_RATIOS, seed: int = 0) -> Manifest:
    if set(ratios) != set(SPLITS):
        raise ValueError(f"ratios must name exactly {SPLITS}")
    if abs(sum(ratios.values()) - 1.0) > 1e-9 or min(ratios.values()) < 0:
        raise ValueError("ratios must be non-negative and sum to 1")
    out = []
    for grade in GRADES:
        members = sorted((s for s in manifest.samples if s.grade == grade), key=lambda s: s.id)
        if not members:
            continue
        rng = np.random.default_rng([seed, grade])
        order = rng.permutation(len(members))
        sizes = split_sizes(len(members), ratios)
        labels = ["train"] * sizes["train"] + ["test"] * sizes["test"] + ["valid"] * sizes["valid"]
        out.extend(replace(members[i], split=lab) for i, lab in zip(order, labels))
    return Manifest(tuple(out), variant=manifest.variant, seed=seed)


def assemble_augmented(base: Manifest, generated_dir, plan: AugmentPlan = AugmentPlan()) -> Manifest:
    """Append generated images to the train split."""
    if any(s.split == UNASSIGNED for s in base.samples):
        raise AssemblyError("base manifest has samples without a split")
    generated_dir = Path(generated_dir)
    extra = []
    for grade, count in plan.per_grade_counts.items():
        if count == 0:
            continue
        gdir = generated_dir / str(grade)
        if not gdir.is_dir():
            raise AssemblyError(f"no generated images for grade {grade}: missing directory {gdir}")
        for path in _image_files(gdir)[:count]:
            extra.append(Sample(id=f"gen/{grade}/{path.stem}", image_ref=str(path), grade=grade,
                                split="train", origin="generated"))
    return Manifest(base.samples + tuple(extra), variant="augmented", seed=base.seed)


def class_counts(manifest: Manifest) -> dict[int, dict[str, int]]:
    """Per-grade counts for each split plus ``total``."""
    table = {g: {k: 0 for k in SPLITS + (UNASSIGNED, "total")} for g in GRADES}
    for s in manifest.samples:
        table[s.grade][s.split] += 1
        table[s.grade]["total"] += 1
    return table


# -- persistence -------------------------------------------------------------

def write_manifest(path, manifest: Manifest) -> None:
    lines = [f"# variant={manifest.variant} seed={'' if manifest.seed is None else manifest.seed}"]
    for s in manifest.samples:
        lines.append("\t".join((s.id, s.image_ref, str(s.grade), s.split, s.origin)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    variant, seed, samples = "original", None, []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, val = token.partition("=")
                if key == "variant":
                    variant = val
                elif key == "seed" and val:
                    seed = int(val)
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise LayoutError(f"{path}:{lineno}: expected 5 tab-separated fields")
        sid, ref, grade, split, origin = parts
        samples.append(Sample(sid, ref, int(grade), split, origin))
    return Manifest(tuple(samples), variant=variant, seed=seed)
