"""Dataset layouts, image/mask loading and the synthetic desk-scale dataset."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, IOFailure, InvalidConfig, LayoutViolation, MissingMask, UnreadableImage
from .kb import render_class_prompt, render_vqa_prompt

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MASK_THRESHOLD = 127


@dataclass(frozen=True)
class Sample:
    image_path: Path
    class_name: str
    label: int
    mask_path: Path | None = None
    split: str = "test"
    image_id: str = ""


def _images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _mvtec_class(class_dir: Path, root: Path, split: str) -> list[Sample]:
    split_dir = class_dir / split
    if not split_dir.is_dir():
        raise LayoutViolation(f"{class_dir} has no {split}/ directory")
    samples = []
    for defect_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()):
        label = 0 if defect_dir.name == "good" else 1
        for image in _images(defect_dir):
            mask = None
            if label:
                mask = class_dir / "ground_truth" / defect_dir.name / f"{image.stem}_mask.png"
                if not mask.is_file():
                    raise MissingMask(f"no mask for anomalous image {image}")
            samples.append(Sample(image, class_dir.name, label, mask, split,
                                  image.relative_to(root).as_posix()))
    return samples


def _flat(root: Path) -> list[Sample]:
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise LayoutViolation(f"flat layout needs {manifest}")
    samples = []
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image", "class", "label"} - set(reader.fieldnames or ())
        if missing:
            raise LayoutViolation(f"manifest lacks columns {sorted(missing)}")
        for row in reader:
            image = root / row["image"]
            if not image.is_file():
                raise LayoutViolation(f"manifest lists missing image {image}")
            label = int(row["label"])
            if label not in (0, 1):
                raise LayoutViolation(f"label must be 0 or 1, got {label}")
            mask = root / row["mask"] if row.get("mask") else None
            samples.append(Sample(image, row["class"], label, mask, row.get("split") or "test",
                                  Path(row["image"]).as_posix()))
    return samples


def load_dataset(root: str | Path, layout: str = "mvtec", split: str = "test") -> list[Sample]:
    """Walk a dataset; samples come back sorted by relative path.

    ``mvtec``: ``root/<class>/<split>/<defect>/*.png`` with
    ``root/<class>/ground_truth/<defect>/<stem>_mask.png``; ``good`` is the
    normal defect type. ``root`` may also be a single class directory.
    ``flat``: ``root/manifest.csv`` with columns image, class, label and an
    optional mask column.
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutViolation(f"dataset root {root} does not exist")
    if layout == "mvtec":
        if (root / split).is_dir():
            samples = _mvtec_class(root, root.parent, split)
        else:
            class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / split).is_dir())
            if not class_dirs:
                raise LayoutViolation(f"no class directories with a {split}/ split under {root}")
            samples = [s for d in class_dirs for s in _mvtec_class(d, root, split)]
    elif layout == "flat":
        samples = _flat(root)
    else:
        raise InvalidConfig(f"unknown dataset layout {layout!r}")
    return sorted(samples, key=lambda s: s.image_id)


def has_masks(samples) -> bool:
    return any(s.mask_path is not None for s in samples)


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from exc


def load_mask(sample: Sample, size: tuple[int, int]) -> np.ndarray:
    """Binary (H, W) mask at ``size``; all zeros for samples without one."""
    h, w = size
    if sample.mask_path is None:
        return np.zeros((h, w), dtype=np.uint8)
    try:
        with Image.open(sample.mask_path) as im:
            mask = im.convert("L")
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read mask {sample.mask_path}: {exc}") from exc
    if mask.size != (w, h):
        mask = mask.resize((w, h), Image.NEAREST)
    binary = (np.asarray(mask) > MASK_THRESHOLD).astype(np.uint8)
    if binary.any() and sample.label == 0:
        raise DataError(f"normal sample {sample.image_id} has a non-empty mask")
    return binary


# ---------------------------------------------------------------------------
# synthetic data

DEFECT_KINDS = ("blob", "scratch")
SYNTH_SIDE = 32


def _texture(rng: np.random.Generator, base: np.ndarray, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    field = np.zeros((side, side))
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * math.pi)
        field += np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    field = field / 3 * 0.08
    img = base[None, None, :] + field[..., None] + rng.normal(0, 0.03, (side, side, 3))
    return np.clip(img, 0.15, 0.85)


def _jitter(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    return np.clip(base + rng.normal(0, 0.1, 3), 0.25, 0.75)


def _blob(rng, side):
    cy, cx = rng.integers(2, side - 2, size=2)
    r = rng.uniform(1.5, 3.5)
    yy, xx = np.mgrid[0:side, 0:side]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask, f"round blob of radius {r:.1f} px centred at row {cy}, column {cx}"


def _scratch(rng, side):
    y0, x0 = rng.uniform(3, side - 3, size=2)
    angle = rng.uniform(0, math.pi)
    length = rng.uniform(8, 18)
    y1 = np.clip(y0 + length * math.sin(angle), 0, side - 1)
    x1 = np.clip(x0 + length * math.cos(angle), 0, side - 1)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0, 1)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    mask = dist <= 0.8
    mask[int(round(y0)), int(round(x0))] = True
    return mask, f"thin scratch about {length:.0f} px long starting near row {y0:.0f}, column {x0:.0f}"


def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def _class_descriptions(class_name: str) -> list[str]:
    return [
        f"An abnormal image of {class_name} shows a bright or dark round spot on the textured surface.",
        f"A defective {class_name} may have a thin straight scratch crossing the pattern.",
        f"Abnormal {class_name} surfaces contain small regions whose colour differs sharply from the background.",
        f"The texture of an abnormal {class_name} is interrupted by blobs or lines of uniform colour.",
        f"Background: normal {class_name} is a smooth striped texture with mild noise.",
    ]


def make_synthetic_dataset(out: str | Path, count: int = 200, seed: int = 0,
                           class_name: str = "synth", side: int = SYNTH_SIDE) -> Path:
    """Write a textured-surface dataset in the mvtec layout.

    ``count`` test images (each anomalous with probability 1/2, at least one of
    each label) plus ``count // 4`` normal training images. Anomalies are 1-3
    bright or dark blobs or scratches painted with a flat colour; masks mark
    exactly the painted pixels. Also writes ``kb_fixtures.json`` holding canned
    class and per-image descriptions for a hermetic knowledge-base build.
    Returns the class directory.
    """
    if count < 4:
        raise InvalidConfig("count must be >= 4")
    rng = np.random.default_rng(seed)
    class_dir = Path(out) / class_name
    base = rng.uniform(0.35, 0.65, size=3)
    labels = rng.binomial(1, 0.5, size=count)
    while labels.min() == labels.max():
        labels = rng.binomial(1, 0.5, size=count)
    fixtures = {render_class_prompt(class_name): _class_descriptions(class_name)}
    vqa_prompt = render_vqa_prompt(class_name)
    try:
        for i in range(count // 4):
            img = _texture(rng, _jitter(rng, base), side)
            _save_png((img * 255).round().astype(np.uint8), class_dir / "train" / "good" / f"{i:03d}.png")
        for i, label in enumerate(labels):
            img = _texture(rng, _jitter(rng, base), side)
            name = f"{i:03d}.png"
            if not label:
                _save_png((img * 255).round().astype(np.uint8), class_dir / "test" / "good" / name)
                continue
            kind = DEFECT_KINDS[rng.integers(len(DEFECT_KINDS))]
            mask = np.zeros((side, side), dtype=bool)
            notes = []
            for _ in range(rng.integers(1, 4)):
                part, note = (_blob if kind == "blob" else _scratch)(rng, side)
                bright = rng.random() < 0.5
                colour = rng.uniform(0.92, 1.0, 3) if bright else rng.uniform(0.0, 0.08, 3)
                img[part] = colour
                mask |= part
                notes.append(("bright " if bright else "dark ") + note)
            _save_png((img * 255).round().astype(np.uint8), class_dir / "test" / kind / name)
            _save_png(mask.astype(np.uint8) * 255,
                      class_dir / "ground_truth" / kind / f"{i:03d}_mask.png")
            image_id = f"{class_name}/test/{kind}/{name}"
            fixtures[f"{image_id}|{vqa_prompt}"] = [
                f"The {class_name} has " + "; ".join(notes) + "."
            ]
        (Path(out) / "kb_fixtures.json").write_text(
            json.dumps(_merge_fixtures(Path(out) / "kb_fixtures.json", fixtures), indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IOFailure(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return class_dir


def _merge_fixtures(path: Path, new: dict) -> dict:
    if path.is_file():
        merged = json.loads(path.read_text())
        merged.update(new)
        return merged
    return new

