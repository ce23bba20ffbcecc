"""Slide/patch corpus handling.

A manifest is UTF-8 line-delimited JSON, one record per line, with two
record kinds:

  {"kind": "slide", "image_id": ..., "path": ..., "width_px": ..., "height_px": ...,
   "case_id": ..., "slide_class": "fungus_positive"|"keratin_only"|"unlabeled"}
  {"kind": "patch", "patch_id": ..., "image_id": ..., "x": ..., "y": ...,
   "size_px": ..., "label": "fungus"|"keratin"|"unlabeled",
   "split": "train"|"val"|"test"|"unassigned", "content_fraction": ...}

Slide paths are stored relative to the manifest file's directory. Rows are
written slides-then-patches, each sorted by id, so saving a loaded manifest
reproduces it byte for byte.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ManifestError

PATCH_SIZE = 500
MODEL_INPUT_SIZE = 224

SLIDE_CLASSES = ("fungus_positive", "keratin_only", "unlabeled")
PATCH_LABELS = ("fungus", "keratin", "unlabeled")
SPLITS = ("train", "val", "test", "unassigned")

# class index convention used across the package: column 1 = fungus
LABEL_TO_INDEX = {"keratin": 0, "fungus": 1}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}

_REC601 = (0.299, 0.587, 0.114)


@dataclass
class SlideImage:
    image_id: str
    path: str
    width_px: int
    height_px: int
    case_id: str = ""
    slide_class: str = "unlabeled"

    def validate(self, min_size: int = 1) -> None:
        if not self.image_id:
            raise ManifestError("slide with empty image_id")
        if self.width_px < min_size or self.height_px < min_size:
            raise ManifestError(
                f"slide {self.image_id}: dimensions {self.width_px}x{self.height_px} invalid")
        if self.slide_class not in SLIDE_CLASSES:
            raise ManifestError(
                f"slide {self.image_id}: unknown slide_class {self.slide_class!r}")

    def to_record(self) -> dict:
        return {"kind": "slide", "image_id": self.image_id, "path": self.path,
                "width_px": self.width_px, "height_px": self.height_px,
                "case_id": self.case_id, "slide_class": self.slide_class}


@dataclass
class PatchRecord:
    patch_id: str
    image_id: str
    x: int
    y: int
    size_px: int = PATCH_SIZE
    label: str = "unlabeled"
    split: str = "unassigned"
    content_fraction: float = 1.0

    def validate(self, slide: SlideImage | None = None) -> None:
        if not self.patch_id:
            raise ManifestError("patch with empty patch_id")
        if self.label not in PATCH_LABELS:
            raise ManifestError(f"patch {self.patch_id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"patch {self.patch_id}: unknown split {self.split!r}")
        if self.size_px < 1:
            raise ManifestError(f"patch {self.patch_id}: size_px must be positive")
        if not 0.0 <= self.content_fraction <= 1.0:
            raise ManifestError(
                f"patch {self.patch_id}: content_fraction {self.content_fraction} outside [0,1]")
        if self.x < 0 or self.y < 0:
            raise ManifestError(f"patch {self.patch_id}: negative offset")
        if slide is not None:
            if self.x > slide.width_px - self.size_px or self.y > slide.height_px - self.size_px:
                raise ManifestError(
                    f"patch {self.patch_id}: ({self.x},{self.y}) size {self.size_px} "
                    f"exceeds slide {slide.image_id} ({slide.width_px}x{slide.height_px})")

    def to_record(self) -> dict:
        return {"kind": "patch", "patch_id": self.patch_id, "image_id": self.image_id,
                "x": self.x, "y": self.y, "size_px": self.size_px, "label": self.label,
                "split": self.split, "content_fraction": self.content_fraction}


@dataclass
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction: float = 0.15
    seed: int = 0
    grouping: str = "by_image"

    def __post_init__(self):
        if self.test_fraction <= 0 or self.val_fraction <= 0:
            raise ValueError("split fractions must be positive")
        if self.test_fraction + self.val_fraction >= 1.0:
            raise ValueError("test_fraction + val_fraction must be < 1")
        if self.grouping not in ("by_image", "iid"):
            raise ValueError(f"unknown grouping {self.grouping!r}")


@dataclass
class Manifest:
    slides: list[SlideImage] = field(default_factory=list)
    patches: list[PatchRecord] = field(default_factory=list)
    root: Path | None = None  # directory slide paths are relative to (not serialized)

    def slides_by_id(self) -> dict[str, SlideImage]:
        return {s.image_id: s for s in self.slides}

    def stats(self) -> dict:
        counts = {"fungus": 0, "keratin": 0, "unlabeled": 0}
        for p in self.patches:
            counts[p.label] += 1
        return {"fungus": counts["fungus"], "keratin": counts["keratin"],
                "unlabeled": counts["unlabeled"], "total": len(self.patches),
                "n_slides": len(self.slides)}

    def split_counts(self) -> dict:
        counts = {s: 0 for s in SPLITS}
        for p in self.patches:
            counts[p.split] += 1
        return counts

    def validate(self) -> None:
        by_id = {}
        for s in self.slides:
            s.validate()
            if s.image_id in by_id:
                raise ManifestError(f"duplicate image_id {s.image_id}")
            by_id[s.image_id] = s
        seen = set()
        for p in self.patches:
            if p.patch_id in seen:
                raise ManifestError(f"duplicate patch_id {p.patch_id}")
            seen.add(p.patch_id)
            slide = by_id.get(p.image_id)
            if slide is None:
                raise ManifestError(
                    f"patch {p.patch_id} references unknown image_id {p.image_id}")
            p.validate(slide)

    def slide_path(self, slide: SlideImage) -> Path:
        p = Path(slide.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def save(self, path) -> None:
        path = Path(path)
        slides = sorted(self.slides, key=lambda s: s.image_id)
        patches = sorted(self.patches, key=lambda p: p.patch_id)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in slides + patches:
                fh.write(json.dumps(rec.to_record(), separators=(",", ":")))
                fh.write("\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        slides, patches = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    kind = rec.pop("kind")
                    if kind == "slide":
                        slides.append(SlideImage(**rec))
                    elif kind == "patch":
                        patches.append(PatchRecord(**rec))
                    else:
                        raise ValueError(f"unknown record kind {kind!r}")
                except (ValueError, TypeError, KeyError) as e:
                    raise ManifestError(f"{path}:{lineno}: malformed record ({e})") from e
        m = cls(slides=slides, patches=patches, root=path.parent)
        m.validate()
        return m


# ---------------------------------------------------------------------------
# image loading


def load_slide_pixels(path) -> np.ndarray:
    """Slide image as a 2-D uint8 array (color inputs collapse to luminance)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"slide image missing: {path}")
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")  # PIL 'L' uses the Rec. 601 weights
        return np.asarray(img, dtype=np.uint8)


@lru_cache(maxsize=8)
def _cached_slide(path_str: str) -> np.ndarray:
    return load_slide_pixels(path_str)


def extract_patch(slide_pixels: np.ndarray, record: PatchRecord) -> np.ndarray:
    s = record.size_px
    return slide_pixels[record.y : record.y + s, record.x : record.x + s]


def load_patch_pixels(manifest: Manifest, record: PatchRecord,
                      cache_dir=None) -> np.ndarray:
    """Pixels for one patch, from the PNG cache when present, else by
    cropping the source slide (slides are kept in a small LRU)."""
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{record.patch_id}.png"
        if cached.exists():
            with Image.open(cached) as img:
                return np.asarray(img.convert("L"), dtype=np.uint8)
    slide = manifest.slides_by_id().get(record.image_id)
    if slide is None:
        raise ManifestError(f"patch {record.patch_id}: unknown image_id {record.image_id}")
    pixels = _cached_slide(str(manifest.slide_path(slide)))
    return extract_patch(pixels, record)


def cache_patches(manifest: Manifest, out_dir) -> int:
    """Write every patch as {patch_id}.png under out_dir; returns the count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[PatchRecord]] = {}
    for p in manifest.patches:
        by_image.setdefault(p.image_id, []).append(p)
    slides = manifest.slides_by_id()
    n = 0
    for image_id in sorted(by_image):
        pixels = load_slide_pixels(manifest.slide_path(slides[image_id]))
        for rec in by_image[image_id]:
            Image.fromarray(extract_patch(pixels, rec), mode="L").save(
                out_dir / f"{rec.patch_id}.png")
            n += 1
    return n


# ---------------------------------------------------------------------------
# ingest


def ingest(image_dir, annotations) -> Manifest:
    """Build a validated Manifest from an annotation file plus its images.

    The annotation file uses the manifest format; slide width/height may be
    omitted (null), in which case they are read from the image file. Every
    referenced image must exist and decode.
    """
    image_dir = Path(image_dir)
    annotations = Path(annotations)
    slides, patches = [], []
    with open(annotations, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec.pop("kind")
            except (ValueError, KeyError) as e:
                raise ManifestError(f"{annotations}:{lineno}: malformed record ({e})") from e
            try:
                if kind == "slide":
                    rec.setdefault("width_px", None)
                    rec.setdefault("height_px", None)
                    slides.append((lineno, SlideImage(**rec)))
                elif kind == "patch":
                    patches.append((lineno, PatchRecord(**rec)))
                else:
                    raise ManifestError(f"unknown record kind {kind!r}")
            except (TypeError, ManifestError) as e:
                raise ManifestError(f"{annotations}:{lineno}: malformed record ({e})") from e

    resolved = []
    for lineno, s in slides:
        path = Path(s.path)
        full = path if path.is_absolute() else image_dir / path
        if not full.exists():
            raise ManifestError(f"{annotations}:{lineno}: missing image file: {full}")
        try:
            pixels = load_slide_pixels(full)
        except Exception as e:
            raise ManifestError(f"{annotations}:{lineno}: cannot decode {full}: {e}") from e
        h, w = pixels.shape
        if s.width_px is None:
            s.width_px = w
        if s.height_px is None:
            s.height_px = h
        if (s.width_px, s.height_px) != (w, h):
            raise ManifestError(
                f"{annotations}:{lineno}: slide {s.image_id} declares "
                f"{s.width_px}x{s.height_px} but image is {w}x{h}")
        resolved.append(s)

    manifest = Manifest(slides=resolved, patches=[p for _, p in patches], root=image_dir)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# field mask and tiling


def otsu_threshold(pixels: np.ndarray) -> float:
    """Otsu's between-class variance maximizer over the 256-bin histogram."""
    hist = np.bincount(pixels.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        return 127.5
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    mu0 = np.cumsum(hist * levels)
    mu_total = mu0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = mu0 / w0
        m1 = (mu_total - mu0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(np.argmax(between))


def estimate_field_mask(pixels: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Boolean mask of the illuminated microscope field.

    Threshold the slide (Otsu by default), keep the largest connected bright
    component and fill its holes (dark objects inside the field).
    """
    pixels = np.asarray(pixels)
    lo, hi = int(pixels.min()), int(pixels.max())
    if hi - lo < 2:  # flat image: all field or no field
        return np.full(pixels.shape, hi >= 128, dtype=bool)
    thr = otsu_threshold(pixels) if threshold is None else float(threshold)
    bright = pixels > thr
    labels, n = ndimage.label(bright)
    if n == 0:
        return np.zeros(pixels.shape, dtype=bool)
    sizes = ndimage.sum_labels(bright, labels, index=np.arange(1, n + 1))
    component = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(component)


def content_fraction(patch_pixels: np.ndarray, field_mask: np.ndarray) -> float:
    """Fraction of the patch inside the illuminated field."""
    patch_pixels = np.asarray(patch_pixels)
    field_mask = np.asarray(field_mask)
    if patch_pixels.shape != field_mask.shape:
        raise ValueError(
            f"patch shape {patch_pixels.shape} != mask crop shape {field_mask.shape}")
    return float(field_mask.mean())


def tile_grid(width: int, height: int, size_px: int, stride_px: int) -> tuple[int, int]:
    """(rows, cols) of the full tiling grid; (0, 0) if the image is too small."""
    if width < size_px or height < size_px:
        return 0, 0
    return (height - size_px) // stride_px + 1, (width - size_px) // stride_px + 1


def tile(slide: SlideImage, size_px: int = PATCH_SIZE, stride_px: int | None = None,
         min_content: float = 0.0, pixels: np.ndarray | None = None,
         field_mask: np.ndarray | None = None, root: Path | None = None) -> list[PatchRecord]:
    """Row-major grid of unlabeled patch records over one slide.

    With min_content > 0 the slide's field mask is needed; it is estimated
    from the pixels (loaded from slide.path if not supplied) unless an
    explicit mask is passed. Records falling below min_content are dropped.
    """
    stride_px = size_px if stride_px is None else stride_px
    if stride_px < 1:
        raise ValueError("stride_px must be >= 1")
    if not 0.0 <= min_content <= 1.0:
        raise ValueError("min_content must lie in [0,1]")
    rows, cols = tile_grid(slide.width_px, slide.height_px, size_px, stride_px)
    if rows == 0:
        warnings.warn(f"slide {slide.image_id} ({slide.width_px}x{slide.height_px}) "
                      f"is smaller than the {size_px}px patch; nothing to tile")
        return []
    if min_content > 0.0 and field_mask is None:
        if pixels is None:
            path = slide.path if root is None else (
                Path(slide.path) if Path(slide.path).is_absolute() else Path(root) / slide.path)
            pixels = load_slide_pixels(path)
        field_mask = estimate_field_mask(pixels)

    records = []
    for r in range(rows):
        y = r * stride_px
        for c in range(cols):
            x = c * stride_px
            if field_mask is not None:
                cf = float(field_mask[y : y + size_px, x : x + size_px].mean())
            else:
                cf = 1.0
            if cf < min_content:
                continue
            records.append(PatchRecord(
                patch_id=f"{slide.image_id}_x{x:06d}_y{y:06d}",
                image_id=slide.image_id, x=x, y=y, size_px=size_px,
                content_fraction=cf))
    return records


# ---------------------------------------------------------------------------
# splits


def assign_splits(manifest: Manifest, spec: SplitSpec) -> Manifest:
    """Assign every patch to train/val/test.

    Patches are sorted by patch_id before the seeded shuffle (PCG64), so the
    assignment is platform-independent. |test| = floor(test_fraction * n),
    |val| = floor(val_fraction * n) carved from the remainder. by_image
    grouping keeps all patches of a slide in one split, filling test then
    val greedily to the same targets.
    """
    for p in manifest.patches:
        if p.label == "unlabeled":
            raise ManifestError(f"cannot split: patch {p.patch_id} is unlabeled")
    n = len(manifest.patches)
    if n == 0:
        return Manifest(slides=list(manifest.slides), patches=[], root=manifest.root)

    ordered = sorted(manifest.patches, key=lambda p: p.patch_id)
    n_test = math.floor(spec.test_fraction * n)
    n_val = math.floor(spec.val_fraction * n)
    rng = np.random.default_rng(spec.seed)
    assignment: dict[str, str] = {}

    if spec.grouping == "iid":
        perm = rng.permutation(n)
        for rank, idx in enumerate(perm):
            if rank < n_test:
                split = "test"
            elif rank < n_test + n_val:
                split = "val"
            else:
                split = "train"
            assignment[ordered[idx].patch_id] = split
    else:
        groups: dict[str, list[str]] = {}
        for p in ordered:
            groups.setdefault(p.image_id, []).append(p.patch_id)
        keys = sorted(groups)
        order = rng.permutation(len(keys))
        counts = {"test": 0, "val": 0}
        for gi in order:
            members = groups[keys[gi]]
            if counts["test"] < n_test:
                split = "test"
            elif counts["val"] < n_val:
                split = "val"
            else:
                split = "train"
            if split in counts:
                counts[split] += len(members)
            for pid in members:
                assignment[pid] = split

    patches = [replace(p, split=assignment[p.patch_id]) for p in manifest.patches]
    return Manifest(slides=list(manifest.slides), patches=patches, root=manifest.root)


# ---------------------------------------------------------------------------
# preprocessing


def _to_gray_u8(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim == 3:
        if patch.shape[2] == 1:
            patch = patch[:, :, 0]
        elif patch.shape[2] in (3, 4):
            warnings.warn("multi-channel patch converted to luminance (Rec. 601)")
            rgb = patch[:, :, :3].astype(np.float64)
            patch = rgb @ np.array(_REC601)
        else:
            raise ValueError(f"cannot interpret patch with shape {patch.shape}")
    elif patch.ndim != 2:
        raise ValueError(f"expected a 2-D patch, got shape {patch.shape}")
    arr = np.asarray(patch, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty patch")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("patch values must lie in [0, 255]")
    return np.round(arr).astype(np.uint8)


def resize_to_input(patch: np.ndarray, size: int = MODEL_INPUT_SIZE) -> np.ndarray:
    """Bilinear resize of a grayscale patch to the model input side, uint8."""
    gray = _to_gray_u8(patch)
    img = Image.fromarray(gray, mode="L").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def preprocess(patch: np.ndarray) -> np.ndarray:
    """Model-ready array: bilinear resize to 224x224, values scaled to [0,1],
    grayscale replicated onto 3 identical channels. Output float32
    (224, 224, 3)."""
    resized = resize_to_input(patch).astype(np.float32) / 255.0
    return np.stack([resized, resized, resized], axis=-1)


def preprocess_batch(patches) -> np.ndarray:
    """Stack preprocess() over an iterable of patches -> (N, 224, 224, 3)."""
    if len(patches) == 0:
        raise ValueError("empty batch")
    return np.stack([preprocess(p) for p in patches], axis=0)
