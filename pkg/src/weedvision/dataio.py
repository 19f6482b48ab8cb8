"""Image records, label files, dataset manifests, and synthetic scene generation.

The on-disk layout produced by :func:`write_dataset` is::

    out_dir/
      images/<id>.png
      labels/<id>.txt      one "class cx cy w h" line per object, normalized
      manifest.json        entry list with relative paths

Synthetic scenes place green blobs on noisy brown soil.  Crops render as
smooth disks and weeds as spiky stars; both draw from the same color
distribution, so shape texture is the only separating signal.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, GenerationError, ParseError, ValidationError
from .parallel import ordered_map

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class ImageRecord:
    """An 8-bit RGB image plus identity and provenance."""

    id: str
    pixels: np.ndarray
    source_tag: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.dtype != np.uint8:
            raise ValidationError("pixels must be a uint8 array")
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"pixels must be HxWx3, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError("image must have positive height and width")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned box in normalized center form."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name}={v} outside (0, 1]")


def load_image(path, id: Optional[str] = None, source_tag: str = "") -> ImageRecord:
    """Load a PNG/JPEG file as an :class:`ImageRecord`.

    Missing files raise the native ``OSError``; undecodable or non-RGB
    content raises :class:`FormatError`.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                raise FormatError(f"{path}: expected RGB image, got mode {mode}")
            pixels = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        # Pillow signals truncated/corrupt streams as OSError after open().
        raise FormatError(f"{path}: corrupt image data ({exc})") from exc
    del raw
    return ImageRecord(id=id or path.stem, pixels=pixels, source_tag=source_tag)


def save_image(record: ImageRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(record.pixels, mode="RGB").save(path, format="PNG")


def parse_labels(text: str, class_count: Optional[int] = None) -> list[GroundTruthBox]:
    """Parse "class cx cy w h" lines into boxes.

    Malformed lines raise :class:`ParseError` carrying the 1-based line
    number; out-of-range values raise :class:`ValidationError`.
    """
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", lineno)
        try:
            class_id = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"unparseable number: {exc}", lineno) from exc
        if class_count is not None and not 0 <= class_id < class_count:
            raise ValidationError(
                f"line {lineno}: class {class_id} outside [0, {class_count})"
            )
        try:
            boxes.append(GroundTruthBox(class_id, *vals))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
    return boxes


def serialize_labels(boxes: Sequence[GroundTruthBox]) -> str:
    lines = [
        f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}" for b in boxes
    ]
    return "".join(line + "\n" for line in lines)


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def box_pixel_bounds(box: GroundTruthBox, width: int, height: int):
    """Denormalize a box to clamped integer pixel bounds (x0, y0, x1, y1).

    A pixel column j belongs to the box iff x0 <= j < x1, matching the
    pixel-center membership rule under half-up rounding.
    """
    x0 = max(0, min(width, _half_up((box.cx - box.w / 2) * width)))
    x1 = max(0, min(width, _half_up((box.cx + box.w / 2) * width)))
    y0 = max(0, min(height, _half_up((box.cy - box.h / 2) * height)))
    y1 = max(0, min(height, _half_up((box.cy + box.h / 2) * height)))
    return x0, y0, x1, y1


def crop_bounding_boxes(
    record: ImageRecord, boxes: Sequence[GroundTruthBox]
) -> list[ImageRecord]:
    """Cut one crop per box, clamped to the image; degenerate boxes are skipped."""
    crops = []
    skipped = 0
    for i, box in enumerate(boxes):
        x0, y0, x1, y1 = box_pixel_bounds(box, record.width, record.height)
        if x1 <= x0 or y1 <= y0:
            skipped += 1
            continue
        crops.append(
            ImageRecord(
                id=f"{record.id}_crop{i:03d}",
                pixels=np.ascontiguousarray(record.pixels[y0:y1, x0:x1]),
                source_tag=record.source_tag,
                provenance={"parent_id": record.id, "class_id": box.class_id},
            )
        )
    if skipped:
        log.warning("%s: skipped %d degenerate box crop(s)", record.id, skipped)
    return crops


# ---------------------------------------------------------------------------
# Synthetic blob scenes


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Knobs for the blob-scene generator."""

    image_size: int = 128
    n_crops: int = 2
    n_weeds: int = 2
    crop_radius_range: tuple[float, float] = (8.0, 12.0)
    weed_radius_range: tuple[float, float] = (11.0, 16.0)
    background_noise_std: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8")
        if self.n_crops < 0 or self.n_weeds < 0:
            raise ValidationError("blob counts must be >= 0")
        max_r = 0.0
        for name in ("crop_radius_range", "weed_radius_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValidationError(f"{name} must be strictly positive, got ({lo}, {hi})")
            max_r = max(max_r, hi)
        if (self.n_crops + self.n_weeds) > 0 and 2 * (max_r + 2.0) >= self.image_size:
            raise ValidationError("largest blob cannot fit inside the image with margin")
        if self.background_noise_std < 0:
            raise ValidationError("background_noise_std must be >= 0")


@dataclass
class SyntheticSample:
    record: ImageRecord
    boxes: list[GroundTruthBox]


CROP_CLASS = 0
WEED_CLASS = 1
CLASS_NAMES = ("crop", "weed")

_SOIL_COLOR = (115.0, 92.0, 64.0)
_PLACEMENT_ATTEMPTS = 200


def _sample_green(rng) -> np.ndarray:
    r = rng.uniform(30.0, 80.0)
    g = rng.uniform(130.0, 200.0)
    b = rng.uniform(20.0, 70.0)
    return np.array([r, g, b], dtype=np.float32)


def _blob_mask_and_shade(class_id, cy, cx, radius, size, rng):
    # Work on a local window around the blob; radius bounds the support.
    pad = int(math.ceil(radius)) + 1
    y0 = max(0, int(cy) - pad)
    y1 = min(size, int(cy) + pad + 1)
    x0 = max(0, int(cx) - pad)
    x1 = min(size, int(cx) + pad + 1)
    ys = np.arange(y0, y1, dtype=np.float32)[:, None] - cy
    xs = np.arange(x0, x1, dtype=np.float32)[None, :] - cx
    dist = np.sqrt(ys * ys + xs * xs)
    if class_id == CROP_CLASS:
        rho = np.full_like(dist, radius)
    else:
        spikes = int(rng.integers(4, 8))
        phase = rng.uniform(0, 2 * math.pi)
        depth = rng.uniform(0.55, 0.72)
        theta = np.arctan2(ys, xs)
        rho = radius * (1.0 - depth * (0.5 - 0.5 * np.cos(spikes * theta + phase)))
    # Tiny radii can miss every pixel center; keep at least the nearest pixel.
    mask = dist <= np.maximum(rho, 0.8)
    shade = 1.0 - 0.25 * np.square(dist / max(radius, 1e-6))
    return (y0, x0), mask, np.clip(shade, 0.0, 1.0)


def render_scene(config: SyntheticSceneConfig, rng) -> SyntheticSample:
    """Render one scene; box coordinates come from the rendered masks."""
    size = config.image_size
    img = np.asarray(_SOIL_COLOR, dtype=np.float32) + rng.normal(
        0.0, config.background_noise_std, size=(size, size, 3)
    ).astype(np.float32)
    classes = [CROP_CLASS] * config.n_crops + [WEED_CLASS] * config.n_weeds
    placed: list[tuple[float, float, float]] = []
    boxes = []
    for class_id in classes:
        rng_range = (
            config.crop_radius_range
            if class_id == CROP_CLASS
            else config.weed_radius_range
        )
        for attempt in range(_PLACEMENT_ATTEMPTS):
            radius = float(rng.uniform(*rng_range))
            margin = radius + 2.0
            cy = float(rng.uniform(margin, size - margin))
            cx = float(rng.uniform(margin, size - margin))
            if all(
                math.hypot(cy - py, cx - px) > radius + pr + 2.0
                for py, px, pr in placed
            ):
                break
        else:
            raise GenerationError(
                f"could not place blob {len(placed) + 1}/{len(classes)} "
                f"after {_PLACEMENT_ATTEMPTS} attempts"
            )
        placed.append((cy, cx, radius))
        (wy, wx), mask, shade = _blob_mask_and_shade(
            class_id, cy, cx, radius, size, rng
        )
        color = _sample_green(rng)
        window = img[wy : wy + mask.shape[0], wx : wx + mask.shape[1]]
        jitter = rng.normal(0.0, 4.0, size=window.shape).astype(np.float32)
        painted = color[None, None, :] * shade[:, :, None] + jitter
        window[mask] = painted[mask]

        ys_idx, xs_idx = np.nonzero(mask)
        bx0, bx1 = wx + xs_idx.min(), wx + xs_idx.max() + 1
        by0, by1 = wy + ys_idx.min(), wy + ys_idx.max() + 1
        boxes.append(
            GroundTruthBox(
                class_id=class_id,
                cx=float((bx0 + bx1) / 2.0 / size),
                cy=float((by0 + by1) / 2.0 / size),
                w=float((bx1 - bx0) / size),
                h=float((by1 - by0) / size),
            )
        )
    pixels = np.clip(img, 0.0, 255.0).astype(np.uint8)
    record = ImageRecord(id="", pixels=pixels, source_tag="synthetic")
    return SyntheticSample(record=record, boxes=boxes)


def synth_blob_dataset(
    config: SyntheticSceneConfig,
    n_images: int,
    workers: int = 1,
    id_prefix: str = "synth_",
) -> list[SyntheticSample]:
    """Generate ``n_images`` scenes, image i seeded with config.seed XOR i."""
    if n_images < 0:
        raise ValidationError("n_images must be >= 0")

    def render_one(idx: int) -> SyntheticSample:
        rng = np.random.default_rng(config.seed ^ idx)
        sample = render_scene(config, rng)
        sample.record.id = f"{id_prefix}{idx:05d}"
        return sample

    return ordered_map(render_one, range(n_images), workers=workers)


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class DatasetEntry:
    id: str
    image_path: str
    label_path: Optional[str]
    source_tag: str
    split: Optional[str] = None


@dataclass
class DatasetIndex:
    root: Path
    entries: list[DatasetEntry]

    def load_image(self, entry: DatasetEntry) -> ImageRecord:
        return load_image(
            self.root / entry.image_path, id=entry.id, source_tag=entry.source_tag
        )

    def load_boxes(
        self, entry: DatasetEntry, class_count: Optional[int] = None
    ) -> list[GroundTruthBox]:
        if entry.label_path is None:
            return []
        text = (self.root / entry.label_path).read_text()
        return parse_labels(text, class_count=class_count)


def write_dataset(
    samples: Sequence[SyntheticSample],
    out_dir,
    source_tag: str = "synthetic",
    extra: Optional[dict] = None,
) -> Path:
    """Write images, labels, and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        rec = sample.record
        image_rel = f"images/{rec.id}.png"
        label_rel = f"labels/{rec.id}.txt"
        save_image(rec, out_dir / image_rel)
        (out_dir / label_rel).write_text(serialize_labels(sample.boxes))
        entries.append(
            DatasetEntry(
                id=rec.id,
                image_path=image_rel,
                label_path=label_rel,
                source_tag=source_tag,
            )
        )
    return write_manifest(out_dir, entries, extra=extra)


def write_manifest(
    out_dir, entries: Sequence[DatasetEntry], extra: Optional[dict] = None
) -> Path:
    doc = {
        "entries": [
            {
                "id": e.id,
                "image_path": e.image_path,
                "label_path": e.label_path,
                "source_tag": e.source_tag,
                "split": e.split,
            }
            for e in entries
        ]
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> DatasetIndex:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid manifest JSON ({exc})") from exc
    if "entries" not in doc:
        raise FormatError(f"{manifest_path}: manifest missing 'entries'")
    entries = [
        DatasetEntry(
            id=e["id"],
            image_path=e["image_path"],
            label_path=e.get("label_path"),
            source_tag=e.get("source_tag", ""),
            split=e.get("split"),
        )
        for e in doc["entries"]
    ]
    return DatasetIndex(root=manifest_path.parent, entries=entries)
