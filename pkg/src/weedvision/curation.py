"""Data curation: embeddings, hierarchical k-means, sampling, tiling, filtering.

The pipeline mirrors a field-scale curation recipe at desk scale: embed
unlabeled images, cluster them into a three-level pyramid, sample a fraction
near each leaf centroid, tile the survivors with overlap, and keep tiles
with enough vegetation.  Labeled sources skip all of that and contribute
bounding-box crops directly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import (
    DatasetIndex,
    ImageRecord,
    crop_bounding_boxes,
    save_image,
    write_manifest,
    DatasetEntry,
)
from .errors import ConfigError, EmptyInputError, ValidationError
from .parallel import ordered_map

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Embedding

EmbedderFn = Callable[[ImageRecord], np.ndarray]


@dataclass
class EmbeddingMatrix:
    image_ids: list[str]
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValidationError(f"rows must be 2-D, got shape {self.rows.shape}")
        if len(self.image_ids) != self.rows.shape[0]:
            raise ValidationError("image_ids and rows disagree on count")
        if self.rows.size and not np.isfinite(self.rows).all():
            raise ValidationError("embedding rows contain NaN/Inf")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


class HistogramEmbedder:
    """96-dim color + gradient-orientation histogram.

    48 dims of per-channel 16-bin color histograms plus 48 dims of
    magnitude-weighted orientation histograms (12 bins over a 2x2 grid).
    Needs no trained model, so curation can run before any training.
    """

    dim = 96

    def __call__(self, record: ImageRecord) -> np.ndarray:
        px = record.pixels.astype(np.float32)
        parts = []
        n_px = px.shape[0] * px.shape[1]
        for c in range(3):
            hist, _ = np.histogram(px[..., c], bins=16, range=(0.0, 256.0))
            parts.append(hist.astype(np.float32) / float(n_px))
        gray = px.mean(axis=2)
        h, w = gray.shape
        if h >= 2 and w >= 2:
            gy, gx = np.gradient(gray)
            mag = np.hypot(gy, gx)
            ori = np.arctan2(gy, gx)
        else:
            mag = np.zeros_like(gray)
            ori = np.zeros_like(gray)
        ys = (0, h // 2, h)
        xs = (0, w // 2, w)
        for iy in range(2):
            for ix in range(2):
                m = mag[ys[iy] : ys[iy + 1], xs[ix] : xs[ix + 1]]
                o = ori[ys[iy] : ys[iy + 1], xs[ix] : xs[ix + 1]]
                hist, _ = np.histogram(
                    o, bins=12, range=(-np.pi, np.pi), weights=m
                )
                parts.append(hist.astype(np.float32) / (float(m.sum()) + 1e-6))
        return np.concatenate(parts)


def embed_images(
    images: Sequence[ImageRecord],
    embedder: Optional[EmbedderFn] = None,
    workers: int = 1,
) -> EmbeddingMatrix:
    """Embed images into L2-normalized rows; failing images are dropped."""
    images = list(images)
    if not images:
        raise EmptyInputError("no images to embed")
    embedder = embedder or HistogramEmbedder()

    def embed_one(rec: ImageRecord):
        try:
            return np.asarray(embedder(rec), dtype=np.float32).reshape(-1)
        except Exception as exc:  # noqa: BLE001 - isolate per-image failures
            log.warning("embedding failed for %s: %s", rec.id, exc)
            return None

    raw = ordered_map(embed_one, images, workers=workers)
    declared = getattr(embedder, "dim", None)
    ids, rows = [], []
    for rec, vec in zip(images, raw):
        if vec is None:
            continue
        if declared is not None and vec.shape[0] != declared:
            raise ValidationError(
                f"embedder declared dim={declared} but produced {vec.shape[0]}"
            )
        norm = float(np.linalg.norm(vec))
        if not np.isfinite(norm) or norm < 1e-12:
            log.warning("unusable embedding for %s (norm=%s)", rec.id, norm)
            continue
        ids.append(rec.id)
        rows.append(vec / norm)
    if not rows:
        raise EmptyInputError("all images failed to embed")
    return EmbeddingMatrix(image_ids=ids, rows=np.stack(rows))


# ---------------------------------------------------------------------------
# Hierarchical k-means


@dataclass
class ClusterLevel:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    distances: np.ndarray
    parents: Optional[np.ndarray]
    sse_histories: list[list[float]] = field(default_factory=list)


@dataclass
class ClusterPyramid:
    image_ids: list[str]
    levels: list[ClusterLevel]
    level_ks: tuple[int, ...]

    def parent_link(self, level: int, cluster: int) -> int:
        """Parent cluster index at level-1 for a cluster at the given level (>=1)."""
        parents = self.levels[level].parents
        if parents is None:
            raise ConfigError("level 0 clusters have no parent")
        return int(parents[cluster])


def _kmeans_pp(rows: np.ndarray, k: int, rng) -> np.ndarray:
    n = rows.shape[0]
    centroids = np.empty((k, rows.shape[1]), dtype=np.float64)
    centroids[0] = rows[int(rng.integers(n))]
    d2 = ((rows - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 1e-12:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = rows[idx]
        d2 = np.minimum(d2, ((rows - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(rows: np.ndarray, k: int, rng, max_iters: int):
    """Lloyd iterations with k-means++ init and empty-cluster reseeding.

    Returns (centroids, assignment, sse_history) with empty clusters dropped
    and indices compacted.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    k = min(k, n)
    centroids = _kmeans_pp(rows, k, rng)
    assign = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = cdist(rows, centroids, "sqeuclidean")
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, rows)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        empties = np.flatnonzero(~filled)
        if empties.size:
            donor = int(counts.argmax())
            members = np.flatnonzero(assign == donor)
            far = members[
                np.argsort(
                    -((rows[members] - centroids[donor]) ** 2).sum(axis=1),
                    kind="stable",
                )
            ]
            for j, e in enumerate(empties):
                if j < far.size:
                    centroids[e] = rows[far[j]]
    counts = np.bincount(assign, minlength=k)
    keep = np.flatnonzero(counts > 0)
    remap = np.full(k, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    assign = remap[assign]
    centroids = centroids[keep]
    dist = np.sqrt(((rows - centroids[assign]) ** 2).sum(axis=1))
    return centroids, assign, dist, history


def _child_quotas(sizes: np.ndarray, k: int) -> list[int]:
    """Split k child clusters across parents, proportional to member share.

    Every parent gets at least 1; no parent gets more clusters than members.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    n = int(sizes.sum())
    if k >= n:
        return [int(s) for s in sizes]
    p = len(sizes)
    if k < p:
        raise ConfigError(f"cannot give {p} parents at least one of {k} children")
    quotas = np.ones(p, dtype=np.int64)
    targets = k * sizes / n
    remaining = k - p
    while remaining > 0:
        deficit = targets - quotas
        deficit[quotas >= sizes] = -np.inf
        best = int(np.argmax(deficit))
        if not np.isfinite(deficit[best]):
            break
        quotas[best] += 1
        remaining -= 1
    return quotas.tolist()


def hierarchical_kmeans(
    emb: EmbeddingMatrix,
    level_ks: Sequence[int],
    seed: int = 0,
    max_iters: int = 50,
) -> ClusterPyramid:
    """Top-down pyramid: each level re-clusters every parent independently."""
    level_ks = tuple(int(k) for k in level_ks)
    if not level_ks:
        raise ConfigError("level_ks must be non-empty")
    if any(k <= 0 for k in level_ks):
        raise ConfigError(f"cluster counts must be positive, got {level_ks}")
    if any(b <= a for a, b in zip(level_ks, level_ks[1:])):
        raise ConfigError(f"level_ks must be strictly increasing, got {level_ks}")
    if emb.n == 0:
        raise EmptyInputError("cannot cluster an empty embedding matrix")

    n = emb.n
    levels: list[ClusterLevel] = []
    prev_assign = np.zeros(n, dtype=np.int64)
    prev_k = 1
    for li, k in enumerate(level_ks):
        sizes = np.bincount(prev_assign, minlength=prev_k)
        nonempty = np.flatnonzero(sizes > 0)
        quotas = _child_quotas(sizes[nonempty], k)
        assign = np.full(n, -1, dtype=np.int64)
        dist = np.zeros(n, dtype=np.float64)
        cents, parents, hists = [], [], []
        offset = 0
        for parent, quota in zip(nonempty, quotas):
            members = np.flatnonzero(prev_assign == parent)
            rng = np.random.default_rng([seed, li, int(parent)])
            c, a, d, h = _lloyd(emb.rows[members], quota, rng, max_iters)
            assign[members] = offset + a
            dist[members] = d
            cents.append(c)
            parents.extend([int(parent)] * c.shape[0])
            hists.append(h)
            offset += c.shape[0]
        levels.append(
            ClusterLevel(
                k=offset,
                centroids=np.vstack(cents),
                assignment=assign,
                distances=dist,
                parents=None if li == 0 else np.asarray(parents, dtype=np.int64),
                sse_histories=hists,
            )
        )
        prev_assign = assign
        prev_k = offset
    return ClusterPyramid(
        image_ids=list(emb.image_ids), levels=levels, level_ks=level_ks
    )


def sample_from_pyramid(
    pyr: ClusterPyramid, fraction: float, seed: int = 0
) -> list[str]:
    """Pick round(fraction*n) ids, nearest-to-centroid within each leaf cluster.

    Each leaf first contributes ceil(fraction * size) members, then the
    selection is trimmed globally by dropping the farthest-from-centroid
    members until exactly round(fraction * n) remain.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if not pyr.levels or not pyr.image_ids:
        return []
    leaf = pyr.levels[-1]
    n = len(pyr.image_ids)
    target = int(math.floor(fraction * n + 0.5))
    chosen: list[np.ndarray] = []
    for c in range(leaf.k):
        members = np.flatnonzero(leaf.assignment == c)
        if members.size == 0:
            continue
        order = members[np.lexsort((members, leaf.distances[members]))]
        take = int(math.ceil(fraction * members.size))
        chosen.append(order[:take])
    if not chosen:
        return []
    sel = np.concatenate(chosen)
    if sel.size > target:
        drop_order = np.lexsort((-sel, -leaf.distances[sel]))
        sel = np.delete(sel, drop_order[: sel.size - target])
    return [pyr.image_ids[i] for i in np.sort(sel)]


# ---------------------------------------------------------------------------
# Tiling and vegetation filtering


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 518
    overlap_fraction: float = 0.2

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValidationError("tile_size must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValidationError("overlap_fraction must be in [0, 1)")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")

    @property
    def stride(self) -> int:
        return int(math.floor(self.tile_size * (1.0 - self.overlap_fraction)))


def _axis_offsets(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    offsets = list(range(0, dim - tile + 1, stride))
    if offsets[-1] != dim - tile:
        offsets.append(dim - tile)
    return offsets


def tile_image(record: ImageRecord, spec: TileSpec = TileSpec()) -> list[ImageRecord]:
    """Cut overlapping tiles; the final tile per axis snaps to the image edge."""
    th = min(spec.tile_size, record.height)
    tw = min(spec.tile_size, record.width)
    tiles = []
    for oy in _axis_offsets(record.height, spec.tile_size, spec.stride):
        for ox in _axis_offsets(record.width, spec.tile_size, spec.stride):
            tiles.append(
                ImageRecord(
                    id=f"{record.id}_y{oy:05d}x{ox:05d}",
                    pixels=np.ascontiguousarray(
                        record.pixels[oy : oy + th, ox : ox + tw]
                    ),
                    source_tag=record.source_tag,
                    provenance={"parent_id": record.id, "x0": ox, "y0": oy},
                )
            )
    return tiles


def green_ratio(image) -> float:
    """Fraction of pixels whose excess-green index marks them as vegetation."""
    px = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    px = px.astype(np.int32)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    green = (2 * g - r - b > 20) & (g > r) & (g > b)
    return float(green.mean())


def filter_vegetation(
    tiles: Sequence[ImageRecord], min_green: float = 0.2
) -> list[ImageRecord]:
    return [t for t in tiles if green_ratio(t) >= min_green]


# ---------------------------------------------------------------------------
# End-to-end curation


@dataclass(frozen=True)
class CurationConfig:
    level_ks: tuple[int, ...] = (512, 2048, 8192)
    sample_fraction: float = 0.1
    tile_size: int = 518
    overlap: float = 0.2
    min_green: float = 0.2
    seed: int = 0
    max_iters: int = 50

    def __post_init__(self):
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must be in (0, 1]")
        if not 0.0 <= self.min_green <= 1.0:
            raise ConfigError("min_green must be in [0, 1]")
        TileSpec(self.tile_size, self.overlap)
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "CurationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown curation config keys: {sorted(unknown)}")
        if "level_ks" in doc:
            doc = dict(doc, level_ks=tuple(doc["level_ks"]))
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "level_ks": list(self.level_ks),
            "sample_fraction": self.sample_fraction,
            "tile_size": self.tile_size,
            "overlap": self.overlap,
            "min_green": self.min_green,
            "seed": self.seed,
            "max_iters": self.max_iters,
        }


@dataclass
class CurationManifest:
    counts: dict
    parameters: dict
    outputs: list[dict]
    error: Optional[str] = None

    def to_json(self) -> str:
        doc = {
            "counts": self.counts,
            "parameters": self.parameters,
            "outputs": self.outputs,
        }
        if self.error is not None:
            doc["error"] = self.error
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write_curated(out_dir: Path, images: list[ImageRecord], manifest: CurationManifest):
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in images:
        rel = f"images/{rec.id}.png"
        save_image(rec, out_dir / rel)
        entries.append(
            DatasetEntry(
                id=rec.id, image_path=rel, label_path=None, source_tag=rec.source_tag
            )
        )
    (out_dir / "curation_manifest.json").write_text(manifest.to_json())
    write_manifest(out_dir, entries)


def run_curation(
    config: CurationConfig,
    inputs: Sequence[DatasetIndex],
    embedder: Optional[EmbedderFn] = None,
    workers: int = 1,
    out_dir=None,
) -> tuple[list[ImageRecord], CurationManifest]:
    """Run the full pipeline over the given dataset manifests.

    Unlabeled entries go through embed -> cluster -> sample -> tile -> filter;
    labeled entries contribute bounding-box crops directly.  Any stage failure
    still writes a partial manifest (when out_dir is given) before re-raising.
    """
    counts: dict = {}
    params = config.to_dict()
    outputs: list[dict] = []
    try:
        unlabeled, labeled = [], []
        for ds in inputs:
            for entry in ds.entries:
                (labeled if entry.label_path else unlabeled).append((ds, entry))
        counts["ingested"] = len(unlabeled) + len(labeled)

        retained: list[ImageRecord] = []
        counts["clustered"] = 0
        counts["sampled"] = 0
        counts["tiled"] = 0
        counts["filtered"] = 0
        counts["retained"] = 0
        if unlabeled:
            records = ordered_map(
                lambda pair: pair[0].load_image(pair[1]), unlabeled, workers=workers
            )
            emb = embed_images(records, embedder=embedder, workers=workers)
            counts["clustered"] = emb.n
            pyramid = hierarchical_kmeans(
                emb, config.level_ks, seed=config.seed, max_iters=config.max_iters
            )
            sampled_ids = sample_from_pyramid(
                pyramid, config.sample_fraction, seed=config.seed
            )
            counts["sampled"] = len(sampled_ids)
            by_id = {r.id: r for r in records}
            spec = TileSpec(config.tile_size, config.overlap)
            tile_lists = ordered_map(
                lambda i: tile_image(by_id[i], spec), sampled_ids, workers=workers
            )
            tiles = [t for tl in tile_lists for t in tl]
            counts["tiled"] = len(tiles)
            retained = filter_vegetation(tiles, config.min_green)
            counts["retained"] = len(retained)
            counts["filtered"] = counts["tiled"] - counts["retained"]

        crops: list[ImageRecord] = []
        if labeled:
            def crop_entry(pair):
                ds, entry = pair
                rec = ds.load_image(entry)
                return crop_bounding_boxes(rec, ds.load_boxes(entry))

            crop_lists = ordered_map(crop_entry, labeled, workers=workers)
            crops = [c for cl in crop_lists for c in cl]
        counts["merged_crops"] = len(crops)

        final = retained + crops
        counts["final"] = len(final)
        for rec in final:
            outputs.append(
                {
                    "id": rec.id,
                    "parent_id": rec.provenance.get("parent_id"),
                    "source_tag": rec.source_tag,
                    "class_id": rec.provenance.get("class_id"),
                }
            )
        manifest = CurationManifest(counts=counts, parameters=params, outputs=outputs)
    except Exception as exc:
        partial = CurationManifest(
            counts=counts, parameters=params, outputs=outputs, error=str(exc)
        )
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "curation_manifest.json").write_text(partial.to_json())
        raise
    if out_dir is not None:
        _write_curated(Path(out_dir), final, manifest)
    return final, manifest
