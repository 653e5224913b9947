"""Procedural multi-domain shape-classification benchmark.

Four classes (disk, square, triangle, cross) rendered under four styles:

    photo     filled shape over a smooth background gradient
    sketch    dark outline and faint fill on near-white paper
    inverted  photo with inverted intensities
    textured  photo plus a seeded high-frequency grating

Shape pose (position, scale, rotation) is latent content shared by all
domains for a given sample index; styles only differ in rendering, so the
domain shift is purely stylistic. One domain (default "sketch") is held out
as the target; the rest are sources with a fixed stratified validation
split.

On-disk layout under a directory: ``manifest.json`` plus one raw
little-endian float64 tensor blob and one label CSV per domain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DOMAINS = ("photo", "sketch", "inverted", "textured")
CLASS_NAMES = ("disk", "square", "triangle", "cross")

# Class-keyed periodic micro-pattern mixed into every domain. It is perfectly
# predictive but small in amplitude, so nominally trained models lean on it
# and collapse under small-budget attacks while adversarially trained models
# are forced onto the (large-margin) shape features. This reproduces the
# brittle-feature mechanism behind the baseline-vs-robust-training gap.
WATERMARK_AMP = 6 / 255
_MOTIF = 8  # motif tile size in pixels

_LATENT_STREAM = 1000
_STYLE_STREAM = 2000
_SPLIT_STREAM = 3000
_MOTIF_STREAM = 4000


@dataclass(frozen=True)
class DomainData:
    name: str
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))


@dataclass(frozen=True)
class DGBenchmark:
    sources: tuple[DomainData, ...]
    target: DomainData
    source_val: tuple[np.ndarray, ...]  # per-source validation index sets
    class_count: int
    class_names: tuple[str, ...]
    seed: int
    per_domain: int
    image_size: int
    val_fraction: float

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.sources) + (self.target.name,)


# ---------------------------------------------------------------------------
# latent content


def _sample_latents(seed: int, count: int, class_count: int, rng=None):
    """Per-sample (label, cx, cy, radius, angle) in unit image coordinates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _LATENT_STREAM]))
    labels = np.arange(count) % class_count
    cx = rng.uniform(0.38, 0.62, count)
    cy = rng.uniform(0.38, 0.62, count)
    radius = rng.uniform(0.21, 0.33, count)
    angle = rng.uniform(-0.40, 0.40, count)
    return labels, cx, cy, radius, angle


def _shape_membership(label, cx, cy, radius, angle, grid_x, grid_y):
    """Binary membership of one posed shape on a supersampled grid."""
    dx = grid_x - cx
    dy = grid_y - cy
    ca, sa = math.cos(-angle), math.sin(-angle)
    rx = ca * dx - sa * dy
    ry = sa * dx + ca * dy
    if label == 0:  # disk
        return rx * rx + ry * ry <= radius * radius
    if label == 1:  # square
        half = radius * 0.82
        return (np.abs(rx) <= half) & (np.abs(ry) <= half)
    if label == 2:  # triangle, apex up
        # equilateral triangle inscribed in the radius circle
        top = -radius
        base = radius * 0.5
        inside = ry <= base
        slope = (base - top) / (radius * math.sqrt(3.0) / 2.0 * 2.0)
        inside &= ry >= top + np.abs(rx) / (radius * math.sqrt(3.0) / 2.0) * (base - top)
        return inside
    if label == 3:  # cross
        arm = radius * 0.34
        return ((np.abs(rx) <= arm) & (np.abs(ry) <= radius)) | (
            (np.abs(ry) <= arm) & (np.abs(rx) <= radius)
        )
    raise ValueError(f"no shape registered for class {label}")


def _soft_masks(seed: int, count: int, class_count: int, size: int) -> np.ndarray:
    """(N, H, W) soft membership in [0, 1] via 2x supersampling."""
    labels, cx, cy, radius, angle = _sample_latents(seed, count, class_count)
    ss = 2 * size
    coords = (np.arange(ss) + 0.5) / ss
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    masks = np.empty((count, size, size))
    for i in range(count):
        m = _shape_membership(labels[i], cx[i], cy[i], radius[i], angle[i], gx, gy)
        masks[i] = m.astype(np.float64).reshape(size, 2, size, 2).mean(axis=(1, 3))
    return masks


def class_watermarks(seed: int, class_count: int, size: int) -> np.ndarray:
    """(C_classes, 3, size, size) +-WATERMARK_AMP tiled motifs, one per class.

    Motifs are channel-coherent and low frequency so the small conv backbone
    can read them through its pooling stages.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, _MOTIF_STREAM]))
    motifs = rng.integers(0, 2, size=(class_count, 1, _MOTIF, _MOTIF)) * 2.0 - 1.0
    reps = -(-size // _MOTIF)
    tiled = np.tile(motifs, (1, 3, reps, reps))[:, :, :size, :size]
    return WATERMARK_AMP * tiled


# ---------------------------------------------------------------------------
# styles

_CHANNEL_TINT = np.array([0.03, 0.0, -0.03])


def _render_photo(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, size, _ = masks.shape
    coords = (np.arange(size) + 0.5) / size
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    imgs = np.empty((n, 3, size, size))
    for i in range(n):
        direction = rng.uniform(0, 2 * math.pi)
        base = rng.uniform(0.28, 0.38)
        amp = rng.uniform(0.10, 0.16)
        bg = base + amp * (math.cos(direction) * (gx - 0.5) + math.sin(direction) * (gy - 0.5)) * 2
        fill = rng.uniform(0.78, 0.88)
        img = bg * (1 - masks[i]) + fill * masks[i]
        imgs[i] = np.clip(img[None] + _CHANNEL_TINT[:, None, None], 0.0, 1.0)
    return imgs


def _render_sketch(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, size, _ = masks.shape
    edge = 4.0 * masks * (1.0 - masks)  # peaks on the shape boundary
    imgs = np.empty((n, 3, size, size))
    for i in range(n):
        paper = rng.uniform(0.94, 0.98)
        ink = rng.uniform(0.80, 0.90)
        img = paper - ink * edge[i] - 0.10 * masks[i]
        imgs[i] = np.clip(img[None] + 0.3 * _CHANNEL_TINT[:, None, None], 0.0, 1.0)
    return imgs


def _render_inverted(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.clip(1.0 - _render_photo(masks, rng), 0.0, 1.0)


def _render_textured(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = _render_photo(masks, rng)
    n, _, size, _ = base.shape
    coords = np.arange(size, dtype=np.float64)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    for i in range(n):
        freq = rng.uniform(5.0, 9.0)
        direction = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(
            2 * math.pi * freq / size * (math.cos(direction) * gx + math.sin(direction) * gy)
            + phase
        )
        base[i] = np.clip(base[i] + 0.08 * wave[None] - 0.10, 0.0, 1.0)
    return base


_RENDERERS = {
    "photo": _render_photo,
    "sketch": _render_sketch,
    "inverted": _render_inverted,
    "textured": _render_textured,
}


# ---------------------------------------------------------------------------
# benchmark generation


def generate_benchmark(
    seed: int,
    per_domain: int = 500,
    image_size: int = 32,
    class_count: int = 4,
    target_domain: str = "sketch",
    val_fraction: float = 0.2,
) -> DGBenchmark:
    """Deterministic benchmark: same arguments, bitwise-identical arrays."""
    if class_count > len(CLASS_NAMES):
        raise ValueError(
            f"class_count {class_count} exceeds the shape registry ({len(CLASS_NAMES)})"
        )
    if per_domain < 10 * class_count:
        raise ValueError(f"per_domain must be >= 10 * class_count = {10 * class_count}")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if target_domain not in DOMAINS:
        raise ValueError(f"unknown target domain {target_domain!r} (have {DOMAINS})")

    labels = (np.arange(per_domain) % class_count).astype(np.int64)
    masks = _soft_masks(seed, per_domain, class_count, image_size)
    marks = class_watermarks(seed, class_count, image_size)
    domains = []
    for idx, name in enumerate(DOMAINS):
        style_rng = np.random.default_rng(np.random.SeedSequence([seed, _STYLE_STREAM + idx]))
        images = _RENDERERS[name](masks, style_rng)
        images = np.clip(images + marks[labels], 0.0, 1.0)
        domains.append(DomainData(name, images, labels.copy()))
    sources = tuple(d for d in domains if d.name != target_domain)
    target = next(d for d in domains if d.name == target_domain)

    bench = DGBenchmark(
        sources=sources,
        target=target,
        source_val=(),
        class_count=class_count,
        class_names=CLASS_NAMES[:class_count],
        seed=seed,
        per_domain=per_domain,
        image_size=image_size,
        val_fraction=val_fraction,
    )
    _, val_idx = split_train_val(bench, val_fraction)
    return DGBenchmark(
        sources=sources,
        target=target,
        source_val=val_idx,
        class_count=class_count,
        class_names=CLASS_NAMES[:class_count],
        seed=seed,
        per_domain=per_domain,
        image_size=image_size,
        val_fraction=val_fraction,
    )


def split_train_val(
    benchmark: DGBenchmark, val_fraction: float
) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    """Per-source stratified split; the target domain is never touched."""
    if not 0 < val_fraction < 0.5:
        raise ValueError(f"val_fraction must lie in (0, 0.5), got {val_fraction}")
    train_sets, val_sets = [], []
    for d_idx, domain in enumerate(benchmark.sources):
        rng = np.random.default_rng(
            np.random.SeedSequence([benchmark.seed, _SPLIT_STREAM, d_idx])
        )
        val_idx = []
        for cls in range(benchmark.class_count):
            members = np.flatnonzero(domain.labels == cls)
            k = int(round(val_fraction * members.size))
            val_idx.append(rng.permutation(members)[:k])
        val = np.sort(np.concatenate(val_idx))
        mask = np.ones(domain.labels.size, dtype=bool)
        mask[val] = False
        train_sets.append(np.flatnonzero(mask))
        val_sets.append(val)
    return tuple(train_sets), tuple(val_sets)


def source_arrays(benchmark: DGBenchmark, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated (images, labels) for the 'train' or 'val' source split."""
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    train_idx, val_idx = split_train_val(benchmark, benchmark.val_fraction)
    chosen = train_idx if split == "train" else val_idx
    xs = np.concatenate([d.images[i] for d, i in zip(benchmark.sources, chosen)])
    ys = np.concatenate([d.labels[i] for d, i in zip(benchmark.sources, chosen)])
    return xs, ys


def domain_mean_separation(benchmark: DGBenchmark) -> np.ndarray:
    """Pairwise max-over-channel gap in mean intensity between domains."""
    domains = list(benchmark.sources) + [benchmark.target]
    means = np.stack([d.images.mean(axis=(0, 2, 3)) for d in domains])
    return np.abs(means[:, None, :] - means[None, :, :]).max(axis=2)


# ---------------------------------------------------------------------------
# persistence


def save_benchmark(benchmark: DGBenchmark, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "seed": benchmark.seed,
        "per_domain": benchmark.per_domain,
        "image_size": benchmark.image_size,
        "channels": 3,
        "class_count": benchmark.class_count,
        "class_names": list(benchmark.class_names),
        "dtype": "f64le",
        "val_fraction": benchmark.val_fraction,
        "target": benchmark.target.name,
        "source_val": {
            d.name: [int(i) for i in idx]
            for d, idx in zip(benchmark.sources, benchmark.source_val)
        },
        "domains": [],
    }
    for domain in list(benchmark.sources) + [benchmark.target]:
        blob = f"{domain.name}.f64"
        labels = f"{domain.name}.csv"
        data = np.ascontiguousarray(domain.images, dtype="<f8").tobytes()
        (root / blob).write_bytes(data)
        with open(root / labels, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "domain"])
            for i, lab in enumerate(domain.labels):
                writer.writerow([i, int(lab), domain.name])
        manifest["domains"].append(
            {
                "name": domain.name,
                "count": int(domain.labels.size),
                "blob": blob,
                "labels": labels,
                "blob_bytes": len(data),
            }
        )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _manifest_field(manifest: dict, field: str):
    if field not in manifest:
        raise ValueError(f"benchmark manifest is missing field {field!r}")
    return manifest[field]


def load_benchmark(path) -> DGBenchmark:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if _manifest_field(manifest, "dtype") != "f64le":
        raise ValueError(f"unsupported dtype tag {manifest['dtype']!r}")
    size = _manifest_field(manifest, "image_size")
    channels = _manifest_field(manifest, "channels")
    target_name = _manifest_field(manifest, "target")
    domains = {}
    for entry in _manifest_field(manifest, "domains"):
        name = _manifest_field(entry, "name")
        count = _manifest_field(entry, "count")
        blob = (root / _manifest_field(entry, "blob")).read_bytes()
        expected = count * channels * size * size * 8
        if entry.get("blob_bytes") != expected:
            raise ValueError(
                f"manifest blob_bytes for domain {name!r} is {entry.get('blob_bytes')}, "
                f"expected {expected} from count/image_size"
            )
        if len(blob) != expected:
            raise ValueError(
                f"tensor blob for domain {name!r} holds {len(blob)} bytes, expected {expected}"
            )
        images = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        images = images.reshape(count, channels, size, size)
        labels = np.empty(count, dtype=np.int64)
        with open(root / _manifest_field(entry, "labels"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        if len(rows) != count:
            raise ValueError(
                f"label CSV for domain {name!r} has {len(rows)} rows, expected {count}"
            )
        for row in rows:
            labels[int(row[0])] = int(row[1])
        domains[name] = DomainData(name, images, labels)
    if target_name not in domains:
        raise ValueError(f"manifest target {target_name!r} has no domain entry")
    sources = tuple(domains[e["name"]] for e in manifest["domains"] if e["name"] != target_name)
    source_val = tuple(
        np.asarray(_manifest_field(manifest, "source_val")[d.name], dtype=np.int64)
        for d in sources
    )
    return DGBenchmark(
        sources=sources,
        target=domains[target_name],
        source_val=source_val,
        class_count=_manifest_field(manifest, "class_count"),
        class_names=tuple(_manifest_field(manifest, "class_names")),
        seed=_manifest_field(manifest, "seed"),
        per_domain=_manifest_field(manifest, "per_domain"),
        image_size=size,
        val_fraction=_manifest_field(manifest, "val_fraction"),
    )
