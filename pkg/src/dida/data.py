"""Digit-domain datasets: IDX ingestion, derived domains and a procedural benchmark.

Sample collections are stored column-wise in :class:`SampleSet` (an image
array plus label/id arrays) rather than as lists of objects; indexing a set
yields a :class:`Sample`. Every generator here is a pure function of its
inputs and seed.
"""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

SOURCE = "source"
TARGET = "target"
SYNTHETIC = "synthetic-target"
DOMAINS = (SOURCE, TARGET, SYNTHETIC)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int | None
    domain: str
    id: str


@dataclass
class SampleSet:
    """Images ``(N, C, H, W)`` in [0, 1] with per-sample ids and optional labels.

    ``truth`` holds ground-truth labels of an unlabeled set. It exists for
    evaluation only; training code reads ``labels`` and never ``truth``.
    """

    images: np.ndarray
    ids: np.ndarray
    domain: str
    labels: np.ndarray | None = None
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.ids = np.asarray(self.ids).astype(str)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.ids) != len(self.images):
            raise ValueError(f"{len(self.ids)} ids for {len(self.images)} images")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        for name in ("labels", "truth"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.shape != (len(self.images),):
                    raise ValueError(f"{name} shape {arr.shape} does not match {len(self.images)} images")
                setattr(self, name, arr)
        if self.domain in (SOURCE, SYNTHETIC) and self.labels is None and len(self):
            raise ValueError(f"{self.domain} samples must be labeled")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        label = None if self.labels is None else int(self.labels[i])
        return Sample(self.images[i], label, self.domain, str(self.ids[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return SampleSet(self.images[idx], self.ids[idx], self.domain, pick(self.labels), pick(self.truth))

    def unlabeled(self) -> "SampleSet":
        """Move labels into the evaluation-only ``truth`` slot."""
        truth = self.labels if self.labels is not None else self.truth
        return SampleSet(self.images, self.ids, TARGET, None, truth)

    def with_labels(self, labels, domain: str | None = None) -> "SampleSet":
        return SampleSet(self.images, self.ids, domain or self.domain, labels, self.truth)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.images)


def concat(sets: list[SampleSet], domain: str | None = None) -> SampleSet:
    """Stack labeled sets (e.g. source plus synthetic) into one pool."""
    sets = [s for s in sets if len(s)]
    if not sets:
        raise ValueError("nothing to concatenate")
    if len({s.image_shape for s in sets}) != 1:
        raise ValueError(f"image shapes differ: {[s.image_shape for s in sets]}")
    labels = None if any(s.labels is None for s in sets) else np.concatenate([s.labels for s in sets])
    return SampleSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.ids for s in sets]),
        domain or sets[0].domain,
        labels,
    )


@dataclass
class DatasetSplit:
    train: SampleSet
    test: SampleSet
    num_classes: int

    def __post_init__(self):
        if self.train.image_shape != self.test.image_shape:
            raise ValueError(f"train/test shapes differ: {self.train.image_shape} vs {self.test.image_shape}")
        overlap = set(self.train.ids) & set(self.test.ids)
        if overlap:
            raise ValueError(f"{len(overlap)} ids appear in both train and test")

    @property
    def image_shape(self):
        return self.train.image_shape


# ----------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IDXMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IDXTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, id_prefix: str = "") -> SampleSet:
    """Read an IDX image/label pair as a labeled set; call ``.unlabeled()`` for a target domain."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= 10:
        raise IDXFormatError(f"label {labels.max()} outside [0, 10)")
    ids = [f"{id_prefix}{i}" for i in range(len(images))]
    return SampleSet(images[:, None].astype(np.float32) / 255.0, ids, SOURCE, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``(N, H, W)`` images and labels as uncompressed IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ----------------------------------------------------------------------------
# Derived domains


@dataclass
class TextureCorpus:
    """Color patches ``(P, 3, h, w)`` in [0, 1] used as target backgrounds."""

    patches: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 4 or len(self.patches) == 0:
            raise ValueError("texture corpus must be a non-empty (P, 3, h, w) array")
        if self.patches.shape[1] != 3:
            raise ValueError(f"texture patches need 3 channels, got {self.patches.shape[1]}")

    @classmethod
    def from_directory(cls, path, size: int | None = None) -> "TextureCorpus":
        from PIL import Image

        patches = []
        for f in sorted(Path(path).iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            img = Image.open(f).convert("RGB")
            if size:
                img = img.resize((size, size), Image.BILINEAR)
            patches.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
        if not patches:
            raise ValueError(f"no images found in {path}")
        if len({p.shape for p in patches}) != 1:
            raise ValueError("texture images differ in size; pass size= to resize them")
        return cls(np.stack(patches))


def procedural_textures(n: int, size: int, seed: int, octaves=(2, 4, 8), contrast: float = 1.0) -> TextureCorpus:
    """Seeded multi-scale color noise around a random base color per patch.

    Each octave is a random color grid bilinearly upsampled to ``size``;
    ``contrast`` scales the noise around the base color.
    """
    rng = np.random.default_rng(seed)
    noise = np.zeros((n, 3, size, size), dtype=np.float32)
    for k, cells in enumerate(octaves):
        grid = torch.from_numpy(rng.random((n, 3, cells, cells), dtype=np.float32) - 0.5)
        noise += 0.5**k * F.interpolate(grid, size=(size, size), mode="bilinear", align_corners=True).numpy()
    base = rng.random((n, 3, 1, 1), dtype=np.float32)
    return TextureCorpus(np.clip(base + contrast * noise, 0.0, 1.0))


def make_mnistm(digits: SampleSet, patches: TextureCorpus, seed: int, amplitude: float = 1.0) -> SampleSet:
    """Blend digits over random crops of color patches with ``|patch - digit|`` per channel."""
    n, c, h, w = digits.images.shape
    ph, pw = patches.patches.shape[2:]
    if ph < h or pw < w:
        raise ValueError(f"patches {ph}x{pw} smaller than digits {h}x{w}")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(patches.patches), n)
    ys = rng.integers(0, ph - h + 1, n)
    xs = rng.integers(0, pw - w + 1, n)
    crops = np.stack([patches.patches[p, :, y : y + h, x : x + w] for p, y, x in zip(which, ys, xs)]) if n else np.zeros((0, 3, h, w), np.float32)
    digit = digits.images if c == 3 else np.repeat(digits.images, 3, axis=1)
    blended = np.abs(np.float32(amplitude) * crops - digit)
    return SampleSet(np.clip(blended, 0, 1), digits.ids, digits.domain, digits.labels, digits.truth)


def resize_to(split, height: int, width: int):
    """Bilinear resize of a :class:`SampleSet` or :class:`DatasetSplit`, clamped to [0, 1]."""
    if height < 8 or width < 8:
        raise ValueError(f"target size {height}x{width} is degenerate (minimum 8x8)")
    if isinstance(split, DatasetSplit):
        return DatasetSplit(resize_to(split.train, height, width), resize_to(split.test, height, width), split.num_classes)
    if split.images.shape[2:] == (height, width):
        return split.subset(np.arange(len(split)))
    out = F.interpolate(split.tensor(), size=(height, width), mode="bilinear", align_corners=False)
    return SampleSet(out.clamp(0, 1).numpy(), split.ids, split.domain, split.labels, split.truth)


def to_rgb(split: SampleSet) -> SampleSet:
    if split.images.shape[1] == 3:
        return split
    return SampleSet(np.repeat(split.images, 3, axis=1), split.ids, split.domain, split.labels, split.truth)


def sample_protocol_usps(mnist: SampleSet, usps: SampleSet, seed: int, n_source: int = 2000, n_target: int = 1800):
    """Draw 2000 labeled MNIST and 1800 unlabeled USPS samples without replacement."""
    if len(mnist) < n_source or len(usps) < n_target:
        raise ValueError(f"pools too small: need {n_source}/{n_target}, have {len(mnist)}/{len(usps)}")
    rng = np.random.default_rng(seed)
    src = mnist.subset(np.sort(rng.choice(len(mnist), n_source, replace=False)))
    tgt = usps.subset(np.sort(rng.choice(len(usps), n_target, replace=False)))
    return src.with_labels(src.labels, SOURCE), tgt.unlabeled()


# ----------------------------------------------------------------------------
# Procedural glyph benchmark

_TL, _TR, _ML, _MR, _BL, _BR = (0, 0), (1, 0), (0, 0.5), (1, 0.5), (0, 1), (1, 1)
GLYPHS = [
    [(_TL, _TR), (_TR, _BR), (_BR, _BL), (_BL, _TL), (_BL, _TR)],
    [((0.5, 0), (0.5, 1)), ((0.2, 0.25), (0.5, 0)), ((0.25, 1), (0.75, 1))],
    [(_TL, _TR), (_TR, _MR), (_MR, _ML), (_ML, _BL), (_BL, _BR)],
    [(_TL, _TR), (_TR, _BR), (_ML, _MR), (_BL, _BR)],
    [(_TL, _ML), (_ML, _MR), (_TR, _BR)],
    [(_TR, _TL), (_TL, _ML), (_ML, _MR), (_MR, _BR), (_BR, _BL)],
    [(_TR, _TL), (_TL, _BL), (_BL, _BR), (_BR, _MR), (_MR, _ML)],
    [(_TL, _TR), (_TR, (0.35, 1))],
    [(_TL, _TR), (_TR, _BR), (_BR, _BL), (_BL, _TL), (_ML, _MR)],
    [(_MR, _ML), (_ML, _TL), (_TL, _TR), (_TR, _BR), (_BR, _BL)],
]


@dataclass
class DeskConfig:
    num_classes: int = 10
    n_source: int = 2000
    n_target: int = 2000
    n_test: int = 1000
    image_size: int = 16
    texture_amplitude: float = 0.3
    texture_contrast: float = 1.0

    def validate(self):
        if not 1 <= self.num_classes <= len(GLYPHS):
            raise ValueError(f"num_classes must be in [1, {len(GLYPHS)}], got {self.num_classes}")
        for name in ("n_source", "n_target", "n_test"):
            v = getattr(self, name)
            if not 1 <= v <= 5000:
                raise ValueError(f"{name} must be in [1, 5000], got {v}")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")


def render_glyphs(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Anti-aliased stroke glyphs ``(N, 1, size, size)`` under random affine jitter."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    out = np.zeros((n, 1, size, size), dtype=np.float32)
    centers = np.arange(size, dtype=np.float32) + 0.5
    py, px = np.meshgrid(centers, centers, indexing="ij")
    pix = np.stack([px.ravel(), py.ravel()], 1)
    for k in range(n):
        angle = np.deg2rad(rng.uniform(-12, 12))
        scale = rng.uniform(0.85, 1.1)
        shear = rng.uniform(-0.2, 0.2)
        shift = rng.uniform(-1.0, 1.0, 2)
        thick = rng.uniform(0.9, 1.5) * size / 16
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        A = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale * np.array([0.5, 0.7]) * size
        best = np.full(len(pix), np.inf)
        for p0, p1 in GLYPHS[labels[k]]:
            a = (np.asarray(p0) - 0.5) @ A.T + size / 2 + shift
            b = (np.asarray(p1) - 0.5) @ A.T + size / 2 + shift
            ab = b - a
            t = np.clip(((pix - a) @ ab) / max(ab @ ab, 1e-9), 0, 1)
            d = np.linalg.norm(pix - (a + t[:, None] * ab), axis=1)
            best = np.minimum(best, d)
        out[k, 0] = np.clip(thick / 2 + 0.5 - best, 0, 1).reshape(size, size)
    return out


def _glyph_set(n: int, cfg: DeskConfig, seed: int, prefix: str) -> SampleSet:
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % cfg.num_classes)
    images = np.repeat(render_glyphs(labels, cfg.image_size, seed + 1), 3, axis=1)
    return SampleSet(images, [f"{prefix}{i}" for i in range(n)], SOURCE, labels)


def make_desk_benchmark(cfg: DeskConfig | None = None, seed: int = 0) -> tuple[DatasetSplit, DatasetSplit]:
    """Glyphs on black (source) and the same generator blended over color noise (target).

    The target train set is unlabeled; its test set keeps labels for evaluation.
    """
    cfg = cfg or DeskConfig()
    cfg.validate()
    seeds = np.random.SeedSequence(seed).generate_state(6)
    s = int(seeds[0])
    src_train = _glyph_set(cfg.n_source, cfg, s, "src-train-")
    src_test = _glyph_set(cfg.n_test, cfg, int(seeds[1]), "src-test-")
    textures = procedural_textures(512, 2 * cfg.image_size, int(seeds[2]), contrast=cfg.texture_contrast)
    tgt_train = make_mnistm(_glyph_set(cfg.n_target, cfg, int(seeds[3]), "tgt-train-"), textures, int(seeds[4]), cfg.texture_amplitude)
    tgt_test = make_mnistm(_glyph_set(cfg.n_test, cfg, int(seeds[5]), "tgt-test-"), textures, int(seeds[4]) + 1, cfg.texture_amplitude)
    source = DatasetSplit(src_train, src_test, cfg.num_classes)
    target = DatasetSplit(tgt_train.unlabeled(), tgt_test.with_labels(tgt_test.labels, TARGET), cfg.num_classes)
    return source, target


# ----------------------------------------------------------------------------
# Batching and cache


def batch_iter(n_or_set, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index arrays covering ``range(n)`` once; the last batch may be short."""
    n = n_or_set if isinstance(n_or_set, int) else len(n_or_set)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n == 0:
        raise ValueError("cannot batch an empty split")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def cache_root() -> Path:
    return Path(os.environ.get("DIDA_CACHE", Path.home() / ".cache" / "dida"))


def save_sample_set(path, s: SampleSet) -> None:
    arrays = {"images": s.images, "ids": s.ids, "domain": np.array(s.domain)}
    if s.labels is not None:
        arrays["labels"] = s.labels
    if s.truth is not None:
        arrays["truth"] = s.truth
    np.savez_compressed(path, **arrays)


def load_sample_set(path) -> SampleSet:
    with np.load(path) as z:
        return SampleSet(
            z["images"], z["ids"], str(z["domain"]),
            z["labels"] if "labels" in z else None,
            z["truth"] if "truth" in z else None,
        )


def save_dataset(directory, source: DatasetSplit, target: DatasetSplit, meta: dict) -> None:
    """Layout: ``source_train.npz``, ``source_test.npz``, ``target_train.npz``, ``target_test.npz``, ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in (("source", source), ("target", target)):
        save_sample_set(directory / f"{name}_train.npz", split.train)
        save_sample_set(directory / f"{name}_test.npz", split.test)
    meta = dict(meta, num_classes=source.num_classes, image_shape=list(source.image_shape))
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> tuple[DatasetSplit, DatasetSplit]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    k = meta["num_classes"]
    splits = []
    for name in ("source", "target"):
        splits.append(DatasetSplit(
            load_sample_set(directory / f"{name}_train.npz"),
            load_sample_set(directory / f"{name}_test.npz"),
            k,
        ))
    return splits[0], splits[1]
