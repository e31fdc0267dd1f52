"""Synthetic stand-in datasets, splitting, augmentation and PGM/PPM ingestion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CLASSIFICATION, SEGMENTATION = "classification", "segmentation"
SPLIT_RATIOS = (0.75, 0.10, 0.15)


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` float32 with integer labels or ``(N, 1, H, W)`` masks."""

    task: str
    images: np.ndarray
    targets: np.ndarray
    n_classes: int = 2
    splits: np.ndarray | None = None  # per-sample tag, "train" | "val" | "test"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        splits = None if self.splits is None else self.splits[idx]
        return Dataset(self.task, self.images[idx], self.targets[idx], self.n_classes, splits, dict(self.meta))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.targets).astype("<i8" if self.task == CLASSIFICATION else "<f4").tobytes())
        return h.hexdigest()[:16]

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.targets[idx]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    return yy, xx


def _background(rng: np.random.Generator, res: int, noise: float) -> np.ndarray:
    yy, xx = _grid(res)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.5, 1.5) / res
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.4 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return wave + rng.normal(0, noise, size=(res, res))


def synth_classification(n: int, resolution: int = 16, seed: int = 0, noise: float = 0.35,
                         contrast: float = 1.4, easy_fraction: float = 0.6) -> Dataset:
    """Balanced two-class textures.

    Every image has a slowly varying background plus pixel noise and one
    Gaussian-windowed blob.  Class 1 blobs carry a fine grating (wavelength
    about 3 px).  In the easy share of samples class 0 blobs are smooth; in
    the hard share they carry a coarser grating (about 5 px), so the classes
    differ only in frequency content.  Hard-sample contrast starts at zero,
    which leaves some samples ambiguous under the noise.
    """
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    yy, xx = _grid(resolution)
    imgs = np.empty((n, 1, resolution, resolution), dtype=np.float32)
    for i in range(n):
        img = _background(rng, resolution, noise)
        cy, cx = rng.uniform(3, resolution - 3, size=2)
        r = rng.uniform(1.8, 3.2)
        env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        easy = rng.random() < easy_fraction
        amp = rng.uniform(2 * contrast, 3 * contrast) if easy else rng.uniform(0.0, contrast)
        theta = rng.uniform(0, np.pi)
        if labels[i] == 1:
            wavelength = rng.uniform(2.5, 3.5)
        elif easy:
            wavelength = None
        else:
            wavelength = rng.uniform(4.5, 6.0)
        if wavelength is None:
            img += amp * 0.8 * env
        else:
            k = 2 * np.pi / wavelength
            carrier = np.cos(k * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)))
            img += amp * 1.4 * env * carrier
        imgs[i, 0] = img
    return Dataset(CLASSIFICATION, imgs, labels, 2, meta={"generator": "synth_classification",
                                                         "seed": seed, "resolution": resolution})


TINY_AREA_FRACTION = 0.02


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def synth_segmentation(n: int, resolution: int = 32, seed: int = 0, noise: float = 0.35,
                       tiny_fraction: float = 0.3) -> Dataset:
    """Bright ellipses (1-3 per image) on a noisy, slowly varying background.

    At least ``tiny_fraction`` of the samples (rounded up) include a tiny
    ellipse whose area is at most 2% of the image.
    """
    rng = np.random.default_rng(seed)
    yy, xx = _grid(resolution)
    area = resolution * resolution
    imgs = np.empty((n, 1, resolution, resolution), dtype=np.float32)
    masks = np.zeros((n, 1, resolution, resolution), dtype=np.float32)
    n_tiny = int(np.ceil(tiny_fraction * n))
    tiny_flags = np.zeros(n, dtype=bool)
    tiny_flags[:n_tiny] = True
    rng.shuffle(tiny_flags)
    for i in range(n):
        mask = np.zeros((resolution, resolution), dtype=bool)
        k = int(rng.integers(1, 4))
        for j in range(k):
            tiny = tiny_flags[i] and j == 0
            for _ in range(100):
                if tiny:
                    ry, rx = rng.uniform(1.2, 2.2, size=2) * resolution / 32
                else:
                    ry, rx = rng.uniform(2.5, resolution / 5, size=2)
                cy, cx = rng.uniform(ry + 1, resolution - ry - 1), rng.uniform(rx + 1, resolution - rx - 1)
                e = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
                if e.sum() == 0 or (tiny and e.sum() > TINY_AREA_FRACTION * area):
                    continue
                # keep regions separate so a tiny one stays a distinct component
                if (e & _dilate(mask)).any():
                    continue
                break
            mask |= e
        img = _background(rng, resolution, noise)
        img += mask * rng.uniform(0.9, 1.5)
        imgs[i, 0] = img
        masks[i, 0] = mask
    return Dataset(SEGMENTATION, imgs, masks, 2, meta={"generator": "synth_segmentation", "seed": seed,
                                                       "resolution": resolution,
                                                       "tiny": tiny_flags.tolist()})


# ---------------------------------------------------------------------------
# splitting and augmentation
# ---------------------------------------------------------------------------

def _split_sizes(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def split(ds: Dataset, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test split; stratified by class for classification."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[], [], []]
    if ds.task == CLASSIFICATION:
        # assign per class, then top up so totals match the global sizes
        totals = _split_sizes(len(ds), ratios)
        for c in range(ds.n_classes):
            idx = rng.permutation(np.flatnonzero(ds.targets == c))
            sizes = _split_sizes(len(idx), ratios)
            buckets[0] += idx[:sizes[0]].tolist()
            buckets[1] += idx[sizes[0]:sizes[0] + sizes[1]].tolist()
            buckets[2] += idx[sizes[0] + sizes[1]:].tolist()
        # rounding per class can drift from the global sizes by a sample or two
        for dst in (1, 2):
            while len(buckets[dst]) > totals[dst]:
                buckets[0].append(buckets[dst].pop())
            while len(buckets[dst]) < totals[dst]:
                buckets[dst].append(buckets[0].pop())
    else:
        idx = rng.permutation(len(ds))
        sizes = _split_sizes(len(ds), ratios)
        buckets = [idx[:sizes[0]].tolist(), idx[sizes[0]:sizes[0] + sizes[1]].tolist(),
                   idx[sizes[0] + sizes[1]:].tolist()]
    out = []
    for tag, b in zip(("train", "val", "test"), buckets):
        sub = ds.subset(sorted(b))
        sub.splits = np.array([tag] * len(sub))
        out.append(sub)
    return tuple(out)


def _apply(img: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    if hflip:
        img = img[..., ::-1]
    if vflip:
        img = img[..., ::-1, :]
    if rot:
        img = np.rot90(img, k=rot, axes=(-2, -1))
    return img


def augment(images: np.ndarray, targets: np.ndarray | None = None, seed: int = 0,
            rng: np.random.Generator | None = None):
    """Random flips (p=0.5 each) and a 90-degree rotation (k in 0..3, p=0.25 each) per sample.

    Masks (4-d targets) receive exactly the same transform as their image.
    """
    rng = rng or np.random.default_rng(seed)
    out_i = np.empty_like(images)
    is_mask = targets is not None and targets.ndim == 4
    out_t = np.empty_like(targets) if is_mask else targets
    for i in range(images.shape[0]):
        h, v = rng.random(2) < 0.5
        rot = int(rng.integers(0, 4))
        if images.shape[-1] != images.shape[-2]:
            rot = 2 * (rot % 2)
        out_i[i] = _apply(images[i], h, v, rot)
        if is_mask:
            out_t[i] = _apply(targets[i], h, v, rot)
    return out_i, out_t


# ---------------------------------------------------------------------------
# PGM / PPM ingestion
# ---------------------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6); returns ``(C, H, W)`` uint8/uint16 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported magic {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    mx, pos = _read_token(buf, pos)
    w, h, mx = int(w), int(h), int(mx)
    pos += 1
    channels = 1 if magic == b"P5" else 3
    dtype = np.uint8 if mx < 256 else np.dtype(">u2")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos)
    return arr.reshape(h, w, channels).transpose(2, 0, 1).copy()


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-d uint8 array (or a binary/probability map in [0, 1]) as P5."""
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[0]
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.uint8)
    c, h, w = a.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + a.transpose(1, 2, 0).tobytes())


def load_index(index_path, task: str) -> Dataset:
    """Load a dataset from an index file.

    Each non-empty line is ``image_path label_or_mask_path split`` (whitespace
    separated, paths relative to the index file).  Images are scaled to
    [0, 1]; masks are binarized at half the max value.
    """
    root = Path(index_path).parent
    images, targets, tags = [], [], []
    for lineno, line in enumerate(Path(index_path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{index_path}:{lineno}: expected 3 fields, got {len(parts)}")
        img_path, target, tag = parts
        if tag not in ("train", "val", "test"):
            raise ValueError(f"{index_path}:{lineno}: unknown split {tag!r}")
        img = read_pnm(root / img_path)
        images.append(img.astype(np.float32) / float(np.iinfo(img.dtype).max))
        if task == CLASSIFICATION:
            targets.append(int(target))
        else:
            m = read_pnm(root / target)[:1]
            targets.append((m >= (np.iinfo(m.dtype).max + 1) // 2).astype(np.float32))
        tags.append(tag)
    imgs = np.stack(images)
    tgts = np.asarray(targets, dtype=np.int64) if task == CLASSIFICATION else np.stack(targets)
    n_classes = int(tgts.max()) + 1 if task == CLASSIFICATION else 2
    return Dataset(task, imgs, tgts, max(n_classes, 2), np.array(tags), meta={"index": str(index_path)})


def split_by_tags(ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    if ds.splits is None:
        raise ValueError("dataset has no split tags")
    return tuple(ds.subset(np.flatnonzero(ds.splits == tag)) for tag in ("train", "val", "test"))
