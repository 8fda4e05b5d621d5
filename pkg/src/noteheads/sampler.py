"""Target pixels, input patches and the per-pixel (class, box offset) targets.

A target pixel ``t = (m, n)`` is a skeleton pixel. Its training label is
``c = 1`` when it lies in a notehead's mask, and its box target ``b`` holds the
distances from ``t`` to the notehead's top, left, bottom and right edges, with
the far edges measured inclusively (``bottom - 1 - m``). ``c = 0`` pixels
carry ``b = (0, 0, 0, 0)``.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_NOTEHEAD_LABELS, PageAnnotation
from .raster import BinaryImage, Box, PixelCoord, skeletonize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 101
    scaled_size: int = 51
    staff_height: float | None = None

    def __post_init__(self):
        for name in ("patch_size", "scaled_size"):
            value = getattr(self, name)
            if value < 3 or value % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {value}")
        if self.scaled_size > self.patch_size:
            raise ValueError("scaled_size cannot exceed patch_size")

    @classmethod
    def from_staff_height(cls, staff_height: float, scaled_size: int = 51) -> "PatchSpec":
        size = int(round(1.2 * staff_height))
        size += 1 - size % 2
        return cls(size, min(scaled_size, size), staff_height)


@dataclass
class TrainingSample:
    X: np.ndarray
    t: PixelCoord
    c: int
    b: tuple[float, float, float, float]


@dataclass
class SampleSet:
    """Columnar training samples: patches ``X`` (N, S, S) plus labels."""

    X: np.ndarray
    t: np.ndarray  # (N, 2) int
    c: np.ndarray  # (N,) float
    b: np.ndarray  # (N, 4) float

    def __len__(self):
        return len(self.c)

    def __getitem__(self, index) -> TrainingSample:
        return TrainingSample(self.X[index], PixelCoord(*self.t[index]), int(self.c[index]), tuple(self.b[index]))

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.X[index], self.t[index], self.c[index], self.b[index])

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("X", "t", "c", "b")))


# ---------------------------------------------------------------------------
# Targets


def runtime_target_array(image: BinaryImage) -> np.ndarray:
    return np.argwhere(skeletonize(image).bits)


def runtime_targets(image: BinaryImage) -> list[PixelCoord]:
    """All skeleton pixels, row-major."""
    return [PixelCoord(int(m), int(n)) for m, n in runtime_target_array(image)]


def training_targets(
    page: PageAnnotation,
    image: BinaryImage,
    k: int = 1,
    labels=DEFAULT_NOTEHEAD_LABELS,
    seed=0,
    skeleton: np.ndarray | None = None,
) -> list[tuple[PixelCoord, int]]:
    """Pick up to ``k`` skeleton pixels per symbol, uniformly without replacement.

    Non-notehead symbols never yield pixels that lie inside a notehead mask.
    Symbols left with no candidates are skipped with a log message.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if skeleton is None:
        skeleton = skeletonize(image).bits
    heads = page.paint(page.noteheads(labels))
    rng = np.random.default_rng(seed)
    out = []
    skipped = []
    for symbol in sorted(page.symbols, key=lambda s: s.id):
        b = symbol.bbox
        eligible = symbol.mask & skeleton[b.top : b.bottom, b.left : b.right]
        if symbol.label not in labels:
            eligible &= ~heads[b.top : b.bottom, b.left : b.right]
        ys, xs = np.nonzero(eligible)
        if len(ys) == 0:
            skipped.append(symbol.id)
            continue
        chosen = np.sort(rng.choice(len(ys), size=min(k, len(ys)), replace=False))
        out.extend((PixelCoord(int(ys[i] + b.top), int(xs[i] + b.left)), symbol.id) for i in chosen)
    if skipped:
        log.info("%s: %d symbols without eligible skeleton pixels: %s", page.name, len(skipped), skipped)
    return out


def notehead_lookup(page: PageAnnotation, labels=DEFAULT_NOTEHEAD_LABELS) -> tuple[np.ndarray, list[Box]]:
    """Page-sized map from pixel to notehead index (-1 for none), and the boxes.

    Where notehead masks overlap, the later symbol wins.
    """
    owner = np.full((page.height, page.width), -1, dtype=np.int32)
    boxes = []
    for i, s in enumerate(page.noteheads(labels)):
        b = s.bbox
        view = owner[b.top : b.bottom, b.left : b.right]
        view[s.mask] = i
        boxes.append(b)
    return owner, boxes


def label_targets(coords: np.ndarray, page: PageAnnotation, labels=DEFAULT_NOTEHEAD_LABELS):
    """Class and box targets for an array of target pixels."""
    owner, boxes = notehead_lookup(page, labels)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    c = np.zeros(len(coords), dtype=np.float64)
    b = np.zeros((len(coords), 4), dtype=np.float64)
    for i, (m, n) in enumerate(coords):
        j = owner[m, n]
        if j >= 0:
            c[i], b[i] = encode_target(PixelCoord(m, n), boxes[j])
    return c, b


def encode_target(t: PixelCoord, notehead_box: Box | None):
    if notehead_box is None:
        return 0, (0, 0, 0, 0)
    m, n = t
    box = notehead_box
    if not box.contains_pixel(m, n):
        raise ValueError(f"target {tuple(t)} lies outside {tuple(box)}")
    return 1, (m - box.top, n - box.left, box.bottom - 1 - m, box.right - 1 - n)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def decode_box(t: PixelCoord, b) -> Box:
    """Inverse of :func:`encode_target`; offsets are rounded to the nearest integer."""
    if min(b) < 0:
        raise ValueError(f"negative offsets {tuple(b)}")
    d_top, d_left, d_bottom, d_right = _round_half_up(b)
    m, n = t
    return Box(m - d_top, n - d_left, m + d_bottom + 1, n + d_right + 1)


def decode_boxes(coords: np.ndarray, b: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Vectorised :func:`decode_box`, optionally clamped to an image shape."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    d = _round_half_up(np.clip(b, 0, None)).reshape(-1, 4)
    m, n = coords[:, 0], coords[:, 1]
    boxes = np.stack([m - d[:, 0], n - d[:, 1], m + d[:, 2] + 1, n + d[:, 3] + 1], axis=1)
    if shape is not None:
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, shape[0])
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, shape[1])
    return boxes


# ---------------------------------------------------------------------------
# Patches


def _area_weights(size: int, scaled: int) -> np.ndarray:
    """(scaled, size) matrix averaging ``size`` cells into ``scaled`` equal bins."""
    step = size / scaled
    w = np.zeros((scaled, size))
    for j in range(scaled):
        lo, hi = j * step, (j + 1) * step
        for i in range(int(math.floor(lo)), min(size, int(math.ceil(hi)))):
            w[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return w / step


class PatchExtractor:
    """Crops ``patch_size`` windows around target pixels and area-downsamples them."""

    def __init__(self, image: BinaryImage, spec: PatchSpec = PatchSpec()):
        self.spec = spec
        half = spec.patch_size // 2
        self.half = half
        self.padded = np.pad(image.bits.astype(np.float32), half)
        self.weights = _area_weights(spec.patch_size, spec.scaled_size).astype(np.float32)
        self.shape = image.shape

    def __call__(self, coords, chunk: int = 512) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        size, scaled = self.spec.patch_size, self.spec.scaled_size
        out = np.empty((len(coords), scaled, scaled), dtype=np.float32)
        if len(coords) and (coords.min() < 0 or np.any(coords >= self.shape)):
            raise ValueError("target pixel outside the image")
        windows = np.lib.stride_tricks.sliding_window_view(self.padded, (size, size))
        for start in range(0, len(coords), chunk):
            c = coords[start : start + chunk]
            crops = windows[c[:, 0], c[:, 1]]
            out[start : start + chunk] = np.clip(self.weights @ crops @ self.weights.T, 0.0, 1.0)
        return out


def extract_patch(image: BinaryImage, t: PixelCoord, spec: PatchSpec = PatchSpec()) -> np.ndarray:
    """Background-padded crop centred on ``t``, area-averaged to ``scaled_size``."""
    return PatchExtractor(image, spec)([tuple(t)])[0]


def page_samples(
    image: BinaryImage,
    page: PageAnnotation,
    spec: PatchSpec = PatchSpec(),
    k: int = 1,
    labels=DEFAULT_NOTEHEAD_LABELS,
    seed=0,
) -> SampleSet:
    """Training samples for one annotated page."""
    picks = training_targets(page, image, k, labels, seed)
    coords = np.array([p for p, _ in picks], dtype=np.int64).reshape(-1, 2)
    heads = {s.id for s in page.noteheads(labels)}
    by_id = {s.id: s for s in page.symbols}
    c = np.zeros(len(picks))
    b = np.zeros((len(picks), 4))
    for i, (t, sid) in enumerate(picks):
        if sid in heads:
            c[i], b[i] = encode_target(t, by_id[sid].bbox)
    X = PatchExtractor(image, spec)(coords)
    return SampleSet(X, coords, c, b)


# ---------------------------------------------------------------------------
# Binary dump: b"NHTS", uint32 count, uint32 scaled_size, then per sample
# float32 patch, float32 label, float32[4] offsets; all little-endian.

_MAGIC = b"NHTS"


def write_samples(samples: SampleSet, path) -> None:
    n, s = len(samples), samples.X.shape[-1] if len(samples) else 0
    rows = np.concatenate(
        [
            samples.X.reshape(n, -1).astype("<f4"),
            samples.c.reshape(n, 1).astype("<f4"),
            samples.b.reshape(n, 4).astype("<f4"),
        ],
        axis=1,
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", n, s))
        fh.write(rows.tobytes())


def read_samples(path) -> SampleSet:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a sample dump")
    n, s = struct.unpack_from("<II", data, 4)
    width = s * s + 5
    rows = np.frombuffer(data, dtype="<f4", offset=12)
    if rows.size != n * width:
        raise ValueError(f"{path}: expected {n} samples of {width} floats")
    rows = rows.reshape(n, width)
    return SampleSet(
        rows[:, : s * s].reshape(n, s, s).astype(np.float32),
        np.zeros((n, 2), dtype=np.int64),
        rows[:, s * s].astype(np.float64),
        rows[:, s * s + 1 :].astype(np.float64),
    )
