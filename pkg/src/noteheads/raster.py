"""Binary rasters, PBM I/O, thinning, connected components and box geometry.

Every other module works in the coordinate system defined here: images are
``(height, width)`` boolean arrays with ``True`` meaning ink, pixels are
addressed as ``(m, n) = (row, column)`` and boxes are half-open
``[top, bottom) x [left, right)`` intervals.
"""
from __future__ import annotations

import collections
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAX_PIXELS = 1 << 31


class PBMError(ValueError):
    """Base class for unreadable PBM files."""


class PBMHeaderError(PBMError):
    pass


class PBMTruncatedError(PBMError):
    pass


class PBMDimensionError(PBMError):
    pass


PixelCoord = collections.namedtuple("PixelCoord", ["m", "n"])

_BoxBase = collections.namedtuple("_BoxBase", ["top", "left", "bottom", "right"])


class Box(_BoxBase):
    """Axis-aligned integer box, half-open on the bottom and right edges."""

    __slots__ = ()

    def __new__(cls, top, left, bottom, right):
        top, left, bottom, right = int(top), int(left), int(bottom), int(right)
        if not (top < bottom and left < right):
            raise ValueError(f"degenerate box {(top, left, bottom, right)}")
        return super().__new__(cls, top, left, bottom, right)

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains_pixel(self, m: int, n: int) -> bool:
        return self.top <= m < self.bottom and self.left <= n < self.right

    def clamp(self, height: int, width: int) -> "Box":
        """Clip to an image of the given size. The box must overlap it."""
        return Box(
            max(self.top, 0),
            max(self.left, 0),
            min(self.bottom, height),
            min(self.right, width),
        )

    def to_list(self) -> list[int]:
        return [self.top, self.left, self.bottom, self.right]


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """A page raster. ``bits`` is a read-only ``(height, width)`` bool array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D mask, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def blank(cls, height: int, width: int) -> "BinaryImage":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))


# ---------------------------------------------------------------------------
# PBM

_WS = b" \t\n\r\x0b\x0c"


def _read_header(data: bytes) -> tuple[bytes, int, int, int]:
    """Parse magic, width and height; return them and the payload offset."""
    tokens = []
    pos = 0
    while len(tokens) < 3:
        while pos < len(data) and data[pos] in _WS:
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PBMHeaderError("header ends before magic, width and height")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic not in (b"P1", b"P4"):
        raise PBMHeaderError(f"unsupported magic {magic!r}")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise PBMHeaderError(f"non-numeric dimensions {tokens[1]!r} {tokens[2]!r}") from None
    if width <= 0 or height <= 0:
        raise PBMDimensionError(f"dimensions must be positive, got {width}x{height}")
    if width * height > MAX_PIXELS:
        raise PBMDimensionError(f"{width}x{height} exceeds {MAX_PIXELS} pixels")
    if magic == b"P4":
        # exactly one whitespace byte separates the header from the raster
        if pos >= len(data) or data[pos] not in _WS:
            raise PBMHeaderError("missing whitespace after P4 header")
        pos += 1
    return magic, width, height, pos


def decode_pbm(data: bytes) -> BinaryImage:
    magic, width, height, pos = _read_header(data)
    if magic == b"P4":
        row_bytes = (width + 7) // 8
        need = row_bytes * height
        payload = np.frombuffer(data, dtype=np.uint8, count=min(need, len(data) - pos), offset=pos)
        if payload.size < need:
            raise PBMTruncatedError(f"expected {need} raster bytes, found {payload.size}")
        bits = np.unpackbits(payload.reshape(height, row_bytes), axis=1)[:, :width]
    else:
        body = re.sub(rb"#[^\r\n]*", b"", data[pos:])
        digits = np.frombuffer(body.translate(None, _WS), dtype=np.uint8)
        if digits.size < width * height:
            raise PBMTruncatedError(f"expected {width * height} pixels, found {digits.size}")
        digits = digits[: width * height]
        if not np.all((digits == ord("0")) | (digits == ord("1"))):
            raise PBMHeaderError("P1 raster contains characters other than 0 and 1")
        bits = (digits == ord("1")).reshape(height, width)
    return BinaryImage(bits.astype(bool))


def encode_pbm(image: BinaryImage) -> bytes:
    """Canonical P4 encoding: minimal header, zero padding bits."""
    header = f"P4\n{image.width} {image.height}\n".encode("ascii")
    return header + np.packbits(image.bits, axis=1).tobytes()


def load_pbm(path) -> BinaryImage:
    return decode_pbm(Path(path).read_bytes())


def save_pbm(image: BinaryImage, path) -> None:
    Path(path).write_bytes(encode_pbm(image))


# ---------------------------------------------------------------------------
# Thinning
#
# Neighbour bit i of a pixel holds P(i+2) in the usual Zhang-Suen naming:
# P2=N, P3=NE, P4=E, P5=SE, P6=S, P7=SW, P8=W, P9=NW.

_NEIGHBOURS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _zhang_suen_tables() -> tuple[np.ndarray, np.ndarray]:
    first = np.zeros(256, dtype=bool)
    second = np.zeros(256, dtype=bool)
    for code in range(256):
        p = [(code >> i) & 1 for i in range(8)]
        n_on = sum(p)
        transitions = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
        p2, _, p4, _, p6, _, p8, _ = p
        removable = 2 <= n_on <= 6 and transitions == 1
        first[code] = removable and p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
        second[code] = removable and p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
    return first, second


_SUBITERATIONS = _zhang_suen_tables()


def skeletonize_stack(stack: np.ndarray) -> np.ndarray:
    """Thin every image of an ``(N, H, W)`` boolean stack.

    Zhang-Suen two-subiteration thinning, with one amendment: when all four
    pixels of a 2x2 block are marked for deletion in the same subiteration,
    the top-left one is kept. Plain Zhang-Suen erases isolated 2x2 squares.

    Images are laid out in one flat buffer, each followed by a zero row and
    each row by a zero column, so every neighbourhood lookup is a contiguous
    slice. Images that stop changing leave the working set.
    """
    stack = np.asarray(stack, dtype=bool)
    if stack.ndim != 3:
        raise ValueError(f"expected (N, H, W), got shape {stack.shape}")
    n_img, h, w = stack.shape
    if stack.size == 0:
        return stack.copy()
    pw = w + 1
    block = (h + 1) * pw
    offsets = [dy * pw + dx for dy, dx in _NEIGHBOURS]
    lead = pw + 1

    state = np.zeros((n_img, h + 1, pw), dtype=np.uint8)
    state[:, :h, :w] = stack
    active = np.flatnonzero(stack.reshape(n_img, -1).any(axis=1))
    while active.size:
        size = active.size * block
        buf = np.zeros(lead + size + lead, dtype=np.uint8)
        body = buf[lead : lead + size]
        body[:] = state[active].reshape(-1)
        code = np.empty(size, dtype=np.uint8)
        tmp = np.empty(size, dtype=np.uint8)
        cand = np.empty(size, dtype=bool)
        quad = np.empty(size, dtype=bool)
        changed = np.zeros(active.size, dtype=bool)
        for table in _SUBITERATIONS:
            code[:] = buf[lead + offsets[0] : lead + offsets[0] + size]
            for bit, off in enumerate(offsets[1:], start=1):
                np.left_shift(buf[lead + off : lead + off + size], bit, out=tmp)
                np.bitwise_or(code, tmp, out=code)
            np.take(table, code, out=cand)
            # separators are always zero, so ink implies an interior pixel
            np.logical_and(cand, body, out=cand)
            quad[:] = False
            q = quad[: size - pw - 1]
            np.logical_and(cand[: size - pw - 1], cand[1 : size - pw], out=q)
            np.logical_and(q, cand[pw : size - 1], out=q)
            np.logical_and(q, cand[pw + 1 :], out=q)
            np.logical_and(cand, ~quad, out=cand)
            hit = cand.reshape(active.size, block).any(axis=1)
            if hit.any():
                body[cand] = 0
                changed |= hit
        state[active] = body.reshape(active.size, h + 1, pw)
        active = active[changed]
    return state[:, :h, :w].astype(bool)


def skeletonize(image: BinaryImage) -> BinaryImage:
    """Morphological skeleton of the page (see :func:`skeletonize_stack`)."""
    return BinaryImage(skeletonize_stack(image.bits[None])[0])


# ---------------------------------------------------------------------------
# Components

Component = collections.namedtuple("Component", ["box", "pixel_count", "mask"])

_STRUCTURES = {4: ndimage.generate_binary_structure(2, 1), 8: np.ones((3, 3), dtype=bool)}


def label_components(bits: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(bits, structure=_STRUCTURES[connectivity])
    return labels, count


def connected_components(image: BinaryImage | np.ndarray, connectivity: int = 8) -> list[Component]:
    """Components in raster order of their first pixel, each with a tight box.

    ``mask`` is the component's own pixels cropped to its box.
    """
    bits = image.bits if isinstance(image, BinaryImage) else np.asarray(image, dtype=bool)
    labels, count = label_components(bits, connectivity)
    out = []
    for index, sl in enumerate(ndimage.find_objects(labels), start=1):
        mask = labels[sl] == index
        box = Box(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        out.append(Component(box, int(mask.sum()), mask))
    return out


# ---------------------------------------------------------------------------
# Box geometry


def intersection_area(a: Box, b: Box) -> int:
    dh = min(a.bottom, b.bottom) - max(a.top, b.top)
    dw = min(a.right, b.right) - max(a.left, b.left)
    return dh * dw if dh > 0 and dw > 0 else 0


def box_iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def box_contains(outer: Box, inner: Box) -> bool:
    return (
        outer.top <= inner.top
        and outer.left <= inner.left
        and inner.bottom <= outer.bottom
        and inner.right <= outer.right
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.int64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.int64).reshape(-1, 4)
    dh = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    dw = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(dh, 0, None) * np.clip(dw, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1)
