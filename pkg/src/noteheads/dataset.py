"""Page annotations, corpus splits and the synthetic score generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import BinaryImage, Box, load_pbm, save_pbm

log = logging.getLogger(__name__)

DEFAULT_NOTEHEAD_LABELS = frozenset({"notehead-full", "notehead-empty", "notehead-grace"})


class AnnotationError(ValueError):
    def __init__(self, message, symbol_id=None):
        self.symbol_id = symbol_id
        if symbol_id is not None:
            message = f"symbol {symbol_id}: {message}"
        super().__init__(message)


class SchemaError(AnnotationError):
    pass


class RLELengthError(AnnotationError):
    pass


class BoundsError(AnnotationError):
    pass


class UnknownPageError(KeyError):
    pass


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Annotations


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, height: int, width: int, symbol_id=None) -> np.ndarray:
    total = sum(runs)
    if any(r < 0 for r in runs):
        raise SchemaError("negative run length", symbol_id)
    if total != height * width:
        raise RLELengthError(f"runs sum to {total}, bbox area is {height * width}", symbol_id)
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


@dataclass(frozen=True, eq=False)
class SymbolAnnotation:
    id: int
    label: str
    bbox: Box
    mask: np.ndarray  # bool, shaped like the bbox

    def __eq__(self, other):
        if not isinstance(other, SymbolAnnotation):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.bbox == other.bbox
            and np.array_equal(self.mask, other.mask)
        )

    def page_pixels(self) -> np.ndarray:
        """``(K, 2)`` page coordinates of the symbol's ink."""
        ys, xs = np.nonzero(self.mask)
        return np.stack([ys + self.bbox.top, xs + self.bbox.left], axis=1)


@dataclass(eq=True)
class PageAnnotation:
    writer_id: str
    page_id: str
    image_ref: str
    width: int
    height: int
    symbols: list[SymbolAnnotation] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str]:
        return (self.writer_id, self.page_id)

    @property
    def name(self) -> str:
        return f"{self.writer_id}_{self.page_id}"

    def noteheads(self, labels=DEFAULT_NOTEHEAD_LABELS) -> list[SymbolAnnotation]:
        return [s for s in self.symbols if s.label in labels]

    def paint(self, symbols=None) -> np.ndarray:
        """Union of symbol masks as a page-sized bool array."""
        out = np.zeros((self.height, self.width), dtype=bool)
        for s in self.symbols if symbols is None else symbols:
            b = s.bbox
            out[b.top : b.bottom, b.left : b.right] |= s.mask
        return out


def page_to_dict(page: PageAnnotation) -> dict:
    return {
        "page": {
            "writer": page.writer_id,
            "page": page.page_id,
            "image": page.image_ref,
            "width": page.width,
            "height": page.height,
        },
        "symbols": [
            {"id": s.id, "label": s.label, "bbox": s.bbox.to_list(), "rle": rle_encode(s.mask)}
            for s in page.symbols
        ],
    }


def _require(obj, key, kind, symbol_id=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {key!r}", symbol_id)
    value = obj[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"field {key!r} should be {kind.__name__}", symbol_id)
    return value


def page_from_dict(data: dict) -> PageAnnotation:
    meta = _require(data, "page", dict)
    width = _require(meta, "width", int)
    height = _require(meta, "height", int)
    if width <= 0 or height <= 0:
        raise SchemaError(f"page size {width}x{height} is not positive")
    page = PageAnnotation(
        writer_id=_require(meta, "writer", str),
        page_id=_require(meta, "page", str),
        image_ref=_require(meta, "image", str),
        width=width,
        height=height,
    )
    seen = set()
    for raw in _require(data, "symbols", list):
        sid = raw.get("id") if isinstance(raw, dict) else None
        sid = _require(raw, "id", int, sid)
        if sid in seen:
            raise SchemaError("duplicate symbol id", sid)
        seen.add(sid)
        label = _require(raw, "label", str, sid)
        coords = _require(raw, "bbox", list, sid)
        if len(coords) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in coords):
            raise SchemaError("bbox must be four integers", sid)
        top, left, bottom, right = coords
        if not (top < bottom and left < right):
            raise SchemaError(f"empty bbox {coords}", sid)
        if top < 0 or left < 0 or bottom > height or right > width:
            raise BoundsError(f"bbox {coords} outside {height}x{width} page", sid)
        runs = _require(raw, "rle", list, sid)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in runs):
            raise SchemaError("rle must be integers", sid)
        mask = rle_decode(runs, bottom - top, right - left, sid)
        if not mask.any():
            raise SchemaError("mask has no foreground", sid)
        page.symbols.append(SymbolAnnotation(sid, label, Box(top, left, bottom, right), mask))
    return page


def load_annotations(path) -> PageAnnotation:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not JSON ({exc})") from None
    return page_from_dict(data)


def save_annotations(page: PageAnnotation, path) -> None:
    Path(path).write_text(json.dumps(page_to_dict(page), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Splits


@dataclass
class SplitSpec:
    train: list[tuple[str, str]]
    validation: list[tuple[str, str]]
    test: list[tuple[str, str]]

    def to_dict(self) -> dict:
        return {k: [list(p) for p in getattr(self, k)] for k in ("train", "validation", "test")}

    @classmethod
    def from_dict(cls, data: dict) -> "SplitSpec":
        return cls(*[[tuple(p) for p in data.get(k, [])] for k in ("train", "validation", "test")])


Violation = tuple  # (kind, subject, message)


def validate_split(spec: SplitSpec, corpus, check_validation: bool = False) -> list[Violation]:
    """List rule violations; an empty list means the split is legal.

    ``corpus`` is any container of ``(writer, page)`` keys. Test writers must
    not appear in training (nor in validation if ``check_validation``).
    """
    known = set(corpus)
    parts = {"train": spec.train, "validation": spec.validation, "test": spec.test}
    for name, pages in parts.items():
        for key in pages:
            if tuple(key) not in known:
                raise UnknownPageError(f"{name} references unknown page {key}")
    violations = []
    names = sorted(parts)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            for key in sorted(set(map(tuple, parts[a])) & set(map(tuple, parts[b]))):
                violations.append(("page-overlap", "_".join(key), f"{key} is in both {a} and {b}"))
    test_writers = {w for w, _ in spec.test}
    guarded = ["train"] + (["validation"] if check_validation else [])
    for name in guarded:
        for writer in sorted(test_writers & {w for w, _ in parts[name]}):
            violations.append(("writer-overlap", writer, f"test writer {writer} appears in {name}"))
    return violations


def make_split(keys, n_test: int, n_validation: int, seed: int = 0) -> SplitSpec:
    """Random writer-disjoint split.

    Whole writers go to test until ``n_test`` pages are reached; surplus pages
    of the last test writer go to validation, which is exempt from the rule.
    """
    keys = sorted(set(map(tuple, keys)))
    by_writer: dict[str, list] = {}
    for key in keys:
        by_writer.setdefault(key[0], []).append(key)
    rng = np.random.default_rng(seed)
    writers = sorted(by_writer)
    rng.shuffle(writers)
    test, validation, rest = [], [], []
    for writer in writers:
        pages = by_writer[writer]
        if len(test) < n_test:
            take = min(len(pages), n_test - len(test))
            test.extend(pages[:take])
            validation.extend(pages[take:])
        else:
            rest.extend(pages)
    order = rng.permutation(len(rest))
    rest = [rest[i] for i in order]
    need = max(0, n_validation - len(validation))
    validation.extend(rest[:need])
    train = sorted(rest[need:])
    return SplitSpec(train=train, validation=sorted(validation), test=sorted(test))


def load_split(path) -> SplitSpec:
    return SplitSpec.from_dict(json.loads(Path(path).read_text()))


def save_split(spec: SplitSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


class Corpus:
    """A directory of ``<name>.pbm`` images with ``<name>.json`` annotations."""

    def __init__(self, root):
        self.root = Path(root)
        self.pages: dict[tuple[str, str], Path] = {}
        for path in sorted(self.root.glob("*.json")):
            if path.name in ("split.json", "manifest.json"):
                continue
            meta = json.loads(path.read_text())["page"]
            self.pages[(meta["writer"], meta["page"])] = path

    def __contains__(self, key):
        return tuple(key) in self.pages

    def __iter__(self):
        return iter(self.pages)

    def __len__(self):
        return len(self.pages)

    def annotation(self, key) -> PageAnnotation:
        try:
            path = self.pages[tuple(key)]
        except KeyError:
            raise UnknownPageError(f"unknown page {key}") from None
        return load_annotations(path)

    def load(self, key) -> tuple[BinaryImage, PageAnnotation]:
        page = self.annotation(key)
        image = load_pbm(self.root / page.image_ref)
        if image.shape != (page.height, page.width):
            raise SchemaError(f"{page.image_ref} is {image.shape}, annotation says {(page.height, page.width)}")
        return image, page


# ---------------------------------------------------------------------------
# Synthetic scores


@dataclass(frozen=True)
class WriterStyle:
    """Per-writer drawing habits; all lengths in pixels."""

    head_rx: tuple[float, float] = (5.5, 7.5)
    head_ry: tuple[float, float] = (3.8, 5.0)
    tilt_deg: tuple[float, float] = (-30.0, -15.0)
    ring_width: tuple[float, float] = (1.6, 2.4)
    stem_length: tuple[int, int] = (28, 40)
    stem_width: int = 2
    stroke: int = 2

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "WriterStyle":
        rx = rng.uniform(5.0, 7.0)
        ry = rx * rng.uniform(0.6, 0.8)
        tilt = rng.uniform(-35.0, -10.0)
        ring = rng.uniform(1.5, 2.3)
        stem = int(rng.integers(26, 36))
        width = int(rng.integers(1, 3))
        return cls(
            head_rx=(rx - 0.6, rx + 0.6),
            head_ry=(ry - 0.4, ry + 0.4),
            tilt_deg=(tilt - 5, tilt + 5),
            ring_width=(ring - 0.2, ring + 0.2),
            stem_length=(stem, stem + 12),
            stem_width=width,
            stroke=width,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "WriterStyle":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class SynthConfig:
    page_w: int = 560
    page_h: int = 440
    n_noteheads: int = 30
    n_distractors: int = 16
    seed: int = 0
    writer_id: str = "W-00"
    page_id: str = "N-00"
    style: WriterStyle = WriterStyle()
    margin: int = 4
    max_retries: int = 400


# Heads are about one staff space (~10 px) tall and stems about 3.5 spaces
# long, so a five-line staff drawn at this scale would be ~42 px high.
SYNTH_STAFF_HEIGHT = 42

# relative frequencies of distractor kinds
DISTRACTORS = {
    "beam": 3,
    "slur": 2,
    "sharp": 2,
    "flat": 2,
    "natural": 1,
    "dot": 2,
    "rest": 2,
    "letter": 2,
    "clef": 1,
}


def _ellipse(cy, cx, rx, ry, tilt_deg, shape):
    """Pixels whose centres fall inside a rotated ellipse (local grid)."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    t = math.radians(tilt_deg)
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _segment(y0, x0, y1, x1, width, shape):
    """Pixels within width/2 of the segment (y0,x0)-(y1,x1)."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    py, px = yy - y0, xx - x0
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip((py * dy + px * dx) / length2, 0, 1) if length2 else np.zeros_like(py, dtype=float)
    d2 = (py - t * dy) ** 2 + (px - t * dx) ** 2
    return d2 <= (width / 2.0) ** 2


def _crop(mask):
    ys, xs = np.nonzero(mask)
    box = (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)
    return box, mask[box[0] : box[2], box[1] : box[3]]


def _draw_note(rng, style, kind):
    """A notehead with optional stem and ledger line on a local canvas.

    Returns (shape, [(label, mask), ...], info).
    """
    scale = 0.65 if kind == "grace" else 1.0
    rx = rng.uniform(*style.head_rx) * scale
    ry = rng.uniform(*style.head_ry) * scale
    tilt = rng.uniform(*style.tilt_deg)
    stem_len = int(rng.integers(*style.stem_length) * (0.75 if kind == "grace" else 1.0))
    has_stem = kind != "whole"
    up = rng.random() < 0.5
    ledger = rng.random() < 0.15
    pad = 6
    size_y = 2 * stem_len + 2 * pad
    size_x = int(2 * rx + 2 * pad + 12)
    cy, cx = size_y / 2.0, size_x / 2.0
    shape = (size_y, size_x)
    outer = _ellipse(cy, cx, rx, ry, tilt, shape)
    ring = None
    if kind in ("empty", "whole"):
        ring = rng.uniform(*style.ring_width)
        head = outer & ~_ellipse(cy, cx, rx - ring, max(ry - ring, 0.8), tilt, shape)
        label = "notehead-empty"
    else:
        head = outer
        label = "notehead-grace" if kind == "grace" else "notehead-full"
    parts = [(label, head)]
    if has_stem:
        cols = np.flatnonzero(head.any(axis=0))
        sw = style.stem_width
        iy = int(round(cy))
        stem = np.zeros(shape, dtype=bool)
        if up:
            right = cols.max() + 1
            stem[iy - stem_len : iy + 1, right - sw : right] = True
        else:
            left = cols.min()
            stem[iy : iy + stem_len + 1, left : left + sw] = True
        parts.append(("stem", stem))
    if ledger:
        iy = int(round(cy))
        cols = np.flatnonzero(head.any(axis=0))
        line = np.zeros(shape, dtype=bool)
        lw = max(1, style.stroke - 1) if style.stroke > 1 else 1
        line[iy - lw // 2 : iy - lw // 2 + lw, cols.min() - 4 : cols.max() + 5] = True
        parts.append(("ledger-line", line))
    info = {"kind": kind, "center": (cy, cx), "rx": rx, "ry": ry, "tilt": tilt, "ring": ring, "stem": has_stem}
    return shape, parts, info


def _draw_distractor(rng, style, kind):
    s = style.stroke
    rx = float(np.mean(style.head_rx))
    if kind == "beam":
        length = rng.uniform(30, 60)
        angle = rng.uniform(-0.35, 0.35)
        thick = rng.uniform(3.5, 5.5)
        shape = (int(abs(length * math.sin(angle)) + 2 * thick + 6), int(length + 2 * thick + 6))
        y0 = shape[0] / 2 - length * math.sin(angle) / 2
        x0 = thick + 3
        parts = [("beam", _segment(y0, x0, y0 + length * math.sin(angle), x0 + length * math.cos(angle), thick, shape))]
    elif kind == "slur":
        a, b = rng.uniform(15, 30), rng.uniform(5, 10)
        shape = (int(2 * b + 8), int(2 * a + 8))
        outer = _ellipse(shape[0] / 2, shape[1] / 2, a, b, 0, shape)
        inner = _ellipse(shape[0] / 2, shape[1] / 2, a - s, b - s, 0, shape)
        arc = outer & ~inner
        arc[shape[0] // 2 :, :] = False
        parts = [("slur", arc)]
    elif kind == "sharp":
        shape = (30, 20)
        m = np.zeros(shape, dtype=bool)
        m |= _segment(3, 7, 27, 7, s, shape)
        m |= _segment(3, 13, 27, 13, s, shape)
        m |= _segment(12, 3, 9, 17, s + 1.5, shape)
        m |= _segment(20, 3, 17, 17, s + 1.5, shape)
        parts = [("accidental-sharp", m)]
    elif kind == "natural":
        shape = (30, 16)
        m = _segment(2, 4, 20, 4, s, shape) | _segment(10, 12, 28, 12, s, shape)
        m |= _segment(11, 4, 9, 12, s + 1.5, shape) | _segment(20, 4, 18, 12, s + 1.5, shape)
        parts = [("accidental-natural", m)]
    elif kind == "flat":
        shape = (34, 18)
        m = _segment(2, 5, 30, 5, s, shape)
        loop = _ellipse(25, 9, rx * 0.7, rx * 0.5, -30, shape) & ~_ellipse(25, 9, rx * 0.7 - s, rx * 0.5 - s, -30, shape)
        loop[:, :5] = False
        parts = [("accidental-flat", m | loop)]
    elif kind == "dot":
        r = rng.uniform(1.5, 2.4)
        shape = (9, 9)
        parts = [("augmentation-dot", _ellipse(4, 4, r, r, 0, shape))]
    elif kind == "rest":
        shape = (34, 16)
        pts = [(3, 4), (10, 11), (17, 5), (24, 11), (30, 6)]
        m = np.zeros(shape, dtype=bool)
        for (y0, x0), (y1, x1) in zip(pts, pts[1:]):
            m |= _segment(y0, x0, y1, x1, s + 1, shape)
        parts = [("rest", m)]
    elif kind == "letter":
        # dynamics-like lowercase "p": a bowl with a descender on the left
        r = rx * rng.uniform(0.8, 1.1)
        shape = (int(4 * r + 16), int(2 * r + 10))
        cy, cx = r + 4, shape[1] / 2
        bowl = _ellipse(cy, cx, r, r * 0.8, 0, shape) & ~_ellipse(cy, cx, r - s, r * 0.8 - s, 0, shape)
        left = np.flatnonzero(bowl.any(axis=0)).min()
        stem = np.zeros(shape, dtype=bool)
        stem[int(cy) : shape[0] - 3, left : left + s] = True
        parts = [("dynamics", bowl | stem)]
    elif kind == "clef":
        shape = (80, 32)
        m = _segment(4, 16, 76, 14, s + 1, shape)
        for cy in (44.0, 56.0):
            m |= _ellipse(cy, 16, 11, 7, -10, shape) & ~_ellipse(cy, 16, 11 - s, 7 - s, -10, shape)
        m |= _segment(4, 16, 14, 24, s, shape)
        parts = [("clef", m)]
    else:
        raise ValueError(f"unknown distractor {kind!r}")
    return shape, parts, {"kind": kind}


def synth_generate(config: SynthConfig, placements: list | None = None) -> tuple[BinaryImage, PageAnnotation]:
    """Render one synthetic page and its exact annotations.

    If ``placements`` is a list, one record per placed group is appended:
    ``{"kind", "origin", "symbol_ids", ...}``.
    """
    if config.n_noteheads < 0 or config.n_distractors < 0:
        raise ValueError("symbol counts must be non-negative")
    rng = np.random.default_rng(config.seed)
    style = config.style
    h, w = config.page_h, config.page_w
    ink = np.zeros((h, w), dtype=bool)
    occupied = np.zeros((h, w), dtype=bool)
    page = PageAnnotation(config.writer_id, config.page_id, f"{config.writer_id}_{config.page_id}.pbm", w, h)

    note_kinds = rng.choice(["full", "empty", "grace", "whole"], size=config.n_noteheads, p=[0.55, 0.3, 0.1, 0.05])
    names = sorted(DISTRACTORS)
    weights = np.array([DISTRACTORS[k] for k in names], dtype=float)
    distractor_kinds = rng.choice(names, size=config.n_distractors, p=weights / weights.sum())
    groups = [("note", k) for k in note_kinds] + [("distractor", k) for k in distractor_kinds]
    order = rng.permutation(len(groups))

    for gi in order:
        group, kind = groups[gi]
        draw = _draw_note if group == "note" else _draw_distractor
        shape, parts, info = draw(rng, style, kind)
        union = np.zeros(shape, dtype=bool)
        for _, m in parts:
            union |= m
        (t, l, b, r), _ = _crop(union)
        gh, gw = b - t, r - l
        mg = config.margin
        for _ in range(config.max_retries):
            # clefs sit in the left quarter of the page
            x_hi = min(w - gw - mg, max(3 * mg + 20, w // 4)) if kind == "clef" else w - gw - mg
            if h - gh - mg <= mg or x_hi <= mg:
                raise PlacementError(f"page {h}x{w} too small for a {gh}x{gw} {kind}")
            oy = int(rng.integers(mg, h - gh - mg))
            ox = int(rng.integers(mg, x_hi))
            if not occupied[oy - mg : oy + gh + mg, ox - mg : ox + gw + mg].any():
                break
        else:
            raise PlacementError(f"could not place {kind} after {config.max_retries} attempts")
        occupied[oy : oy + gh, ox : ox + gw] = True
        ids = []
        for label, m in parts:
            m = m[t:b, l:r]
            if not m.any():
                continue
            (mt, ml, mb, mr), crop = _crop(m)
            box = Box(oy + mt, ox + ml, oy + mb, ox + mr)
            sid = len(page.symbols) + 1
            page.symbols.append(SymbolAnnotation(sid, label, box, crop))
            ink[box.top : box.bottom, box.left : box.right] |= crop
            ids.append(sid)
        if placements is not None:
            record = dict(info, group=group, origin=(oy, ox), symbol_ids=ids)
            if "center" in info:
                # canvas centre -> page coordinates
                record["center"] = (info["center"][0] + oy - t, info["center"][1] + ox - l)
            placements.append(record)
    return BinaryImage(ink), page


def synth_corpus(
    root,
    n_writers: int = 20,
    pages_per_writer: int = 3,
    n_test: int = 10,
    n_validation: int = 10,
    seed: int = 0,
    page: SynthConfig = SynthConfig(),
) -> SplitSpec:
    """Write a synthetic corpus with a writer-disjoint split into ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    keys = []
    for wi in range(n_writers):
        writer = f"W-{wi + 1:02d}"
        style = WriterStyle.sample(np.random.default_rng([seed, wi]))
        for pi in range(pages_per_writer):
            page_id = f"N-{pi + 1:02d}"
            page_seed = int(np.random.default_rng([seed, wi, pi]).integers(2**31))
            cfg = SynthConfig(
                page_w=page.page_w,
                page_h=page.page_h,
                n_noteheads=page.n_noteheads,
                n_distractors=page.n_distractors,
                seed=page_seed,
                writer_id=writer,
                page_id=page_id,
                style=style,
                margin=page.margin,
                max_retries=page.max_retries,
            )
            image, ann = synth_generate(cfg)
            save_pbm(image, root / ann.image_ref)
            save_annotations(ann, root / f"{ann.name}.json")
            keys.append(ann.key)
    split = make_split(keys, n_test, n_validation, seed)
    save_split(split, root / "split.json")
    return split
