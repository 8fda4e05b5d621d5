"""Notehead proposals: merge per-pixel boxes, describe them, label them.

Every target pixel predicted positive paints its decoded box into a page
mask. Each 8-connected component of that union becomes one proposal, whose
members are all target pixels inside the component's bounding box.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .raster import BinaryImage, Box, connected_components, iou_matrix
from .sampler import decode_boxes

FEATURE_NAMES = (
    "h", "h_hat", "w", "w_hat", "a", "a_hat",
    "n_fg", "p_fg",
    "n_pos", "p_pos", "n_pos_hat",
    "n_neg", "p_neg", "n_neg_hat",
    "s_pos", "s_pos_hat",
    "leftness",
)
N_FEATURES = len(FEATURE_NAMES)
# each ratio feature and the raw feature it normalises
_HAT_OF = {1: 0, 3: 2, 5: 4, 10: 8, 13: 11, 15: 14}


@dataclass
class PixelPredictions:
    """Network output for every target pixel of a page, columnar."""

    coords: np.ndarray  # (N, 2) int
    p: np.ndarray  # (N,)
    b_hat: np.ndarray  # (N, 4)
    threshold: float = 0.5

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        self.b_hat = np.asarray(self.b_hat, dtype=np.float64).reshape(-1, 4)
        if not (len(self.coords) == len(self.p) == len(self.b_hat)):
            raise ValueError("coords, p and b_hat must have the same length")

    def __len__(self):
        return len(self.p)

    @property
    def positive(self) -> np.ndarray:
        return self.p >= self.threshold

    def boxes(self, shape) -> np.ndarray:
        return decode_boxes(self.coords, self.b_hat, shape)


@dataclass
class ProposalRegion:
    box: Box
    members: np.ndarray  # indices into the page's PixelPredictions
    positives: np.ndarray  # subset of members predicted positive


def paint_boxes(boxes: np.ndarray, shape) -> np.ndarray:
    """Union of half-open boxes as a bool mask, via a 2-D difference array."""
    h, w = shape
    diff = np.zeros((h + 1, w + 1), dtype=np.int32)
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    t, l, b, r = boxes.T
    np.add.at(diff, (t, l), 1)
    np.add.at(diff, (t, r), -1)
    np.add.at(diff, (b, l), -1)
    np.add.at(diff, (b, r), 1)
    return diff.cumsum(axis=0).cumsum(axis=1)[:h, :w] > 0


def merge_detections(preds: PixelPredictions, shape) -> list[ProposalRegion]:
    """One proposal per 8-connected component of the union of positive boxes."""
    pos = preds.positive
    if not pos.any():
        return []
    union = paint_boxes(preds.boxes(shape)[pos], shape)
    m, n = preds.coords[:, 0], preds.coords[:, 1]
    out = []
    for comp in connected_components(union, 8):
        b = comp.box
        inside = (m >= b.top) & (m < b.bottom) & (n >= b.left) & (n < b.right)
        members = np.flatnonzero(inside)
        out.append(ProposalRegion(b, members, members[pos[members]]))
    return out


def page_features(proposals: list[ProposalRegion], preds: PixelPredictions, image: BinaryImage) -> np.ndarray:
    """``(P, 17)`` feature matrix in :data:`FEATURE_NAMES` order."""
    if not proposals:
        return np.zeros((0, N_FEATURES))
    integral = np.pad(image.bits.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    feats = np.zeros((len(proposals), N_FEATURES))
    for i, prop in enumerate(proposals):
        t, l, b, r = prop.box
        h, w = b - t, r - l
        n_fg = integral[b, r] - integral[t, r] - integral[b, l] + integral[t, l]
        n_members = len(prop.members)
        n_pos = len(prop.positives)
        n_neg = n_members - n_pos
        feats[i, [0, 2, 4, 6, 7, 8, 11, 14, 16]] = (
            h,
            w,
            h * w,
            n_fg,
            n_fg / (h * w),
            n_pos,
            n_neg,
            preds.p[prop.positives].sum(),
            (image.width - l) / image.width,
        )
        feats[i, 9] = n_pos / n_members if n_members else 0.0
        feats[i, 12] = n_neg / n_members if n_members else 0.0
    for hat, raw in _HAT_OF.items():
        mean = feats[:, raw].mean()
        feats[:, hat] = feats[:, raw] / mean if mean > 0 else 0.0
    return feats


def extract_features(proposal, all_proposals, preds: PixelPredictions, image: BinaryImage) -> np.ndarray:
    """Feature vector of one proposal in the context of its page."""
    for i, other in enumerate(all_proposals):
        if other is proposal:
            return page_features(all_proposals, preds, image)[i]
    raise ValueError("proposal is not among all_proposals")


def label_proposals(boxes, truths, iou_threshold: float = 0.5) -> np.ndarray:
    """1 where the best IoU with any true box is strictly above the threshold."""
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    truths = np.asarray(truths, dtype=np.int64).reshape(-1, 4)
    if len(boxes) == 0 or len(truths) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    return (iou_matrix(boxes, truths).max(axis=1) > iou_threshold).astype(np.int64)


def proposal_boxes(proposals: list[ProposalRegion]) -> np.ndarray:
    return np.array([tuple(p.box) for p in proposals], dtype=np.int64).reshape(-1, 4)


def write_features_csv(path, features: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_NAMES + (("label",) if labels is not None else ()))
        for i, row in enumerate(np.asarray(features)):
            values = [repr(float(v)) for v in row]
            if labels is not None:
                values.append(str(int(labels[i])))
            writer.writerow(values)


def read_features_csv(path):
    """Returns ``(features, labels)``; labels is None without a label column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = tuple(rows[0])
    if header[:N_FEATURES] != FEATURE_NAMES:
        raise ValueError(f"{path}: unexpected header {header}")
    data = np.array([[float(v) for v in row] for row in rows[1:]]).reshape(-1, len(header))
    if len(header) == N_FEATURES + 1:
        return data[:, :N_FEATURES], data[:, N_FEATURES].astype(np.int64)
    return data, None
