"""Whole-page detection: skeleton targets -> network -> proposals -> filter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import micronet
from .forest import RandomForest
from .proposals import PixelPredictions, ProposalRegion, label_proposals, merge_detections, page_features, proposal_boxes
from .raster import BinaryImage
from .sampler import PatchExtractor, PatchSpec, runtime_target_array


@dataclass
class PageResult:
    preds: PixelPredictions
    proposals: list[ProposalRegion]
    features: np.ndarray  # (P, 17)
    boxes: np.ndarray  # (P, 4)
    net_scores: np.ndarray  # mean p over each proposal's positives
    filter_scores: np.ndarray | None = None

    def detections(self, use_filter: bool = True, filter_threshold: float = 0.5):
        """``(boxes, scores)`` that survive the filter (or all proposals)."""
        if not use_filter or self.filter_scores is None:
            return self.boxes, self.net_scores
        keep = self.filter_scores >= filter_threshold
        return self.boxes[keep], self.filter_scores[keep]


def predict_targets(image: BinaryImage, params, spec: PatchSpec = PatchSpec(), threshold: float = 0.5,
                    chunk: int = 256) -> PixelPredictions:
    if spec.scaled_size != micronet.INPUT_SIZE:
        raise ValueError(f"the network expects {micronet.INPUT_SIZE}x{micronet.INPUT_SIZE} patches")
    coords = runtime_target_array(image)
    extractor = PatchExtractor(image, spec)
    p = np.empty(len(coords))
    b_hat = np.empty((len(coords), 4))
    for s in range(0, len(coords), chunk):
        p[s : s + chunk], b_hat[s : s + chunk] = micronet.predict(params, extractor(coords[s : s + chunk]))
    return PixelPredictions(coords, p, b_hat, threshold)


def detect_page(image: BinaryImage, params, forest: RandomForest | None = None, spec: PatchSpec = PatchSpec(),
                threshold: float = 0.5) -> PageResult:
    preds = predict_targets(image, params, spec, threshold)
    proposals = merge_detections(preds, image.shape)
    features = page_features(proposals, preds, image)
    net_scores = np.array([preds.p[r.positives].mean() for r in proposals])
    result = PageResult(preds, proposals, features, proposal_boxes(proposals), net_scores)
    if forest is not None and len(proposals):
        result.filter_scores = forest.predict_proba(features)
    elif forest is not None:
        result.filter_scores = np.zeros(0)
    return result


def filter_training_rows(image: BinaryImage, page, params, spec: PatchSpec = PatchSpec(), threshold: float = 0.5,
                         iou_threshold: float = 0.5):
    """Features and IoU labels of one annotated page's proposals."""
    result = detect_page(image, params, None, spec, threshold)
    truths = [tuple(s.bbox) for s in page.noteheads()]
    return result.features, label_proposals(result.boxes, truths, iou_threshold)
