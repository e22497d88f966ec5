"""Dice and Hausdorff evaluation over nested lesion regions.

Conventions for empty masks: Dice is 1.0 when both masks are empty and 0.0
when exactly one is; Hausdorff distance is :data:`HD_EMPTY` (infinity) when
either mask is empty, and such samples are left out of the HD mean and std
(``hd_count`` records how many samples contributed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

HD_EMPTY = math.inf

# region name -> label classes it covers
REGIONS: Dict[str, tuple] = {
    "whole": (1, 2, 3),
    "enhancing": (2,),
    "core": (3,),
    "background": (0,),
}


class MetricError(ValueError):
    pass


def region_mask(label: np.ndarray, region: str) -> np.ndarray:
    try:
        classes = REGIONS[region]
    except KeyError:
        raise MetricError(f"unknown region {region!r}; expected one of {sorted(REGIONS)}") from None
    return np.isin(label, classes)


def _check(pred: np.ndarray, truth: np.ndarray):
    pred, truth = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest pixel of b, read at a's pixels
    dist = distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(pred: np.ndarray, truth: np.ndarray) -> float:
    """Symmetric Hausdorff distance in pixels (Euclidean, exact)."""
    pred, truth = _check(pred, truth)
    if not pred.any() or not truth.any():
        return HD_EMPTY
    return max(_directed(pred, truth), _directed(truth, pred))


@dataclass
class RegionStats:
    dice_mean: float
    dice_std: float
    hd_mean: float
    hd_std: float
    hd_count: int


@dataclass
class EvalReport:
    regions: Dict[str, RegionStats]
    n: int
    per_sample: Dict[str, List[dict]]
    confidence: float = math.nan   # mean per-pixel max probability, when known

    def to_json_dict(self, **extra) -> dict:
        """JSON-safe summary; infinite distances become ``null``."""
        regions = {r: {"dice_mean": s.dice_mean, "dice_std": s.dice_std,
                       "hd_mean": _json_float(s.hd_mean), "hd_std": _json_float(s.hd_std),
                       "hd_count": s.hd_count}
                   for r, s in self.regions.items()}
        out = dict(extra, n=self.n, regions=regions)
        if math.isfinite(self.confidence):
            out["confidence"] = self.confidence
        return out

    def save(self, path, **extra) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(**extra), fh, indent=2, sort_keys=True)


def _json_float(x: float):
    return None if not math.isfinite(x) else x


def score_label_maps(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                     regions: Iterable[str] = ("whole", "enhancing", "core")) -> EvalReport:
    if len(preds) != len(truths):
        raise MetricError("prediction and ground-truth counts differ")
    regions = list(regions)
    stats: Dict[str, RegionStats] = {}
    per_sample: Dict[str, List[dict]] = {r: [] for r in regions}
    for r in regions:
        dices, hds = [], []
        for p, t in zip(preds, truths):
            pm, tm = region_mask(p, r), region_mask(t, r)
            d, hd = dice(pm, tm), hausdorff(pm, tm)
            dices.append(d)
            per_sample[r].append({"dice": d, "hd": hd})
            if math.isfinite(hd):
                hds.append(hd)
        stats[r] = RegionStats(
            dice_mean=float(np.mean(dices)) if dices else math.nan,
            dice_std=float(np.std(dices)) if dices else math.nan,
            hd_mean=float(np.mean(hds)) if hds else HD_EMPTY,
            hd_std=float(np.std(hds)) if hds else HD_EMPTY,
            hd_count=len(hds),
        )
    return EvalReport(stats, len(preds), per_sample)


def predict_probs(predictor, samples) -> List[np.ndarray]:
    """Per-sample (C, H, W) class probabilities from a SegNet or a teacher.

    Networks are run in evaluation mode one sample at a time so the result
    matches what a served teacher would return.
    """
    from .segnet import SegNet
    from .tensor import softmax

    out = []
    if isinstance(predictor, SegNet):
        was_training = predictor.training
        predictor.eval()
        try:
            for s in samples:
                out.append(softmax(predictor.forward(s.image[None])).data[0])
        finally:
            predictor.training = was_training
    else:
        for s in samples:
            out.append(predictor.predict(s.image[None]).values)
    return out


def predict_labels(predictor, samples) -> List[np.ndarray]:
    return [p.argmax(axis=0) for p in predict_probs(predictor, samples)]


def mean_confidence(probs: Sequence[np.ndarray]) -> float:
    """Average over samples and pixels of the winning class probability."""
    return float(np.mean([p.max(axis=0).mean() for p in probs]))


def evaluate(predictor, samples, regions: Iterable[str] = ("whole", "enhancing", "core")) -> EvalReport:
    for s in samples:
        if s.label is None:
            raise MetricError(f"sample {s.id} has no label")
    probs = predict_probs(predictor, samples)
    report = score_label_maps([p.argmax(axis=0) for p in probs], [s.label for s in samples], regions)
    report.confidence = mean_confidence(probs)
    return report
