"""Classification and localisation metrics.

``iobb_accuracy`` follows one reading of the accuracy-at-T(IoBB) protocol:
the detected region D is every pixel whose (upsampled) saliency is >= tau, and
a sample is correct when |D & B| / |D| >= alpha for at least one of its
ground-truth boxes B.  ``rule="components"`` instead fits a box to each
connected component of D and compares box against box.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .data import Box, mask_at, upsample_nearest


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with mid-ranks for tied scores."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined: labels contain a single class "
                         f"({n_pos} positive, {n_neg} negative)")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def continuous_dice(S, G) -> float:
    S = np.asarray(S, dtype=float)
    G = np.asarray(G, dtype=float)
    if S.shape != G.shape:
        raise ValueError(f"shape mismatch: saliency {S.shape} vs truth {G.shape}")
    g2 = float((G * G).sum())
    if g2 == 0.0:
        raise ValueError("DICE is undefined for an all-zero ground truth")
    return float(2.0 * (S * G).sum() / ((S * S).sum() + g2))


def binarize(S, tau: float) -> np.ndarray:
    return (np.asarray(S) >= tau).astype(np.uint8)


def activated_area(S, threshold: float = 0.5) -> float:
    S = np.asarray(S)
    return float((S >= threshold).mean())


def box_mask(box: Box, shape: tuple[int, int]) -> np.ndarray:
    _, x, y, w, h = box
    m = np.zeros(shape, dtype=bool)
    m[max(y, 0):y + h, max(x, 0):x + w] = True
    return m


def iobb(detected: np.ndarray, box: Box) -> float:
    """|D & B| / |D|, zero for an empty detection."""
    area = int(detected.sum())
    if area == 0:
        return 0.0
    return float((detected & box_mask(box, detected.shape)).sum() / area)


def _component_boxes(detected: np.ndarray) -> list[np.ndarray]:
    labelled, _ = ndimage.label(detected)
    out = []
    for sl in ndimage.find_objects(labelled):
        m = np.zeros_like(detected, dtype=bool)
        m[sl] = True
        out.append(m)
    return out


def sample_correct(S_img: np.ndarray, boxes: Sequence[Box], tau: float, alpha: float,
                   rule: str = "pixels") -> bool:
    detected = binarize(S_img, tau).astype(bool)
    if rule == "pixels":
        return any(iobb(detected, b) >= alpha for b in boxes)
    if rule == "components":
        for comp in _component_boxes(detected):
            area = comp.sum()
            if any((comp & box_mask(b, comp.shape)).sum() / area >= alpha for b in boxes):
                return True
        return False
    raise ValueError(f"unknown IoBB rule {rule!r}")


def iobb_accuracy(saliency: Sequence[np.ndarray], boxes: Sequence[Sequence[Box]], tau: float,
                  alpha: float, rule: str = "pixels") -> float:
    """Fraction of samples with IoBB >= alpha for at least one box.

    ``saliency[i]`` is one class's map for sample i, already at image resolution
    (see :func:`upsample_nearest`); ``boxes[i]`` are that class's boxes.
    """
    if not 0 < tau < 1 or not 0 < alpha < 1:
        raise ValueError(f"tau and alpha must lie in (0, 1), got tau={tau}, alpha={alpha}")
    if len(saliency) != len(boxes):
        raise ValueError("saliency and boxes lengths differ")
    if not len(saliency):
        raise ValueError("no samples to evaluate")
    for i, b in enumerate(boxes):
        if not b:
            raise ValueError(f"sample {i} has no ground-truth box for this class")
    correct = sum(sample_correct(S, b, tau, alpha, rule) for S, b in zip(saliency, boxes))
    return correct / len(saliency)


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    auc: dict[int, float] = field(default_factory=dict)
    auc_n: dict[int, int] = field(default_factory=dict)
    dice: dict[int, float] = field(default_factory=dict)
    dice_n: dict[int, int] = field(default_factory=dict)
    iobb: dict[int, dict[tuple[float, float], float]] = field(default_factory=dict)
    iobb_n: dict[int, int] = field(default_factory=dict)
    activated_area: dict[int, float] = field(default_factory=dict)
    area_n: dict[int, int] = field(default_factory=dict)

    @property
    def mean_auc(self) -> float:
        return float(np.mean(list(self.auc.values())))

    def rows(self) -> list[tuple[str, str, str, float, int]]:
        out = []
        for k, name in enumerate(self.class_names):
            if k in self.auc:
                out.append((name, "auc", "", self.auc[k], self.auc_n[k]))
            if k in self.dice:
                out.append((name, "dice", "", self.dice[k], self.dice_n[k]))
            if k in self.activated_area:
                out.append((name, "activated_area", "threshold=0.5", self.activated_area[k], self.area_n[k]))
            for (tau, alpha), v in sorted(self.iobb.get(k, {}).items()):
                out.append((name, "iobb_accuracy", f"tau={tau:g};alpha={alpha:g}", v, self.iobb_n[k]))
        return out

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "metric", "parameter", "value", "n"])
            for name, metric, param, value, n in self.rows():
                w.writerow([name, metric, param, repr(float(value)), n])


def evaluate(P: np.ndarray, S: np.ndarray, dataset, taus: Sequence[float] = (),
             alphas: Sequence[float] = (0.5,), rule: str = "pixels") -> MetricsReport:
    """Score predictions ``P (n, K)`` and saliency ``S (n, K, N, N)`` against ``dataset``.

    AUC is skipped (absent from the report) for classes with a single label
    value.  DICE, IoBB and activated area use positives only; saliency is
    upsampled to the image size and compared with masks/boxes there.
    """
    labels = dataset.labels()
    K = labels.shape[1]
    if P.shape[1] != K:
        raise ValueError(f"predictions have {P.shape[1]} classes, dataset has {K}")
    size = dataset[0].image.shape[0]
    rep = MetricsReport(tuple(dataset.class_names))
    for k in range(K):
        y = labels[:, k]
        if 0 < y.sum() < len(y):
            rep.auc[k] = roc_auc(P[:, k], y)
            rep.auc_n[k] = len(y)
        pos = np.flatnonzero(y == 1)
        dices, areas, maps, boxes = [], [], [], []
        for i in pos:
            s = dataset[i]
            S_img = upsample_nearest(S[i, k], size)
            areas.append(activated_area(S[i, k]))
            if s.truth_mask is not None and s.truth_mask[k].any():
                dices.append(continuous_dice(S_img, mask_at(s.truth_mask[k], size)))
            b = s.boxes_for(k)
            if b:
                maps.append(S_img)
                boxes.append(b)
        if areas:
            rep.activated_area[k] = float(np.mean(areas))
            rep.area_n[k] = len(areas)
        if dices:
            rep.dice[k] = float(np.mean(dices))
            rep.dice_n[k] = len(dices)
        if maps and taus:
            rep.iobb[k] = {(float(t), float(a)): iobb_accuracy(maps, boxes, t, a, rule)
                           for t in sorted(taus) for a in sorted(alphas)}
            rep.iobb_n[k] = len(maps)
    return rep
