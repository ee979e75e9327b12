"""Multi-label ranking metrics: per-class AP, mAP and top-1 accuracy."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np


class NoPositivesError(ValueError):
    """AP is undefined for a class with no positive examples."""


@dataclass
class EvalResult:
    per_class_ap: list[float | None]  # None for classes without positives
    map: float
    top1_accuracy: float
    n_examples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_csv(self, path, class_names: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["class", "ap"])
            for k, ap in enumerate(self.per_class_ap):
                name = class_names[k] if class_names else str(k)
                w.writerow([name, "" if ap is None else f"{ap:.6f}"])


def average_precision(scores, labels) -> float:
    """Mean of precision@r over the ranks r of positive examples.

    Ranking is by descending score with ties broken by original index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositivesError("average_precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return math.fsum(precision_at_hits.tolist()) / n_pos  # correctly rounded, order independent


def per_class_ap(scores, labels) -> list[float | None]:
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    out = []
    for k in range(scores.shape[1]):
        col = labels[:, k]
        out.append(average_precision(scores[:, k], col) if col.any() else None)
    return out


def mean_average_precision(scores, labels) -> float:
    aps = [ap for ap in per_class_ap(scores, labels) if ap is not None]
    if not aps:
        raise NoPositivesError("no class has a positive example")
    return math.fsum(aps) / len(aps)


def top1_accuracy(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels).astype(bool)
    if len(scores) == 0:
        return 0.0
    pred = np.argmax(scores, axis=1)
    return float(labels[np.arange(len(scores)), pred].mean())


def evaluate_scores(scores, labels) -> EvalResult:
    aps = per_class_ap(scores, labels)
    valid = [a for a in aps if a is not None]
    if not valid:
        raise NoPositivesError("no class has a positive example")
    return EvalResult(aps, float(np.mean(valid)), top1_accuracy(scores, labels), len(scores))
