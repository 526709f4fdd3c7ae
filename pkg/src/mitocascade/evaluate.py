"""Point-based detection matching and pooled precision / recall / F1."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .ensemble import DetectionSet
from .errors import ImageIdMismatch
from .tiling import PointAnnotation


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 30.0
    one_to_one: bool = True

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not self.one_to_one:
            raise ValueError("only one-to-one matching is supported")


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple  # (detection index, truth index), indices into the inputs


def match(dets: DetectionSet, truth: Sequence[PointAnnotation], cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Greedy one-to-one matching of box centres to truth points.

    Detections are taken in descending score order (ties by coordinates);
    each claims the nearest still-unmatched truth within ``cfg.radius``.
    Equidistant truths go to the lower index.
    """
    for t in truth:
        if t.image_id != dets.image_id:
            raise ImageIdMismatch(f"truth for {t.image_id!r} given with detections for {dets.image_id!r}")
    order = sorted(range(len(dets.boxes)), key=lambda i: dets.boxes[i].sort_key())
    free = list(range(len(truth)))
    pairs = []
    for di in order:
        cx, cy = dets.boxes[di].center
        best, best_d = None, math.inf
        for ti in free:
            d = math.hypot(cx - truth[ti].x, cy - truth[ti].y)
            if d <= cfg.radius and d < best_d:
                best, best_d = ti, d
        if best is not None:
            free.remove(best)
            pairs.append((di, best))
    tp = len(pairs)
    return MatchResult(tp, len(dets.boxes) - tp, len(truth) - tp, tuple(pairs))


def harmonic_f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_image: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "per_image": {k: dict(zip(("tp", "fp", "fn"), v)) for k, v in sorted(self.per_image.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report(counts) -> EvalReport:
    """Micro-averaged metrics from ``{image_id: (tp, fp, fn)}`` or a list of
    ``(tp, fp, fn)`` triples."""
    items = counts.items() if isinstance(counts, Mapping) else enumerate(counts)
    per_image = {}
    tp = fp = fn = 0
    for key, c in items:
        a, b, m = (c.tp, c.fp, c.fn) if isinstance(c, MatchResult) else c
        if min(a, b, m) < 0:
            raise ValueError("counts must be non-negative")
        per_image[str(key)] = (a, b, m)
        tp, fp, fn = tp + a, fp + b, fn + m
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(tp, fp, fn, precision, recall, harmonic_f1(precision, recall), per_image)


def _group_truth(truth):
    grouped = {}
    for t in truth:
        grouped.setdefault(t.image_id, []).append(t)
    return grouped


def evaluate(dets: Mapping[str, DetectionSet], truth: Sequence[PointAnnotation], cfg: MatchConfig = MatchConfig()) -> EvalReport:
    """Match every image that has detections or truths and pool the counts.

    Only ``mitosis`` annotations count as truth; ``hard_negative`` points are
    ignored here.
    """
    grouped = _group_truth(t for t in truth if t.label == "mitosis")
    counts = {}
    for image_id in sorted(set(dets) | set(grouped)):
        ds = dets.get(image_id) or DetectionSet(image_id)
        counts[image_id] = match(ds, grouped.get(image_id, []), cfg)
    return report(counts)


def threshold_sweep(dets: Mapping[str, DetectionSet], truth, cfg: MatchConfig, thresholds) -> list[EvalReport]:
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    return [
        evaluate({k: v.filter_score(t) for k, v in dets.items()}, truth, cfg)
        for t in thresholds
    ]


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table with Precision / Recall / F1-score columns in percent."""
    name_w = max([len("Method")] + [len(name) for name, _ in rows])
    head = f"{'Method':<{name_w}}  {'Precision':>9}  {'Recall':>8}  {'F1-score':>8}"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(
            f"{name:<{name_w}}  {100 * r.precision:>8.2f}%  {100 * r.recall:>7.2f}%  {100 * r.f1:>7.2f}%"
        )
    return "\n".join(lines) + "\n"
