"""Detection boxes and Weighted Boxes Fusion (WBF) across ensemble members."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class DetectionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    model_id: int = 0
    label: int = 0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def center(self):
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def shifted(self, dx, dy) -> "DetectionBox":
        return replace(self, x1=self.x1 + dx, y1=self.y1 + dy, x2=self.x2 + dx, y2=self.y2 + dy)

    def sort_key(self):
        """Descending score, then coordinates, model and label."""
        return (-self.score, self.x1, self.y1, self.x2, self.y2, self.model_id, self.label)


@dataclass
class DetectionSet:
    image_id: str
    boxes: list[DetectionBox] = field(default_factory=list)
    num_models: int = 1

    def __post_init__(self):
        if self.num_models < 1:
            raise ValueError("num_models must be >= 1")
        for b in self.boxes:
            if not 0 <= b.model_id < self.num_models:
                raise ValueError(f"model_id {b.model_id} outside [0, {self.num_models})")

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def sorted(self) -> "DetectionSet":
        return DetectionSet(self.image_id, sorted(self.boxes, key=DetectionBox.sort_key), self.num_models)

    def filter_score(self, threshold) -> "DetectionSet":
        return DetectionSet(self.image_id, [b for b in self.boxes if b.score >= threshold], self.num_models)


@dataclass(frozen=True)
class WbfParams:
    iou_threshold: float = 0.55
    score_threshold: float = 0.0
    rescale_mode: str = "min_count"

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie strictly between 0 and 1")
        if self.rescale_mode not in ("min_count", "none"):
            raise ValueError(f"unknown rescale_mode {self.rescale_mode!r}")


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


class _Cluster:
    __slots__ = ("label", "members", "_wsum", "_coords", "box")

    def __init__(self, first: DetectionBox):
        self.label = first.label
        self.members = []
        self._wsum = 0.0
        self._coords = np.zeros(4)
        self.add(first)

    def add(self, b: DetectionBox):
        self.members.append(b)
        self._wsum += b.score
        self._coords += b.score * np.array([b.x1, b.y1, b.x2, b.y2])
        if len(self.members) == 1:
            x1, y1, x2, y2 = b.x1, b.y1, b.x2, b.y2
        elif self._wsum > 0:
            x1, y1, x2, y2 = self._coords / self._wsum
        else:
            # all-zero scores: fall back to the unweighted mean
            x1, y1, x2, y2 = np.mean([[m.x1, m.y1, m.x2, m.y2] for m in self.members], axis=0)
        score = self._wsum / len(self.members)
        self.box = DetectionBox(float(x1), float(y1), float(x2), float(y2), min(score, 1.0), 0, self.label)


def wbf_fuse(sets: DetectionSet, params: WbfParams = WbfParams()) -> DetectionSet:
    """Fuse the boxes of ``sets`` (one image, ``sets.num_models`` members).

    Boxes are visited in descending score order; each joins the first cluster
    of the same label whose running fused box overlaps it with IoU above
    ``params.iou_threshold``, otherwise it opens a new cluster. A fused box is
    the score-weighted mean of its members with the mean member score, scaled
    by ``min(T, N) / N`` for cluster size T and N models when
    ``rescale_mode == "min_count"``.

    The output has ``num_models == 1`` and is sorted by descending score.
    """
    n_models = sets.num_models
    boxes = sorted(
        (b for b in sets.boxes if b.score >= params.score_threshold),
        key=DetectionBox.sort_key,
    )
    clusters: list[_Cluster] = []
    for b in boxes:
        for c in clusters:
            if c.label == b.label and iou(c.box, b) > params.iou_threshold:
                c.add(b)
                break
        else:
            clusters.append(_Cluster(b))

    fused = []
    for c in clusters:
        box = c.box
        if params.rescale_mode == "min_count":
            t = len(c.members)
            box = replace(box, score=box.score * min(t, n_models) / n_models)
        fused.append(box)
    fused.sort(key=DetectionBox.sort_key)
    return DetectionSet(sets.image_id, fused, 1)


def merge_models(per_model: list[DetectionSet]) -> DetectionSet:
    """Stack per-model sets of one image into one set with ``model_id`` = index."""
    if not per_model:
        raise ValueError("need at least one detection set")
    image_id = per_model[0].image_id
    boxes = []
    for m, ds in enumerate(per_model):
        if ds.image_id != image_id:
            raise ValueError(f"cannot merge detections of {ds.image_id!r} into {image_id!r}")
        boxes.extend(replace(b, model_id=m) for b in ds.boxes)
    return DetectionSet(image_id, boxes, len(per_model))


# JSON Lines wire format ---------------------------------------------------

JSONL_KEYS = ("image_id", "x1", "y1", "x2", "y2", "score", "model_id", "label")


def box_to_record(image_id, b: DetectionBox) -> dict:
    rec = {"image_id": image_id}
    rec.update(asdict(b))
    return {k: rec[k] for k in JSONL_KEYS}


def write_jsonl(path, sets: Iterable[DetectionSet]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for ds in sets:
            for b in ds.boxes:
                fh.write(json.dumps(box_to_record(ds.image_id, b)) + "\n")


def read_jsonl(path, num_models=None) -> dict[str, DetectionSet]:
    """Read a detections file into ``{image_id: DetectionSet}`` in file order.

    ``num_models`` defaults to one more than the largest ``model_id`` seen.
    """
    grouped: dict[str, list[DetectionBox]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = DetectionBox(
                    float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]),
                    float(rec["score"]), int(rec.get("model_id", 0)), int(rec.get("label", 0)),
                )
                grouped.setdefault(str(rec["image_id"]), []).append(box)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from None
    if num_models is None:
        num_models = 1 + max((b.model_id for bs in grouped.values() for b in bs), default=0)
    return {k: DetectionSet(k, v, num_models) for k, v in grouped.items()}
