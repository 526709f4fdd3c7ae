"""Seeded k-fold partitioning of whole images."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadFoldIndex, DuplicateId, TooFewImages


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignments: dict  # image_id -> fold index

    def fold(self, index) -> list:
        return [i for i, f in self.assignments.items() if f == index]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignments.values():
            counts[f] += 1
        return counts

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "fold"])
            w.writerows(self.assignments.items())

    @classmethod
    def read_csv(cls, path, k=None) -> "FoldAssignment":
        with Path(path).open(encoding="utf-8", newline="") as fh:
            rows = {r["image_id"]: int(r["fold"]) for r in csv.DictReader(fh)}
        return cls(k if k is not None else max(rows.values()) + 1, rows)


def fisher_yates(items: list, seed: int) -> list:
    """Shuffle a copy of ``items`` with Fisher-Yates driven by PCG64(seed)."""
    rng = np.random.Generator(np.random.PCG64(seed & (2**64 - 1)))
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def split(image_ids, k: int = 4, seed: int = 0) -> FoldAssignment:
    """Shuffle ``image_ids`` with ``seed`` and deal them round-robin into k folds."""
    ids = list(image_ids)
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(ids) < k:
        raise TooFewImages(f"{len(ids)} images cannot fill {k} folds")
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise DuplicateId(f"image id {dup!r} appears more than once")
    shuffled = fisher_yates(ids, seed)
    return FoldAssignment(k, {image_id: pos % k for pos, image_id in enumerate(shuffled)})


def train_val(fold: FoldAssignment, validation_fold: int):
    """``(train_ids, validation_ids)`` with ``validation_fold`` held out."""
    if not 0 <= validation_fold < fold.k:
        raise BadFoldIndex(f"fold {validation_fold} outside [0, {fold.k})")
    train = [i for i, f in fold.assignments.items() if f != validation_fold]
    val = [i for i, f in fold.assignments.items() if f == validation_fold]
    return train, val
