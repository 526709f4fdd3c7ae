"""Two-step detection cascade: candidate detection, fusion, crop
classification and final thresholding.

Both stages are pluggable. A stage can run in-process (the built-in blob
detector, the pass-through classifier) or as an external program that
exchanges files with the orchestrator:

Stage 1
    ``<command> --manifest <csv> --out <jsonl>``. The manifest has header
    ``patch_id,file,origin_x,origin_y,valid_w,valid_h`` and lists PNG patches.
    The program writes one JSON object per box with keys ``patch_id, x1, y1,
    x2, y2, score, label`` in patch-local pixel coordinates.

Stage 2
    Same invocation. The manifest has header ``box_id,file`` and lists PNG
    crops. The program writes one ``{"box_id": ..., "score": ...}`` object per
    crop.

A nonzero exit status or malformed output raises :class:`AdapterFailure`.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ensemble import DetectionBox, DetectionSet, WbfParams, merge_models, wbf_fuse
from .errors import AdapterFailure, CountMismatch, DegenerateStains, ImageSmallerThanCrop, InsufficientTissue
from .imageio import write_png
from .refdetect import BlobParams, detect_candidates
from .stain import REFERENCE_STAIN_MODEL, MacenkoConfig, as_rgb, estimate_stain_model
from .tiling import PATCH_HEIGHT, PATCH_WIDTH, PatchGrid, extract_patch, plan_grid, to_global

log = logging.getLogger(__name__)

STAGE1_MANIFEST_HEADER = ["patch_id", "file", "origin_x", "origin_y", "valid_w", "valid_h"]
STAGE2_MANIFEST_HEADER = ["box_id", "file"]
STAGE1_KEYS = ("patch_id", "x1", "y1", "x2", "y2", "score", "label")
STAGE2_KEYS = ("box_id", "score")


def _parse_spec(spec: str, builtins: dict):
    spec = spec.strip()
    if spec.startswith("external:"):
        command = tuple(shlex.split(spec[len("external:"):]))
        if not command:
            raise ValueError("external adapter needs a command")
        return "external", command
    name = spec[len("builtin:"):] if spec.startswith("builtin:") else spec
    if name not in builtins:
        raise ValueError(f"unknown adapter {spec!r}; expected one of {sorted(builtins)} or external:<command>")
    return builtins[name], ()


@dataclass(frozen=True)
class DetectorAdapter:
    kind: str = "builtin_blob"
    command: tuple = ()
    blob: BlobParams = BlobParams()
    macenko: MacenkoConfig = MacenkoConfig()

    def __post_init__(self):
        if self.kind not in ("builtin_blob", "external"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external detector needs a command")

    @classmethod
    def parse(cls, spec: str, **kwargs) -> "DetectorAdapter":
        """``builtin:blob`` or ``external:<command line>``."""
        kind, command = _parse_spec(spec, {"blob": "builtin_blob"})
        return cls(kind, command, **kwargs)

    def spec(self) -> str:
        return "builtin:blob" if self.kind == "builtin_blob" else "external:" + shlex.join(self.command)


@dataclass(frozen=True)
class ClassifierAdapter:
    kind: str = "passthrough"
    command: tuple = ()

    def __post_init__(self):
        if self.kind not in ("passthrough", "external"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external classifier needs a command")

    @classmethod
    def parse(cls, spec: str) -> "ClassifierAdapter":
        """``passthrough`` / ``builtin:passthrough`` or ``external:<command line>``."""
        kind, command = _parse_spec(spec, {"passthrough": "passthrough"})
        return cls(kind, command)

    def spec(self) -> str:
        return "builtin:passthrough" if self.kind == "passthrough" else "external:" + shlex.join(self.command)


@dataclass(frozen=True)
class CascadeConfig:
    crop_size: int = 128
    final_threshold: float = 0.5
    score_mode: str = "classifier_only"
    patch_height: int = PATCH_HEIGHT
    patch_width: int = PATCH_WIDTH

    def __post_init__(self):
        if self.crop_size < 16:
            raise ValueError("crop_size must be >= 16")
        if not 0 <= self.final_threshold <= 1:
            raise ValueError("final_threshold must lie in [0, 1]")
        if self.score_mode not in ("classifier_only", "product"):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")


@dataclass
class AdapterLog:
    """Diagnostics of every external invocation, kept for the run manifest."""

    entries: list = field(default_factory=list)

    def record(self, stage, image_id, command, returncode, stderr):
        self.entries.append(
            {"stage": stage, "image_id": image_id, "command": list(command),
             "returncode": returncode, "stderr": stderr}
        )


def _invoke(command, manifest: Path, out: Path, stage, image_id, adapter_log):
    argv = [*command, "--manifest", str(manifest), "--out", str(out)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, check=False)
    except OSError as exc:
        raise AdapterFailure(f"stage {stage} adapter could not start: {exc}") from exc
    if adapter_log is not None:
        adapter_log.record(stage, image_id, command, proc.returncode, proc.stderr)
    if proc.returncode != 0:
        raise AdapterFailure(
            f"stage {stage} adapter exited with status {proc.returncode} on {image_id!r}: "
            f"{proc.stderr.strip()[-500:]}",
            proc.stderr,
        )
    if not out.exists():
        raise AdapterFailure(f"stage {stage} adapter wrote no output file {out}", proc.stderr)
    return proc.stderr


def _read_records(path: Path, keys, stage):
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name} line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterFailure(f"stage {stage} output {where}: invalid JSON ({exc})") from None
            if not isinstance(rec, dict):
                raise AdapterFailure(f"stage {stage} output {where}: expected a JSON object")
            missing = [k for k in keys if k not in rec]
            if missing:
                raise AdapterFailure(f"stage {stage} output {where}: missing keys {missing}")
            records.append((where, rec))
    return records


def _stain_model_for(img, cfg: MacenkoConfig):
    try:
        return estimate_stain_model(img, cfg)
    except (InsufficientTissue, DegenerateStains) as exc:
        log.debug("falling back to reference stain model: %s", exc)
        return REFERENCE_STAIN_MODEL


def _clip_to_image(box: DetectionBox, width, height):
    x1, y1 = max(box.x1, 0), max(box.y1, 0)
    x2, y2 = min(box.x2, width), min(box.y2, height)
    if x1 >= x2 or y1 >= y2:
        return None
    return replace(box, x1=x1, y1=y1, x2=x2, y2=y2)


def _stage1_builtin(image_id, img, grid: PatchGrid, adapter: DetectorAdapter):
    model = _stain_model_for(img, adapter.macenko)
    boxes = []
    for ref in grid.patches:
        patch = extract_patch(img, ref, grid)
        found = detect_candidates(patch, model, adapter.blob)
        boxes.extend(to_global(b, ref) for b in found)
    return boxes


def _stage1_external(image_id, img, grid: PatchGrid, adapter: DetectorAdapter, workdir: Path, adapter_log):
    patch_dir = workdir / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)
    manifest = workdir / "manifest.csv"
    with manifest.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STAGE1_MANIFEST_HEADER)
        for ref in grid.patches:
            name = f"patch_{ref.patch_id:04d}.png"
            write_png(patch_dir / name, extract_patch(img, ref, grid))
            w.writerow([ref.patch_id, (patch_dir / name).resolve(), ref.origin_x, ref.origin_y,
                        ref.valid_width, ref.valid_height])
    out = workdir / "detections.jsonl"
    stderr = _invoke(adapter.command, manifest, out, 1, image_id, adapter_log)

    by_id = {ref.patch_id: ref for ref in grid.patches}
    boxes = []
    for where, rec in _read_records(out, STAGE1_KEYS, 1):
        try:
            ref = by_id[int(rec["patch_id"])]
            box = DetectionBox(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]),
                               float(rec["score"]), 0, int(rec["label"]))
        except KeyError:
            raise AdapterFailure(f"stage 1 output {where}: unknown patch_id {rec['patch_id']!r}", stderr) from None
        except (TypeError, ValueError) as exc:
            raise AdapterFailure(f"stage 1 output {where}: {exc}", stderr) from None
        boxes.append(to_global(box, ref))
    return boxes


def run_stage1(
    images: Mapping[str, np.ndarray],
    adapter: DetectorAdapter = DetectorAdapter(),
    cfg: CascadeConfig = CascadeConfig(),
    workdir=None,
    threads: int = 1,
    adapter_log: AdapterLog | None = None,
) -> dict[str, DetectionSet]:
    """Tile every image, detect per patch and return global boxes per image.

    Results are keyed and ordered like ``images``; within an image boxes keep
    ``(patch_id, adapter line)`` order.
    """
    if not images:
        return {}
    tmp = None
    if adapter.kind == "external" and workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="stage1_")
        workdir = tmp.name

    def one(item):
        image_id, img = item
        img = as_rgb(img)
        h, w = img.shape[:2]
        grid = plan_grid(w, h, cfg.patch_height, cfg.patch_width)
        if adapter.kind == "builtin_blob":
            boxes = _stage1_builtin(image_id, img, grid, adapter)
        else:
            sub = Path(workdir) / _safe(image_id)
            boxes = _stage1_external(image_id, img, grid, adapter, sub, adapter_log)
        clipped = [c for c in (_clip_to_image(b, w, h) for b in boxes) if c is not None]
        return image_id, DetectionSet(image_id, clipped, 1)

    try:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            return dict(pool.map(one, images.items()))
    finally:
        if tmp is not None:
            tmp.cleanup()


def _safe(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(image_id))


def fuse_models(per_model: Sequence[DetectionSet], params: WbfParams = WbfParams()) -> DetectionSet:
    """WBF over one image's detections from ``len(per_model)`` models."""
    return wbf_fuse(merge_models(list(per_model)), params)


def fuse_all(per_model: Sequence[Mapping[str, DetectionSet]], params: WbfParams = WbfParams()) -> dict[str, DetectionSet]:
    """:func:`fuse_models` for every image seen by any model."""
    image_ids = []
    for m in per_model:
        image_ids += [i for i in m if i not in image_ids]
    return {
        i: fuse_models([m.get(i) or DetectionSet(i) for m in per_model], params)
        for i in image_ids
    }


def crop_origin(center, size, extent) -> int:
    """Top-left coordinate of a window of ``size`` centred on ``center``,
    shifted to stay within ``[0, extent)``."""
    start = math.floor(center - size / 2 + 0.5)
    return int(min(max(start, 0), extent - size))


def extract_crops(img, dets: DetectionSet, crop_size: int = 128):
    """``(box_id, crop)`` for every box, in the order of ``dets``.

    Windows are shifted, never shrunk or padded, to stay inside the image.
    """
    img = as_rgb(img)
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        raise ImageSmallerThanCrop(f"image {w}x{h} is smaller than crop {crop_size}")
    crops = []
    for box_id, box in enumerate(dets.boxes):
        cx, cy = box.center
        x0, y0 = crop_origin(cx, crop_size, w), crop_origin(cy, crop_size, h)
        crops.append((box_id, img[y0:y0 + crop_size, x0:x0 + crop_size].copy()))
    return crops


def run_stage2(crops, adapter: ClassifierAdapter = ClassifierAdapter(), workdir=None,
               adapter_log: AdapterLog | None = None, image_id="") -> list[float]:
    """One confidence per crop, aligned with ``crops``."""
    crops = list(crops)
    if adapter.kind == "passthrough":
        return [1.0] * len(crops)
    if not crops:
        return []
    with tempfile.TemporaryDirectory(prefix="stage2_") as tmp:
        root = Path(workdir if workdir is not None else tmp)
        crop_dir = root / "crops"
        crop_dir.mkdir(parents=True, exist_ok=True)
        manifest = root / "manifest.csv"
        with manifest.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STAGE2_MANIFEST_HEADER)
            for box_id, crop in crops:
                name = f"crop_{box_id:05d}.png"
                write_png(crop_dir / name, crop)
                w.writerow([box_id, (crop_dir / name).resolve()])
        out = root / "scores.jsonl"
        stderr = _invoke(adapter.command, manifest, out, 2, image_id, adapter_log)
        records = _read_records(out, STAGE2_KEYS, 2)

    if len(records) != len(crops):
        raise CountMismatch(f"classifier returned {len(records)} scores for {len(crops)} crops", stderr)
    wanted = {box_id for box_id, _ in crops}
    scores = {}
    for where, rec in records:
        try:
            box_id, score = int(rec["box_id"]), float(rec["score"])
        except (TypeError, ValueError) as exc:
            raise AdapterFailure(f"stage 2 output {where}: {exc}", stderr) from None
        if box_id not in wanted or box_id in scores:
            raise AdapterFailure(f"stage 2 output {where}: unexpected or repeated box_id {box_id}", stderr)
        if not 0.0 <= score <= 1.0:
            raise AdapterFailure(f"stage 2 output {where}: score {score} outside [0, 1]", stderr)
        scores[box_id] = score
    return [scores[box_id] for box_id, _ in crops]


def finalize(dets: DetectionSet, stage2_scores: Sequence[float], cfg: CascadeConfig = CascadeConfig()) -> DetectionSet:
    """Combine stage scores, drop boxes below ``cfg.final_threshold`` and sort."""
    if len(stage2_scores) != len(dets.boxes):
        raise ValueError(f"{len(stage2_scores)} stage-2 scores for {len(dets.boxes)} boxes")
    kept = []
    for box, s2 in zip(dets.boxes, stage2_scores):
        score = s2 if cfg.score_mode == "classifier_only" else box.score * s2
        if score >= cfg.final_threshold:
            kept.append(replace(box, score=score))
    return DetectionSet(dets.image_id, kept, dets.num_models).sorted()


def run_stage2_all(images: Mapping[str, np.ndarray], fused: Mapping[str, DetectionSet],
                   adapter: ClassifierAdapter, cfg: CascadeConfig, workdir=None,
                   adapter_log: AdapterLog | None = None) -> dict[str, DetectionSet]:
    """Crop, classify and finalize the fused candidates of every image."""
    out = {}
    for image_id, dets in fused.items():
        crops = extract_crops(images[image_id], dets, cfg.crop_size)
        sub = None if workdir is None else Path(workdir) / _safe(image_id)
        scores = run_stage2(crops, adapter, sub, adapter_log, image_id)
        out[image_id] = finalize(dets, scores, cfg)
    return out
