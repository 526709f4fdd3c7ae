"""End-to-end run: stage 1 per ensemble member, WBF, stage 2, evaluation.

A run is described by a TOML file::

    seed = 0
    threads = 1
    images = "images"        # directory of PNGs; image id = file stem
    truth = "truth.csv"      # optional, image_id,x,y,label
    out = "run"

    [stage1]
    detectors = ["builtin:blob"]     # one entry per ensemble member
    patch_height = 1536
    patch_width = 2048

    [stage1.blob]
    conc_threshold = 0.5
    min_area = 40
    max_area = 5000
    score_scale = 0.5

    [fusion]
    iou_threshold = 0.55
    score_threshold = 0.0
    rescale_mode = "min_count"

    [stage2]
    classifier = "passthrough"
    crop_size = 128
    final_threshold = 0.5
    score_mode = "classifier_only"

    [evaluate]
    radius = 30.0

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .cascade import (AdapterLog, CascadeConfig, ClassifierAdapter, DetectorAdapter,
                      fuse_all, run_stage1, run_stage2_all)
from .ensemble import WbfParams, write_jsonl
from .evaluate import MatchConfig, evaluate, format_table
from .imageio import read_png
from .refdetect import BlobParams
from .tiling import plan_grid, read_annotations

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "images": "images",
    "truth": "",
    "out": "run",
    "stage1": {
        "detectors": ["builtin:blob"],
        "patch_height": 1536,
        "patch_width": 2048,
        "blob": asdict(BlobParams()),
    },
    "fusion": asdict(WbfParams()),
    "stage2": {
        "classifier": "passthrough",
        "crop_size": 128,
        "final_threshold": 0.5,
        "score_mode": "classifier_only",
    },
    "evaluate": {"radius": 30.0},
}


def derive_seed(root: int, subsystem: str) -> int:
    """Stable 64-bit seed for one subsystem, derived from the root seed."""
    digest = hashlib.sha256(f"{int(root)}:{subsystem}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; unknown keys in ``override`` are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {key!r} must be a table")
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the config file, then explicit ``overrides``.

    Path-valued keys are made absolute relative to the config file.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        cfg = merge(cfg, load_toml(path))
        base = Path(path).resolve().parent
    if overrides:
        cfg = merge(cfg, overrides)
    for key in ("images", "truth", "out"):
        if cfg[key]:
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def load_images(directory) -> dict:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return {f.stem: read_png(f) for f in files}


def run_pipeline(cfg: dict, out_dir=None) -> dict:
    """Run both stages and, if truth is configured, evaluate one- and
    two-step outputs. Returns the run manifest (also written to
    ``<out>/manifest.json``)."""
    out = Path(out_dir or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    images = load_images(cfg["images"])

    s1, s2 = cfg["stage1"], cfg["stage2"]
    cascade_cfg = CascadeConfig(
        crop_size=s2["crop_size"], final_threshold=s2["final_threshold"],
        score_mode=s2["score_mode"], patch_height=s1["patch_height"], patch_width=s1["patch_width"],
    )
    blob = BlobParams(**s1["blob"])
    detectors = [DetectorAdapter.parse(spec, blob=blob) for spec in s1["detectors"]]
    classifier = ClassifierAdapter.parse(s2["classifier"])
    wbf = WbfParams(**cfg["fusion"])
    adapter_log = AdapterLog()

    files = {"grids": {}, "stage1": [], "fused": "fused.jsonl", "final": "final.jsonl"}
    for image_id, img in images.items():
        grid = plan_grid(img.shape[1], img.shape[0], s1["patch_height"], s1["patch_width"])
        rel = f"grids/{image_id}.grid.txt"
        (out / "grids").mkdir(exist_ok=True)
        (out / rel).write_text(grid.to_manifest(), encoding="utf-8")
        files["grids"][image_id] = rel

    per_model = []
    for m, det in enumerate(detectors):
        dets = run_stage1(images, det, cascade_cfg, workdir=out / "work" / f"stage1_model{m}",
                          threads=cfg["threads"], adapter_log=adapter_log)
        rel = f"stage1/model_{m}.jsonl"
        write_jsonl(out / rel, dets.values())
        files["stage1"].append(rel)
        per_model.append(dets)

    fused = fuse_all(per_model, wbf)
    write_jsonl(out / files["fused"], fused.values())
    final = run_stage2_all(images, fused, classifier, cascade_cfg,
                           workdir=out / "work" / "stage2", adapter_log=adapter_log)
    write_jsonl(out / files["final"], final.values())

    if cfg["truth"]:
        truth = read_annotations(cfg["truth"])
        match_cfg = MatchConfig(radius=cfg["evaluate"]["radius"])
        one = evaluate(fused, truth, match_cfg)
        two = evaluate(final, truth, match_cfg)
        (out / "report.json").write_text(
            json.dumps({"one_step": one.to_dict(), "two_step": two.to_dict()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        (out / "report.txt").write_text(
            format_table([("one-step (stage 1 + fusion)", one), ("two-step (+ stage 2)", two)]),
            encoding="utf-8",
        )
        files["report_json"], files["report_txt"] = "report.json", "report.txt"

    manifest = {
        "image_ids": list(images),
        "seed": cfg["seed"],
        "config": cfg,
        "files": files,
        "adapters": {
            "detectors": [d.spec() for d in detectors],
            "classifier": classifier.spec(),
            "diagnostics": sorted(adapter_log.entries, key=lambda e: (e["stage"], e["image_id"])),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
