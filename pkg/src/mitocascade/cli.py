"""Command-line entry point.

Every subcommand reads its defaults from the matching table of ``--config``
(e.g. ``[augment]``), and explicit flags win over the file. Exit status is
0 on success, 1 for usage errors, 2 for data errors and 3 when an adapter
fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .cascade import (AdapterLog, CascadeConfig, ClassifierAdapter, DetectorAdapter,
                      fuse_all, run_stage1, run_stage2_all)
from .ensemble import DetectionSet, WbfParams, read_jsonl, write_jsonl
from .errors import AdapterFailure, MitoCascadeError
from .evaluate import MatchConfig, evaluate, format_table, threshold_sweep
from .folds import split
from .imageio import read_png, write_png
from .pipeline import derive_seed, load_config, load_images, load_toml, run_pipeline
from .stain import AugmentParams, MacenkoConfig, augment, estimate_stain_model
from .tiling import extract_patch, plan_grid, read_annotations
from .trainctl import CyclicalLrConfig, schedule_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ADAPTER = 0, 1, 2, 3

log = logging.getLogger("mitocascade")

# built-in defaults per subcommand; a config table of the same name and then
# explicit flags override them
DEFAULTS = {
    "augment": {"variants": 10, "sigma_alpha": 0.2, "sigma_beta": 0.2},
    "tile": {"patch": "1536x2048"},
    "folds": {"k": 4},
    "detect": {"adapter": "builtin:blob", "patch": "1536x2048"},
    "fuse": {"iou": 0.55, "score_threshold": 0.0, "rescale_mode": "min_count"},
    "classify": {"adapter": "passthrough", "crop_size": 128, "threshold": 0.5, "score_mode": "classifier_only"},
    "evaluate": {"radius": 30.0},
    "schedule-dump": {"iterations": 80, "max_lr": 1e-4, "base_lr": 1e-5, "step_size": 4},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _patch_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"patch size must look like HEIGHTxWIDTH, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--config", type=Path, default=None, help="TOML config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mitocascade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("augment", parents=[common], help="stain-augmented variants of every PNG in a directory")
    a.add_argument("--in", dest="input", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--variants", type=int)
    a.add_argument("--sigma-alpha", dest="sigma_alpha", type=float)
    a.add_argument("--sigma-beta", dest="sigma_beta", type=float)

    t = sub.add_parser("tile", parents=[common], help="split one image into padded patches")
    t.add_argument("--in", dest="input", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--patch", help="HEIGHTxWIDTH")

    f = sub.add_parser("folds", parents=[common], help="seeded k-fold split of image ids")
    f.add_argument("--ids", type=Path, required=True, help="text file, one image id per line")
    f.add_argument("--k", type=int)
    f.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    d = sub.add_parser("detect", parents=[common], help="stage-1 candidate detection for one model")
    d.add_argument("--adapter")
    d.add_argument("--images", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--patch", help="HEIGHTxWIDTH")

    u = sub.add_parser("fuse", parents=[common], help="weighted boxes fusion across model outputs")
    u.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    u.add_argument("--out", type=Path, required=True)
    u.add_argument("--iou", type=float)
    u.add_argument("--score-threshold", dest="score_threshold", type=float)
    u.add_argument("--rescale-mode", dest="rescale_mode", choices=["min_count", "none"])

    c = sub.add_parser("classify", parents=[common], help="stage-2 classification and final thresholding")
    c.add_argument("--adapter")
    c.add_argument("--dets", type=Path, required=True)
    c.add_argument("--images", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--crop-size", dest="crop_size", type=int)
    c.add_argument("--threshold", type=float)
    c.add_argument("--score-mode", dest="score_mode", choices=["classifier_only", "product"])

    e = sub.add_parser("evaluate", parents=[common], help="precision / recall / F1 against point annotations")
    e.add_argument("--dets", type=Path, required=True)
    e.add_argument("--truth", type=Path, required=True)
    e.add_argument("--radius", type=float)
    e.add_argument("--json", dest="json_out", type=Path, help="write the report as JSON")
    e.add_argument("--sweep", type=float, nargs="+", help="also report these score thresholds")

    pl = sub.add_parser("pipeline", parents=[common], help="end-to-end two-step run")
    pl.add_argument("--out", type=Path, help="run directory (overrides config 'out')")

    s = sub.add_parser("schedule-dump", parents=[common], help="cyclical learning-rate schedule as CSV")
    s.add_argument("--iterations", type=int)
    s.add_argument("--max-lr", dest="max_lr", type=float)
    s.add_argument("--base-lr", dest="base_lr", type=float)
    s.add_argument("--step-size", dest="step_size", type=int)
    s.add_argument("--out", type=Path)
    return p


def effective_options(args) -> dict:
    """Built-in defaults, then the config file table, then explicit flags."""
    opts = dict(DEFAULTS.get(args.command, {}))
    opts.update(seed=0, threads=1)
    if args.config is not None:
        data = load_toml(args.config)
        opts.update({k: data[k] for k in ("seed", "threads") if k in data})
        table = data.get(args.command, {})
        unknown = set(table) - set(opts)
        if unknown:
            raise UsageError(f"unknown keys in [{args.command}]: {sorted(unknown)}")
        opts.update(table)
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _write_manifest(path: Path, command, opts, **extra):
    doc = {"command": command, "config": {k: str(v) if isinstance(v, Path) else v for k, v in opts.items()}}
    doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_augment(args, opts):
    files = sorted(args.input.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {args.input}")
    seed = derive_seed(opts["seed"], "augment")
    params = AugmentParams(opts["sigma_alpha"], opts["sigma_beta"], opts["variants"], seed)
    macenko = MacenkoConfig()
    args.out.mkdir(parents=True, exist_ok=True)

    def one(path):
        try:
            img = read_png(path)
            model = estimate_stain_model(img, macenko)
        except MitoCascadeError as exc:
            return path, exc
        model.save(args.out / f"{path.stem}_stain.txt")
        for i in range(params.variants_per_image):
            out = augment(img, model, params, i, od_threshold=macenko.od_threshold)
            write_png(args.out / f"{path.stem}_aug{i}.png", out)
        return path, None

    with ThreadPoolExecutor(max_workers=max(1, opts["threads"])) as pool:
        results = list(pool.map(one, files))
    failures = [(p, e) for p, e in results if e is not None]
    for p, e in failures:
        print(f"{p.name}: {type(e).__name__}: {e}", file=sys.stderr)
    _write_manifest(args.out / "augment_manifest.json", "augment", opts, augment_seed=seed,
                    inputs=[p.name for p in files], failed=[p.name for p, _ in failures])
    return EXIT_DATA if failures else EXIT_OK


def cmd_tile(args, opts):
    img = read_png(args.input)
    ph, pw = _patch_size(opts["patch"])
    grid = plan_grid(img.shape[1], img.shape[0], ph, pw)
    args.out.mkdir(parents=True, exist_ok=True)
    for ref in grid.patches:
        write_png(args.out / f"{args.input.stem}_p{ref.patch_id:04d}.png", extract_patch(img, ref, grid))
    (args.out / f"{args.input.stem}.grid.txt").write_text(grid.to_manifest(), encoding="utf-8")
    print(f"{len(grid.patches)} patches ({grid.rows}x{grid.cols}) written to {args.out}")
    return EXIT_OK


def cmd_folds(args, opts):
    ids = [line.strip() for line in args.ids.read_text(encoding="utf-8").splitlines() if line.strip()]
    assignment = split(ids, opts["k"], derive_seed(opts["seed"], "folds"))
    if args.out is None:
        sys.stdout.write("image_id,fold\n")
        sys.stdout.writelines(f"{i},{f}\n" for i, f in assignment.assignments.items())
    else:
        assignment.write_csv(args.out)
        _write_manifest(args.out.with_suffix(".manifest.json"), "folds", opts, sizes=assignment.sizes())
    return EXIT_OK


def _cascade_cfg(opts, patch=None):
    ph, pw = _patch_size(patch or "1536x2048")
    return CascadeConfig(
        crop_size=opts.get("crop_size", 128), final_threshold=opts.get("threshold", 0.5),
        score_mode=opts.get("score_mode", "classifier_only"), patch_height=ph, patch_width=pw,
    )


def cmd_detect(args, opts):
    images = load_images(args.images)
    adapter = DetectorAdapter.parse(opts["adapter"])
    adapter_log = AdapterLog()
    dets = run_stage1(images, adapter, _cascade_cfg(opts, opts["patch"]), threads=opts["threads"],
                      adapter_log=adapter_log)
    write_jsonl(args.out, dets.values())
    _write_manifest(args.out.with_suffix(".manifest.json"), "detect", opts,
                    diagnostics=adapter_log.entries)
    print(f"{sum(len(d) for d in dets.values())} candidates in {len(dets)} images -> {args.out}")
    return EXIT_OK


def cmd_fuse(args, opts):
    # each input file is one ensemble member, whatever its model_id column says
    per_model = [
        {k: DetectionSet(k, [replace(b, model_id=0) for b in v], 1) for k, v in read_jsonl(p).items()}
        for p in args.inputs
    ]
    params = WbfParams(opts["iou"], opts["score_threshold"], opts["rescale_mode"])
    fused = fuse_all(per_model, params)
    write_jsonl(args.out, fused.values())
    _write_manifest(args.out.with_suffix(".manifest.json"), "fuse", opts, inputs=[str(p) for p in args.inputs])
    return EXIT_OK


def cmd_classify(args, opts):
    images = load_images(args.images)
    fused = read_jsonl(args.dets)
    missing = sorted(set(fused) - set(images))
    if missing:
        raise FileNotFoundError(f"no image for detections of {missing}")
    adapter = ClassifierAdapter.parse(opts["adapter"])
    adapter_log = AdapterLog()
    final = run_stage2_all(images, fused, adapter, _cascade_cfg(opts), adapter_log=adapter_log)
    write_jsonl(args.out, final.values())
    _write_manifest(args.out.with_suffix(".manifest.json"), "classify", opts, diagnostics=adapter_log.entries)
    return EXIT_OK


def cmd_evaluate(args, opts):
    dets = read_jsonl(args.dets)
    truth = read_annotations(args.truth)
    cfg = MatchConfig(radius=opts["radius"])
    rep = evaluate(dets, truth, cfg)
    rows = [("detections", rep)]
    doc = rep.to_dict()
    if args.sweep:
        sweep = threshold_sweep(dets, truth, cfg, args.sweep)
        rows += [(f"score >= {t:g}", r) for t, r in zip(args.sweep, sweep)]
        doc["sweep"] = [dict(threshold=t, **r.to_dict()) for t, r in zip(args.sweep, sweep)]
    sys.stdout.write(format_table(rows))
    if args.json_out:
        args.json_out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_pipeline(args, opts):
    if args.config is None:
        raise UsageError("pipeline needs --config")
    overrides = {k: getattr(args, k) for k in ("seed", "threads") if getattr(args, k) is not None}
    cfg = load_config(args.config, overrides)
    manifest = run_pipeline(cfg, args.out)
    out = Path(args.out or cfg["out"])
    if (out / "report.txt").exists():
        sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    print(f"run manifest: {out / 'manifest.json'} ({len(manifest['image_ids'])} images)")
    return EXIT_OK


def cmd_schedule_dump(args, opts):
    cfg = CyclicalLrConfig(opts["max_lr"], opts["base_lr"], opts["step_size"])
    text = schedule_csv(cfg, opts["iterations"])
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text, encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "augment": cmd_augment,
    "tile": cmd_tile,
    "folds": cmd_folds,
    "detect": cmd_detect,
    "fuse": cmd_fuse,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "schedule-dump": cmd_schedule_dump,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = {} if args.command == "pipeline" else effective_options(args)
        return COMMANDS[args.command](args, opts)
    except UsageError as exc:
        print(f"mitocascade {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdapterFailure as exc:
        print(f"mitocascade {args.command}: adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except (MitoCascadeError, ValueError, OSError) as exc:
        print(f"mitocascade {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
