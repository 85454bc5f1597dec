"""Command line entry point: ``msfseg <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 some images failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import fusion
from .geometry import BoundingBox, GeometryError, ImageSize, scale_box
from .ingest import (
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    TruthSpec,
    kmeans_anchors,
    load_manifest,
    rasterize_truth,
    save_manifest,
)
from .interchange import InterchangeError, fused_record, group_by_image, read_records, set_record, write_records
from .metrics import MetricsError, evaluate
from .pgm import PgmError, read_mask, write_mask, write_pgm
from .pipeline import DEFAULT_SCALES, PipelineConfig, ProviderBinding, run_pipeline, sweep_lambda, sweep_table
from .providers import ProviderError
from .synth import DetectionNoiseSpec, PhantomSpec, benchmark_image

log = logging.getLogger("msfseg")

VALIDATION_ERRORS = (
    ManifestError, InterchangeError, MetricsError, GeometryError, PgmError,
    ProviderError, fusion.FusionError, ValidationError, ValueError, OSError,
)


def _scales(text: str) -> list[ImageSize]:
    return [ImageSize.parse(s) for s in text.split(",") if s.strip()]


def _lambdas(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _load_config(args) -> PipelineConfig:
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = PipelineConfig.model_validate(data)
    updates = {}
    if getattr(args, "scales", None):
        updates["scales"] = [(s.width, s.height) for s in _scales(args.scales)]
    if getattr(args, "detections", None):
        updates["detector"] = ProviderBinding(kind="external_files", params={"path": args.detections})
    if getattr(args, "masks", None):
        updates["segmenter"] = ProviderBinding(kind="external_files", params={"dir": args.masks})
    if getattr(args, "workers", None):
        updates["workers"] = args.workers
    merged = cfg.model_dump(by_alias=True)
    merged.update({k: (v.model_dump() if isinstance(v, ProviderBinding) else v) for k, v in updates.items()})
    lam = getattr(args, "lam", None)
    if isinstance(lam, str):
        merged["lambda"] = _lambdas(lam)[0]
    return PipelineConfig.model_validate(merged)


def _write_json(path: Path | None, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _summary(report) -> str:
    op = report.operating_point
    det = "no truth boxes" if op is None else f"AP {report.ap:.4f}, TPR {op.tpr:.3f} @ FPavg {op.fp_avg:.3f}"
    return det if report.mean_dice is None else f"{det}, mean Dice {report.mean_dice:.4f}"


def cmd_synth(args) -> int:
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    ph_kw = dict(overrides.get("phantom", {}))
    if "native" in ph_kw:
        ph_kw["native"] = ImageSize.parse(ph_kw["native"])
    for key in ("mass_count_range", "mass_radius_range"):
        if key in ph_kw:
            ph_kw[key] = tuple(ph_kw[key])
    ph_kw["seed"] = args.seed
    phantom = PhantomSpec(**ph_kw)
    noise_kw = dict(overrides.get("noise", {}))
    if "fp_size_range" in noise_kw:
        noise_kw["fp_size_range"] = tuple(noise_kw["fp_size_range"])
    noise = DetectionNoiseSpec(**noise_kw)
    scales = _scales(args.scales) if args.scales else [ImageSize.parse(s) for s in DEFAULT_SCALES]

    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries, records = [], []
    for i in range(args.count):
        b = benchmark_image(i, phantom, scales, noise)
        write_pgm(out / "images" / f"{b.image_id}.pgm", b.phantom.image)
        write_mask(out / "masks" / f"{b.image_id}.pgm", b.phantom.mask)
        entries.append(ManifestEntry(
            image_id=b.image_id,
            image_path=f"images/{b.image_id}.pgm",
            width=phantom.native.width,
            height=phantom.native.height,
            truth=TruthSpec(mask_path=f"masks/{b.image_id}.pgm"),
        ))
        records.extend(set_record(b.image_id, s) for s in b.sets)
    save_manifest(DatasetManifest(entries=entries), out / "manifest.json")
    write_records(out / "detections.jsonl", records)
    _write_json(out / "synth_config.json", {
        "seed": args.seed,
        "count": args.count,
        "scales": [str(s) for s in scales],
        "phantom": {**dataclasses.asdict(phantom), "native": str(phantom.native)},
        "noise": dataclasses.asdict(noise),
    })
    print(f"wrote {args.count} phantoms to {out}")
    return 0


def _natives(args) -> dict[str, ImageSize]:
    if args.manifest:
        return {e.image_id: e.native for e in load_manifest(args.manifest).entries}
    return {}


def cmd_fuse(args) -> int:
    grouped = group_by_image(read_records(args.detections))
    natives = _natives(args)
    default_native = ImageSize.parse(args.native) if args.native else None
    wanted = _scales(args.scales) if args.scales else None
    lam = _lambdas(args.lam)[0]
    out = []
    for image_id in sorted(grouped):
        native = natives.get(image_id, default_native)
        if native is None:
            raise ManifestError(f"no native size for image {image_id!r}; pass --manifest or --native")
        per_scale = grouped[image_id]
        scales = wanted if wanted is not None else list(per_scale)
        missing = [str(s) for s in scales if s not in per_scale]
        if missing:
            raise InterchangeError(f"image {image_id!r} has no detections at {', '.join(missing)}")
        sets = [per_scale[s].to_set() for s in scales]
        out.append(fused_record(image_id, native, fusion.msf(sets, native, lam)))
    dest = Path(args.out_dir) / "fused.jsonl" if args.out_dir else Path(args.output or "fused.jsonl")
    write_records(dest, out)
    print(f"fused {len(out)} images into {dest}")
    return 0


def cmd_pipeline(args) -> int:
    ds = load_manifest(args.manifest)
    cfg = _load_config(args)
    result, report = run_pipeline(ds, cfg, out_dir=args.out_dir, workers=args.workers)
    report_path = Path(args.report) if args.report else (Path(args.out_dir) / "report.json" if args.out_dir else None)
    if args.out_dir:
        write_records(
            Path(args.out_dir) / "fused.jsonl",
            (fused_record(r.image_id, r.native, r.candidates) for r in result.images),
        )
    if report_path is None:
        sys.stdout.write(report.to_json())
    else:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report.write(report_path)
        if args.csv:
            report.write_curves_csv(report_path.with_suffix(".pr.csv"), report_path.with_suffix(".froc.csv"))
        print(f"{len(result.images)} images, {_summary(report)}")
    for f in result.failures:
        print(f"FAILED {f['image_id']}: {f['error']}", file=sys.stderr)
    return result.exit_code


def cmd_eval(args) -> int:
    ds = load_manifest(args.manifest)
    grouped = group_by_image(read_records(args.detections)) if args.detections else {}
    ids, preds, truths, pmasks, tmasks = [], [], [], [], []
    for e in sorted(ds.entries, key=lambda e: e.image_id):
        scored: list[tuple[BoundingBox, float]] = []
        for rec in grouped.get(e.image_id, {}).values():
            for box, score in rec.scored_boxes():
                box = box if rec.scale == e.native else scale_box(box, rec.scale, e.native)
                scored.append((box, score))
        mask, boxes = rasterize_truth(e, ds.base_dir)
        ids.append(e.image_id)
        preds.append(scored)
        truths.append(boxes)
        if args.masks:
            p = Path(args.masks) / f"{e.image_id}.pgm"
            pm = read_mask(p) if p.is_file() else np.zeros(e.native.shape, dtype=bool)
            pmasks.append(pm)
            tmasks.append(mask)
    report = evaluate(ids, preds, truths, pmasks if args.masks else None, tmasks if args.masks else None, args.iou)
    if args.report:
        report.write(args.report)
        if args.csv:
            rp = Path(args.report)
            report.write_curves_csv(rp.with_suffix(".pr.csv"), rp.with_suffix(".froc.csv"))
        print(f"{_summary(report)}; report written to {args.report}")
    else:
        sys.stdout.write(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    ds = load_manifest(args.manifest)
    cfg = _load_config(argparse.Namespace(**{**vars(args), "lam": None}))
    rows = sweep_lambda(ds, cfg, _lambdas(args.lam), workers=args.workers)
    table = sweep_table(rows)
    for r in table:
        print(f"{r['label']:>16}  TPR {r['tpr']:.3f} @ FPavg {r['fp_avg']:.3f}")
    if args.report:
        _write_json(Path(args.report), table)
    return 0


def cmd_anchors(args) -> int:
    ds = load_manifest(args.manifest)
    target = ImageSize.parse(args.scales) if args.scales else None
    wh = []
    for e in ds.entries:
        for b in rasterize_truth(e, ds.base_dir)[1]:
            w, h = b.width, b.height
            if target is not None:
                w, h = w * target.width / e.native.width, h * target.height / e.native.height
            wh.append((w, h))
    anchors = kmeans_anchors(np.asarray(wh, dtype=np.float64), k=args.k, seed=args.seed)
    print(anchors.to_cfg())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded phantom benchmark")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--scales", help="comma separated WxH list")
    s.add_argument("--config", help="JSON with optional 'phantom' and 'noise' overrides")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fuse", help="fuse multi-scale detections (JSONL)")
    s.add_argument("--detections", required=True)
    s.add_argument("--manifest")
    s.add_argument("--native", help="WxH native size when no manifest is given")
    s.add_argument("--lambda", dest="lam", default="0.6")
    s.add_argument("--scales")
    s.add_argument("--out-dir")
    s.add_argument("--output")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("pipeline", help="run detection, fusion, segmentation and evaluation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--lambda", dest="lam")
    s.add_argument("--scales")
    s.add_argument("--detections", help="external per-scale detections (JSONL)")
    s.add_argument("--masks", help="directory of external patch masks")
    s.add_argument("--out-dir")
    s.add_argument("--report")
    s.add_argument("--workers", type=int)
    s.add_argument("--csv", action="store_true", help="also write PR/FROC curves as CSV")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval", help="score detections and masks against a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--detections")
    s.add_argument("--masks", help="directory of full-size predicted masks <image_id>.pgm")
    s.add_argument("--report")
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--csv", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="operating points over fusion thresholds")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--lambda", dest="lam", default="0,0.5,0.6,0.7")
    s.add_argument("--scales")
    s.add_argument("--detections")
    s.add_argument("--report")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("anchors", help="k-means anchor sizes from ground-truth boxes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--scales", help="express anchors at this WxH input size")
    s.set_defaults(func=cmd_anchors)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
