"""Command-line entry point.

Subcommands cover the whole pipeline: preprocess, pretrain, finetune,
crossval, evaluate, predict, report. Every run takes a strict JSON config
and writes the fully-resolved document next to its outputs. Exit codes:
0 success, 1 runtime failure, 2 configuration/validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from . import imaging_io, reporting, roi_pipeline
from .config import RunConfig
from .errors import ConfigurationError
from .metrics import binarize
from .network import NoduleSegNet
from .trainer import crossvalidate, evaluate_model, load_checkpoint, select_split, train

logger = logging.getLogger(__name__)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.override_seed(args.seed)
    return cfg


def _load_patches(cfg: RunConfig) -> list:
    _, patches = imaging_io.load_patch_dataset(cfg.data["patch_dir"])
    return patches


def _restored_model(cfg: RunConfig, checkpoint) -> NoduleSegNet:
    model = NoduleSegNet(cfg.model_config())
    load_checkpoint(checkpoint, model)
    return model


# ------------------------------------------------------------ subcommands


def _cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    data = cfg.data
    if not data["volumes_dir"] or not data["annotations_csv"]:
        raise ConfigurationError(
            "preprocess requires data.volumes_dir and data.annotations_csv"
        )
    out_dir = Path(args.out) if args.out else Path(data["patch_dir"])

    annotations = imaging_io.read_annotations(data["annotations_csv"])
    by_series = defaultdict(list)
    for ann in annotations:
        by_series[ann.series_id].append(ann)

    mhd_files = sorted(Path(data["volumes_dir"]).glob("*.mhd"))
    if not mhd_files:
        raise ConfigurationError(f"no .mhd volumes found in {data['volumes_dir']}")

    stacks = []
    seen_series = set()
    for mhd in mhd_files:
        volume = imaging_io.read_metaimage(mhd)
        seen_series.add(volume.series_id)
        series_anns = by_series.get(volume.series_id)
        if not series_anns:
            logger.info("%s: no annotations, skipped", volume.series_id)
            continue
        volume.voxels = roi_pipeline.normalize_intensity(
            volume.voxels, data["i_min"], data["i_max"]
        )
        for k, ann in enumerate(series_anns):
            stacks.append(
                roi_pipeline.extract_roi(
                    volume,
                    ann,
                    half_depth_mm=data["half_depth_mm"],
                    lesion_id=f"{volume.series_id}-n{k:02d}",
                )
            )
    for series in sorted(set(by_series) - seen_series):
        logger.warning("annotations for %s have no matching volume", series)

    patches = roi_pipeline.build_slice_dataset(
        stacks, keep_ratio=data["keep_ratio"], k_folds=data["k_folds"], seed=data["seed"]
    )
    manifest = imaging_io.write_patch_dataset(patches, out_dir)
    cfg.write_resolved(out_dir)
    print(f"wrote {len(manifest.entries)} patches from {len(stacks)} lesions to {out_dir}")
    return 0


def _cmd_train(args, phase: str) -> int:
    cfg = _load_config(args)
    cfg.apply_phase(phase)
    patches = select_split(_load_patches(cfg), args.split)
    model = NoduleSegNet(cfg.model_config())
    out_dir = Path(args.out) if args.out else Path("runs") / phase
    result = train(
        model,
        patches,
        cfg.train_config(),
        out_dir,
        freeze=cfg.freeze_spec(),
        resume=args.checkpoint,
    )
    cfg.write_resolved(out_dir)
    print(
        f"{phase}: {len(patches)} patches, final train dice "
        f"{result.final_train_dice:.4f}, checkpoint at {result.checkpoint_dir}"
    )
    return 0


def _cmd_crossval(args) -> int:
    cfg = _load_config(args)
    patches = select_split(_load_patches(cfg), "train")
    out_dir = Path(args.out) if args.out else Path("runs") / "crossval"
    result = crossvalidate(
        patches,
        cfg.train_config(),
        model_factory=lambda: NoduleSegNet(cfg.model_config()),
        out_dir=out_dir,
        freeze=cfg.freeze_spec(),
        threshold=cfg.eval_threshold,
        aggregation=cfg.eval_aggregation,
    )
    summary_path = Path(out_dir) / "crossval_summary.json"
    summary_path.write_text(json.dumps(result.summary, indent=2) + "\n")
    cfg.write_resolved(out_dir)
    shown = {
        name: None if s["mean"] is None else round(s["mean"], 4)
        for name, s in result.summary.items()
    }
    print(f"crossval over {len(result.fold_reports)} folds: {shown}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    patches = select_split(_load_patches(cfg), args.split)
    model = _restored_model(cfg, args.checkpoint)
    report = evaluate_model(
        model,
        patches,
        std_enabled=cfg.train_config().std_enabled,
        threshold=cfg.eval_threshold,
        aggregation=cfg.eval_aggregation,
    )
    out_dir = Path(args.out) if args.out else Path("runs") / "evaluate"
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / "metrics.json")
    report.write_csv(out_dir / "metrics.csv")
    cfg.write_resolved(out_dir)
    shown = {k: None if v is None else round(v, 4) for k, v in report.means.items()}
    print(f"evaluated {report.n_cases} cases ({args.split}): {shown}")
    return 0


def _cmd_predict(args) -> int:
    cfg = _load_config(args)
    patches = select_split(_load_patches(cfg), args.split)
    if not patches:
        raise ConfigurationError(f"split {args.split!r} selects no patches")
    model = _restored_model(cfg, args.checkpoint)
    model.eval()
    std_enabled = cfg.train_config().std_enabled
    out_dir = Path(args.out) if args.out else Path("runs") / "predict"
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    counters: dict[str, int] = {}
    with torch.no_grad():
        for start in range(0, len(patches), 10):
            chunk = patches[start : start + 10]
            images = torch.from_numpy(np.stack([p.image for p in chunk])[:, None])
            out = model(images, std_enabled=std_enabled)
            for patch, prob in zip(chunk, out.x[:, 0].numpy()):
                k = counters.get(patch.lesion_id, 0)
                counters[patch.lesion_id] = k + 1
                stem = f"{imaging_io._slug(patch.lesion_id)}_{k:03d}"
                prob32 = np.ascontiguousarray(prob, dtype="<f4")
                (out_dir / f"{stem}.prob").write_bytes(prob32.tobytes())
                mask = binarize(prob, cfg.eval_threshold)
                (out_dir / f"{stem}.msk").write_bytes(mask.tobytes())
                entries.append(
                    {
                        "prob_path": f"{stem}.prob",
                        "mask_path": f"{stem}.msk",
                        "lesion_id": patch.lesion_id,
                        "patient_id": patch.patient_id,
                        "height": int(prob.shape[0]),
                        "width": int(prob.shape[1]),
                    }
                )
    index = {"threshold": cfg.eval_threshold, "entries": entries}
    (out_dir / "predictions.json").write_text(json.dumps(index, indent=2) + "\n")
    cfg.write_resolved(out_dir)
    print(f"wrote {len(entries)} probability/mask pairs to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    named = {}
    for path in args.reports:
        name = Path(path).stem
        if name == "metrics":
            name = Path(path).parent.name or name
        base, k = name, 2
        while name in named:
            name = f"{base}-{k}"
            k += 1
        named[name] = reporting.load_report_means(path)

    rows = reporting.comparison_rows(named)
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_comparison_csv(rows, out_dir / "report.csv")
    reporting.render_comparison_figure(rows, out_dir / "report.png")
    print(reporting.format_table(rows))
    print(f"wrote {out_dir / 'report.csv'} and {out_dir / 'report.png'}")
    return 0


# ---------------------------------------------------------------- parsing


def _add_run_flags(sub, checkpoint_help=None, checkpoint_required=False, split_default=None):
    sub.add_argument("--config", required=True, help="path to the JSON run config")
    sub.add_argument("--seed", type=int, default=None, help="override data/train seeds")
    sub.add_argument("--out", default=None, help="output directory")
    if checkpoint_help is not None:
        sub.add_argument(
            "--checkpoint", required=checkpoint_required, default=None, help=checkpoint_help
        )
    if split_default is not None:
        sub.add_argument(
            "--split",
            default=split_default,
            help="train, val, test or foldN (default %(default)s)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodseg",
        description="Lung-nodule segmentation pipeline: preprocessing, "
        "two-phase training, cross-validation, evaluation and reporting.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("preprocess", help="volumes + annotations -> patch dataset")
    _add_run_flags(p)
    p.set_defaults(handler=_cmd_preprocess)

    p = subs.add_parser("pretrain", help="train with plain sigmoid output")
    _add_run_flags(p, checkpoint_help="resume from this checkpoint", split_default="train")
    p.set_defaults(handler=lambda a: _cmd_train(a, "pretrain"))

    p = subs.add_parser("finetune", help="train with the variational output layer")
    _add_run_flags(p, checkpoint_help="resume from this checkpoint", split_default="train")
    p.set_defaults(handler=lambda a: _cmd_train(a, "finetune"))

    p = subs.add_parser("crossval", help="k-fold train/evaluate over assigned folds")
    _add_run_flags(p)
    p.set_defaults(handler=_cmd_crossval)

    p = subs.add_parser("evaluate", help="metrics.json/.csv for a checkpoint on a split")
    _add_run_flags(
        p,
        checkpoint_help="checkpoint directory to evaluate",
        checkpoint_required=True,
        split_default="test",
    )
    p.set_defaults(handler=_cmd_evaluate)

    p = subs.add_parser("predict", help="per-slice probability maps and masks")
    _add_run_flags(
        p,
        checkpoint_help="checkpoint directory to predict with",
        checkpoint_required=True,
        split_default="test",
    )
    p.set_defaults(handler=_cmd_predict)

    p = subs.add_parser("report", help="merge evaluation reports into one table + figure")
    p.add_argument("reports", nargs="+", help="metrics.json files to compare")
    p.add_argument("--out", default=None, help="output directory (default .)")
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # CLI boundary: report, do not traceback
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
