"""Command-line surface: generate | train | predict | eval | ablate | sweep.

Every command takes ``--config FILE`` plus repeated ``--set key=value``
overrides; the effective configuration is echoed into each artifact it
writes. Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    build_config,
    load_config,
    parse_config_text,
    parse_threshold_list,
)
from .dataio import (
    ConfigurationError,
    DatasetFormatError,
    action_segments,
    frame_label_mask,
    generate_dataset,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .evaluation import (
    UndefinedStatisticsError,
    ap_table,
    attention_statistics,
    map_at,
)
from .inference import (
    ProposalFormatError,
    predict,
    read_proposals,
    write_proposals,
)
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .numerics import softmax
from .training import (
    ABLATION_VARIANTS,
    TrainingError,
    subsample_indices,
    train,
    train_ablation,
)

VALIDATION_ERRORS = (
    ConfigError,
    ConfigurationError,
    DatasetFormatError,
    CheckpointError,
    ProposalFormatError,
    UndefinedStatisticsError,
)

SWEEP_DEFAULTS = {
    "r": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
    "latent-dim": [16, 32, 64, 128, 256, 512],
    "beta": [0.01, 0.03, 0.07, 0.1, 0.3, 0.7],
}


def _echo_lines(config: RunConfig) -> list[str]:
    return config.to_text().splitlines()


def _require_path(value: str, flag: str) -> Path:
    if not value:
        raise ConfigError(f"missing required path: pass {flag} or set it in the config")
    return Path(value)


def _resolved(args, config: RunConfig, flag_value, key: str, flag: str) -> Path:
    return _require_path(flag_value or config.path(key), flag)


def _write_jsonl(path: Path, records) -> None:
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def _split(config: RunConfig, sequences, segments, which: str):
    if which == "all":
        return sequences, segments
    train_part, test_part = split_dataset(
        sequences, segments, config.split_fraction, config.split_seed
    )
    return train_part if which == "train" else test_part


def _load_dataset_checked(path: Path):
    sequences, segments = read_dataset(path)
    if not sequences:
        raise ConfigurationError(f"dataset {path} contains no videos")
    return sequences, segments


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(args, config: RunConfig) -> int:
    out = _resolved(args, config, args.out, "paths.dataset", "--out")
    sequences, segments = generate_dataset(config.data)
    comments = [f"wsal {__version__}", f"seed = {config.seed}"] + _echo_lines(config)
    write_dataset(out, sequences, segments, config.data.num_classes, comments)

    histogram: dict[int, int] = {}
    for seq in sequences:
        histogram[seq.label] = histogram.get(seq.label, 0) + 1
    total_frames = sum(seq.num_frames for seq in sequences)
    print(f"dataset: {out}")
    print(f"videos: {len(sequences)}   frames: {total_frames}   "
          f"action segments: {len(action_segments(segments))}")
    print("label histogram: " + "  ".join(
        f"{label}:{histogram[label]}" for label in sorted(histogram)))
    return 0


def _train_once(config: RunConfig, sequences, segments, seed: int, variant: str = "+re"):
    run_cfg = config.with_seed(seed)
    return train(
        sequences,
        config.data.num_classes,
        run_cfg.train,
        run_cfg.model,
        monitor_segments=segments,
        variant=variant,
    )


def _suffixed(path: Path, seed: int, many: bool) -> Path:
    if not many:
        return path
    return path.with_name(f"{path.stem}.s{seed}{path.suffix}")


def _log_records(config: RunConfig, seed: int, log) -> list[dict]:
    header = {
        "record": "header",
        "format": "wsal-trainlog",
        "version": 1,
        "tool": f"wsal {__version__}",
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "config": config.to_text(),
    }
    return [header] + log.records


def cmd_train(args, config: RunConfig) -> int:
    dataset_path = _resolved(args, config, args.dataset, "paths.dataset", "--dataset")
    out = _resolved(args, config, args.out, "paths.checkpoint", "--out")
    sequences, segments = _load_dataset_checked(dataset_path)
    train_seqs, train_segs = _split(config, sequences, segments, "train")

    many = args.seeds > 1
    for k in range(args.seeds):
        seed = config.seed + k
        run_cfg = config.with_seed(seed)
        ckpt_path = _suffixed(out, seed, many)
        log_path = None
        if args.log or config.path("paths.log"):
            log_path = _suffixed(
                _resolved(args, config, args.log, "paths.log", "--log"), seed, many
            )
        try:
            if args.resume_from:
                bundle, start_epoch, _ = load_checkpoint(args.resume_from)
                if bundle.d != train_seqs[0].dim:
                    raise ConfigurationError(
                        f"checkpoint feature dim {bundle.d} != dataset dim "
                        f"{train_seqs[0].dim}"
                    )
                model, log = train(
                    train_seqs, config.data.num_classes, run_cfg.train,
                    run_cfg.model, monitor_segments=train_segs,
                    initial_model=bundle, start_epoch=start_epoch,
                )
                end_epoch = start_epoch + run_cfg.train.epochs
            else:
                model, log = _train_once(config, train_seqs, train_segs, seed)
                end_epoch = run_cfg.train.epochs
        except TrainingError as exc:
            partial = getattr(exc, "partial_log", None)
            if log_path is not None and partial is not None:
                _write_jsonl(log_path, _log_records(run_cfg, seed, partial))
            raise
        save_checkpoint(model, ckpt_path, epoch=end_epoch, config_echo=run_cfg.to_text())
        if log_path is not None:
            _write_jsonl(log_path, _log_records(run_cfg, seed, log))
        last = log.records[-1] if log.records else {}
        auc = last.get("attention_auc")
        print(f"seed {seed}: checkpoint {ckpt_path}  epochs {end_epoch}"
              + (f"  attention_auc {auc:.3f}" if auc is not None else ""))
    return 0


def cmd_predict(args, config: RunConfig) -> int:
    dataset_path = _resolved(args, config, args.dataset, "paths.dataset", "--dataset")
    ckpt_path = _resolved(args, config, args.checkpoint, "paths.checkpoint", "--checkpoint")
    out = _resolved(args, config, args.out, "paths.proposals", "--out")
    sequences, segments = _load_dataset_checked(dataset_path)
    model, _, _ = load_checkpoint(ckpt_path)
    if model.d != sequences[0].dim:
        raise ConfigurationError(
            f"checkpoint feature dim {model.d} != dataset dim {sequences[0].dim}"
        )
    part_seqs, _ = _split(config, sequences, segments, args.split)

    proposals = []
    for seq in part_seqs:
        proposals.extend(predict(model, seq, config.infer))
    write_proposals(
        out,
        proposals,
        header_extra={
            "tool": f"wsal {__version__}",
            "seed": config.seed,
            "split": args.split,
            "split_fraction": config.split_fraction,
            "split_seed": config.split_seed,
            "config": config.to_text(),
        },
    )
    print(f"proposals: {out}  videos: {len(part_seqs)}  proposals: {len(proposals)}")
    return 0


def _collect_attention_stats(config: RunConfig, model, part_seqs, part_segs, tstar):
    lam_by, cls_by, gt_by, ctx_by = {}, {}, {}, {}
    for seq in part_seqs:
        if seq.label < 1:
            continue
        idx = subsample_indices(seq.num_frames, config.infer.max_frames)
        x = seq.features[idx].astype(np.float64)
        lam, _ = model.attention.forward(x)
        probs = softmax(model.classifier.logits(x))
        gt = frame_label_mask(seq, part_segs, "action")[idx]
        if not gt.any():
            continue
        lam_by[seq.video_id] = lam
        cls_by[seq.video_id] = probs[:, seq.label]
        gt_by[seq.video_id] = gt
        ctx_by[seq.video_id] = frame_label_mask(seq, part_segs, "context")[idx]
    stats = attention_statistics(lam_by, cls_by, gt_by, tstar)
    ctx_total = sum(int(m.sum()) for m in ctx_by.values())
    ctx_hot = sum(
        int((lam_by[v] >= tstar)[m].sum()) for v, m in ctx_by.items()
    )
    context_fraction = (ctx_hot / ctx_total) if ctx_total else None
    return stats, context_fraction


def cmd_eval(args, config: RunConfig) -> int:
    dataset_path = _resolved(args, config, args.dataset, "paths.dataset", "--dataset")
    proposal_paths = [Path(p) for p in args.proposals] if args.proposals else [
        _require_path(config.path("paths.proposals"), "--proposals")
    ]
    out = args.out or config.path("paths.metrics")
    sequences, segments = _load_dataset_checked(dataset_path)
    thresholds = (
        parse_threshold_list(args.thresholds) if args.thresholds else config.thresholds()
    )

    records = [{
        "record": "header",
        "format": "wsal-metrics",
        "version": 1,
        "tool": f"wsal {__version__}",
        "seed": config.seed,
        "config": config.to_text(),
    }]
    per_run_maps: dict[float, list[float]] = {t: [] for t in thresholds}
    avg_maps: list[float] = []

    for run_idx, ppath in enumerate(proposal_paths):
        proposals, header = read_proposals(ppath)
        unit = header.get("unit", "frames")
        frame_seconds = float(header.get("frame_seconds", 1.0))
        split_name = header.get("split", "test")
        _, part_segs = _split(config, sequences, segments, split_name)
        gts = action_segments(part_segs)
        if unit == "seconds":
            proposals = [
                type(p)(p.video_id, int(round(p.start / frame_seconds)),
                        int(round(p.end / frame_seconds)), p.label, p.score)
                for p in proposals
            ]
        elif unit != "frames":
            raise ProposalFormatError(f"{ppath}: unknown unit {unit!r}")

        table = ap_table(proposals, gts, thresholds)
        per_thr, avg = map_at(proposals, gts, thresholds)
        avg_maps.append(avg)
        for thr in thresholds:
            per_run_maps[thr].append(per_thr[thr])
            for cls, ap in sorted(table[thr].items()):
                records.append({
                    "record": "ap", "run": run_idx, "threshold": thr,
                    "class": cls, "ap": ap,
                })
            records.append({
                "record": "map", "run": run_idx, "threshold": thr,
                "map": per_thr[thr],
            })
        records.append({"record": "map_avg", "run": run_idx, "map_avg": avg})

    summary = {
        "record": "summary",
        "runs": len(proposal_paths),
        "map_avg_mean": float(np.mean(avg_maps)),
        "map_avg_std": float(np.std(avg_maps)),
    }
    for thr in thresholds:
        summary[f"map@{thr:g}_mean"] = float(np.mean(per_run_maps[thr]))
        summary[f"map@{thr:g}_std"] = float(np.std(per_run_maps[thr]))
    records.append(summary)

    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        if model.d != sequences[0].dim:
            raise ConfigurationError(
                f"checkpoint feature dim {model.d} != dataset dim {sequences[0].dim}"
            )
        part_seqs, part_segs = _split(config, sequences, segments, args.split)
        stats, context_fraction = _collect_attention_stats(
            config, model, part_seqs, part_segs, config.eval_tstar
        )
        stat_rec = {
            "record": "attention_stats",
            "tstar": config.eval_tstar,
            "falsely_captured": stats.falsely_captured,
            "omitted": stats.omitted,
            "cls_fp_filtered": stats.cls_fp_filtered,
            "att_recovered_fn": stats.att_recovered_fn,
        }
        if context_fraction is not None:
            stat_rec["context_attention_fraction"] = context_fraction
        records.append(stat_rec)

    if out:
        _write_jsonl(Path(out), records)

    print("threshold  mAP(mean±std over runs)")
    for thr in thresholds:
        vals = per_run_maps[thr]
        print(f"{thr:9.2f}  {np.mean(vals):.4f} ± {np.std(vals):.4f}")
    print(f"mAP@AVG    {np.mean(avg_maps):.4f} ± {np.std(avg_maps):.4f}")
    for rec in records:
        if rec["record"] == "attention_stats":
            print(
                "attention stats: "
                f"falsely_captured {rec['falsely_captured']:.3f}  "
                f"omitted {rec['omitted']:.3f}  "
                f"cls_fp_filtered {rec['cls_fp_filtered']:.3f}  "
                f"att_recovered_fn {rec['att_recovered_fn']:.3f}"
            )
            if "context_attention_fraction" in rec:
                print(f"context frames with attention >= tstar: "
                      f"{rec['context_attention_fraction']:.3f}")
    return 0


def _evaluate_model(config: RunConfig, model, test_seqs, test_segs, thresholds):
    proposals = []
    for seq in test_seqs:
        proposals.extend(predict(model, seq, config.infer))
    per_thr, _ = map_at(proposals, action_segments(test_segs), thresholds)
    return per_thr


def cmd_ablate(args, config: RunConfig) -> int:
    dataset_path = _resolved(args, config, args.dataset, "paths.dataset", "--dataset")
    out = args.out or config.path("paths.metrics")
    sequences, segments = _load_dataset_checked(dataset_path)
    (train_seqs, train_segs) = _split(config, sequences, segments, "train")
    (test_seqs, test_segs) = _split(config, sequences, segments, "test")
    thresholds = (
        parse_threshold_list(args.thresholds) if args.thresholds else [0.5]
    )

    records = [{
        "record": "header", "format": "wsal-ablation", "version": 1,
        "tool": f"wsal {__version__}", "seed": config.seed,
        "seeds": args.seeds, "config": config.to_text(),
    }]
    results: dict[str, dict[float, list[float]]] = {
        v: {t: [] for t in thresholds} for v in ABLATION_VARIANTS
    }
    for variant in ABLATION_VARIANTS:
        for k in range(args.seeds):
            seed = config.seed + k
            run_cfg = config.with_seed(seed)
            model, _ = train_ablation(
                train_seqs, config.data.num_classes, run_cfg.train, variant,
                run_cfg.model, monitor_segments=train_segs,
            )
            per_thr = _evaluate_model(run_cfg, model, test_seqs, test_segs, thresholds)
            for thr in thresholds:
                results[variant][thr].append(per_thr[thr])
                records.append({
                    "record": "ablate", "variant": variant, "seed": seed,
                    "threshold": thr, "map": per_thr[thr],
                })

    print(f"{'variant':8s}  " + "  ".join(f"mAP@{t:g}" for t in thresholds))
    for variant in ABLATION_VARIANTS:
        cells = []
        for thr in thresholds:
            vals = results[variant][thr]
            records.append({
                "record": "ablate_summary", "variant": variant, "threshold": thr,
                "mean": float(np.mean(vals)), "std": float(np.std(vals)),
            })
            cells.append(f"{np.mean(vals):.4f}±{np.std(vals):.4f}")
        print(f"{variant:8s}  " + "  ".join(cells))

    for thr in thresholds:
        re_vals = np.array(results["+re"][thr])
        guide_vals = np.array(results["+guide"][thr])
        diff = re_vals - guide_vals
        rec = {
            "record": "ablate_increment", "threshold": thr,
            "mean_diff": float(diff.mean()),
            "wins": int((diff > 0).sum()), "runs": args.seeds,
        }
        records.append(rec)
        print(f"(+re - +guide) @ {thr:g}: mean {diff.mean():+.4f}, "
              f"wins {rec['wins']}/{args.seeds}")

    if out:
        _write_jsonl(Path(out), records)
    return 0


def cmd_sweep(args, config: RunConfig) -> int:
    dataset_path = _resolved(args, config, args.dataset, "paths.dataset", "--dataset")
    out = args.out or config.path("paths.metrics")
    sequences, segments = _load_dataset_checked(dataset_path)
    (train_seqs, train_segs) = _split(config, sequences, segments, "train")
    (test_seqs, test_segs) = _split(config, sequences, segments, "test")

    parameter = args.parameter
    values = (
        [float(v) for v in args.values]
        if args.values
        else SWEEP_DEFAULTS[parameter]
    )
    thresholds = [0.5]

    records = [{
        "record": "header", "format": "wsal-sweep", "version": 1,
        "tool": f"wsal {__version__}", "parameter": parameter,
        "values": values, "seed": config.seed, "seeds": args.seeds,
        "config": config.to_text(),
    }]
    print(f"{parameter:>10s}  mAP@0.5 (per seed)")
    summary_rows = []
    for value in values:
        overrides = []
        if parameter == "r":
            overrides.append(f"model.prior_r={value}")
        elif parameter == "latent-dim":
            overrides.append(f"model.latent_dim={int(value)}")
        elif parameter == "beta":
            overrides.append(f"loss.beta={value}")
        maps = []
        for k in range(args.seeds):
            seed = config.seed + k
            raw = parse_config_text(config.to_text(), "<sweep>")
            for item in overrides:
                key, _, val = item.partition("=")
                raw[key] = val
            run_cfg = build_config(raw).with_seed(seed)
            model, _ = train(
                train_seqs, config.data.num_classes, run_cfg.train, run_cfg.model,
                monitor_segments=train_segs,
            )
            per_thr = _evaluate_model(run_cfg, model, test_seqs, test_segs, thresholds)
            maps.append(per_thr[0.5])
            records.append({
                "record": "sweep", "parameter": parameter, "value": value,
                "seed": seed, "threshold": 0.5, "map": per_thr[0.5],
            })
        mean, std = float(np.mean(maps)), float(np.std(maps))
        records.append({
            "record": "sweep_summary", "parameter": parameter, "value": value,
            "threshold": 0.5, "mean": mean, "std": std,
        })
        summary_rows.append((value, mean, std))
        print(f"{value:>10g}  " + "  ".join(f"{m:.4f}" for m in maps)
              + f"   mean {mean:.4f} ± {std:.4f}")

    if out:
        _write_jsonl(Path(out), records)
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsal",
        description="Weakly-supervised temporal action localization on "
        "synthetic feature benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"wsal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="plain-text key = value configuration file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override one configuration key",
        )

    p = sub.add_parser("generate", help="write a synthetic dataset and its annotations")
    common(p)
    p.add_argument("--out", help="dataset path (default: paths.dataset)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on the train split of a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="training-log path (JSON lines)")
    p.add_argument("--seeds", type=int, default=1, help="train this many seeds")
    p.add_argument("--resume-from", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write proposals for a dataset split")
    common(p)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--out", help="proposal file path")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score proposal files against ground truth")
    common(p)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--proposals", nargs="+", help="one or more proposal files")
    p.add_argument("--checkpoint", help="checkpoint for attention statistics")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--thresholds", help="IoU thresholds, 'a:b:c' or comma list")
    p.add_argument("--out", help="metrics file path (JSON lines)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every loss-term variant")
    common(p)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--thresholds", help="IoU thresholds (default 0.5)")
    p.add_argument("--out", help="table path (JSON lines)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train and score across one hyper-parameter")
    common(p)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument(
        "--parameter", required=True, choices=tuple(SWEEP_DEFAULTS),
    )
    p.add_argument("--values", nargs="+", help="values to sweep (defaults per parameter)")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--out", help="table path (JSON lines)")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        return args.func(args, config)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
