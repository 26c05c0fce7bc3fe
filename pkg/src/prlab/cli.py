"""Command-line entry point: ``prlab {simulate,ablate,eval,histogram}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from prlab import config as config_mod
from prlab import experiment
from prlab.evaluation import Detection, detections_as_proposals, evaluate, imbalance_report
from prlab.geometry import iou_matrix
from prlab.ingest import FORMATS, AnnotationCorpus, IngestError, load_detections, load_ground_truth

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _bool_list(text: str) -> tuple[bool, ...]:
    table = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
    try:
        vals = tuple(table[v.strip().lower()] for v in text.split(",") if v.strip())
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"expected on/off values, got {exc.args[0]!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prlab", description="Few-shot detection laboratory on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="base training, K-shot fine-tuning and all reports")
    s.add_argument("--config", help="experiment JSON (default: bundled config)")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--k", type=_int_list, help="comma-separated shot counts, e.g. 1,2,3,5,10")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.add_argument("--threads", type=int, help="worker processes (default: CPU count; PRLAB_THREADS caps it)")

    a = sub.add_parser("ablate", help="gamma x refinement x K grid over several seeds")
    a.add_argument("--config")
    a.add_argument("--gammas", type=_float_list, help="e.g. 0,0.5,1")
    a.add_argument("--refine", type=_bool_list, help="e.g. on,off")
    a.add_argument("--k", type=_int_list)
    a.add_argument("--seeds", type=_int_list)
    a.add_argument("--out")
    a.add_argument("--threads", type=int)

    e = sub.add_parser("eval", help="score a detections file against ground truth")
    e.add_argument("--gt", required=True, help="VOC XML directory or file, COCO JSON or dataset JSON")
    e.add_argument("--format", required=True, choices=FORMATS)
    e.add_argument("--dets", required=True, help="detections JSON array")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--range", action="store_true", help="also report AP averaged over IoU 0.50:1.00")
    e.add_argument("--recall-k", type=int, help="class-agnostic recall of the top-k detections")
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--trace", action="store_true", help="include the per-detection matching trace")

    h = sub.add_parser("histogram", help="max-IoU histogram of external proposals")
    h.add_argument("--gt", required=True)
    h.add_argument("--format", required=True, choices=FORMATS)
    h.add_argument("--proposals", required=True, help="detections JSON; class names are ignored")
    h.add_argument("--compare", help="second proposals file, reported as the novel side of an imbalance table")
    h.add_argument("--compare-gt", help="ground truth for --compare (default: --gt)")
    h.add_argument("--top-k", type=int, default=100)
    h.add_argument("--out", help="output directory (default: print to stdout)")
    return p


# ---------------------------------------------------------------- commands

def _load_config(path: str | None) -> config_mod.ExperimentConfig:
    return config_mod.load(path)


def _write(out: Path, files: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be >= 0")
        cfg = cfg.with_seed(args.seed)
    if args.k is not None:
        if min(args.k) < 1:
            raise UsageError("--k values must be >= 1")
        cfg = replace(cfg, data=replace(cfg.data, k=args.k))
    out = Path(args.out or cfg.output_dir)
    result = experiment.run_simulation(cfg, _threads(args.threads))
    _write(out, result.artifacts())
    for run in result.runs:
        print(f"K={run.k}")
        print(run.report.table())
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    ab = cfg.ablation
    if args.gammas is not None:
        if min(args.gammas) < 0:
            raise UsageError("--gammas must be non-negative")
        ab = replace(ab, gammas=args.gammas)
    if args.refine is not None:
        ab = replace(ab, refine=args.refine)
    if args.k is not None:
        if min(args.k) < 1:
            raise UsageError("--k values must be >= 1")
        ab = replace(ab, k=args.k)
    if args.seeds is not None:
        ab = replace(ab, seeds=args.seeds)
    cfg = replace(cfg, ablation=ab)
    out = Path(args.out or cfg.output_dir)
    rows = experiment.run_ablation(cfg, _threads(args.threads))
    _write(out, {"config.resolved.json": cfg.to_json(), "ablation.csv": experiment.ablation_csv(rows),
                 "ablation.json": experiment.ablation_json(rows)})
    print(experiment.ablation_csv([r for r in rows if r["kind"] == "aggregate"]), end="")
    print(f"artifacts written to {out}")
    return EXIT_OK


def _inputs(gt: str, fmt: str, dets: str) -> tuple[AnnotationCorpus, list[Detection]]:
    corpus = load_ground_truth(gt, fmt)
    return corpus, load_detections(dets, corpus.classes, add_classes=True)


def cmd_eval(args) -> int:
    if not 0 < args.iou <= 1:
        raise UsageError("--iou must lie in (0, 1]")
    if args.recall_k is not None and args.recall_k < 1:
        raise UsageError("--recall-k must be >= 1")
    corpus, dets = _inputs(args.gt, args.format, args.dets)
    unknown = sorted({d.scene_id for d in dets} - set(corpus.scenes))
    if unknown:
        raise UsageError(f"detections reference unknown scene ids: {', '.join(unknown[:5])}")
    rep = evaluate(dets, corpus.scenes, corpus.class_names(), args.iou, args.range, args.recall_k,
                   with_trace=args.trace)
    # a class with ground truth but no detections scores 0, so an empty file gives mAP 0
    print(rep.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json(include_trace=args.trace))
    return EXIT_OK


def proposal_ious(corpus: AnnotationCorpus, dets: Sequence[Detection], top_k: int) -> list[np.ndarray]:
    """Max GT IoU of each scene's top-k proposals, one array per scene in corpus order."""
    props = detections_as_proposals(dets)
    out = []
    for sid, scene in corpus.scenes.items():
        boxes, scores = props.get(sid, (np.zeros((0, 4)), np.zeros(0)))
        order = np.argsort(-np.asarray(scores), kind="stable")[:top_k]
        boxes = boxes[order]
        if len(boxes) == 0 or len(scene.boxes) == 0:
            out.append(np.zeros(len(boxes)))
        else:
            out.append(iou_matrix(boxes, scene.boxes).max(axis=1))
    return out


def histogram_csv(runs: list[np.ndarray], edges: np.ndarray) -> str:
    vals = np.concatenate(runs) if runs else np.zeros(0)
    counts = np.histogram(vals, bins=edges)[0]
    lines = ["bin_lo,bin_hi,count,per_image"]
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]!r},{edges[i + 1]!r},{int(c)},{c / max(len(runs), 1)!r}")
    return "\n".join(lines) + "\n"


def cmd_histogram(args) -> int:
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    corpus, dets = _inputs(args.gt, args.format, args.proposals)
    runs = proposal_ious(corpus, dets, args.top_k)
    edges = np.round(np.linspace(0.0, 1.0, 11), 10)
    files = {"proposal_hist.csv": histogram_csv(runs, edges)}
    if args.compare:
        corpus2, dets2 = _inputs(args.compare_gt or args.gt, args.format, args.compare)
        files["imbalance.csv"] = imbalance_report(runs, proposal_ious(corpus2, dets2, args.top_k)).to_csv()
    if args.out:
        _write(Path(args.out), files)
    else:
        for name, text in files.items():
            print(f"# {name}")
            print(text, end="")
    return EXIT_OK


def _threads(value: int | None) -> int:
    try:
        return experiment.worker_count(value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


COMMANDS = {"simulate": cmd_simulate, "ablate": cmd_ablate, "eval": cmd_eval, "histogram": cmd_histogram}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, config_mod.ConfigError, IngestError) as exc:
        print(f"prlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"prlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"prlab: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
