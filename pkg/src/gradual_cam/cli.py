import argparse
import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .attribution import method_names
from .autonet import ARCHITECTURES, encode_model, init_model, load_model
from .config import config_path, load_config
from .errors import EmptyCohortError, GradualCamError
from .explain import explain_image, parse_method_tag
from .fia import (
    REPLACEMENTS,
    FiaConfig,
    headline_lines,
    run_fia,
    significant_pixels,
    write_fia_report,
)
from .netpbm import encode_pgm, encode_ppm, read_pgm
from .overlay import OverlaySpec, render_overlay
from .run_log import log, record_event, resolve_log_path
from .trainer import TrainConfig, export_dataset, generate_dataset, import_dataset, train
from .util import atomic_write_files, matrix_to_csv

EXIT_ERROR = 1
EXIT_EMPTY_COHORT = 3
DEFAULT_EVAL_METHODS = ["gradcam-bilinear", "gradcam-gradual"]
STAGE_GLOB = "stage-*.csv"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _unit_closed(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _unit_open(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _method_tag(text: str) -> str:
    try:
        parse_method_tag(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


def _pick(value: Any, cfg: Dict[str, Any], key: str) -> Any:
    return value if value is not None else cfg[key]


def _load_cfg(args: argparse.Namespace) -> Dict[str, Any]:
    return load_config(Path(args.config) if args.config else None)


def _load_checked_model(path: str):
    model = load_model(Path(path).expanduser())
    model.validate(strict=True)
    return model


def cmd_train(args: argparse.Namespace) -> int:
    start = time.perf_counter()
    out_path = Path(args.out).expanduser()
    log_path = None
    try:
        cfg = _load_cfg(args)
        log_path = resolve_log_path(cfg.get("run_log_path"), out_path.parent)
        config = TrainConfig(
            seed=args.seed,
            epochs=_pick(args.epochs, cfg, "epochs"),
            learning_rate=_pick(args.lr, cfg, "learning_rate"),
            batch_size=_pick(args.batch_size, cfg, "batch_size"),
            train_count=_pick(args.train_count, cfg, "train_count"),
            test_count=_pick(args.test_count, cfg, "test_count"),
        )
        config.validate()
        model = init_model(args.arch, args.seed)
        _, height, width = model.input_shape
        total = config.train_count + config.test_count
        dataset = generate_dataset(args.seed, total, height, width)
        log(f"Training {args.arch} on {config.train_count} images for {config.epochs} epoch(s)")
        report = train(model, dataset, config, log_path=log_path, verbose=args.verbose)
        report_path = out_path.with_name(out_path.name + ".report.json")
        report_json = json.dumps(report.to_dict(), indent=2) + "\n"
        atomic_write_files(
            out_path.parent,
            [(out_path.name, encode_model(report.model)),
             (report_path.name, report_json.encode("utf-8"))],
        )
    except (GradualCamError, OSError, ValueError) as exc:
        record_event(log_path, "train.done", start, success=False, error_type=type(exc).__name__,
                     context={"arch": args.arch, "seed": args.seed})
        print(str(exc))
        return EXIT_ERROR
    record_event(log_path, "train.done", start,
                 context={"arch": args.arch, "seed": args.seed, "accuracy": report.test_accuracy})
    print(f"Wrote: {out_path}")
    print(f"Report: {report_path}")
    print(f"Accuracy: test {report.test_accuracy:.4f} (train {report.train_accuracy:.4f})")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    start = time.perf_counter()
    out_dir = Path(args.out).expanduser()
    log_path = None
    try:
        cfg = _load_cfg(args)
        log_path = resolve_log_path(cfg.get("run_log_path"), out_dir)
        threshold = _pick(args.threshold, cfg, "threshold")
        blend = _pick(args.blend, cfg, "blend")
        model = _load_checked_model(args.model)
        image = read_pgm(Path(args.image).expanduser())
        explanation = explain_image(
            model,
            image,
            args.method,
            args.gradual,
            target_layer=args.target_layer,
            class_idx=args.class_idx,
        )
        count, mask = significant_pixels(explanation.saliency, threshold)
        overlay = render_overlay(OverlaySpec(image, explanation.saliency, blend))
        outputs: List[Tuple[str, bytes]] = [
            ("saliency.csv", matrix_to_csv(explanation.saliency).encode("utf-8")),
            ("base.csv", matrix_to_csv(explanation.base.map).encode("utf-8")),
            ("overlay.ppm", encode_ppm(overlay)),
            ("significant.pgm", encode_pgm(image * mask)),
        ]
        for number, stage in enumerate(explanation.stages, start=1):
            outputs.append((f"stage-{number}.csv", matrix_to_csv(stage).encode("utf-8")))
        atomic_write_files(out_dir, outputs, stale=[STAGE_GLOB])
    except (GradualCamError, OSError, ValueError) as exc:
        record_event(log_path, "explain", start, success=False, error_type=type(exc).__name__,
                     context={"method": args.method, "gradual": args.gradual})
        print(str(exc))
        return EXIT_ERROR
    record_event(log_path, "explain", start,
                 context={"method": explanation.tag, "gradual": args.gradual, "arch": model.name})
    print(f"Predicted: {explanation.label} (class {explanation.predicted_class})")
    print(f"Confidence: {explanation.confidence:.6f}")
    print(f"Significant pixels: {count}")
    if explanation.stages:
        print(f"Stages: {len(explanation.stages)}")
    print(f"Wrote: {out_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    start = time.perf_counter()
    out_dir = Path(args.out).expanduser()
    log_path = None
    try:
        cfg = _load_cfg(args)
        log_path = resolve_log_path(cfg.get("run_log_path"), out_dir)
        config = FiaConfig(
            steps=_pick(args.steps, cfg, "steps"),
            threshold=_pick(args.threshold, cfg, "threshold"),
            replacement=_pick(args.replacement, cfg, "replacement"),
            runs=_pick(args.runs, cfg, "runs"),
            warmup=_pick(args.warmup, cfg, "warmup_runs"),
            min_confidence=_pick(args.min_confidence, cfg, "min_confidence"),
            seed=args.seed,
            max_images=args.max_images,
        )
        config.validate()
        model = _load_checked_model(args.model)
        dataset = import_dataset(Path(args.data).expanduser())
        report = run_fia(model, dataset, args.methods, config, log_path=log_path)
        written = write_fia_report(report, out_dir)
    except EmptyCohortError as exc:
        record_event(log_path, "evaluate.done", start, success=False,
                     error_type="EmptyCohortError")
        print(f"Empty cohort: {exc}")
        return EXIT_EMPTY_COHORT
    except (GradualCamError, OSError, ValueError) as exc:
        record_event(log_path, "evaluate.done", start, success=False,
                     error_type=type(exc).__name__)
        print(str(exc))
        return EXIT_ERROR
    record_event(log_path, "evaluate.done", start,
                 context={"images": report.images, "arch": model.name, "runs": config.runs})
    for line in headline_lines(report):
        print(line)
    print(f"Report: {written[0]}")
    return 0


def cmd_dataset(args: argparse.Namespace) -> int:
    try:
        input_shape, _ = ARCHITECTURES[args.arch]()
        dataset = generate_dataset(args.seed, args.count, input_shape[1], input_shape[2])
        manifest = export_dataset(dataset, Path(args.out).expanduser())
    except (GradualCamError, OSError, ValueError) as exc:
        print(str(exc))
        return EXIT_ERROR
    print(f"Wrote {len(dataset)} image(s): {manifest}")
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    try:
        cfg = _load_cfg(args)
    except (OSError, ValueError) as exc:
        print(str(exc))
        return EXIT_ERROR
    print(f"Config: {config_path(Path(args.config) if args.config else None)}")
    for key, value in cfg.items():
        print(f"{key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Config JSON path override")

    parser = argparse.ArgumentParser(prog="gradual-cam")
    sub = parser.add_subparsers(dest="command", required=True)
    arches = sorted(ARCHITECTURES)

    train_p = sub.add_parser("train", parents=[common], help="Train a model on synthetic shapes")
    train_p.add_argument("--arch", choices=arches, default="net-a", help="Architecture")
    train_p.add_argument("--seed", type=_non_negative_int, default=0, help="Random seed")
    train_p.add_argument("--out", type=str, required=True, help="Weight file to write")
    train_p.add_argument("--epochs", type=_positive_int, default=None, help="Epoch count")
    train_p.add_argument("--lr", type=float, default=None, help="Learning rate")
    train_p.add_argument("--batch-size", type=_positive_int, default=None, help="Batch size")
    train_p.add_argument("--train-count", type=_positive_int, default=None, help="Train images")
    train_p.add_argument("--test-count", type=_positive_int, default=None, help="Test images")
    train_p.add_argument("--verbose", action="store_true", help="Print per-epoch loss")
    train_p.set_defaults(func=cmd_train)

    explain = sub.add_parser("explain", parents=[common], help="Explain one image")
    explain.add_argument("--model", type=str, required=True, help="Weight file")
    explain.add_argument("--image", type=str, required=True, help="Binary PGM input image")
    explain.add_argument("--method", choices=method_names(), default="gradcam",
                         help="Base attribution method")
    explain.add_argument("--gradual", action="store_true", help="Apply gradual extrapolation")
    explain.add_argument("--out", type=str, required=True, help="Output directory")
    explain.add_argument("--threshold", type=_unit_open, default=None,
                         help="Significant-pixel threshold (fraction of max)")
    explain.add_argument("--blend", type=_unit_closed, default=None, help="Overlay blend weight")
    explain.add_argument("--target-layer", type=_non_negative_int, default=None,
                         help="Tape index of the explained layer")
    explain.add_argument("--class", dest="class_idx", type=_non_negative_int, default=None,
                         help="Class to explain (default: predicted)")
    explain.set_defaults(func=cmd_explain)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Run the FIA evaluation suite")
    evaluate.add_argument("--model", type=str, required=True, help="Weight file")
    evaluate.add_argument("--data", type=str, required=True, help="Dataset directory")
    evaluate.add_argument("--methods", type=_method_tag, nargs="+",
                          default=list(DEFAULT_EVAL_METHODS),
                          help="Method tags, e.g. gradcam-bilinear cebp-gradual")
    evaluate.add_argument("--out", type=str, required=True, help="Report directory")
    evaluate.add_argument("--steps", type=_positive_int, default=None, help="Flip steps")
    evaluate.add_argument("--threshold", type=_unit_open, default=None,
                          help="Significant-pixel threshold (fraction of max)")
    evaluate.add_argument("--replacement", choices=REPLACEMENTS, default=None,
                          help="Flipped pixel replacement")
    evaluate.add_argument("--runs", type=_positive_int, default=None, help="Timed runs")
    evaluate.add_argument("--warmup", type=_non_negative_int, default=None, help="Warm-up runs")
    evaluate.add_argument("--min-confidence", type=_unit_closed, default=None,
                          help="Minimum confidence of a qualifying image")
    evaluate.add_argument("--max-images", type=_positive_int, default=None,
                          help="Random subsample of the qualifying cohort")
    evaluate.add_argument("--seed", type=_non_negative_int, default=0, help="Subsampling seed")
    evaluate.set_defaults(func=cmd_evaluate)

    dataset = sub.add_parser("dataset", help="Export a synthetic shapes dataset")
    dataset.add_argument("--arch", choices=arches, default="net-a", help="Architecture input size")
    dataset.add_argument("--seed", type=_non_negative_int, default=0, help="Random seed")
    dataset.add_argument("--count", type=_positive_int, default=300, help="Image count")
    dataset.add_argument("--out", type=str, required=True, help="Output directory")
    dataset.set_defaults(func=cmd_dataset)

    cfg = sub.add_parser("config", parents=[common], help="Show configuration")
    cfg.set_defaults(func=cmd_config)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
