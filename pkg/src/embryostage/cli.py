"""Command-line entry points.

Five subcommands compose through documented on-disk formats and nothing
else: ``generate`` writes a dataset directory, ``train`` turns one into a
checkpoint plus a JSONL log, ``evaluate`` writes per-frame prediction files
and a metrics report, ``decode`` reapplies monotone decoding to prediction
files, and ``report`` renders one or more reports as a comparison table.
Every command drops a ``run.json`` with the resolved configuration, seed,
and package version — no timestamps, so identical invocations produce
byte-identical trees.

Exit codes: 0 ok, 2 usage or configuration problem, 3 numeric failure
during training, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .core import Rng, transitions_from_labels
from .decode import EMD, NLL, decode_monotone, read_predictions, write_predictions
from .evaluate import (
    evaluate,
    evaluate_naive,
    format_report,
    naive_baseline,
    predict_video,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import ConfigError, SynthConfig, generate_dataset, load_dataset, save_dataset
from .train import NumericError, TrainConfig, format_log, train

__all__ = ["main", "render_table"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# CLI spelling -> internal mode name
MODE_NAMES = {
    "rl-entropy": "rl_entropy",
    "rl-no-entropy": "rl_no_entropy",
    "bilinear": "bilinear",
    "fullframe": "classifier_only_fullframe",
}
MODE_LABELS = {
    "rl_entropy": "detcls (rl-entropy)",
    "rl_no_entropy": "detcls (rl-no-entropy)",
    "bilinear": "detcls (bilinear)",
    "classifier_only_fullframe": "fullframe",
}

_TUPLE_FIELDS = ("videos_per_split", "stage_duration_prior")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _load_config_file(path: str | None) -> dict:
    """Optional JSON override file with sections {"synth", "train", "model"}."""
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - {"synth", "train", "model"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"config section {section!r} must be an object")
    return raw


def _synth_config(overrides: dict) -> SynthConfig:
    kwargs = dict(overrides)
    for name in _TUPLE_FIELDS:
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    try:
        return SynthConfig(**kwargs)
    except TypeError as exc:  # unknown field name
        raise ConfigError(str(exc)) from None


def _section_config(cls, overrides: dict):
    try:
        return cls(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_run_record(out_dir: Path, args: argparse.Namespace, resolved: dict) -> None:
    record = {
        "command": args.command,
        "args": {
            k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")
        },
        "resolved": resolved,
        "version": __version__,
    }
    _write_json(out_dir / "run.json", record)


def _video_stem(video_id: int) -> str:
    return f"v{video_id:04d}"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate(args: argparse.Namespace) -> int:
    sections = _load_config_file(args.config)
    overrides = dict(sections.get("synth", {}))
    if args.videos is not None:
        parts = args.videos.split(",")
        if len(parts) != 3:
            raise ConfigError("--videos takes three comma-separated counts, e.g. 200,24,24")
        overrides["videos_per_split"] = tuple(int(p) for p in parts)
    if args.frames is not None:
        overrides["frames_per_video"] = args.frames
    cfg = _synth_config(overrides)

    dataset = generate_dataset(cfg, Rng(args.seed))
    out = Path(args.out)
    save_dataset(dataset, out)
    _write_run_record(out, args, {"synth": cfg.fingerprint_payload(), "seed": args.seed})
    print(f"wrote {len(dataset.videos)} videos ({dataset.fingerprint}) to {out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    sections = _load_config_file(args.config)
    model_cfg = _section_config(ModelConfig, sections.get("model", {}))
    train_cfg = _section_config(TrainConfig, sections.get("train", {}))
    dataset = load_dataset(args.data)
    mode = MODE_NAMES[args.mode]
    out = Path(args.out)

    try:
        result = train(mode, dataset, model_cfg, train_cfg, Rng(args.seed))
    except NumericError as exc:
        # keep the last good state for inspection, then report divergence
        out.mkdir(parents=True, exist_ok=True)
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.json")
        (out / "train_log.jsonl").write_text(format_log(exc.log), encoding="utf-8")
        raise

    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.json")
    (out / "train_log.jsonl").write_text(format_log(result.log), encoding="utf-8")
    _write_run_record(
        out,
        args,
        {
            "mode": mode,
            "model": vars(model_cfg).copy(),
            "train": vars(train_cfg).copy(),
            "seed": args.seed,
            "dataset_fingerprint": dataset.fingerprint,
        },
    )
    best = result.log[result.best_epoch - 1]
    print(
        f"trained {args.mode} for {len(result.log)} epochs; "
        f"best epoch {result.best_epoch} (val acc {best['val_acc']:.4f})"
    )
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    checkpoint = load_checkpoint(args.checkpoint)
    videos = dataset.split(args.split)
    if not videos:
        raise ValueError(f"split {args.split!r} is empty")

    predictions = None
    if checkpoint.dataset_fingerprint == dataset.fingerprint:
        predictions = [predict_video(checkpoint, v) for v in videos]
    report = evaluate(
        checkpoint,
        dataset,
        split=args.split,
        subset_per_stage=args.subset_per_stage,
        predictions=predictions,
    )

    base = naive_baseline(dataset.split("train"), dataset.config.n_stages)
    report["naive"] = evaluate_naive(base, videos)

    out = Path(args.out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for pred in predictions:
        write_predictions(pred_dir / f"{_video_stem(pred.video_id)}.jsonl", pred.probs)
    (out / "report.json").write_text(format_report(report), encoding="utf-8")
    _write_run_record(
        out,
        args,
        {"split": args.split, "dataset_fingerprint": dataset.fingerprint},
    )
    print(
        f"evaluated {checkpoint.train_mode} on {args.split}: "
        f"raw acc {report['raw_accuracy']:.4f}, "
        f"dp-nll acc {report['dp']['nll']['accuracy']:.4f}"
    )
    return EXIT_OK


def _cmd_decode(args: argparse.Namespace) -> int:
    pred_path = Path(args.pred)
    if pred_path.is_dir():
        files = sorted(pred_path.glob("*.jsonl"))
    elif pred_path.exists():
        files = [pred_path]
    else:
        raise FileNotFoundError(f"no predictions at {pred_path}")
    if not files:
        raise ValueError(f"no *.jsonl prediction files under {pred_path}")

    potentials = {"nll": NLL, "emd": EMD}
    wanted = list(potentials) if args.potential == "both" else [args.potential]
    out = Path(args.out)
    for name in wanted:
        pot_dir = out / name
        pot_dir.mkdir(parents=True, exist_ok=True)
        transitions: dict[str, dict[str, int]] = {}
        for path in files:
            probs = read_predictions(path)
            decoded = decode_monotone(probs, potentials[name])
            rows = "".join(f"{t},{s}\n" for t, s in enumerate(decoded.labels))
            (pot_dir / f"{path.stem}_labels.csv").write_text(
                "frame,stage_index\n" + rows, encoding="utf-8"
            )
            tt = transitions_from_labels(decoded)
            transitions[path.stem] = {str(s): tt.first_frame[s] for s in tt.stages()}
        _write_json(pot_dir / "transitions.json", transitions)
    _write_run_record(out, args, {"potentials": wanted, "n_videos": len(files)})
    print(f"decoded {len(files)} videos under {out} ({', '.join(wanted)})")
    return EXIT_OK


def _fmt_acc(value: float) -> str:
    return f"{value:.4f}"


def _fmt_frames(value: float) -> str:
    return f"{value:.3f}"


def render_table(reports: list[dict]) -> str:
    """Fixed-width comparison of evaluation reports (plus the naive row)."""
    header = [
        "model", "raw acc",
        "nll acc", "nll mae", "nll rmse",
        "emd acc", "emd mae", "emd rmse",
    ]
    rows: list[list[str]] = []
    naive = next((r["naive"] for r in reports if r.get("naive")), None)
    if naive is not None:
        tr = naive["transitions"]
        mae, rmse = _fmt_frames(tr["mae_frames"]), _fmt_frames(tr["rmse_frames"])
        rows.append(["naive", _fmt_acc(naive["raw_accuracy"]), "-", mae, rmse, "-", mae, rmse])
    for report in reports:
        label = MODE_LABELS.get(report.get("train_mode", ""), report.get("train_mode", "?"))
        row = [label, _fmt_acc(report["raw_accuracy"])]
        for potential in ("nll", "emd"):
            block = report["dp"][potential]
            row += [
                _fmt_acc(block["accuracy"]),
                _fmt_frames(block["mae_frames"]),
                _fmt_frames(block["rmse_frames"]),
            ]
        rows.append(row)

    widths = [
        max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
        for i in range(len(header))
    ]

    def fmt(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = (c.rjust(widths[i + 1]) for i, c in enumerate(cells[1:]))
        return ("  ".join([first, *rest])).rstrip()

    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    lines.append("")
    lines.append("naive transition errors use per-stage median predictions (no decoding).")
    return "\n".join(lines) + "\n"


def _cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for path in args.reports:
        reports.append(json.loads(Path(path).read_text(encoding="utf-8")))
    table = render_table(reports)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embryostage",
        description="Synthetic embryo-staging pipeline: generate, train, decode, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads",
        type=_positive_int,
        default=1,
        help="worker cap (accepted for interface stability; execution is serial)",
    )

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--videos", help="train,val,test video counts (e.g. 200,24,24)")
    p.add_argument("--frames", type=_positive_int, help="frames per video")
    p.add_argument("--config", help="JSON file with a 'synth' section of overrides")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one mode on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--mode", required=True, choices=sorted(MODE_NAMES))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file with 'train'/'model' override sections")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--subset-per-stage", type=_positive_int, default=20)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("decode", parents=[common], help="monotone-decode prediction files")
    p.add_argument("--pred", required=True, help="predictions .jsonl file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--potential", default="both", choices=("nll", "emd", "both"))
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("report", parents=[common], help="render a comparison table")
    p.add_argument("reports", nargs="+", help="report.json files from `evaluate`")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
