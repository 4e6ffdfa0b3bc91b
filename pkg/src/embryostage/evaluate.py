"""Metrics and the evaluation protocol.

Staging quality is measured three ways on a held-out split: frame-level
accuracy of the raw argmax, the same after monotone decoding under each
potential, and transition-time errors in frames.  Transition errors pool one
term per (video, stage-present-in-truth) pair across the whole split; a stage
the prediction never reaches is scored as if predicted at the end of the
video, ``|n_frames - truth_frame|``, so every ground-truth transition
contributes exactly one term.

Detector quality is measured separately on a fixed evaluation subset drawn
from the validation split — up to 20 frames per stage, 120 total at the
default six stages — reporting mean intersection-over-union against the
per-video truth boxes, mean center distance in raw-image pixels, and the
classification accuracy on those same frames ("crop accuracy").

A mode-per-frame-index / median-transition baseline fitted on the training
split anchors the comparisons from below.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .core import (
    Region,
    Rng,
    StageSequence,
    TransitionTimes,
    transitions_from_labels,
)
from .decode import EMD, NLL, Potential, decode_monotone
from .model import Checkpoint, frame_prediction
from .synth import Dataset, SynthVideo

__all__ = [
    "frame_accuracy",
    "jaccard",
    "center_distance",
    "transition_error_terms",
    "transition_errors",
    "error_summary",
    "NaiveBaseline",
    "naive_baseline",
    "evaluation_subset",
    "VideoPredictions",
    "predict_video",
    "report_from_predictions",
    "evaluate",
    "evaluate_naive",
    "format_report",
]


# ---------------------------------------------------------------------------
# elementary metrics


def frame_accuracy(pred: StageSequence, truth: StageSequence) -> float:
    """Fraction of frames whose predicted stage matches the truth exactly."""
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predicted vs {len(truth)} true")
    matches = sum(p == t for p, t in zip(pred.labels, truth.labels))
    return matches / len(truth)


def jaccard(a: Region, b: Region) -> float:
    """Intersection over union of two axis-aligned squares."""
    overlap_x = min(a.center_x + a.side / 2, b.center_x + b.side / 2) - max(
        a.center_x - a.side / 2, b.center_x - b.side / 2
    )
    overlap_y = min(a.center_y + a.side / 2, b.center_y + b.side / 2) - max(
        a.center_y - a.side / 2, b.center_y - b.side / 2
    )
    if overlap_x <= 0 or overlap_y <= 0:
        return 0.0
    inter = overlap_x * overlap_y
    union = a.side * a.side + b.side * b.side - inter
    return inter / union


def center_distance(a: Region, b: Region, working_side: int, raw_side: int) -> float:
    """Euclidean center distance, rescaled from working to raw pixel units."""
    d = math.hypot(a.center_x - b.center_x, a.center_y - b.center_y)
    return d * (raw_side / working_side)


def _first_frames(pred) -> Mapping[int, int]:
    if isinstance(pred, TransitionTimes):
        return pred.first_frame
    return pred


def transition_error_terms(pred, truth: TransitionTimes, n_frames: int) -> np.ndarray:
    """One absolute error per ground-truth stage; ABSENT predictions clamp to the end.

    ``pred`` may be ``TransitionTimes`` or a plain ``{stage: frame}`` mapping.
    """
    first = _first_frames(pred)
    terms = []
    for stage in sorted(truth.first_frame):
        truth_frame = truth.first_frame[stage]
        pred_frame = first.get(stage, n_frames)
        terms.append(abs(pred_frame - truth_frame))
    return np.asarray(terms, dtype=float)


def transition_errors(pred, truth: TransitionTimes, n_frames: int) -> tuple[float, float]:
    """(MAE, RMSE) over the ground-truth stages of one video."""
    terms = transition_error_terms(pred, truth, n_frames)
    summary = error_summary(terms)
    return summary["mae_frames"], summary["rmse_frames"]


def error_summary(terms: np.ndarray) -> dict:
    terms = np.asarray(terms, dtype=float)
    if terms.size == 0:
        raise ValueError("no error terms to summarize")
    mae = float(np.mean(np.abs(terms)))
    rmse = float(np.sqrt(np.mean(terms * terms)))
    # power-mean inequality; a violation means a metric bug
    assert rmse >= mae >= 0.0, (mae, rmse)
    return {"mae_frames": mae, "rmse_frames": rmse}


# ---------------------------------------------------------------------------
# naive baseline: per-frame-index mode + per-stage median transition


@dataclass(frozen=True)
class NaiveBaseline:
    frame_mode: tuple[int, ...]
    median_transitions: dict[int, int]
    n_stages: int

    def predict_labels(self, n_frames: int) -> StageSequence:
        """Mode stage per frame index; frames past the training horizon repeat the last."""
        modes = self.frame_mode
        labels = tuple(modes[min(t, len(modes) - 1)] for t in range(n_frames))
        return StageSequence(labels)

    def predicted_transitions(self) -> dict[int, int]:
        return dict(self.median_transitions)


def naive_baseline(train_videos: list[SynthVideo], n_stages: int) -> NaiveBaseline:
    """Fit the mode/median predictor on the training split."""
    if not train_videos:
        raise ValueError("naive baseline needs a non-empty training split")
    max_len = max(v.n_frames for v in train_videos)
    counts = np.zeros((max_len, n_stages), dtype=np.int64)
    for video in train_videos:
        counts[np.arange(video.n_frames), video.stages.as_array()] += 1
    # np.argmax takes the first maximum, i.e. ties resolve toward the lower stage
    frame_mode = tuple(int(s) for s in counts.argmax(axis=1))

    medians: dict[int, int] = {}
    for stage in range(1, n_stages):
        observed = sorted(
            transitions_from_labels(v.stages).first_frame[stage]
            for v in train_videos
            if stage in transitions_from_labels(v.stages).first_frame
        )
        if observed:
            # lower median on even counts
            medians[stage] = observed[(len(observed) - 1) // 2]
    return NaiveBaseline(frame_mode, medians, n_stages)


# ---------------------------------------------------------------------------
# detector evaluation subset


def evaluation_subset(
    dataset: Dataset, per_stage: int = 20, split: str = "val"
) -> list[tuple[int, int]]:
    """Fixed labeled-box subset: up to ``per_stage`` (video, frame) pairs per stage.

    Indices refer into ``dataset.split(split)``.  Sampling is seeded from the
    dataset seed alone, so the subset is a property of the dataset; when a
    stage has fewer frames than requested, all of them are taken.
    """
    videos = dataset.split(split)
    gen = Rng(dataset.seed).child("eval-subset").generator
    chosen: list[tuple[int, int]] = []
    for stage in range(dataset.config.n_stages):
        pool = [
            (i, t)
            for i, video in enumerate(videos)
            for t in range(video.n_frames)
            if video.stages.labels[t] == stage
        ]
        if len(pool) <= per_stage:
            chosen.extend(pool)
        else:
            picks = gen.choice(len(pool), size=per_stage, replace=False)
            chosen.extend(pool[i] for i in sorted(int(p) for p in picks))
    return chosen


# ---------------------------------------------------------------------------
# model evaluation


@dataclass(frozen=True)
class VideoPredictions:
    video_id: int
    probs: np.ndarray  # (n_frames, n_stages)
    regions: tuple[Region, ...] | None  # None when the model has no detector


def predict_video(checkpoint: Checkpoint, video: SynthVideo) -> VideoPredictions:
    """Run the checkpoint's test-time path over every frame of one video."""
    cfg = checkpoint.model_config
    probs = np.empty((video.n_frames, cfg.n_stages))
    regions: list[Region] = []
    for t in range(video.n_frames):
        stage_probs, region, _ = frame_prediction(
            checkpoint.detector_kind, checkpoint.detector, checkpoint.classifier,
            video.frame_float(t), cfg,
        )
        probs[t] = stage_probs
        if region is not None:
            regions.append(region)
    has_detector = checkpoint.detector_kind != "none"
    return VideoPredictions(video.video_id, probs, tuple(regions) if has_detector else None)


def report_from_predictions(
    predictions: list[VideoPredictions],
    videos: list[SynthVideo],
    n_stages: int,
) -> dict:
    """Staging metrics for one split given per-frame stage distributions.

    Detector metrics are a separate concern (`evaluate` attaches them); this
    covers raw accuracy, decoded accuracy and transition errors per
    potential, argmax-derived transition errors, and the confusion matrix.
    """
    if len(predictions) != len(videos):
        raise ValueError("one prediction set per video required")
    total = correct_raw = 0
    correct_dp = {"nll": 0, "emd": 0}
    potentials: dict[str, Potential] = {"nll": NLL, "emd": EMD}
    dp_terms: dict[str, list[np.ndarray]] = {"nll": [], "emd": []}
    raw_terms: list[np.ndarray] = []
    confusion = np.zeros((n_stages, n_stages), dtype=np.int64)

    for pred, video in zip(predictions, videos):
        truth = video.stages
        truth_tt = transitions_from_labels(truth)
        raw_labels = StageSequence(tuple(int(s) for s in pred.probs.argmax(axis=1)))
        correct_raw += sum(p == t for p, t in zip(raw_labels.labels, truth.labels))
        total += video.n_frames
        np.add.at(confusion, (truth.as_array(), raw_labels.as_array()), 1)
        for name, potential in potentials.items():
            decoded = decode_monotone(pred.probs, potential)
            correct_dp[name] += sum(
                p == t for p, t in zip(decoded.labels, truth.labels)
            )
            dp_terms[name].append(
                transition_error_terms(
                    transitions_from_labels(decoded), truth_tt, video.n_frames
                )
            )
        raw_terms.append(
            transition_error_terms(
                transitions_from_labels(raw_labels), truth_tt, video.n_frames
            )
        )

    report = {
        "n_videos": len(videos),
        "n_frames": total,
        "raw_accuracy": correct_raw / total,
        "dp": {
            name: {
                "accuracy": correct_dp[name] / total,
                **error_summary(np.concatenate(dp_terms[name])),
            }
            for name in ("nll", "emd")
        },
        "raw_transitions": error_summary(np.concatenate(raw_terms)),
        "confusion_matrix": confusion.tolist(),
        "meta": {
            "confusion_matrix": "rows = true stage, columns = raw argmax prediction",
            "transition_error_pooling": (
                "errors pooled over all (video, ground-truth stage) pairs in the split"
            ),
            "absent_stage_convention": (
                "a stage the prediction never reaches scores |n_frames - truth_frame|"
            ),
        },
    }
    return report


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    split: str = "test",
    subset_per_stage: int = 20,
    check_fingerprint: bool = True,
    predictions: list[VideoPredictions] | None = None,
) -> dict:
    """Full metrics report for a checkpoint on one split of a dataset.

    Staging metrics come from ``split``; detector metrics always come from
    the fixed validation-split subset (the labeled-box protocol).  The
    checkpoint must have been trained on this dataset unless
    ``check_fingerprint=False``.
    """
    if check_fingerprint and checkpoint.dataset_fingerprint != dataset.fingerprint:
        raise ValueError(
            f"checkpoint was trained on dataset {checkpoint.dataset_fingerprint}, "
            f"got {dataset.fingerprint}"
        )
    videos = dataset.split(split)
    if not videos:
        raise ValueError(f"split {split!r} is empty")
    if predictions is None:
        predictions = [predict_video(checkpoint, v) for v in videos]
    report = report_from_predictions(predictions, videos, dataset.config.n_stages)
    report["split"] = split
    report["train_mode"] = checkpoint.train_mode
    report["dataset_fingerprint"] = dataset.fingerprint

    if checkpoint.detector_kind != "none":
        subset = evaluation_subset(dataset, subset_per_stage)
        val_videos = dataset.split("val")
        cfg = checkpoint.model_config
        jacc = dist = 0.0
        correct = 0
        for i, t in subset:
            video = val_videos[i]
            stage_probs, region, _ = frame_prediction(
                checkpoint.detector_kind, checkpoint.detector, checkpoint.classifier,
                video.frame_float(t), cfg,
            )
            jacc += jaccard(region, video.truth_box)
            dist += center_distance(region, video.truth_box, cfg.image_side, cfg.raw_side)
            correct += int(np.argmax(stage_probs)) == video.stages.labels[t]
        n = len(subset)
        report["detector"] = {
            "jaccard_mean": jacc / n,
            "center_distance_raw_px_mean": dist / n,
            "crop_accuracy": correct / n,
            "subset_size": n,
            "subset_split": "val",
        }
    else:
        report["detector"] = None
    return report


def evaluate_naive(baseline: NaiveBaseline, videos: list[SynthVideo]) -> dict:
    """Accuracy and pooled transition errors of the naive predictor on a split."""
    if not videos:
        raise ValueError("empty split")
    total = correct = 0
    terms: list[np.ndarray] = []
    medians = baseline.predicted_transitions()
    for video in videos:
        pred = baseline.predict_labels(video.n_frames)
        correct += sum(p == t for p, t in zip(pred.labels, video.stages.labels))
        total += video.n_frames
        terms.append(
            transition_error_terms(
                medians, transitions_from_labels(video.stages), video.n_frames
            )
        )
    return {
        "raw_accuracy": correct / total,
        "transitions": error_summary(np.concatenate(terms)),
        "n_videos": len(videos),
        "n_frames": total,
    }


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
