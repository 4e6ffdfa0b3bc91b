"""Joint training of the region proposer and the stage classifier.

The proposer emits a distribution over crop centers, so classification loss
cannot be backpropagated into it directly.  Instead each image contributes a
score-function (policy-gradient) estimate: sample ``K`` crop cells from the
grid distribution, score each crop's cross-entropy under the classifier, and
weight the log-probability gradients by the advantage of each sample over a
leave-one-out mean of the other samples' losses.  The baseline leaves the
estimator's expectation exactly equal to the true gradient of the expected
loss (a within-batch mean that includes the sample itself would shrink it by
``1 - 1/K``) and only reduces variance.  An optional entropy bonus keeps the
proposal distribution from collapsing early.

Four training modes share one loop:

* ``rl_entropy``       — sampled crops, entropy weight ``lambda`` (default 0.01)
* ``rl_no_entropy``    — the same with ``lambda = 0``
* ``bilinear``         — no sampling: a linear head regresses the crop center
  directly and gradients flow through a bilinear crop
* ``classifier_only_fullframe`` — no detector at all, classify the whole frame

Detector parameters follow SGD with momentum 0.9 at learning rate 0.01 in
the sampling modes; classifier (and the bilinear path entirely) use Adam at
0.001.  Batches average per-image gradients in fixed index order, epochs
shuffle frames from a dedicated child stream, and augmentation applies
right-angle rotations and horizontal flips.  Everything is deterministic
given the run seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Rng
from .evaluate import jaccard
from .model import (
    CenterRegressorParams,
    Checkpoint,
    ClassifierParams,
    DetectorParams,
    ModelConfig,
    TRAIN_MODES,
    bilinear_crop,
    clamp_center,
    classifier_backward,
    classifier_forward,
    classifier_losses,
    downsample,
    frame_prediction,
    grid_entropy,
    grid_entropy_grad,
    grid_log_probs,
    init_classifier,
    pooled_features,
    predict_center,
    sample_cells,
    upsample_grad,
)
from .synth import Dataset

__all__ = [
    "NumericError",
    "TrainConfig",
    "TrainResult",
    "SgdMomentum",
    "Adam",
    "mc_loss_and_grads",
    "mc_estimate_from_cells",
    "bilinear_loss_and_grads",
    "train",
    "format_log",
    "parse_log",
]


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient.

    When raised from ``train`` mid-run, ``checkpoint`` holds the best
    parameters seen before the failure (``None`` if no epoch completed) and
    ``log`` the epochs completed so far, so callers can keep the last good
    state.
    """

    def __init__(self, message: str, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log if log is not None else []


@dataclass(frozen=True)
class TrainConfig:
    samples_per_image: int = 10
    entropy_weight: float = 0.01
    batch_size: int = 16
    max_epochs: int = 36
    patience: int = 20
    detector_lr: float = 0.01
    detector_momentum: float = 0.9
    adam_lr: float = 0.001
    augment: bool = True

    def __post_init__(self) -> None:
        if self.samples_per_image < 2:
            raise ValueError("the loss baseline needs at least 2 samples per image")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.detector_lr <= 0 or self.adam_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.detector_momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.entropy_weight < 0:
            raise ValueError("entropy weight must be non-negative")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int


class SgdMomentum:
    """Classic momentum: ``v = mu v + g``, ``p -= lr v`` on a flat vector."""

    def __init__(self, lr: float, momentum: float, n_params: int):
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.velocity = self.momentum * self.velocity + grad
        return params - self.lr * self.velocity


class Adam:
    """Bias-corrected Adam on a flat vector."""

    def __init__(self, lr: float, n_params: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# per-image gradient estimates


def _cell_crop_origins(cells: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Window origins of nearest-pixel crops centered on grid cells.

    Mirrors ``model.crop``'s clamping exactly (asserted by tests).
    """
    scale = cfg.image_side / cfg.grid_size
    side = cfg.crop_side
    half = side / 2.0
    cx = (cells[:, 1] + 0.5) * scale
    cy = (cells[:, 0] + 0.5) * scale
    ox = np.clip(np.round(np.clip(cx, half, cfg.image_side - half) - half), 0, cfg.image_side - side)
    oy = np.clip(np.round(np.clip(cy, half, cfg.image_side - half) - half), 0, cfg.image_side - side)
    return oy.astype(np.int64), ox.astype(np.int64)


def _crop_inputs(image: np.ndarray, cells: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Downsampled classifier inputs for crops at the given cells: ``(k, D)``."""
    side = cfg.crop_side
    oy, ox = _cell_crop_origins(cells, cfg)
    windows = sliding_window_view(image, (side, side))
    crops = windows[oy, ox]
    f = side // cfg.classifier_input_side
    k = crops.shape[0]
    small = crops.reshape(k, cfg.classifier_input_side, f, cfg.classifier_input_side, f).mean(
        axis=(2, 4)
    )
    return small.reshape(k, -1)


def mc_estimate_from_cells(
    det: DetectorParams,
    clf: ClassifierParams,
    image: np.ndarray,
    label: int,
    cells: np.ndarray,
    cfg: ModelConfig,
    feats: np.ndarray | None = None,
    use_baseline: bool = True,
):
    """Deterministic part of the Monte Carlo estimate, given sampled cells.

    Returns ``(loss_estimate, detector_grad_vec, classifier_grads)`` where
    ``loss_estimate`` is the mean sampled cross entropy, the detector
    gradient applies leave-one-out-baselined advantages to the log-probability
    gradients, and classifier gradients average plain backprop over samples.
    ``use_baseline=False`` skips the baseline (same expectation, higher
    variance) — kept for the unbiasedness checks.
    """
    if feats is None:
        feats = pooled_features(image, cfg.grid_size)
    k = cells.shape[0]
    grid_probs = np.exp(grid_log_probs(det, feats))

    inputs = _crop_inputs(image, cells, cfg)
    probs, cache = classifier_forward(clf, inputs)
    labels = np.full(k, label)
    losses = classifier_losses(probs, labels)
    clf_grads = classifier_backward(clf, cache, probs, labels, np.full(k, 1.0 / k))

    if use_baseline:
        # leave-one-out mean of the other samples' losses
        baselines = (losses.sum() - losses) / (k - 1)
        advantages = losses - baselines
    else:
        advantages = losses
    mean_feat = np.tensordot(grid_probs, feats, axes=([0, 1], [0, 1]))
    per_sample_w = feats[cells[:, 0], cells[:, 1]] - mean_feat  # (k, 3)
    det_grad = np.concatenate([advantages @ per_sample_w / k, [0.0]])

    return float(losses.mean()), det_grad, clf_grads


def mc_loss_and_grads(
    det: DetectorParams,
    clf: ClassifierParams,
    image: np.ndarray,
    label: int,
    k: int,
    cfg: ModelConfig,
    rng: Rng,
    feats: np.ndarray | None = None,
):
    """Sample ``k`` crop cells and estimate loss and gradients for one image."""
    if k < 2:
        raise ValueError("need k >= 2 samples for the leave-one-out baseline")
    if feats is None:
        feats = pooled_features(image, cfg.grid_size)
    grid_probs = np.exp(grid_log_probs(det, feats))
    cells = sample_cells(grid_probs, k, rng)
    return mc_estimate_from_cells(det, clf, image, label, cells, cfg, feats=feats)


def bilinear_loss_and_grads(
    reg: CenterRegressorParams,
    clf: ClassifierParams,
    image: np.ndarray,
    label: int,
    cfg: ModelConfig,
    feats: np.ndarray | None = None,
):
    """Differentiable-sampling path: loss plus gradients for both heads.

    The regressed center is clamped to keep the crop inside the image;
    clamped coordinates pass zero gradient (the window cannot move further).
    """
    if feats is None:
        feats = pooled_features(image, cfg.grid_size)
    side = cfg.crop_side
    half = side / 2.0
    raw = predict_center(reg, feats)
    cx, cy = clamp_center(raw, side, cfg.image_side)
    active_x = half < raw[0] < cfg.image_side - half
    active_y = half < raw[1] < cfg.image_side - half

    patch, dpatch_dx, dpatch_dy = bilinear_crop(image, (cx, cy), side, with_grad=True)
    f = side // cfg.classifier_input_side
    x = downsample(patch, cfg.classifier_input_side).ravel()
    probs, cache = classifier_forward(clf, x[None, :])
    loss = float(classifier_losses(probs, np.array([label]))[0])
    clf_grads, dx_flat = classifier_backward(
        clf, cache, probs, np.array([label]), np.ones(1), want_input_grad=True
    )
    dpatch = upsample_grad(dx_flat.reshape(cfg.classifier_input_side, -1), f)
    dcx = float((dpatch * dpatch_dx).sum()) if active_x else 0.0
    dcy = float((dpatch * dpatch_dy).sum()) if active_y else 0.0

    flat_feats = feats.ravel()
    reg_grads = CenterRegressorParams(
        np.stack([dcx * flat_feats, dcy * flat_feats]), np.array([dcx, dcy])
    )
    return loss, reg_grads, clf_grads


# ---------------------------------------------------------------------------
# training loop


def _augmented(image: np.ndarray, rng: Rng) -> np.ndarray:
    g = rng.generator
    quarter_turns = int(g.integers(4))
    flip = bool(g.integers(2))
    out = np.rot90(image, quarter_turns)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _require_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")


def _validation_metrics(detector_kind, detector, clf, videos, cfg):
    """Frame accuracy, mean IoU vs truth boxes, mean proposal entropy."""
    total = correct = 0
    iou_sum = 0.0
    entropy_sum = 0.0
    for video in videos:
        for t in range(video.n_frames):
            stage_probs, region, grid_probs = frame_prediction(
                detector_kind, detector, clf, video.frame_float(t), cfg
            )
            correct += int(np.argmax(stage_probs)) == video.stages.labels[t]
            total += 1
            if region is not None:
                iou_sum += jaccard(region, video.truth_box)
            if grid_probs is not None:
                entropy_sum += grid_entropy(grid_probs)
    acc = correct / total
    iou = iou_sum / total if detector_kind != "none" else None
    entropy = entropy_sum / total if detector_kind == "grid" else None
    return acc, iou, entropy


def train(
    mode: str,
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rng: Rng,
) -> TrainResult:
    """Train one mode on the dataset's train split, early-stopped on val accuracy.

    The kept checkpoint is the epoch with the highest validation frame
    accuracy (earliest on ties). Returns that checkpoint and one log record
    per epoch: ``{"epoch", "train_loss", "val_acc", "val_iou",
    "detector_entropy"}`` (`None` entries where a mode has no such quantity;
    validation metrics never see augmentation, and the test split is never
    touched). Validation accuracy is noisy epoch to epoch, so `patience`
    should be generous — an early lucky epoch can otherwise stop training
    before the real climb.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown train mode {mode!r} (expected one of {TRAIN_MODES})")
    train_videos = dataset.split("train")
    val_videos = dataset.split("val")
    if not train_videos or not val_videos:
        raise ValueError("training needs non-empty train and val splits")
    if dataset.config.n_stages != model_cfg.n_stages:
        raise ValueError("dataset and model disagree on the number of stages")

    clf = init_classifier(model_cfg, rng.child("init-classifier"))
    clf_opt = Adam(train_cfg.adam_lr, clf.to_vector().size)

    detector_kind = "none"
    detector: DetectorParams | CenterRegressorParams | None = None
    det_opt = None
    if mode in ("rl_entropy", "rl_no_entropy"):
        detector_kind = "grid"
        detector = DetectorParams.zeros()
        det_opt = SgdMomentum(
            train_cfg.detector_lr, train_cfg.detector_momentum, detector.to_vector().size
        )
    elif mode == "bilinear":
        detector_kind = "center_regression"
        detector = CenterRegressorParams.initial(model_cfg)
        det_opt = Adam(train_cfg.adam_lr, detector.to_vector().size)

    entropy_weight = train_cfg.entropy_weight if mode == "rl_entropy" else 0.0
    frames = [(i, t) for i, v in enumerate(train_videos) for t in range(v.n_frames)]

    log: list[dict] = []
    best_acc = -1.0
    best_epoch = 0
    best_params = (clf.to_vector(), None if detector is None else detector.to_vector())

    def best_checkpoint() -> Checkpoint:
        best_clf = ClassifierParams.from_vector(best_params[0], model_cfg)
        best_detector: DetectorParams | CenterRegressorParams | None = None
        if detector_kind == "grid":
            best_detector = DetectorParams.from_vector(best_params[1])
        elif detector_kind == "center_regression":
            best_detector = CenterRegressorParams.from_vector(best_params[1], model_cfg)
        return Checkpoint(
            model_cfg, mode, detector_kind, best_detector, best_clf,
            dataset.fingerprint, best_epoch,
        )

    try:
        for epoch in range(1, train_cfg.max_epochs + 1):
            order = rng.child("shuffle", epoch).generator.permutation(len(frames))
            aug_rng = rng.child("augment", epoch)
            mc_rng = rng.child("mc-samples", epoch)

            loss_sum = 0.0
            n_batches = 0
            for start in range(0, len(order), train_cfg.batch_size):
                batch = order[start : start + train_cfg.batch_size]
                batch_loss = 0.0
                clf_grad_sum = np.zeros(clf.to_vector().size)
                det_grad_sum = (
                    None if detector is None else np.zeros(detector.to_vector().size)
                )
                for idx in batch:
                    video_idx, t = frames[idx]
                    image = train_videos[video_idx].frame_float(t)
                    if train_cfg.augment:
                        image = _augmented(image, aug_rng)
                    label = train_videos[video_idx].stages.labels[t]

                    if detector_kind == "grid":
                        feats = pooled_features(image, model_cfg.grid_size)
                        loss, det_grad, clf_grads = mc_loss_and_grads(
                            detector, clf, image, label,
                            train_cfg.samples_per_image, model_cfg, mc_rng, feats=feats,
                        )
                        if entropy_weight > 0.0:
                            grid_probs = np.exp(grid_log_probs(detector, feats))
                            det_grad = det_grad - entropy_weight * grid_entropy_grad(
                                feats, grid_probs
                            )
                        det_grad_sum += det_grad
                    elif detector_kind == "center_regression":
                        loss, reg_grads, clf_grads = bilinear_loss_and_grads(
                            detector, clf, image, label, model_cfg
                        )
                        det_grad_sum += reg_grads.to_vector()
                    else:
                        x = downsample(image, model_cfg.classifier_input_side).ravel()
                        probs, cache = classifier_forward(clf, x[None, :])
                        loss = float(classifier_losses(probs, np.array([label]))[0])
                        clf_grads = classifier_backward(
                            clf, cache, probs, np.array([label]), np.ones(1)
                        )
                    batch_loss += loss
                    clf_grad_sum += clf_grads.to_vector()

                scale = 1.0 / batch.size
                _require_finite("classifier gradient", clf_grad_sum)
                clf = ClassifierParams.from_vector(
                    clf_opt.step(clf.to_vector(), clf_grad_sum * scale), model_cfg
                )
                if detector is not None:
                    _require_finite("detector gradient", det_grad_sum)
                    new_vec = det_opt.step(detector.to_vector(), det_grad_sum * scale)
                    if detector_kind == "grid":
                        detector = DetectorParams.from_vector(new_vec)
                    else:
                        detector = CenterRegressorParams.from_vector(new_vec, model_cfg)
                loss_sum += batch_loss * scale
                n_batches += 1

            val_acc, val_iou, val_entropy = _validation_metrics(
                detector_kind, detector, clf, val_videos, model_cfg
            )
            train_loss = loss_sum / n_batches
            _require_finite("epoch summary", np.array([train_loss, val_acc]))
            log.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_acc": val_acc,
                    "val_iou": val_iou,
                    "detector_entropy": val_entropy,
                }
            )
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_params = (
                    clf.to_vector(),
                    None if detector is None else detector.to_vector(),
                )
            elif epoch - best_epoch >= train_cfg.patience:
                break
    except NumericError as exc:
        # deliver the last good state alongside the diagnostic
        raise NumericError(
            str(exc),
            checkpoint=best_checkpoint() if best_epoch > 0 else None,
            log=log,
        ) from exc

    return TrainResult(best_checkpoint(), log, best_epoch)


# ---------------------------------------------------------------------------
# log serialization (JSON lines)


def format_log(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def parse_log(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
