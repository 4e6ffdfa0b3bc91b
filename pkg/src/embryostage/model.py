"""Region proposer and stage classifier, with hand-derived gradients.

The proposer scores every cell of a G x G grid over the image from three
pooled statistics of the cell's receptive field (mean, standard deviation,
center-surround contrast) through a shared linear map, and a softmax over
all cells turns the scores into a distribution over crop centers.  A crop
is half the image on each side; its content, area-downsampled to a small
square, feeds a one-hidden-layer softmax classifier over the six stages.

Everything is float64 and explicit: forward passes return caches, backward
passes return parameter-shaped gradient containers, and the two crop
operators (nearest-pixel, and bilinear with analytic center derivatives)
share the same clamping geometry.

Coordinates follow ``core``: pixel ``(row r, col c)`` has center
``(c + 0.5, r + 0.5)`` in ``(x, y)``; grid cell ``(i, j)`` has center
``((j + 0.5) * side / G, (i + 0.5) * side / G)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Region, Rng

__all__ = [
    "ModelConfig",
    "DetectorParams",
    "CenterRegressorParams",
    "ClassifierParams",
    "Checkpoint",
    "pooled_features",
    "grid_scores",
    "grid_log_probs",
    "propose",
    "sample_cells",
    "sample_region",
    "cell_center",
    "region_for_cell",
    "log_prob",
    "log_prob_grad",
    "grid_entropy",
    "grid_entropy_grad",
    "expected_center",
    "crop",
    "bilinear_crop",
    "downsample",
    "upsample_grad",
    "init_classifier",
    "classifier_forward",
    "classifier_backward",
    "classify",
    "predict_center",
    "clamp_center",
    "frame_prediction",
    "save_checkpoint",
    "load_checkpoint",
]

N_FEATURES = 3  # mean, std, center-surround contrast

CHECKPOINT_FORMAT_VERSION = 1

TRAIN_MODES = ("rl_entropy", "rl_no_entropy", "bilinear", "classifier_only_fullframe")


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 64
    grid_size: int = 14
    crop_fraction: float = 0.5
    n_stages: int = 6
    classifier_input_side: int = 16
    hidden_units: int = 64
    raw_side: int = 500

    def __post_init__(self) -> None:
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if self.crop_side % self.classifier_input_side:
            raise ValueError(
                f"crop side {self.crop_side} not divisible by classifier input "
                f"{self.classifier_input_side}"
            )
        if self.image_side % self.classifier_input_side:
            raise ValueError("image side must be divisible by classifier input side")
        if self.n_stages < 2 or self.hidden_units < 1:
            raise ValueError("need >= 2 stages and >= 1 hidden unit")

    @property
    def crop_side(self) -> int:
        return int(round(self.crop_fraction * self.image_side))

    @property
    def classifier_inputs(self) -> int:
        return self.classifier_input_side**2


# ---------------------------------------------------------------------------
# pooled grid features


def _grid_edges(side: int, grid_size: int) -> np.ndarray:
    return np.floor(np.arange(grid_size + 1) * side / grid_size).astype(np.int64)


def _box_sums(integral: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    return (
        integral[np.ix_(r1, c1)]
        - integral[np.ix_(r0, c1)]
        - integral[np.ix_(r1, c0)]
        + integral[np.ix_(r0, c0)]
    )


def pooled_features(image: np.ndarray, grid_size: int) -> np.ndarray:
    """Per-cell (mean, std, contrast) features, shape ``(G, G, 3)``.

    Mean and standard deviation pool the cell's own pixel block; contrast is
    the cell mean minus the mean of the surrounding ring of the 3 x 3 cell
    neighbourhood (clipped at the image border).  Computed with integral
    images, so cost is independent of cell size.
    """
    img = np.asarray(image, dtype=np.float64)
    side = img.shape[0]
    if img.shape != (side, side):
        raise ValueError(f"expected a square image, got {img.shape}")
    edges = _grid_edges(side, grid_size)
    integral = np.zeros((side + 1, side + 1))
    integral[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    integral_sq = np.zeros((side + 1, side + 1))
    integral_sq[1:, 1:] = (img * img).cumsum(axis=0).cumsum(axis=1)

    lo, hi = edges[:-1], edges[1:]
    sums = _box_sums(integral, lo, hi, lo, hi)
    sq_sums = _box_sums(integral_sq, lo, hi, lo, hi)
    areas = np.outer(hi - lo, hi - lo).astype(np.float64)
    means = sums / areas
    variances = np.maximum(sq_sums / areas - means**2, 0.0)
    stds = np.sqrt(variances)

    idx = np.arange(grid_size)
    nb_lo = edges[np.maximum(idx - 1, 0)]
    nb_hi = edges[np.minimum(idx + 2, grid_size)]
    nb_sums = _box_sums(integral, nb_lo, nb_hi, nb_lo, nb_hi)
    nb_areas = np.outer(nb_hi - nb_lo, nb_hi - nb_lo).astype(np.float64)
    ring_areas = nb_areas - areas
    safe_areas = np.where(ring_areas > 0, ring_areas, 1.0)
    ring_means = np.where(ring_areas > 0, (nb_sums - sums) / safe_areas, means)
    contrast = means - ring_means

    return np.stack([means, stds, contrast], axis=-1)


# ---------------------------------------------------------------------------
# grid detector (scores -> softmax over cells)


@dataclass
class DetectorParams:
    """Shared linear scorer over pooled cell features (plus bias)."""

    weights: np.ndarray  # (3,)
    bias: float

    @classmethod
    def zeros(cls) -> "DetectorParams":
        return cls(np.zeros(N_FEATURES), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "DetectorParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (N_FEATURES + 1,):
            raise ValueError(f"detector vector must have {N_FEATURES + 1} entries")
        return cls(vec[:N_FEATURES].copy(), float(vec[N_FEATURES]))


def grid_scores(det: DetectorParams, feats: np.ndarray) -> np.ndarray:
    return feats @ det.weights + det.bias


def _softmax2d(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


def grid_log_probs(det: DetectorParams, feats: np.ndarray) -> np.ndarray:
    """Numerically stable ``log softmax`` over all cells."""
    s = grid_scores(det, feats)
    z = s - s.max()
    return z - math.log(np.exp(z).sum())


def propose(det: DetectorParams, image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Distribution over crop-center cells for one image, shape ``(G, G)``."""
    feats = pooled_features(image, cfg.grid_size)
    return _softmax2d(grid_scores(det, feats))


def cell_center(cfg: ModelConfig, row: int, col: int) -> tuple[float, float]:
    scale = cfg.image_side / cfg.grid_size
    return ((col + 0.5) * scale, (row + 0.5) * scale)


def region_for_cell(cfg: ModelConfig, row: int, col: int) -> Region:
    cx, cy = cell_center(cfg, row, col)
    return Region(cx, cy, float(cfg.crop_side))


def sample_cells(grid_probs: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """Draw ``n`` cells iid from the grid distribution; returns ``(n, 2)`` rows/cols.

    Inverse-CDF sampling on the flattened grid (row-major), normalized so
    zero-probability cells are never selected.
    """
    flat = np.asarray(grid_probs, dtype=np.float64).ravel()
    cum = np.cumsum(flat)
    if cum[-1] <= 0:
        raise ValueError("grid distribution has no mass")
    cum /= cum[-1]
    draws = rng.generator.random(n)
    idx = np.searchsorted(cum, draws, side="right")
    g = grid_probs.shape[1]
    return np.stack([idx // g, idx % g], axis=1)


def sample_region(grid_probs: np.ndarray, cfg: ModelConfig, rng: Rng) -> Region:
    row, col = sample_cells(grid_probs, 1, rng)[0]
    return region_for_cell(cfg, int(row), int(col))


def _cell_of_region(region: Region, cfg: ModelConfig) -> tuple[int, int]:
    scale = cfg.image_side / cfg.grid_size
    col = int(round(region.center_x / scale - 0.5))
    row = int(round(region.center_y / scale - 0.5))
    g = cfg.grid_size
    if not (0 <= row < g and 0 <= col < g):
        raise ValueError(f"region center {(region.center_x, region.center_y)} outside the grid")
    want_x, want_y = cell_center(cfg, row, col)
    if abs(want_x - region.center_x) > 1e-6 or abs(want_y - region.center_y) > 1e-6:
        raise ValueError("region center does not coincide with a grid cell center")
    return row, col


def log_prob(grid_probs: np.ndarray, region: Region, cfg: ModelConfig) -> float:
    """Log-probability of the cell whose center the region sits on."""
    row, col = _cell_of_region(region, cfg)
    return float(np.log(grid_probs[row, col]))


def log_prob_grad(feats: np.ndarray, grid_probs: np.ndarray, cell: tuple[int, int]) -> np.ndarray:
    """d log p(cell) / d detector params, as a flat ``(4,)`` vector.

    For a shared linear scorer the score of every cell shifts equally with
    the bias, so the bias gradient of any log cell probability is exactly 0.
    """
    row, col = cell
    mean_feat = np.tensordot(grid_probs, feats, axes=([0, 1], [0, 1]))
    grad_w = feats[row, col] - mean_feat
    return np.concatenate([grad_w, [0.0]])


def grid_entropy(grid_probs: np.ndarray) -> float:
    p = np.asarray(grid_probs, dtype=np.float64)
    mass = p[p > 0]
    return float(-(mass * np.log(mass)).sum())


def grid_entropy_grad(feats: np.ndarray, grid_probs: np.ndarray) -> np.ndarray:
    """d entropy / d detector params, flat ``(4,)``.

    With ``H = -sum p log p`` over a softmax, ``dH/dscore_ij = -p_ij
    (log p_ij + H)``; chaining through the shared linear map gives the
    weight gradient, and the bias entries cancel to exactly 0.
    """
    p = np.asarray(grid_probs, dtype=np.float64)
    h = grid_entropy(p)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    dscore = -p * (logp + h)
    grad_w = np.tensordot(dscore, feats, axes=([0, 1], [0, 1]))
    return np.concatenate([grad_w, [0.0]])


def expected_center(grid_probs: np.ndarray, cfg: ModelConfig) -> tuple[float, float]:
    """Probability-weighted average of cell centers (test-time crop center)."""
    g = cfg.grid_size
    centers = (np.arange(g) + 0.5) * cfg.image_side / g
    p = np.asarray(grid_probs, dtype=np.float64)
    return float(p.sum(axis=0) @ centers), float(p.sum(axis=1) @ centers)


# ---------------------------------------------------------------------------
# crops


def _clamped_window_origin(center: float, side_px: int, image_side: int) -> int:
    half = side_px / 2.0
    c = min(max(center, half), image_side - half)
    origin = int(round(c - half))
    return min(max(origin, 0), image_side - side_px)


def crop(image: np.ndarray, region: Region) -> np.ndarray:
    """Nearest-pixel square crop; the window is clamped fully inside the image."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    side_px = int(round(region.side))
    if not 1 <= side_px <= min(h, w):
        raise ValueError(f"crop side {region.side} does not fit a {h}x{w} image")
    r0 = _clamped_window_origin(region.center_y, side_px, h)
    c0 = _clamped_window_origin(region.center_x, side_px, w)
    return img[r0 : r0 + side_px, c0 : c0 + side_px].copy()


def bilinear_crop(
    image: np.ndarray, center: tuple[float, float], side_px: int, with_grad: bool = False
):
    """Bilinearly sampled crop at a real-valued center, optionally with gradients.

    Sample points sit on a unit-spaced grid of ``side_px`` points per axis
    centered on ``center`` (clamped so all samples stay inside the image).
    When the center is integer-aligned the result equals the nearest-pixel
    crop.  With ``with_grad=True`` also returns ``(d crop / d center_x,
    d crop / d center_y)``, each ``(side_px, side_px)``; the derivative is
    taken at the clamped center.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    half = side_px / 2.0
    cx = min(max(center[0], half), w - half)
    cy = min(max(center[1], half), h - half)

    # sample point k sits at x = cx - half + k + 0.5; in pixel-center
    # coordinates (u = x - 0.5) that is simply cx - half + k
    us = cx - half + np.arange(side_px)
    vs = cy - half + np.arange(side_px)
    j0 = np.clip(np.floor(us).astype(np.int64), 0, w - 2)
    i0 = np.clip(np.floor(vs).astype(np.int64), 0, h - 2)
    fx = us - j0
    fy = vs - i0

    rows0 = img[i0, :]
    rows1 = img[i0 + 1, :]
    top = (1 - fx) * rows0[:, j0] + fx * rows0[:, j0 + 1]
    bottom = (1 - fx) * rows1[:, j0] + fx * rows1[:, j0 + 1]
    out = (1 - fy)[:, None] * top + fy[:, None] * bottom
    if not with_grad:
        return out

    dx = (1 - fy)[:, None] * (rows0[:, j0 + 1] - rows0[:, j0]) + fy[:, None] * (
        rows1[:, j0 + 1] - rows1[:, j0]
    )
    dy = (1 - fx) * (rows1[:, j0] - rows0[:, j0]) + fx * (rows1[:, j0 + 1] - rows0[:, j0 + 1])
    return out, dx, dy


def downsample(image: np.ndarray, out_side: int) -> np.ndarray:
    """Area-average downsampling by an integer factor."""
    img = np.asarray(image, dtype=np.float64)
    side = img.shape[0]
    if img.shape != (side, side) or side % out_side:
        raise ValueError(f"cannot downsample {img.shape} to {out_side}")
    f = side // out_side
    return img.reshape(out_side, f, out_side, f).mean(axis=(1, 3))


def upsample_grad(grad_small: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of :func:`downsample`: spread each gradient over its block."""
    return np.repeat(np.repeat(grad_small, factor, axis=0), factor, axis=1) / (factor * factor)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierParams:
    """One-hidden-layer ReLU network with softmax output.

    Also serves as the gradient container: backward passes return an object
    of the same shape.
    """

    w1: np.ndarray  # (hidden, inputs)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (stages, hidden)
    b2: np.ndarray  # (stages,)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    @classmethod
    def from_vector(cls, vec: np.ndarray, cfg: ModelConfig) -> "ClassifierParams":
        d, h, s = cfg.classifier_inputs, cfg.hidden_units, cfg.n_stages
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != h * d + h + s * h + s:
            raise ValueError("classifier vector has the wrong length")
        parts = np.split(vec, np.cumsum([h * d, h, s * h]))
        return cls(
            parts[0].reshape(h, d).copy(),
            parts[1].copy(),
            parts[2].reshape(s, h).copy(),
            parts[3].copy(),
        )


def init_classifier(cfg: ModelConfig, rng: Rng) -> ClassifierParams:
    """He-scaled gaussian hidden layer, zero output layer and biases."""
    g = rng.generator
    d, h, s = cfg.classifier_inputs, cfg.hidden_units, cfg.n_stages
    w1 = g.normal(0.0, math.sqrt(2.0 / d), size=(h, d))
    w2 = g.normal(0.0, math.sqrt(1.0 / h), size=(s, h))
    return ClassifierParams(w1, np.zeros(h), w2, np.zeros(s))


def classifier_forward(clf: ClassifierParams, inputs: np.ndarray):
    """Batch forward: ``(N, D) -> (N, S)`` probabilities plus backward cache."""
    x = np.asarray(inputs, dtype=np.float64)
    z1 = x @ clf.w1.T + clf.b1
    hidden = np.maximum(z1, 0.0)
    z2 = hidden @ clf.w2.T + clf.b2
    z = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, (x, z1, hidden)


def classifier_losses(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross entropy ``-log p[label]``."""
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, 1e-300))


def classifier_backward(
    clf: ClassifierParams,
    cache,
    probs: np.ndarray,
    labels: np.ndarray,
    sample_weights: np.ndarray,
    want_input_grad: bool = False,
):
    """Gradients of ``sum_i weight_i * loss_i`` w.r.t. params (and inputs)."""
    x, z1, hidden = cache
    n, s = probs.shape
    dz2 = probs.copy()
    dz2[np.arange(n), labels] -= 1.0
    dz2 *= np.asarray(sample_weights, dtype=np.float64)[:, None]
    gw2 = dz2.T @ hidden
    gb2 = dz2.sum(axis=0)
    dh = dz2 @ clf.w2
    dz1 = dh * (z1 > 0)
    gw1 = dz1.T @ x
    gb1 = dz1.sum(axis=0)
    grads = ClassifierParams(gw1, gb1, gw2, gb2)
    if want_input_grad:
        return grads, dz1 @ clf.w1
    return grads


def classify(clf: ClassifierParams, patch: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Stage distribution for one crop (or full frame); downsamples first."""
    x = downsample(patch, cfg.classifier_input_side).ravel()
    probs, _ = classifier_forward(clf, x[None, :])
    return probs[0]


# ---------------------------------------------------------------------------
# direct center regression (differentiable-sampling mode)


@dataclass
class CenterRegressorParams:
    """Linear map from all pooled features straight to a crop center."""

    weights: np.ndarray  # (2, G*G*3)
    bias: np.ndarray  # (2,)

    @classmethod
    def initial(cls, cfg: ModelConfig) -> "CenterRegressorParams":
        n = cfg.grid_size * cfg.grid_size * N_FEATURES
        return cls(np.zeros((2, n)), np.full(2, cfg.image_side / 2.0))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_vector(cls, vec: np.ndarray, cfg: ModelConfig) -> "CenterRegressorParams":
        n = cfg.grid_size * cfg.grid_size * N_FEATURES
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != 2 * n + 2:
            raise ValueError("center regressor vector has the wrong length")
        return cls(vec[: 2 * n].reshape(2, n).copy(), vec[2 * n :].copy())


def predict_center(reg: CenterRegressorParams, feats: np.ndarray) -> tuple[float, float]:
    raw = reg.weights @ feats.ravel() + reg.bias
    return float(raw[0]), float(raw[1])


def clamp_center(center: tuple[float, float], side_px: int, image_side: int) -> tuple[float, float]:
    """Clamp a crop center so the window stays fully inside the image."""
    half = side_px / 2.0
    return (
        min(max(center[0], half), image_side - half),
        min(max(center[1], half), image_side - half),
    )


def frame_prediction(
    detector_kind: str,
    detector,
    classifier: ClassifierParams,
    image: np.ndarray,
    cfg: ModelConfig,
):
    """Test-time path for one frame.

    Returns ``(stage_probs, region, grid_probs)``.  Grid detectors crop at
    the expected center of the proposal distribution; center regressors crop
    bilinearly at their clamped prediction; ``"none"`` classifies the whole
    frame (``region`` and ``grid_probs`` are then ``None``).
    """
    if detector_kind == "grid":
        grid_probs = propose(detector, image, cfg)
        cx, cy = expected_center(grid_probs, cfg)
        region = Region(cx, cy, float(cfg.crop_side))
        patch = crop(image, region)
        return classify(classifier, patch, cfg), region, grid_probs
    if detector_kind == "center_regression":
        feats = pooled_features(image, cfg.grid_size)
        cx, cy = clamp_center(predict_center(detector, feats), cfg.crop_side, cfg.image_side)
        region = Region(cx, cy, float(cfg.crop_side))
        patch = bilinear_crop(image, (cx, cy), cfg.crop_side)
        return classify(classifier, patch, cfg), region, None
    if detector_kind == "none":
        return classify(classifier, image, cfg), None, None
    raise ValueError(f"unknown detector kind {detector_kind!r}")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_mode: str
    detector_kind: str  # "grid" | "center_regression" | "none"
    detector: DetectorParams | CenterRegressorParams | None
    classifier: ClassifierParams
    dataset_fingerprint: str
    best_epoch: int

    def __post_init__(self) -> None:
        if self.train_mode not in TRAIN_MODES:
            raise ValueError(f"unknown train mode {self.train_mode!r}")
        if self.detector_kind not in ("grid", "center_regression", "none"):
            raise ValueError(f"unknown detector kind {self.detector_kind!r}")
        if (self.detector is None) != (self.detector_kind == "none"):
            raise ValueError("detector params must match detector_kind")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": {
            "image_side": ckpt.model_config.image_side,
            "grid_size": ckpt.model_config.grid_size,
            "crop_fraction": ckpt.model_config.crop_fraction,
            "n_stages": ckpt.model_config.n_stages,
            "classifier_input_side": ckpt.model_config.classifier_input_side,
            "hidden_units": ckpt.model_config.hidden_units,
            "raw_side": ckpt.model_config.raw_side,
        },
        "train_mode": ckpt.train_mode,
        "detector_kind": ckpt.detector_kind,
        "detector": None if ckpt.detector is None else ckpt.detector.to_vector().tolist(),
        "classifier": ckpt.classifier.to_vector().tolist(),
        "dataset_fingerprint": ckpt.dataset_fingerprint,
        "best_epoch": ckpt.best_epoch,
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ": "), indent=1) + "\n",
        encoding="utf-8",
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version}")
    cfg = ModelConfig(**payload["model_config"])
    kind = payload["detector_kind"]
    detector: DetectorParams | CenterRegressorParams | None
    if kind == "grid":
        detector = DetectorParams.from_vector(np.asarray(payload["detector"]))
    elif kind == "center_regression":
        detector = CenterRegressorParams.from_vector(np.asarray(payload["detector"]), cfg)
    else:
        detector = None
    classifier = ClassifierParams.from_vector(np.asarray(payload["classifier"]), cfg)
    return Checkpoint(
        cfg,
        payload["train_mode"],
        kind,
        detector,
        classifier,
        payload["dataset_fingerprint"],
        int(payload["best_epoch"]),
    )
