"""Synthetic embryo time-lapse generator and dataset store.

Each video is a sequence of 64x64 grayscale frames showing one schematic
embryo: a bright disc holding ``k`` darker sub-blobs, where ``k`` follows the
developmental stage (1, 1, 2, 3, 4, 5 for tStart, tPNf, t2, t3, t4, t4+; the
tPNf frame additionally shows a small bright pronucleus dot).  Sub-blob
radii shrink slower than 1/sqrt(k), so the total dark area grows with the
cell count and later stages read as slightly darker even at coarse
resolution -- mimicking how real cleavage-stage embryos gain internal
texture.  A dimmer ring near the image border imitates the well rim, and
Gaussian pixel noise is added on top.  Stage durations are drawn from a
Dirichlet prior whose mean matches the target per-class frame frequencies
(aggregate label statistics land near 11.48 / 6.11 / 25.70 / 4.36 / 25.85 /
26.50 percent); the prior's concentration is deliberately low so transition
times vary a lot from embryo to embryo, as they do clinically.

Videos are grouped into synthetic "patients" of 11-12 videos each, and
splits never share a patient.  On disk a dataset is a directory of binary
PGM frames plus per-video label CSVs under a ``manifest.json``; everything
is byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    Region,
    Rng,
    StageSequence,
    TransitionTimes,
    labels_from_transitions,
    transitions_from_labels,
)

__all__ = [
    "CELLS_PER_STAGE",
    "TARGET_STAGE_PERCENTS",
    "SynthConfig",
    "SynthVideo",
    "Dataset",
    "ConfigError",
    "stage_durations",
    "render_frame",
    "generate_video",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "write_pgm",
    "read_pgm",
    "oracle_stage",
]

#: Sub-blob count per stage index (cell count; tPNf also gets a bright dot).
CELLS_PER_STAGE = (1, 1, 2, 3, 4, 5)

#: Target long-run fraction of frames per stage, in percent.
TARGET_STAGE_PERCENTS = (11.48, 6.11, 25.70, 4.36, 25.85, 26.50)

# Rendering intensities, chosen so every structure lives in its own
# quantization-safe band: background < blobs < rim < disc < pronucleus dot.
_BACKGROUND = 0.25
_RIM = 0.55
_DISC = 0.75
_BLOB = 0.42
_DOT = 0.95
_RIM_RADIUS_FRACTION = 0.47
_RIM_WIDTH_PX = 2.5
_DOT_RADIUS_FRACTION = 0.20  # of the embryo radius
# Sub-blob radius is 0.5 * embryo_r * k**-_BLOB_SHRINK.  The packing-neutral
# exponent would be 0.5 (constant total area); 0.40 makes total blob area grow
# like k**0.2, a deliberately faint global-darkness cue: enough for a
# full-frame classifier to beat the frame-index baseline, while telling the
# stages apart reliably still needs the blob structure only a centered crop
# resolves.
_BLOB_SHRINK = 0.40

# Intensity band (inclusive of quantization wobble) used by the noise-free
# counting oracle to isolate sub-blob pixels.
_BLOB_BAND = (0.36, 0.48)
_DOT_THRESHOLD = 0.90
_MIN_SPLIT_VIDEOS = 11
_MAX_SPLIT_VIDEOS = 12


class ConfigError(ValueError):
    """A generator configuration value is out of range."""


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator; defaults give the standard dataset."""

    image_side: int = 64
    raw_side: int = 500
    n_stages: int = 6
    frames_per_video: int = 120
    videos_per_split: tuple[int, int, int] = (200, 24, 24)
    embryo_radius_fraction: float = 0.24
    center_jitter_px: float = 0.5
    noise_sigma: float = 0.06
    stage_duration_prior: tuple[float, ...] = TARGET_STAGE_PERCENTS
    duration_concentration: float = 12.0

    def __post_init__(self) -> None:
        if self.image_side < 16:
            raise ConfigError(f"image_side must be >= 16, got {self.image_side}")
        if self.raw_side < self.image_side:
            raise ConfigError("raw_side must be >= image_side")
        if self.n_stages != len(CELLS_PER_STAGE):
            raise ConfigError(
                f"generator renders exactly {len(CELLS_PER_STAGE)} stages, "
                f"got n_stages={self.n_stages}"
            )
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if len(self.videos_per_split) != 3 or any(v < 0 for v in self.videos_per_split):
            raise ConfigError(f"bad videos_per_split {self.videos_per_split}")
        if not 0.05 <= self.embryo_radius_fraction <= 0.35:
            raise ConfigError(
                f"embryo_radius_fraction outside [0.05, 0.35]: {self.embryo_radius_fraction}"
            )
        if self.center_jitter_px < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter and noise must be non-negative")
        if len(self.stage_duration_prior) != self.n_stages or any(
            w <= 0 for w in self.stage_duration_prior
        ):
            raise ConfigError(f"bad stage_duration_prior {self.stage_duration_prior}")
        if self.duration_concentration <= 0:
            raise ConfigError(
                f"duration_concentration must be > 0, got {self.duration_concentration}"
            )

    @property
    def embryo_radius_px(self) -> float:
        return self.embryo_radius_fraction * self.image_side

    @property
    def duration_alpha(self) -> tuple[float, ...]:
        """Dirichlet alpha: prior renormalized to sum to the concentration."""
        total = sum(self.stage_duration_prior)
        scale = self.duration_concentration / total
        return tuple(w * scale for w in self.stage_duration_prior)

    def fingerprint_payload(self) -> dict:
        d = dataclasses.asdict(self)
        d["videos_per_split"] = list(self.videos_per_split)
        d["stage_duration_prior"] = list(self.stage_duration_prior)
        return d


@dataclass
class SynthVideo:
    """One generated video: quantized frames plus full ground truth."""

    video_id: int
    split: str
    patient_id: int
    frames: np.ndarray  # (T, H, W) uint8, exactly what the PGM files hold
    stages: StageSequence
    truth_box: Region

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def frame_float(self, t: int) -> np.ndarray:
        """Frame ``t`` as float64 in [0, 1]."""
        return self.frames[t].astype(np.float64) / 255.0


@dataclass
class Dataset:
    config: SynthConfig
    seed: int
    videos: list[SynthVideo]

    def split(self, name: str) -> list[SynthVideo]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [v for v in self.videos if v.split == name]

    @property
    def fingerprint(self) -> str:
        payload = {"seed": self.seed, "config": self.config.fingerprint_payload()}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def stage_durations(alpha: tuple[float, ...], n_frames: int, rng: Rng) -> np.ndarray:
    """Integer frame counts per stage: Dirichlet(alpha), largest-remainder rounding.

    ``alpha`` is used as the Dirichlet concentration vector directly (see
    ``SynthConfig.duration_alpha``).  The first stage always keeps at least
    one frame so every video starts at tStart; stages whose share rounds to
    zero are simply skipped.
    """
    weights = rng.generator.dirichlet(np.asarray(alpha, dtype=np.float64))
    exact = weights * n_frames
    counts = np.floor(exact).astype(np.int64)
    fractions = exact - counts
    # stable sort: remainder ties hand the extra frame to the earlier stage
    order = np.argsort(-fractions, kind="stable")
    for idx in order[: n_frames - int(counts.sum())]:
        counts[idx] += 1
    if counts[0] == 0:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[0] += 1
    assert counts.sum() == n_frames and counts[0] >= 1
    return counts


def _transitions_from_durations(durations: np.ndarray) -> TransitionTimes:
    # boundary == T means the video ended before reaching that stage
    total = int(durations.sum())
    first = {}
    boundary = 0
    for stage in range(1, durations.size):
        boundary += int(durations[stage - 1])
        if boundary < total:
            first[stage] = boundary
    return TransitionTimes(first)


def _blob_layout(stage: int, embryo_r: float, rotation: float) -> list[tuple[float, float, float]]:
    """Sub-blob offsets and radii for one stage: ``k`` disjoint discs on a ring.

    The ring radius balances the blob-to-blob gap against the blob-to-rim gap
    (both come out at >= 0.09 * embryo_r), so neighbouring blobs never merge
    and every blob stays strictly inside the embryo disc.
    """
    k = CELLS_PER_STAGE[stage]
    if k == 1:
        return [(0.0, 0.0, 0.5 * embryo_r)]
    blob_r = 0.5 * embryo_r * k ** (-_BLOB_SHRINK)
    ring = (embryo_r + blob_r) / (2.0 * math.sin(math.pi / k) + 1.0)
    out = []
    for m in range(k):
        angle = rotation + 2.0 * math.pi * m / k
        out.append((ring * math.cos(angle), ring * math.sin(angle), blob_r))
    return out


def render_frame(
    stage: int, center: tuple[float, float], cfg: SynthConfig, rng: Rng
) -> np.ndarray:
    """Render one float64 frame in [0, 1] for ``stage`` at embryo ``center``.

    Draw order is rim, disc, blobs, pronucleus dot, then additive Gaussian
    noise; later structures overwrite earlier ones.  The blob constellation's
    rotation and the noise field come from ``rng``.
    """
    if not 0 <= stage < cfg.n_stages:
        raise ValueError(f"stage {stage} outside [0, {cfg.n_stages})")
    side = cfg.image_side
    cx, cy = center
    # pixel centers in continuous coordinates
    ax = np.arange(side, dtype=np.float64) + 0.5
    xx, yy = np.meshgrid(ax, ax)

    img = np.full((side, side), _BACKGROUND, dtype=np.float64)

    mid = side / 2.0
    rim_dist = np.hypot(xx - mid, yy - mid)
    img[np.abs(rim_dist - _RIM_RADIUS_FRACTION * side) <= _RIM_WIDTH_PX / 2.0] = _RIM

    embryo_r = cfg.embryo_radius_px
    dist2 = (xx - cx) ** 2 + (yy - cy) ** 2
    img[dist2 <= embryo_r**2] = _DISC

    rotation = float(rng.generator.uniform(0.0, 2.0 * math.pi))
    layout = _blob_layout(stage, embryo_r, rotation)
    for dx, dy, blob_r in layout:
        img[(xx - (cx + dx)) ** 2 + (yy - (cy + dy)) ** 2 <= blob_r**2] = _BLOB
    if stage == 1:  # tPNf: bright pronucleus dot inside the single blob
        dx, dy, blob_r = layout[0]
        dot_x = cx + dx + 0.3 * blob_r * math.cos(rotation)
        dot_y = cy + dy + 0.3 * blob_r * math.sin(rotation)
        dot_r = _DOT_RADIUS_FRACTION * embryo_r
        img[(xx - dot_x) ** 2 + (yy - dot_y) ** 2 <= dot_r**2] = _DOT

    if cfg.noise_sigma > 0:
        img += rng.generator.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image to the uint8 values the PGM files store."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_video(
    video_id: int, split: str, patient_id: int, cfg: SynthConfig, rng: Rng
) -> SynthVideo:
    """Generate one video from its own random stream."""
    g = rng.generator
    embryo_r = cfg.embryo_radius_px
    margin = embryo_r + 3.0 * cfg.center_jitter_px + 1.0
    if 2 * margin >= cfg.image_side:
        raise ConfigError("embryo radius plus jitter margin exceeds the image")
    base_cx = float(g.uniform(margin, cfg.image_side - margin))
    base_cy = float(g.uniform(margin, cfg.image_side - margin))

    durations = stage_durations(cfg.duration_alpha, cfg.frames_per_video, rng)
    transitions = _transitions_from_durations(durations)
    stages = labels_from_transitions(transitions, cfg.frames_per_video)

    lo = embryo_r + 0.5
    hi = cfg.image_side - embryo_r - 0.5
    frames = np.empty((cfg.frames_per_video, cfg.image_side, cfg.image_side), dtype=np.uint8)
    for t, stage in enumerate(stages.labels):
        jx, jy = g.normal(0.0, cfg.center_jitter_px, size=2)
        center = (
            float(np.clip(base_cx + jx, lo, hi)),
            float(np.clip(base_cy + jy, lo, hi)),
        )
        frames[t] = quantize(render_frame(stage, center, cfg, rng))

    truth_box = Region(base_cx, base_cy, 2.0 * embryo_r)
    return SynthVideo(video_id, split, patient_id, frames, stages, truth_box)


def generate_dataset(cfg: SynthConfig, rng: Rng) -> Dataset:
    """Generate all splits, patient-stratified, one child stream per video."""
    sizes = rng.child("patient-sizes").generator
    videos: list[SynthVideo] = []
    video_id = 0
    patient_id = 0
    for split, quota in zip(("train", "val", "test"), cfg.videos_per_split):
        remaining = quota
        while remaining > 0:
            size = min(remaining, int(sizes.integers(_MIN_SPLIT_VIDEOS, _MAX_SPLIT_VIDEOS + 1)))
            for _ in range(size):
                videos.append(
                    generate_video(video_id, split, patient_id, cfg, rng.child("video", video_id))
                )
                video_id += 1
            remaining -= size
            patient_id += 1
    return Dataset(cfg, rng.seed, videos)


# ---------------------------------------------------------------------------
# on-disk format


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a uint8 image as binary (P5) PGM."""
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return img.reshape(h, w).copy()


def _frame_name(video_id: int, frame: int) -> str:
    return f"v{video_id:04d}_f{frame:04d}.pgm"


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write ``manifest.json``, ``frames/*.pgm``, and ``labels/*_labels.csv``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    manifest = {
        "format_version": 1,
        "seed": dataset.seed,
        "fingerprint": dataset.fingerprint,
        "config": dataset.config.fingerprint_payload(),
        "splits": {
            name: [v.video_id for v in dataset.split(name)]
            for name in ("train", "val", "test")
        },
        "videos": [
            {
                "video": v.video_id,
                "split": v.split,
                "patient_id": v.patient_id,
                "n_frames": v.n_frames,
                "truth_box": {
                    "center_x": v.truth_box.center_x,
                    "center_y": v.truth_box.center_y,
                    "side": v.truth_box.side,
                },
                "transitions": {
                    str(s): f for s, f in sorted(transitions_from_labels(v.stages).first_frame.items())
                },
            }
            for v in dataset.videos
        ],
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    for v in dataset.videos:
        rows = [f"{t},{stage}" for t, stage in enumerate(v.stages.labels)]
        (out / "labels" / f"v{v.video_id:04d}_labels.csv").write_text(
            "frame,stage_index\n" + "\n".join(rows) + "\n", encoding="utf-8"
        )
        for t in range(v.n_frames):
            write_pgm(out / "frames" / _frame_name(v.video_id, t), v.frames[t])


def load_dataset(in_dir: str | Path) -> Dataset:
    """Read a dataset directory back; verifies the config fingerprint."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format_version {manifest.get('format_version')}")
    raw_cfg = dict(manifest["config"])
    raw_cfg["videos_per_split"] = tuple(raw_cfg["videos_per_split"])
    raw_cfg["stage_duration_prior"] = tuple(raw_cfg["stage_duration_prior"])
    cfg = SynthConfig(**raw_cfg)
    dataset = Dataset(cfg, int(manifest["seed"]), [])
    if dataset.fingerprint != manifest["fingerprint"]:
        raise ValueError(f"{root}: manifest fingerprint does not match its config echo")

    split_of = {
        vid: name for name, ids in manifest["splits"].items() for vid in ids
    }
    for entry in manifest["videos"]:
        vid = entry["video"]
        n_frames = entry["n_frames"]
        labels_path = root / "labels" / f"v{vid:04d}_labels.csv"
        lines = labels_path.read_text(encoding="utf-8").strip().splitlines()
        if lines[0] != "frame,stage_index":
            raise ValueError(f"{labels_path}: unexpected header {lines[0]!r}")
        labels = tuple(int(line.split(",")[1]) for line in lines[1:])
        if len(labels) != n_frames:
            raise ValueError(f"{labels_path}: {len(labels)} rows, expected {n_frames}")
        frames = np.stack(
            [read_pgm(root / "frames" / _frame_name(vid, t)) for t in range(n_frames)]
        )
        box = entry["truth_box"]
        dataset.videos.append(
            SynthVideo(
                vid,
                split_of[vid],
                entry["patient_id"],
                frames,
                StageSequence(labels, monotone=True),
                Region(box["center_x"], box["center_y"], box["side"]),
            )
        )
    dataset.videos.sort(key=lambda v: v.video_id)
    return dataset


# ---------------------------------------------------------------------------
# generator sanity oracle


def _count_components(mask: np.ndarray) -> int:
    """4-connected component count via flood fill (images are tiny)."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            count += 1
            stack = [(r0, c0)]
            seen[r0, c0] = True
            while stack:
                r, c = stack.pop()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
    return count


def oracle_stage(frame01: np.ndarray) -> int:
    """Recover the stage of a noise-free frame by counting sub-blobs.

    Only valid for ``noise_sigma = 0`` renders: blob pixels sit alone in
    their intensity band, and the pronucleus dot separates tPNf from tStart.
    """
    blobs = (frame01 > _BLOB_BAND[0]) & (frame01 < _BLOB_BAND[1])
    k = _count_components(blobs)
    if k <= 1:
        return 1 if bool((frame01 > _DOT_THRESHOLD).any()) else 0
    return min(k, len(CELLS_PER_STAGE) - 1)
