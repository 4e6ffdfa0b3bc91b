"""Domain types shared by the whole pipeline.

Stage labels, per-video stage sequences, transition times, square image
regions, and the deterministic random-stream wrapper every stochastic
component draws from.

Conventions
-----------
* Stages are 0-indexed integers; the canonical development has six stages
  named ``tStart, tPNf, t2, t3, t4, t4+``.
* A per-frame label is the stage of the most recent transition at or before
  that frame, so ground-truth sequences are monotone (non-decreasing).
* Transition times map stage ``s >= 1`` to the first frame whose label
  meets or exceeds ``s``; stages never reached are simply absent.
* Image coordinates are continuous: pixel ``(row r, col c)`` covers the unit
  square ``[c, c+1) x [r, r+1)``, so its center sits at ``(c + 0.5, r + 0.5)``
  in ``(x, y)`` order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "STAGE_NAMES",
    "N_STAGES",
    "FRAME_PERIOD_MINUTES",
    "OrderingError",
    "FrameRangeError",
    "StageLabel",
    "StageSequence",
    "TransitionTimes",
    "Region",
    "Rng",
    "labels_from_transitions",
    "transitions_from_labels",
    "check_stage_distribution",
    "check_video_prediction",
]

STAGE_NAMES = ("tStart", "tPNf", "t2", "t3", "t4", "t4+")
N_STAGES = len(STAGE_NAMES)

#: Acquisition period of the source videos, minutes per frame.
FRAME_PERIOD_MINUTES = 15.0


class OrderingError(ValueError):
    """A stage sequence or transition map violates monotone ordering."""


class FrameRangeError(ValueError):
    """A frame index falls outside ``[0, n_frames)``."""


@dataclass(frozen=True)
class StageLabel:
    """One developmental stage, identified by its ordinal index."""

    index: int
    n_stages: int = N_STAGES

    def __post_init__(self) -> None:
        if not 0 <= self.index < self.n_stages:
            raise ValueError(
                f"stage index {self.index} outside [0, {self.n_stages})"
            )

    @property
    def name(self) -> str:
        """Canonical name; defined only for the standard six-stage set."""
        if self.n_stages != N_STAGES:
            raise ValueError("stage names are defined only for the canonical set")
        return STAGE_NAMES[self.index]


@dataclass(frozen=True)
class StageSequence:
    """Per-frame stage indices for one video.

    ``monotone=True`` asserts the non-decreasing invariant at construction
    time; ground truth and decoded sequences always carry it, raw argmax
    sequences usually do not.
    """

    labels: tuple[int, ...]
    frame_period_minutes: float = FRAME_PERIOD_MINUTES
    monotone: bool = False

    def __post_init__(self) -> None:
        if len(self.labels) == 0:
            raise ValueError("a stage sequence needs at least one frame")
        if any(v < 0 for v in self.labels):
            raise ValueError("stage indices are non-negative")
        if self.monotone and not self.is_monotone():
            raise OrderingError(f"sequence flagged monotone but is not: {self.labels}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def is_monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.labels, self.labels[1:]))

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TransitionTimes:
    """First frame at which each stage ``s >= 1`` is reached.

    Stages absent from the mapping were never reached before the video
    ended.  Where both ``s < s'`` are present, ``first_frame[s] <=
    first_frame[s']`` (reaching a later stage implies having met the
    earlier one).
    """

    first_frame: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for stage, frame in self.first_frame.items():
            if stage < 1:
                raise ValueError(f"transition stages start at 1, got {stage}")
            if frame < 0:
                raise FrameRangeError(f"negative transition frame {frame}")
        stages = sorted(self.first_frame)
        frames = [self.first_frame[s] for s in stages]
        if any(b < a for a, b in zip(frames, frames[1:])):
            raise OrderingError(
                f"transition frames not non-decreasing in stage order: "
                f"{dict(zip(stages, frames))}"
            )

    def stages(self) -> tuple[int, ...]:
        return tuple(sorted(self.first_frame))


@dataclass(frozen=True)
class Region:
    """Axis-aligned square in image coordinates (pixel units)."""

    center_x: float
    center_y: float
    side: float

    def __post_init__(self) -> None:
        if not self.side > 0:
            raise ValueError(f"region side must be positive, got {self.side}")


def labels_from_transitions(transitions: TransitionTimes, n_frames: int) -> StageSequence:
    """Expand a transition map into the per-frame monotone stage sequence.

    Frame ``t`` gets the largest stage whose first frame is ``<= t`` (0 if
    none).  Raises :class:`FrameRangeError` for transition frames at or past
    ``n_frames`` and :class:`OrderingError` via ``TransitionTimes`` if the
    map itself is inconsistent.
    """
    if n_frames < 1:
        raise FrameRangeError(f"need at least one frame, got {n_frames}")
    for stage, frame in transitions.first_frame.items():
        if frame >= n_frames:
            raise FrameRangeError(
                f"stage {stage} transition at frame {frame} >= n_frames {n_frames}"
            )
    labels = np.zeros(n_frames, dtype=np.int64)
    for stage in sorted(transitions.first_frame):
        labels[transitions.first_frame[stage]:] = stage
    return StageSequence(tuple(int(v) for v in labels), monotone=True)


def transitions_from_labels(sequence: StageSequence) -> TransitionTimes:
    """Invert :func:`labels_from_transitions`.

    Uses meets-or-exceeds semantics: ``first_frame[s] = min{t : labels[t] >=
    s}``, so a skipped stage inherits the frame of the jump that passed it.
    Well-defined for non-monotone sequences too (raw argmax output).
    """
    labels = sequence.as_array()
    top = int(labels.max())
    first: dict[int, int] = {}
    for stage in range(1, top + 1):
        hits = np.nonzero(labels >= stage)[0]
        if hits.size:
            first[stage] = int(hits[0])
    return TransitionTimes(first)


def check_stage_distribution(probs: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Validate a single per-frame stage distribution; returns it as float64."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"expected a 1-D distribution over >= 2 stages, got shape {arr.shape}")
    if np.any(arr < -atol):
        raise ValueError("stage probabilities must be non-negative")
    total = float(arr.sum())
    if abs(total - 1.0) > atol:
        raise ValueError(f"stage probabilities sum to {total}, expected 1")
    return arr


def check_video_prediction(probs: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Validate a (T, S) matrix of per-frame stage distributions."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise ValueError(f"expected (T, S) probabilities, got shape {arr.shape}")
    if np.any(arr < -atol):
        raise ValueError("stage probabilities must be non-negative")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"frame {bad} probabilities sum to {sums[bad]}, expected 1")
    return arr


def _tag_to_key(tag: str | int) -> int:
    """Map a child-stream tag to a 32-bit spawn-key entry (sha256 prefix)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) % (1 << 32)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class Rng:
    """Deterministic random stream with derivable child streams.

    Wraps numpy's ``Generator`` over the PCG64 bit generator, seeded through
    ``SeedSequence(seed, spawn_key=key_path)``.  Child streams extend the key
    path with hashed string tags or raw integers, so ``Rng(7).child("synth",
    3)`` names the same stream in every process and the master stream stays
    untouched by how many children were derived.
    """

    def __init__(self, seed: int, _key_path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < (1 << 64):
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._key_path = tuple(_key_path)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._key_path))
        )

    def child(self, *tags: str | int) -> "Rng":
        if not tags:
            raise ValueError("child stream needs at least one tag")
        return Rng(self.seed, self._key_path + tuple(_tag_to_key(t) for t in tags))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Rng(seed={self.seed}, key_path={self._key_path})"
