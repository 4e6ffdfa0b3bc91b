"""Monotone decoding of per-frame stage distributions.

Development never moves backwards, so the per-video sequence of stage
predictions is constrained to be non-decreasing.  Given a ``(T, S)`` matrix
of per-frame stage probabilities, the decoder returns the non-decreasing
sequence minimizing the summed per-frame potential

* ``nll``:  ``-log(max(p[s], eps))`` — confidence of the chosen stage, or
* ``emd``:  ``sum_k p[k] * |s - k|`` — ordinal ground distance to the whole
  distribution,

breaking cost ties toward the lexicographically smallest sequence (lower
stages as early as possible).

The dynamic program runs in ``O(T * S)``: a backward sweep accumulates
suffix-optimal costs with a running minimum, then a forward greedy pass
reads off the optimal sequence.  ``brute_force_decode`` enumerates every
non-decreasing sequence and is the reference oracle for small instances.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import StageSequence, TransitionTimes, check_video_prediction, transitions_from_labels

__all__ = [
    "Potential",
    "NLL",
    "EMD",
    "InstanceTooLargeError",
    "potential_value",
    "potential_matrix",
    "decode_monotone",
    "brute_force_decode",
    "decoded_transitions",
    "write_predictions",
    "read_predictions",
]

#: Refuse brute force beyond this many candidate sequences.
_BRUTE_FORCE_LIMIT = 2_000_000


class InstanceTooLargeError(ValueError):
    """Brute-force enumeration would exceed the candidate-count limit."""


@dataclass(frozen=True)
class Potential:
    """Per-frame cost family: ``kind`` is ``"nll"`` or ``"emd"``.

    ``eps`` floors probabilities inside the log for the ``nll`` kind so a
    zero-probability stage costs ``-log(eps)`` instead of infinity.
    """

    kind: str
    eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.kind not in ("nll", "emd"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")


NLL = Potential("nll")
EMD = Potential("emd")


def potential_value(potential: Potential, stage: int, probs: np.ndarray) -> float:
    """Cost of assigning ``stage`` to one frame with distribution ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= stage < p.size:
        raise ValueError(f"stage {stage} outside [0, {p.size})")
    if potential.kind == "nll":
        return -math.log(max(float(p[stage]), potential.eps))
    return float(np.dot(p, np.abs(stage - np.arange(p.size))))


def potential_matrix(potential: Potential, probs: np.ndarray) -> np.ndarray:
    """All per-frame, per-stage costs at once: shape ``(T, S)``."""
    p = check_video_prediction(probs)
    if potential.kind == "nll":
        return -np.log(np.maximum(p, potential.eps))
    stages = np.arange(p.shape[1])
    ground = np.abs(stages[:, None] - stages[None, :]).astype(np.float64)
    return p @ ground


def decode_monotone(probs: np.ndarray, potential: Potential) -> StageSequence:
    """Minimum-cost non-decreasing stage sequence for one video.

    Parameters
    ----------
    probs : (T, S) array of per-frame stage probabilities, rows sum to 1.
    potential : per-frame cost family (``NLL`` or ``EMD``).

    Returns
    -------
    StageSequence flagged monotone; among all minimum-cost sequences, the
    lexicographically smallest.
    """
    pot = potential_matrix(potential, probs)
    n_frames, n_stages = pot.shape

    # suffix[t][s] = best cost of frames t.. given the stage at frame t is s
    suffix = np.empty_like(pot)
    suffix[-1] = pot[-1]
    for t in range(n_frames - 2, -1, -1):
        tail_best = np.minimum.accumulate(suffix[t + 1][::-1])[::-1]
        suffix[t] = pot[t] + tail_best

    labels = []
    lowest = 0
    for t in range(n_frames):
        # first argmin = smallest stage among optimal continuations
        lowest += int(np.argmin(suffix[t][lowest:]))
        labels.append(lowest)

    decoded = StageSequence(tuple(labels), monotone=True)
    assert decoded.is_monotone()
    return decoded


def brute_force_decode(probs: np.ndarray, potential: Potential) -> StageSequence:
    """Reference oracle: enumerate every non-decreasing sequence.

    Candidates are generated in lexicographic order and compared strictly,
    so ties resolve exactly as :func:`decode_monotone` promises.  Instances
    with more than a couple million candidates raise
    :class:`InstanceTooLargeError`.
    """
    pot = potential_matrix(potential, probs)
    n_frames, n_stages = pot.shape
    n_candidates = math.comb(n_frames + n_stages - 1, n_stages - 1)
    if n_candidates > _BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(
            f"{n_candidates} monotone sequences for T={n_frames}, S={n_stages}"
        )
    candidates = np.fromiter(
        itertools.chain.from_iterable(
            itertools.combinations_with_replacement(range(n_stages), n_frames)
        ),
        dtype=np.int64,
        count=n_candidates * n_frames,
    ).reshape(n_candidates, n_frames)
    # accumulate right-to-left, the same float operation order as the DP's
    # suffix recursion, so exact cost ties agree bitwise between the two
    costs = pot[n_frames - 1, candidates[:, n_frames - 1]].copy()
    for t in range(n_frames - 2, -1, -1):
        costs = pot[t, candidates[:, t]] + costs
    best = int(np.argmin(costs))  # first occurrence = lexicographically smallest
    return StageSequence(tuple(int(s) for s in candidates[best]), monotone=True)


def decoded_transitions(probs: np.ndarray, potential: Potential) -> TransitionTimes:
    """Transition times of the decoded monotone sequence."""
    return transitions_from_labels(decode_monotone(probs, potential))


def write_predictions(path: str | Path, probs: np.ndarray) -> None:
    """Write one video's predictions as JSON lines: ``{"frame": t, "probs": [...]}``."""
    arr = check_video_prediction(probs)
    lines = [
        json.dumps({"frame": t, "probs": [float(v) for v in row]}, separators=(",", ":"))
        for t, row in enumerate(arr)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path: str | Path) -> np.ndarray:
    """Read a predictions JSONL file back into a validated (T, S) matrix."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("frame") != i:
                raise ValueError(f"{path}: expected frame {i}, got {record.get('frame')!r}")
            rows.append(record["probs"])
    if not rows:
        raise ValueError(f"{path}: no prediction records")
    return check_video_prediction(np.asarray(rows, dtype=np.float64))
