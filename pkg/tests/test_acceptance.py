"""End-to-end acceptance checklist.

Run ``pytest tests/test_acceptance.py -v``: each criterion below records its
checks through the ``acceptance`` fixture (see ``conftest.py``) and the run
ends with one PASS/FAIL line per criterion.  The detection/staging criteria
train all four modes on the default dataset, so the full file takes roughly
half an hour; everything else finishes in seconds.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from embryostage import cli
from embryostage.core import Region, Rng, StageSequence
from embryostage.decode import EMD, NLL, brute_force_decode, decode_monotone
from embryostage.evaluate import (
    error_summary,
    evaluate,
    evaluate_naive,
    frame_accuracy,
    jaccard,
    naive_baseline,
    predict_video,
)
from embryostage.model import (
    ClassifierParams,
    DetectorParams,
    ModelConfig,
    bilinear_crop,
    classifier_backward,
    classifier_forward,
    classifier_losses,
    downsample,
    grid_entropy,
    grid_entropy_grad,
    grid_log_probs,
    init_classifier,
    log_prob_grad,
    pooled_features,
    upsample_grad,
)
from embryostage.synth import SynthConfig, generate_dataset
from embryostage.train import TrainConfig, _crop_inputs, mc_estimate_from_cells, mc_loss_and_grads, train

from fdcheck import central_difference, relative_error, smooth_image

TOY = ModelConfig(image_side=16, grid_size=4, classifier_input_side=4, hidden_units=8)

#: populated by the C7 smoke run, re-checked by C8
_SMOKE_DIRS: list[Path] = []


# ---------------------------------------------------------------------------
# C1: DP decoder vs brute force


def test_c1_dp_matches_brute_force(acceptance):
    rng = Rng(77)
    t0 = time.monotonic()
    n = 1000
    for i in range(n):
        g = rng.child(i).generator
        t = int(g.integers(1, 9))
        s = int(g.integers(2, 5))
        probs = g.dirichlet(np.ones(s), size=t)
        for potential in (NLL, EMD):
            fast = decode_monotone(probs, potential)
            slow = brute_force_decode(probs, potential)
            assert fast.labels == slow.labels, (i, potential.kind)
    elapsed = time.monotonic() - t0
    acceptance("C1", True, f"{n} instances, both potentials, sequences identical")
    acceptance("C1", elapsed < 30.0, f"{elapsed:.1f}s < 30s")


# ---------------------------------------------------------------------------
# C2: analytic gradients vs central finite differences


def test_c2_gradient_checks(acceptance):
    worst = {"classifier": 0.0, "log_prob": 0.0, "entropy": 0.0, "bilinear": 0.0}
    rng = Rng(401)

    for draw in range(20):
        g = rng.child("clf", draw).generator
        clf = init_classifier(TOY, rng.child("clf-init", draw))
        x = g.uniform(0.0, 1.0, size=(3, TOY.classifier_inputs))
        labels = g.integers(0, TOY.n_stages, size=3)
        weights = np.full(3, 1.0 / 3.0)
        probs, cache = classifier_forward(clf, x)
        analytic = classifier_backward(clf, cache, probs, labels, weights).to_vector()

        def f_clf(vec):
            p, _ = classifier_forward(ClassifierParams.from_vector(vec, TOY), x)
            return float(classifier_losses(p, labels) @ weights)

        fd = central_difference(f_clf, clf.to_vector(), step=1e-6)
        worst["classifier"] = max(worst["classifier"], relative_error(analytic, fd))

    for draw in range(20):
        image = smooth_image(rng.child("img", draw), side=TOY.image_side)
        feats = pooled_features(image, TOY.grid_size)
        g = rng.child("det", draw).generator
        det = DetectorParams(g.normal(0.0, 1.0, size=3), float(g.normal()))
        cell = (int(g.integers(0, TOY.grid_size)), int(g.integers(0, TOY.grid_size)))
        grid_probs = np.exp(grid_log_probs(det, feats))

        analytic_lp = log_prob_grad(feats, grid_probs, cell)

        def f_logprob(vec):
            return float(
                grid_log_probs(DetectorParams.from_vector(vec), feats)[cell[0], cell[1]]
            )

        fd_lp = central_difference(f_logprob, det.to_vector(), step=1e-6)
        worst["log_prob"] = max(worst["log_prob"], relative_error(analytic_lp, fd_lp))

        analytic_h = grid_entropy_grad(feats, grid_probs)

        def f_entropy(vec):
            p = np.exp(grid_log_probs(DetectorParams.from_vector(vec), feats))
            return grid_entropy(p)

        fd_h = central_difference(f_entropy, det.to_vector(), step=1e-6)
        worst["entropy"] = max(worst["entropy"], relative_error(analytic_h, fd_h))

    big = ModelConfig()
    factor = big.crop_side // big.classifier_input_side
    for draw in range(20):
        image = smooth_image(rng.child("bimg", draw), side=big.image_side)
        g = rng.child("bctr", draw).generator
        clf = init_classifier(big, rng.child("bclf", draw))
        label = int(g.integers(0, big.n_stages))
        half = big.crop_side / 2.0
        # keep the whole FD stencil away from bilinear kinks (integer-crossing
        # sample points) and from the window clamp
        center = np.array(
            [
                float(g.integers(int(half) + 2, int(big.image_side - half) - 2))
                + float(g.uniform(0.2, 0.8)),
                float(g.integers(int(half) + 2, int(big.image_side - half) - 2))
                + float(g.uniform(0.2, 0.8)),
            ]
        )

        def loss_at(center_vec):
            patch = bilinear_crop(image, (center_vec[0], center_vec[1]), big.crop_side)
            x = downsample(patch, big.classifier_input_side).ravel()
            p, _ = classifier_forward(clf, x[None, :])
            return float(classifier_losses(p, np.array([label]))[0])

        patch, dpx, dpy = bilinear_crop(image, (center[0], center[1]), big.crop_side, with_grad=True)
        x = downsample(patch, big.classifier_input_side).ravel()
        p, cache = classifier_forward(clf, x[None, :])
        _, dx_flat = classifier_backward(
            clf, cache, p, np.array([label]), np.ones(1), want_input_grad=True
        )
        dpatch = upsample_grad(dx_flat.reshape(big.classifier_input_side, -1), factor)
        analytic_c = np.array([(dpatch * dpx).sum(), (dpatch * dpy).sum()])
        fd_c = central_difference(loss_at, center, step=1e-5)
        worst["bilinear"] = max(worst["bilinear"], relative_error(analytic_c, fd_c))

    acceptance("C2", worst["classifier"] <= 1e-4, f"classifier {worst['classifier']:.2e} <= 1e-4")
    acceptance("C2", worst["log_prob"] <= 1e-4, f"log-prob {worst['log_prob']:.2e} <= 1e-4")
    acceptance("C2", worst["entropy"] <= 1e-4, f"entropy {worst['entropy']:.2e} <= 1e-4")
    acceptance("C2", worst["bilinear"] <= 1e-3, f"bilinear center {worst['bilinear']:.2e} <= 1e-3")


# ---------------------------------------------------------------------------
# C3: policy-gradient unbiasedness on the G=4 toy


def _toy_setup():
    rng = Rng(55)
    image = smooth_image(rng.child("image"), side=TOY.image_side)
    feats = pooled_features(image, TOY.grid_size)
    g = rng.child("params").generator
    det = DetectorParams(g.normal(0.0, 0.8, size=3), 0.1)
    clf = init_classifier(TOY, rng.child("clf"))
    label = 2
    cells = np.array([(r, c) for r in range(TOY.grid_size) for c in range(TOY.grid_size)])
    return image, feats, det, clf, label, cells


def _toy_exact(image, feats, det, clf, label, cells):
    """Enumerated E[loss] gradient w.r.t. the detector vector."""
    grid_probs = np.exp(grid_log_probs(det, feats))
    gamma = grid_probs[cells[:, 0], cells[:, 1]]
    inputs = _crop_inputs(image, cells, TOY)
    probs, _ = classifier_forward(clf, inputs)
    losses = classifier_losses(probs, np.full(len(cells), label))
    cell_feats = feats[cells[:, 0], cells[:, 1]]
    mean_feat = gamma @ cell_feats
    grad_w = (gamma * losses) @ (cell_feats - mean_feat)
    return losses, gamma, np.concatenate([grad_w, [0.0]])


def test_c3_policy_gradient_unbiased(acceptance):
    image, feats, det, clf, label, cells = _toy_setup()
    losses, gamma, exact = _toy_exact(image, feats, det, clf, label, cells)

    n_draws = 10_000
    rng = Rng(56)
    samples = np.empty((n_draws, 4))
    for i in range(n_draws):
        _, det_grad, _ = mc_loss_and_grads(
            det, clf, image, label, 10, TOY, rng.child(i), feats=feats
        )
        samples[i] = det_grad
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_draws)
    gap = np.abs(mean - exact)
    ok = bool(np.all(gap <= 3.0 * se + 1e-15))
    zmax = float(np.max(gap / np.maximum(se, 1e-15)))
    acceptance("C3", ok, f"10^4-draw MC mean within 3 SE per coordinate (max {zmax:.2f} SE)")

    # enumerate every ordered pair of cells (K=2): the estimator's exact
    # expectation, with and without the baseline, equals the true gradient
    n = len(cells)
    for use_baseline in (True, False):
        total = np.zeros(4)
        for i in range(n):
            for j in range(n):
                pair = cells[[i, j]]
                _, det_grad, _ = mc_estimate_from_cells(
                    det, clf, image, label, pair, TOY, feats=feats, use_baseline=use_baseline
                )
                total += gamma[i] * gamma[j] * det_grad
        err = float(np.max(np.abs(total - exact)))
        acceptance(
            "C3",
            err <= 1e-10,
            f"enumerated expectation ({'with' if use_baseline else 'without'} baseline) "
            f"= exact grad ({err:.1e})",
        )


# ---------------------------------------------------------------------------
# C4 + C5 share the trained runs on the default dataset


@pytest.fixture(scope="module")
def default_dataset():
    return generate_dataset(SynthConfig(), Rng(2024))


@pytest.fixture(scope="module")
def trained_runs(default_dataset):
    """All four modes trained with library defaults; values are (result, seconds).

    Every mode gets the same seed so the comparison is controlled: identical
    classifier init, shuffles, and sample streams — the modes differ only in
    their objective/architecture term.
    """
    runs = {}
    for mode in ("rl_entropy", "rl_no_entropy", "bilinear", "classifier_only_fullframe"):
        t0 = time.monotonic()
        result = train(mode, default_dataset, ModelConfig(), TrainConfig(), Rng(101))
        runs[mode] = (result, time.monotonic() - t0)
    return runs


@pytest.fixture(scope="module")
def test_split_reports(default_dataset, trained_runs):
    reports = {}
    for mode, (result, _) in trained_runs.items():
        preds = [predict_video(result.checkpoint, v) for v in default_dataset.split("test")]
        reports[mode] = evaluate(
            result.checkpoint, default_dataset, split="test", predictions=preds
        )
    return reports


def _final_iou(result) -> float:
    """Mean validation IoU at the run's final epoch.

    Final-epoch state (not the accuracy-selected checkpoint) is the right
    basis for comparing the detector regimes: with a shared epoch budget the
    runs are measured at matched amounts of training, so the comparison
    isolates the training objective rather than where each run's accuracy
    peak happened to land.
    """
    return float(result.log[-1]["val_iou"])


def test_c4_detection_learning(acceptance, trained_runs):
    iou_entropy = _final_iou(trained_runs["rl_entropy"][0])
    iou_plain = _final_iou(trained_runs["rl_no_entropy"][0])
    iou_bilinear = _final_iou(trained_runs["bilinear"][0])
    acceptance("C4", iou_entropy >= 0.5, f"rl-entropy IoU {iou_entropy:.3f} >= 0.5")
    ent_final_h = trained_runs["rl_entropy"][0].log[-1]["detector_entropy"]
    plain_final_h = trained_runs["rl_no_entropy"][0].log[-1]["detector_entropy"]
    acceptance(
        "C4",
        iou_entropy > iou_plain,
        f"rl-entropy {iou_entropy:.3f} > rl-no-entropy {iou_plain:.3f} "
        f"(final proposal entropy {ent_final_h:.2f} vs {plain_final_h:.2f})",
    )
    acceptance(
        "C4",
        iou_bilinear < min(iou_entropy, iou_plain) or iou_bilinear < 0.3,
        f"bilinear {iou_bilinear:.3f} below both RL modes or < 0.3",
    )
    budget = sum(trained_runs[m][1] for m in ("rl_entropy", "rl_no_entropy", "bilinear"))
    acceptance("C4", budget < 1800.0, f"detector training {budget:.0f}s < 1800s")


def test_c5_staging_pipeline(acceptance, trained_runs, test_split_reports, default_dataset):
    detcls = test_split_reports["rl_entropy"]
    fullframe = test_split_reports["classifier_only_fullframe"]
    acceptance(
        "C5",
        detcls["raw_accuracy"] > fullframe["raw_accuracy"],
        f"detcls {detcls['raw_accuracy']:.3f} > fullframe {fullframe['raw_accuracy']:.3f}",
    )
    for kind in ("nll", "emd"):
        dp = detcls["dp"][kind]
        acc_shift = dp["accuracy"] - detcls["raw_accuracy"]
        acceptance("C5", acc_shift >= -0.005, f"dp-{kind} accuracy shift {acc_shift:+.4f} >= -0.5pp")
        raw_mae = detcls["raw_transitions"]["mae_frames"]
        acceptance(
            "C5",
            dp["mae_frames"] <= 0.9 * raw_mae,
            f"dp-{kind} transition MAE {dp['mae_frames']:.2f} <= 0.9 x raw {raw_mae:.2f}",
        )
    baseline = naive_baseline(default_dataset.split("train"), SynthConfig().n_stages)
    naive = evaluate_naive(baseline, default_dataset.split("test"))
    floor = min(r["raw_accuracy"] for r in test_split_reports.values())
    acceptance(
        "C5",
        naive["raw_accuracy"] < floor,
        f"naive {naive['raw_accuracy']:.3f} below every trained model (min {floor:.3f})",
    )


# ---------------------------------------------------------------------------
# C6: metric identities


def test_c6_metric_identities(acceptance, test_split_reports):
    offset = jaccard(Region(10.0, 20.0, 8.0), Region(14.0, 20.0, 8.0))
    acceptance("C6", abs(offset - 1.0 / 3.0) <= 1e-12, f"offset-by-half-width jaccard = 1/3 ({offset!r})")

    for mode, report in test_split_reports.items():
        pairs = [report["raw_transitions"]] + [report["dp"][k] for k in ("nll", "emd")]
        ok = all(p["rmse_frames"] >= p["mae_frames"] >= 0.0 for p in pairs)
        acceptance("C6", ok, f"rmse >= mae on {mode} report")
    terms = np.array([1.0, 5.0, 2.0])
    summary = error_summary(terms)
    acceptance("C6", summary["rmse_frames"] >= summary["mae_frames"], "rmse >= mae identity")

    same = StageSequence((0, 1, 1, 3))
    acceptance("C6", frame_accuracy(same, same) == 1.0, "identical sequences -> accuracy exactly 1")
    other = StageSequence((1, 2, 2, 4))
    acceptance("C6", frame_accuracy(same, other) == 0.0, "disjoint sequences -> accuracy exactly 0")
    half = StageSequence((0, 1, 2, 4))
    acceptance("C6", frame_accuracy(same, half) == 0.5, "half-overlap -> accuracy exactly 0.5")


# ---------------------------------------------------------------------------
# C7: byte-identical seeded reruns (CLI smoke pipeline)


SMOKE_CONFIG = {
    "synth": {"videos_per_split": [4, 2, 2], "frames_per_video": 20},
    "train": {"max_epochs": 2, "patience": 2},
}


def _run_smoke_pipeline(workdir: Path, monkeypatch) -> None:
    monkeypatch.chdir(workdir)
    (workdir / "cfg.json").write_text(json.dumps(SMOKE_CONFIG), encoding="utf-8")
    for argv in (
        ["generate", "--seed", "5", "--out", "data", "--config", "cfg.json"],
        ["train", "--data", "data", "--out", "run", "--mode", "rl-entropy",
         "--seed", "9", "--config", "cfg.json"],
        ["evaluate", "--data", "data", "--checkpoint", "run/checkpoint.json",
         "--split", "test", "--out", "eval"],
        ["decode", "--pred", "eval/predictions", "--out", "dec", "--potential", "both"],
    ):
        assert cli.main(argv) == 0, argv


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_c7_determinism(acceptance, tmp_path_factory, monkeypatch):
    t0 = time.monotonic()
    dirs = []
    for name in ("a", "b"):
        workdir = tmp_path_factory.mktemp(f"smoke_{name}")
        _run_smoke_pipeline(workdir, monkeypatch)
        dirs.append(workdir)
    a, b = _tree_bytes(dirs[0]), _tree_bytes(dirs[1])
    elapsed = time.monotonic() - t0
    acceptance("C7", a.keys() == b.keys(), f"rerun produced the same {len(a)} files")
    diffs = [k for k in a if a[k] != b[k]]
    acceptance("C7", not diffs, f"all {len(a)} files byte-identical (diffs: {diffs[:3]})")
    acceptance("C7", elapsed < 300.0, f"smoke pipeline x2 in {elapsed:.0f}s < 300s")
    _SMOKE_DIRS.extend(dirs)


# ---------------------------------------------------------------------------
# C8: every decoded sequence is monotone


def test_c8_monotone_decoding(acceptance, trained_runs, default_dataset):
    checkpoint = trained_runs["rl_entropy"][0].checkpoint
    checked = 0
    for video in default_dataset.split("test"):
        preds = predict_video(checkpoint, video)
        for potential in (NLL, EMD):
            seq = decode_monotone(preds.probs, potential)
            labels = np.asarray(seq.labels)
            assert np.all(np.diff(labels) >= 0), (video.video_id, potential.kind)
            checked += 1
    acceptance("C8", True, f"{checked} decoded test sequences non-decreasing")

    csv_checked = 0
    for root in _SMOKE_DIRS:
        for csv_path in sorted(root.glob("dec/**/*_labels.csv")):
            rows = csv_path.read_text(encoding="utf-8").strip().splitlines()[1:]
            stages = [int(r.split(",")[1]) for r in rows]
            assert stages == sorted(stages), csv_path
            csv_checked += 1
    acceptance("C8", True, f"{csv_checked} smoke decode CSVs non-decreasing")
