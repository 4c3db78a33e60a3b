"""Acceptance suite: every criterion prints one pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as
they are produced.
"""

import math
import statistics
import time
from itertools import permutations

import numpy as np
import pytest

from confusionaware import losses
from confusionaware.clustering import _lloyd, kmeans
from confusionaware.confusion import (
    ClassGeometry,
    confusion_degree,
    fit_coverage_circle,
    normalize_confusion,
)
from confusionaware.dataio import (
    EmbeddingTable,
    SyntheticSpec,
    generate_synthetic,
    read_table,
    write_table,
)
from confusionaware.model import FusionModel
from confusionaware.numeric import make_rng
from confusionaware.pipeline import (
    MultimodalDataset,
    TrainConfig,
    Trainer,
    format_config,
)
from gradcheck import assert_grad_matches, finite_difference


def _report(criterion, ok, detail=""):
    print(f"[criterion {criterion}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


# -- criteria 6, 7, 9 share one set of training runs -------------------------

ABLATIONS = {
    "full": {},
    "no_lcl": {"no_confusion_loss": True},
    "no_dyn": {"no_dynamic_weighting": True},
    "no_nce": {"no_infonce": True},
}


def _accept_dataset(seed):
    spec = SyntheticSpec.random(
        8, 80, 16, 16, seed=100 + seed, spread=12.0, std=4.5,
        confusable_pairs=[(0, 1, 0.3), (2, 3, 0.3)])
    audio, video = generate_synthetic(spec, make_rng(200 + seed))
    return MultimodalDataset.from_tables(audio, video)


def _accept_config(seed, **flags):
    return TrainConfig(
        seed=seed, supervised_epochs=30, lr=3e-3,
        embed_dim=16, encoder_hidden=32, fusion_hidden=32,
        update_fraction=0.25, eval_fraction=0.2,
        pair_batch_size=64, pair_temperature=0.25,
        coef_confusion=4.0, **flags)


@pytest.fixture(scope="module")
def training_runs():
    """{name: [(accuracy, reports) per seed]} for all ablation variants."""
    start = time.perf_counter()
    runs = {name: [] for name in ABLATIONS}
    for seed in range(3):
        dataset = _accept_dataset(seed)
        for name, flags in ABLATIONS.items():
            trainer = Trainer(_accept_config(seed, **flags), dataset)
            trainer.run_supervised_phase()
            accuracy, _, _ = trainer.evaluate()
            runs[name].append((accuracy, trainer.reports))
    runs["_elapsed"] = time.perf_counter() - start
    return runs


def test_criterion_1_overlap_formula_oracle():
    rng = make_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        r_i, r_j = rng.uniform(0.0, 5.0, size=2)
        d = rng.uniform(1e-6, 10.0)
        got = confusion_degree(
            ClassGeometry(0, np.array([0.0, 0.0]), r_i, 1),
            ClassGeometry(1, np.array([d, 0.0]), r_j, 1))
        # independent direct evaluation of the overlap ratio
        overlap = r_i + r_j - d
        expected = (overlap if overlap > 0.0 else 0.0) / d
        worst = max(worst, abs(got - expected))
    elapsed = time.perf_counter() - start
    _report(1, worst <= 1e-12 and elapsed < 1.0,
            f"max |diff|={worst:.2e}, {elapsed:.3f}s")


def test_criterion_2_coverage_circle_guarantee():
    rng = make_rng(2)
    ok = True
    for _ in range(200):
        n = int(rng.integers(20, 501))
        pts = rng.normal(rng.normal(size=2), rng.uniform(0.2, 4.0), size=(n, 2))
        geom = fit_coverage_circle(pts, 0.95)
        dists = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        inside = (dists <= geom.radius).sum()
        # brute-force sort oracle for the exact nearest-rank radius
        expected_radius = np.sort(dists)[math.ceil(0.95 * n) - 1]
        ok &= inside >= math.ceil(0.95 * n)
        ok &= geom.radius == expected_radius
    _report(2, ok, "200 clusters, exact nearest-rank rule")


def test_criterion_3_normalization_range():
    rng = make_rng(3)
    ok = True
    for _ in range(500):
        c = int(rng.integers(2, 9))
        raw = rng.uniform(0, rng.uniform(0.1, 50), size=(c, c))
        raw = (raw + raw.T) / 2
        np.fill_diagonal(raw, 0.0)
        out = normalize_confusion(raw)
        off = ~np.eye(c, dtype=bool)
        ok &= out[off].min() >= 0.0 and out[off].max() <= 2.0
        if raw[off].max() > raw[off].min():
            ok &= out[off].min() == 0.0 and out[off].max() == 2.0
    degenerate = np.full((4, 4), 0.8)
    np.fill_diagonal(degenerate, 0.0)
    out = normalize_confusion(degenerate)
    ok &= np.all(out[~np.eye(4, dtype=bool)] == 1.0)
    _report(3, ok, "500 random matrices plus degenerate case")


def test_criterion_4_gradient_suite():
    start = time.perf_counter()
    rng = make_rng(4)

    pair = rng.integers(0, 4, size=(8, 2))
    batch = losses.PairBatch(
        features_a=rng.normal(size=(8, 16)), features_b=rng.normal(size=(8, 16)),
        same_class=pair[:, 0] == pair[:, 1], class_pair=pair)
    m_hat = rng.uniform(0, 2, size=(4, 4))
    lv = losses.confusion_loss(batch, 0.5)
    for name in ("features_a", "features_b"):
        assert_grad_matches(lambda: losses.confusion_loss(batch, 0.5).value,
                            getattr(batch, name), lv.gradients[name], rng)
    lv = losses.dynamic_confusion_loss(batch, m_hat, 0.5)
    for name in ("features_a", "features_b"):
        assert_grad_matches(
            lambda: losses.dynamic_confusion_loss(batch, m_hat, 0.5).value,
            getattr(batch, name), lv.gradients[name], rng)

    anchors = rng.normal(size=(6, 12))
    positives = rng.normal(size=(6, 12))
    lv = losses.info_nce(anchors, positives, 0.2)
    assert_grad_matches(lambda: losses.info_nce(anchors, positives, 0.2).value,
                        anchors, lv.gradients["anchors"], rng)
    assert_grad_matches(lambda: losses.info_nce(anchors, positives, 0.2).value,
                        positives, lv.gradients["positives"], rng)

    logits = rng.normal(size=(8, 5))
    labels = rng.integers(0, 5, size=8)
    lv = losses.cross_entropy(logits, labels)
    assert_grad_matches(lambda: losses.cross_entropy(logits, labels).value,
                        logits, lv.gradients["logits"], rng)

    # full fusion model against the combined objective
    model = FusionModel(8, 8, embed_dim=8, encoder_hidden=8, fusion_hidden=8,
                        num_classes=4, seed=44)
    a = rng.normal(size=(4, 8))
    v = rng.normal(size=(4, 8))
    cls_labels = rng.integers(0, 4, size=4)
    pair_rows = rng.integers(0, 4, size=(4, 2))
    pair_cls = rng.integers(0, 4, size=(4, 2))

    def objective():
        cache = model.forward(a, v)
        value = losses.cross_entropy(cache.logits, cls_labels).value
        value += losses.info_nce(cache.audio_emb, cache.video_emb, 0.2).value
        batch = losses.PairBatch(
            features_a=cache.fused[pair_rows[:, 0]],
            features_b=cache.fused[pair_rows[:, 1]],
            same_class=pair_cls[:, 0] == pair_cls[:, 1], class_pair=pair_cls)
        value += losses.dynamic_confusion_loss(batch, m_hat, 0.5).value
        return value

    cache = model.forward(a, v)
    ce = losses.cross_entropy(cache.logits, cls_labels)
    nce = losses.info_nce(cache.audio_emb, cache.video_emb, 0.2)
    pbatch = losses.PairBatch(
        features_a=cache.fused[pair_rows[:, 0]],
        features_b=cache.fused[pair_rows[:, 1]],
        same_class=pair_cls[:, 0] == pair_cls[:, 1], class_pair=pair_cls)
    conf = losses.dynamic_confusion_loss(pbatch, m_hat, 0.5)
    d_fused = np.zeros_like(cache.fused)
    np.add.at(d_fused, pair_rows[:, 0], conf.gradients["features_a"])
    np.add.at(d_fused, pair_rows[:, 1], conf.gradients["features_b"])
    grads, _, _ = model.backward(
        cache, ce.gradients["logits"], d_fused=d_fused,
        d_audio_emb=nce.gradients["anchors"], d_video_emb=nce.gradients["positives"])
    params = model.parameters()
    checked = 0
    while checked < 20:
        pi = int(rng.integers(len(params)))
        p, g = params[pi], grads[pi]
        index = np.unravel_index(int(rng.integers(p.size)), p.shape)
        numeric = finite_difference(objective, p, index)
        denom = max(abs(numeric), abs(g[index]), 1e-8)
        assert abs(numeric - g[index]) / denom < 1e-4, (pi, index)
        checked += 1

    elapsed = time.perf_counter() - start
    _report(4, elapsed < 30.0, f"all losses + full model, {elapsed:.2f}s")


def test_criterion_5_kmeans_oracle():
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 10 * 0.866]])
    ok = True
    for seed in range(5):
        rng = make_rng(500 + seed)
        pts = np.vstack([rng.normal(c, 0.1, size=(100, 2)) for c in centers])
        true = np.repeat(np.arange(3), 100)
        result = kmeans(pts, 3, restarts=20, seed=seed)
        accuracy = max(
            np.mean(np.array([perm[p] for p in result.assignments]) == true)
            for perm in permutations(range(3)))
        ok &= accuracy == 1.0
        for r in range(20):
            _, _, inertia, _ = _lloyd(pts, 3, make_rng(seed + r), 100)
            ok &= result.inertia <= inertia + 1e-9
    _report(5, ok, "5 seeds, best-permutation accuracy 1.0")


def test_criterion_6_confusion_reduction(training_runs):
    ok = True
    details = []
    for (_, full_reports), (_, ablated_reports) in zip(
            training_runs["full"], training_runs["no_lcl"]):
        fm, fv = full_reports[-1].confusion_mean, full_reports[-1].confusion_variance
        am, av = (ablated_reports[-1].confusion_mean,
                  ablated_reports[-1].confusion_variance)
        ok &= fm < am and fv < av
        details.append(f"mean {fm:.3f}<{am:.3f}, var {fv:.3f}<{av:.3f}")
    elapsed = training_runs["_elapsed"]
    ok &= elapsed < 300.0
    _report(6, ok, "; ".join(details) + f"; runs took {elapsed:.0f}s")


def test_criterion_7_ablation_ordering(training_runs):
    med = {name: statistics.median(acc for acc, _ in training_runs[name])
           for name in ABLATIONS}
    chain_ok = med["full"] >= med["no_dyn"] >= med["no_lcl"]
    drops = {name: med["full"] - med[name]
             for name in ("no_lcl", "no_dyn", "no_nce")}
    infonce_worst = drops["no_nce"] == max(drops.values()) and drops["no_nce"] > 0
    flag = "" if infonce_worst else \
        " [flag: InfoNCE ablation is not the largest drop on synthetic data]"
    _report(7, chain_ok,
            f"medians full={med['full']:.4f} no_dyn={med['no_dyn']:.4f} "
            f"no_lcl={med['no_lcl']:.4f} no_nce={med['no_nce']:.4f}" + flag)


def test_criterion_8_determinism(tmp_path):
    from confusionaware.cli import main

    dataset = _accept_dataset(0)
    data = tmp_path / "data"
    data.mkdir()
    write_table(EmbeddingTable(labels=dataset.labels, features=dataset.audio),
                data / "audio.dice")
    write_table(EmbeddingTable(labels=dataset.labels, features=dataset.video),
                data / "video.dice")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(format_config(TrainConfig(
        seed=5, selfsup_epochs=2, supervised_epochs=3, kmeans_k=8,
        kmeans_restarts=5, embed_dim=8, encoder_hidden=16, fusion_hidden=16,
        lr=3e-3)))
    for name in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(tmp_path / name)]) == 0
    identical = ((tmp_path / "r1" / "epochs.csv").read_bytes()
                 == (tmp_path / "r2" / "epochs.csv").read_bytes())

    round_trip = True
    for n, d in ((0, 4), (13, 3)):
        rng = make_rng(n)
        table = EmbeddingTable(
            labels=rng.integers(-1, 3, size=n),
            features=rng.normal(size=(n, d)).astype(np.float32).astype(np.float64))
        write_table(table, tmp_path / "t.dice")
        first = (tmp_path / "t.dice").read_bytes()
        write_table(read_table(tmp_path / "t.dice"), tmp_path / "t2.dice")
        round_trip &= (tmp_path / "t2.dice").read_bytes() == first
    _report(8, identical and round_trip,
            f"epochs.csv identical={identical}, DICE bit-exact={round_trip}")


def test_criterion_9_weight_argmax_invariant(training_runs):
    ok = True
    for name in ("full", "no_lcl", "no_nce"):  # dynamic weighting active
        for _, reports in training_runs[name]:
            for prev, cur in zip(reports, reports[1:]):
                ok &= cur.top_pair_weight == prev.top_pair_raw
    _report(9, ok, "applied-weight argmax tracks raw confusion argmax")
