import json
import xml.etree.ElementTree as ET
from itertools import permutations

import numpy as np
import pytest

from confusionaware.cli import main
from confusionaware.dataio import EmbeddingTable, read_table, write_table
from confusionaware.numeric import make_rng
from confusionaware.pipeline import TrainConfig, format_config


def run(argv):
    return main([str(a) for a in argv])


def make_labeled_dice(path, seed=0, classes=3, per_class=40, spread=50.0):
    rng = make_rng(seed)
    centers = rng.normal(0, spread, size=(classes, 4))
    features = np.vstack(
        [rng.normal(c, 0.5, size=(per_class, 4)) for c in centers])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    write_table(EmbeddingTable(labels=labels, features=features), path)
    return labels


class TestAnalyze:
    def test_disjoint_clusters_zero_stats(self, tmp_path):
        dice = tmp_path / "t.dice"
        make_labeled_dice(dice, spread=500.0)
        out = tmp_path / "out"
        assert run(["analyze", "--input", dice, "--out", out]) == 0
        stats = (out / "stats.csv").read_text()
        assert "mean,0.0" in stats
        assert "variance,0.0" in stats
        for name in ("confusion_raw.csv", "confusion_normalized.csv",
                     "histogram.svg", "histogram.csv", "manifest.json"):
            assert (out / name).exists()

    def test_byte_identical_reruns(self, tmp_path):
        dice = tmp_path / "t.dice"
        make_labeled_dice(dice, seed=1)
        run(["analyze", "--input", dice, "--out", tmp_path / "a"])
        run(["analyze", "--input", dice, "--out", tmp_path / "b"])
        for name in ("confusion_raw.csv", "confusion_normalized.csv",
                     "stats.csv", "histogram.csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_raw_csv_shape_and_diagonal(self, tmp_path):
        dice = tmp_path / "t.dice"
        make_labeled_dice(dice, seed=2, classes=4)
        out = tmp_path / "out"
        run(["analyze", "--input", dice, "--out", out])
        lines = (out / "confusion_raw.csv").read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 rows
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert len(cells) == 5
            assert float(cells[i + 1]) == 0.0

    def test_unlabeled_input_suggests_cluster(self, tmp_path, capsys):
        dice = tmp_path / "u.dice"
        rng = make_rng(3)
        write_table(EmbeddingTable(labels=np.full(10, -1, dtype=np.int64),
                                   features=rng.normal(size=(10, 3))), dice)
        out = tmp_path / "out"
        assert run(["analyze", "--input", dice, "--out", out]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:unlabeled-input:")
        assert "cluster" in err
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"

    def test_input_not_mutated(self, tmp_path):
        dice = tmp_path / "t.dice"
        make_labeled_dice(dice, seed=4)
        before = dice.read_bytes()
        run(["analyze", "--input", dice, "--out", tmp_path / "out"])
        assert dice.read_bytes() == before


class TestCluster:
    def test_k_equals_n_zero_inertia(self, tmp_path, capsys):
        dice = tmp_path / "t.dice"
        rng = make_rng(5)
        write_table(EmbeddingTable(labels=np.full(6, -1, dtype=np.int64),
                                   features=rng.normal(size=(6, 2))), dice)
        assert run(["cluster", "--input", dice, "--k", 6,
                    "--out", tmp_path / "o.dice"]) == 0
        assert "inertia=0.0" in capsys.readouterr().out

    def test_same_seed_identical_output(self, tmp_path):
        dice = tmp_path / "t.dice"
        make_labeled_dice(dice, seed=6)
        for name in ("a.dice", "b.dice"):
            run(["cluster", "--input", dice, "--k", 3, "--seed", 9,
                 "--out", tmp_path / name])
        assert (tmp_path / "a.dice").read_bytes() == (tmp_path / "b.dice").read_bytes()

    def test_recovers_separated_gaussians(self, tmp_path):
        dice = tmp_path / "t.dice"
        true = make_labeled_dice(dice, seed=7, spread=100.0)
        out = tmp_path / "labeled.dice"
        run(["cluster", "--input", dice, "--k", 3, "--out", out])
        pred = read_table(out).labels
        accuracy = max(
            np.mean(np.array([perm[p] for p in pred]) == true)
            for perm in permutations(range(3)))
        assert accuracy == 1.0

    def test_too_many_clusters(self, tmp_path, capsys):
        dice = tmp_path / "t.dice"
        rng = make_rng(8)
        write_table(EmbeddingTable(labels=np.zeros(4, dtype=np.int64),
                                   features=rng.normal(size=(4, 2))), dice)
        assert run(["cluster", "--input", dice, "--k", 10,
                    "--out", tmp_path / "o.dice"]) == 1
        assert capsys.readouterr().err.startswith("error:insufficient-points:")


def write_train_inputs(tmp_path, **overrides):
    from test_pipeline import make_dataset
    ds = make_dataset(classes=4, per_class=30, pairs=[(0, 1, 0.3)], std=1.5)
    data = tmp_path / "data"
    data.mkdir(exist_ok=True)
    write_table(EmbeddingTable(labels=ds.labels, features=ds.audio),
                data / "audio.dice")
    write_table(EmbeddingTable(labels=ds.labels, features=ds.video),
                data / "video.dice")
    base = dict(seed=3, selfsup_epochs=0, supervised_epochs=3, batch_size=16,
                pair_batch_size=16, kmeans_k=4, kmeans_restarts=5,
                embed_dim=8, encoder_hidden=16, fusion_hidden=16, lr=3e-3)
    base.update(overrides)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(format_config(TrainConfig(**base)))
    return data, cfg_path


class TestTrain:
    def test_outputs(self, tmp_path, capsys):
        data, cfg = write_train_inputs(tmp_path)
        out = tmp_path / "out"
        assert run(["train", "--config", cfg, "--data", data, "--out", out]) == 0
        assert "eval_accuracy=" in capsys.readouterr().out
        lines = (out / "epochs.csv").read_text().strip().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("epoch,phase,loss_total")
        assert (out / "final.dicm").exists()
        assert json.loads((out / "manifest.json").read_text())["status"] == "ok"

    def test_no_confusion_loss_column_zero(self, tmp_path):
        data, cfg = write_train_inputs(tmp_path, no_confusion_loss=True)
        out = tmp_path / "out"
        run(["train", "--config", cfg, "--data", data, "--out", out])
        lines = (out / "epochs.csv").read_text().strip().splitlines()
        col = lines[0].split(",").index("loss_confusion")
        assert all(float(l.split(",")[col]) == 0.0 for l in lines[1:])

    def test_empty_run_warns_without_checkpoint(self, tmp_path, capsys):
        data, cfg = write_train_inputs(tmp_path, selfsup_epochs=0,
                                       supervised_epochs=0)
        out = tmp_path / "out"
        assert run(["train", "--config", cfg, "--data", data, "--out", out]) == 0
        assert "warning" in capsys.readouterr().err
        assert (out / "manifest.json").exists()
        assert not (out / "final.dicm").exists()

    def test_determinism_byte_identical(self, tmp_path):
        data, cfg = write_train_inputs(tmp_path)
        run(["train", "--config", cfg, "--data", data, "--out", tmp_path / "r1"])
        run(["train", "--config", cfg, "--data", data, "--out", tmp_path / "r2"])
        assert (tmp_path / "r1" / "epochs.csv").read_bytes() == \
            (tmp_path / "r2" / "epochs.csv").read_bytes()

    def test_config_error_names_key(self, tmp_path, capsys):
        data, cfg = write_train_inputs(tmp_path)
        cfg.write_text("not_a_real_key = 5\n")
        assert run(["train", "--config", cfg, "--data", data,
                    "--out", tmp_path / "out"]) == 1
        assert "not_a_real_key" in capsys.readouterr().err


class TestReport:
    def analyzed_dir(self, tmp_path, name, seed, spread=2.0):
        dice = tmp_path / f"{name}.dice"
        make_labeled_dice(dice, seed=seed, spread=spread)
        out = tmp_path / name
        run(["analyze", "--input", dice, "--out", out])
        return out

    def test_identical_inputs_zero_delta(self, tmp_path, capsys):
        d = self.analyzed_dir(tmp_path, "a", seed=10)
        out = tmp_path / "cmp.svg"
        assert run(["report", "--before", d / "stats.csv",
                    "--after", d / "stats.csv", "--out", out]) == 0
        got = capsys.readouterr().out
        assert "delta_mean=0.0" in got and "delta_variance=0.0" in got
        ET.parse(out)

    def test_known_fixture_deltas(self, tmp_path, capsys):
        before = tmp_path / "before"
        after = tmp_path / "after"
        before.mkdir()
        after.mkdir()
        (before / "stats.csv").write_text(
            "statistic,value\nmean,2.0\nvariance,5.0\ncount,3\n")
        (after / "stats.csv").write_text(
            "statistic,value\nmean,0.5\nvariance,1.0\ncount,3\n")
        hist = "bin_lower,bin_upper,count\n0.0,1.0,3\n"
        (before / "histogram.csv").write_text(hist)
        (after / "histogram.csv").write_text(hist)
        assert run(["report", "--before", before / "stats.csv",
                    "--after", after / "stats.csv",
                    "--out", tmp_path / "cmp.svg"]) == 0
        got = capsys.readouterr().out
        assert "delta_mean=-1.5" in got
        assert "delta_variance=-4.0" in got


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == "0.1.0"
