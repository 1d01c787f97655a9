import csv
import io
import statistics

import pytest

from flowasd.cli import KEYS, build_config, build_parser, main, read_calibration
from flowasd.training import RunManifest

SPEC = """machine_type = synth
n_ids = 2
n_train = 4
n_test_normal = 3
n_test_anomaly = 3
duration_s = 0.5
"""

SMALL = [
    "data.machine_type=synth", "features.n_mels=16", "model.hidden_units=16", "train.epochs=2",
    "train.warmup_epochs=2", "train.batch_size=16", "train.learning_rate=1e-3",
]


def sets(*extra, root):
    out = []
    for item in SMALL + [f"data.root={root}"] + list(extra):
        out += ["--set", item]
    return out


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    spec = base / "spec.txt"
    spec.write_text(SPEC)
    assert run("synth", "--spec", spec, "--out", base / "data") == 0
    return base / "data"


@pytest.fixture
def featured(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("features", "--out", out, *sets(root=dataset)) == 0
    return out


def read_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


class TestConfig:
    def test_help_lists_every_key(self):
        text = build_parser().format_help()
        for section, key, default, _ in KEYS:
            assert f"{section}.{key}" in text
        sub = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
        assert all(f"{s}.{k}" in sub for s, k, _, _ in KEYS)

    def test_unknown_set_key(self, capsys, tmp_path):
        assert run("train", "--out", tmp_path, "--set", "train.epoch=3") == 2
        assert "unknown key train.epoch" in capsys.readouterr().err

    def test_unknown_config_key_names_line(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[train]\nepochs = 3\n\n[model]\nhiden_units = 8\n")
        assert run("train", "--config", cfg, "--out", tmp_path) == 2
        assert "line 5: unknown key model.hiden_units" in capsys.readouterr().err

    @pytest.mark.parametrize("text,line", [
        ("[train]\nepochs = 3\nthis line is broken\n", 3),
        ("epochs = 3\n", 1),
        ("[train]\nepochs = 3\nepochs = 4\n", 3),
        ("[train]\n[eval]\n[train]\n", 3),
    ])
    def test_malformed_config_names_line(self, capsys, tmp_path, text, line):
        cfg = tmp_path / "run.ini"
        cfg.write_text(text)
        assert run("train", "--config", cfg, "--out", tmp_path) == 2
        assert f"line {line}:" in capsys.readouterr().err

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[train]\nepochs = 7\nbatch_size = 8\n")
        values, _ = build_config("dcase2020", cfg, ["train.epochs=9"], seed=4)
        assert values[("train", "epochs")] == "9"
        assert values[("train", "batch_size")] == "8"
        assert values[("run", "seed")] == "4"

    def test_preset_thresholds(self):
        _, calibration = build_config("dcase2020")
        assert calibration["ToyCar.glow_additive"] == 5.75
        assert calibration["valve.maf_affine"] == -800.0
        assert len(calibration) == 24

    def test_bad_value_type(self, capsys, tmp_path, dataset):
        assert run("features", "--out", tmp_path, *sets("features.n_mels=many", root=dataset)) == 2
        assert "features.n_mels" in capsys.readouterr().err


class TestSynth:
    def test_malformed_spec_names_line(self, capsys, tmp_path):
        spec = tmp_path / "bad.txt"
        spec.write_text("n_ids = 2\nn_train = lots\n")
        assert run("synth", "--spec", spec, "--out", tmp_path) == 1
        assert "line 2" in capsys.readouterr().err


class TestFeatures:
    def test_empty_directory(self, capsys, tmp_path):
        (tmp_path / "data" / "synth").mkdir(parents=True)
        assert run("features", "--out", tmp_path / "out", *sets(root=tmp_path / "data")) == 1
        assert "0 found" in capsys.readouterr().err

    def test_one_cache_per_file(self, dataset, featured):
        wavs = sorted(p.stem for p in (dataset / "synth").rglob("*.wav"))
        caches = sorted(p.stem for p in (featured / "features" / "synth").rglob("*.nffc"))
        assert wavs == caches and len(wavs) == 2 * (4 + 3 + 3)

    def test_rerun_is_idempotent(self, dataset, featured):
        caches = sorted((featured / "features").rglob("*.nffc"))
        before = [p.read_bytes() for p in caches]
        assert run("features", "--out", featured, *sets(root=dataset)) == 0
        assert [p.read_bytes() for p in caches] == before


class TestCalibrateTrainEvaluate:
    def test_calibration_is_deterministic_and_in_range(self, dataset, featured):
        assert run("calibrate", "--out", featured, *sets(root=dataset)) == 0
        first = (featured / "calibration.txt").read_text()
        assert run("calibrate", "--out", featured, *sets(root=dataset)) == 0
        assert (featured / "calibration.txt").read_text() == first
        c = read_calibration(featured / "calibration.txt")["synth.maf_additive"]
        manifest = RunManifest.read(featured / "calibration" / "synth.maf_additive" / "manifest.txt")
        assert min(manifest.final_batch_means) <= c <= max(manifest.final_batch_means)

    def test_train_reads_stored_c(self, dataset, featured):
        assert run("calibrate", "--out", featured, *sets(root=dataset)) == 0
        c = read_calibration(featured / "calibration.txt")["synth.maf_additive"]
        assert run("train", "--out", featured, *sets(root=dataset)) == 0
        for mid in ("00", "02"):
            manifest = RunManifest.read(featured / "models" / "synth" / f"id_{mid}" / "manifest.txt")
            assert manifest.status == "completed"
            assert float(manifest.config["loss.c"]) == c
            assert manifest.epochs[-1].qualifying_fraction is not None

    def test_missing_c_fails_before_training(self, capsys, dataset, featured):
        assert run("train", "--out", featured, *sets(root=dataset)) == 2
        assert "no threshold c" in capsys.readouterr().err
        assert not (featured / "models").exists()

    def test_nll_only_needs_no_outliers(self, dataset, featured):
        args = sets("loss.kind=nll_only", "data.machine_id=02", root=dataset)
        assert run("train", "--out", featured, *args) == 0
        manifest = RunManifest.read(featured / "models" / "synth" / "id_02" / "manifest.txt")
        assert manifest.epochs[-1].outlier_nll is None

    def test_evaluate_report(self, dataset, featured):
        args = sets("loss.c=1000", root=dataset)
        assert run("train", "--out", featured, *args) == 0
        assert run("evaluate", "--out", featured, *args) == 0
        report = featured / "reports" / "report.csv"
        text = report.read_text()
        assert text.splitlines()[0] == "machine_type,machine_id,auc,pauc,n_normal,n_anomaly"
        rows = read_rows(report)
        ids = [r for r in rows if r["machine_id"] in ("00", "02")]
        mean_row = next(r for r in rows if (r["machine_type"], r["machine_id"]) == ("synth", "mean"))
        assert float(mean_row["auc"]) == statistics.mean(float(r["auc"]) for r in ids)
        assert float(mean_row["pauc"]) == statistics.mean(float(r["pauc"]) for r in ids)
        assert int(mean_row["n_normal"]) == sum(int(r["n_normal"]) for r in ids) == 6
        assert rows[-1]["machine_type"] == "total"
        assert run("evaluate", "--out", featured, *args) == 0
        assert report.read_text() == text
        assert len(read_rows(featured / "reports" / "scores.csv")) == 12

    def test_single_checkpoint_needs_single_id(self, dataset, featured, tmp_path):
        args = sets("loss.kind=nll_only", root=dataset)
        assert run("evaluate", "--out", featured, "--checkpoint", tmp_path / "x.nfad", *args) == 2

    def test_missing_checkpoint(self, capsys, dataset, featured):
        assert run("evaluate", "--out", featured, *sets(root=dataset)) == 2
        assert "no checkpoint" in capsys.readouterr().err
