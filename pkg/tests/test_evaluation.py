import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowasd.datagen import SyntheticSpec, render_recording
from flowasd.errors import SingleClassError
from flowasd.evaluation import (
    REPORT_COLUMNS,
    AnomalyScore,
    EvalReport,
    aggregate,
    auc,
    average_reports,
    evaluate_scores,
    pauc,
    report_csv,
    report_table,
    roc_curve,
    score_recording,
    score_windows,
    summary_rows,
    write_reports,
)
from flowasd.features import FeatureConfig, Recording, recording_windows
from flowasd.training import TrainConfig, train


def scores_from(normal, anomaly):
    return ([AnomalyScore(f"n{i}", float(s), "normal") for i, s in enumerate(normal)]
            + [AnomalyScore(f"a{i}", float(s), "anomaly") for i, s in enumerate(anomaly)])


def brute_auc(normal, anomaly):
    """Pairwise Mann-Whitney count as an exact rational."""
    total = Fraction(0)
    for n, a in itertools.product(normal, anomaly):
        total += 1 if a > n else Fraction(1, 2) if a == n else 0
    return total / (len(normal) * len(anomaly))


def sweep_pauc(normal, anomaly, p):
    """Exact pAUC from a brute-force threshold sweep over the step ROC, in rationals."""
    p = Fraction(p)
    verts = [(Fraction(0), Fraction(0))]
    for t in sorted(set(normal) | set(anomaly), reverse=True):
        fpr = Fraction(sum(n >= t for n in normal), len(normal))
        tpr = Fraction(sum(a >= t for a in anomaly), len(anomaly))
        verts.append((fpr, tpr))
    area = Fraction(0)
    for (f0, t0), (f1, t1) in zip(verts, verts[1:]):
        if f0 >= p:
            break
        if f1 > p:
            t1 = t0 + (t1 - t0) * (p - f0) / (f1 - f0)
            f1 = p
        area += (f1 - f0) * (t0 + t1) / 2
    return area / p


score_values = st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=1, max_size=25)


class TestAnomalyScore:
    def test_non_finite(self):
        with pytest.raises(ValueError):
            AnomalyScore("x", float("nan"), "normal")

    def test_label(self):
        with pytest.raises(ValueError):
            AnomalyScore("x", 1.0, "broken")


class TestAuc:
    @pytest.mark.parametrize("normal,anomaly,expected", [
        ([0.1, 0.2], [0.8, 0.9], 1.0),
        ([0.1, 0.7], [0.5, 0.9], 0.75),
        ([0.3, 0.3, 0.3], [0.3, 0.3], 0.5),
    ])
    def test_examples(self, normal, anomaly, expected):
        assert auc(scores_from(normal, anomaly)) == expected

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            auc(scores_from([1.0, 2.0], []))
        with pytest.raises(SingleClassError):
            pauc(scores_from([], [1.0]))

    @settings(max_examples=150, deadline=None)
    @given(normal=score_values, anomaly=score_values)
    def test_matches_pairwise_oracle(self, normal, anomaly):
        assert Fraction(auc(scores_from(normal, anomaly))) == Fraction(float(brute_auc(normal, anomaly)))

    def test_oracle_at_200(self):
        rng = np.random.default_rng(0)
        normal = list(np.round(rng.normal(size=120), 1))
        anomaly = list(np.round(rng.normal(size=80) + 0.5, 1))
        assert auc(scores_from(normal, anomaly)) == float(brute_auc(normal, anomaly))

    @settings(max_examples=100, deadline=None)
    @given(normal=score_values, anomaly=score_values)
    def test_monotone_transform(self, normal, anomaly):
        f = lambda v: np.exp(3 * v) - 7
        assert auc(scores_from(normal, anomaly)) == auc(scores_from(f(np.array(normal)), f(np.array(anomaly))))

    @settings(max_examples=100, deadline=None)
    @given(normal=score_values, anomaly=score_values)
    def test_label_swap(self, normal, anomaly):
        assert auc(scores_from(anomaly, normal)) == pytest.approx(1 - auc(scores_from(normal, anomaly)), abs=1e-15)


class TestPauc:
    def test_perfect(self):
        s = scores_from([0.1, 0.2, 0.3], [0.8, 0.9])
        for p in (0.05, 0.1, 0.5, 1.0):
            assert pauc(s, p) == 1.0

    def test_single_anomaly_in_the_middle(self):
        normal, anomaly = list(range(1, 11)), [5.5]
        s = scores_from(normal, anomaly)
        assert pauc(s, 0.1) == float(sweep_pauc(normal, anomaly, 0.1)) == 0.0
        assert pauc(s, 0.7) == pytest.approx(float(sweep_pauc(normal, anomaly, 0.7)), abs=1e-15)

    @settings(max_examples=150, deadline=None)
    @given(normal=score_values, anomaly=score_values, p=st.sampled_from([0.1, 0.25, 0.5, 1.0]))
    def test_matches_threshold_sweep(self, normal, anomaly, p):
        got = pauc(scores_from(normal, anomaly), p)
        assert got == pytest.approx(float(sweep_pauc(normal, anomaly, p)), abs=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(normal=score_values, anomaly=score_values)
    def test_full_range_is_auc(self, normal, anomaly):
        s = scores_from(normal, anomaly)
        assert abs(pauc(s, 1.0) - auc(s)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(normal=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
           anomaly=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
           p=st.floats(1e-3, 1.0))
    def test_bounded(self, normal, anomaly, p):
        assert 0.0 <= pauc(scores_from(normal, anomaly), p) <= 1.0

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            pauc(scores_from([0.0], [1.0]), p)

    def test_roc_endpoints(self):
        fpr, tpr = roc_curve(scores_from([0.1, 0.5], [0.5, 0.9]))
        assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


class TestAggregation:
    def test_mean_and_max(self):
        assert aggregate([1.0, 2.0, 6.0]) == 3.0
        assert aggregate([1.0, 2.0, 6.0], "max") == 6.0
        with pytest.raises(ValueError):
            aggregate([1.0], "median")


@pytest.fixture(scope="module")
def toy_model():
    """Small MAF trained on windows of one synthetic machine."""
    spec = SyntheticSpec(n_ids=2, duration_s=1.0)
    cfg = FeatureConfig(n_mels=16)
    recs = [Recording(render_recording(spec, 0, np.random.default_rng([3, i]))) for i in range(8)]
    x = np.concatenate([recording_windows(r, cfg).values for r in recs])
    result = train(x, None, TrainConfig(epochs=20, batch_size=32, learning_rate=1e-3,
                                        model_overrides={"hidden_units": 32}))
    return result.model, cfg, recs


class TestScoring:
    def test_training_sample_beats_equal_energy_noise(self, toy_model):
        model, cfg, recs = toy_model
        rec = recs[0]
        noise = np.random.default_rng(9).normal(size=len(rec.samples))
        noise *= np.sqrt(np.mean(rec.samples ** 2) / np.mean(noise ** 2))
        seen = score_recording(model, rec, cfg).score
        white = score_recording(model, Recording(noise), cfg).score
        assert seen < white

    def test_single_window_score(self, toy_model):
        model, cfg, recs = toy_model
        short = Recording(recs[0].samples[:cfg.hop_length * (cfg.window_frames - 1) + cfg.frame_length])
        windows = recording_windows(short, cfg)
        assert len(windows.values) == 1
        assert score_recording(model, short, cfg).score == model.score(windows.values)[0]

    def test_order_invariant(self, toy_model):
        model, cfg, recs = toy_model
        forward = [score_recording(model, r, cfg).score for r in recs]
        backward = [score_recording(model, r, cfg).score for r in reversed(recs)]
        assert forward == backward[::-1]

    def test_max_aggregation(self, toy_model):
        model, cfg, recs = toy_model
        w = recording_windows(recs[1], cfg)
        assert score_windows(model, w, aggregation="max").score == model.score(w.values).max()


def report(mid="00", auc_value=0.8, pauc_value=0.6, n=(3, 2), machine_type="synth"):
    return EvalReport(machine_type, mid, auc_value, pauc_value, 0.1, *n)


class TestReports:
    def test_counts(self):
        r = evaluate_scores(scores_from([0.1, 0.2, 0.3], [0.9, 1.0]), "synth", "00")
        assert (r.n_normal, r.n_anomaly, r.p) == (3, 2, 0.1)
        assert len(r.scores) == 5

    def test_average_of_identical(self):
        avg = average_reports([report(), report(), report()], "synth")
        assert (avg.auc, avg.pauc) == (0.8, 0.6)

    def test_summary_rows(self):
        reports = [report("00", 0.8, 0.5), report("02", 0.6, 0.3), report("00", 0.9, 0.7, machine_type="other")]
        rows = summary_rows(reports)
        assert [(r.machine_type, r.machine_id) for r in rows] == [
            ("synth", "00"), ("synth", "02"), ("other", "00"), ("other", "mean"), ("synth", "mean"),
            ("total", "mean")]
        assert rows[4].auc == pytest.approx(0.7) and rows[4].n_normal == 6
        assert rows[5].auc == pytest.approx((0.8 + 0.6 + 0.9) / 3)

    def test_csv_columns(self):
        lines = report_csv([report()]).splitlines()
        assert lines[0].split(",") == list(REPORT_COLUMNS)
        assert lines[1] == "synth,00,0.8,0.6,3,2"

    def test_table_states_normalization(self):
        assert "linear normalization" in report_table([report()])

    def test_write(self, tmp_path):
        r = evaluate_scores(scores_from([0.1], [0.9]), "synth", "00")
        write_reports(tmp_path, [r])
        assert {p.name for p in tmp_path.iterdir()} == {"report.csv", "report.txt", "scores.csv"}
        assert (tmp_path / "scores.csv").read_text().splitlines()[0] == "path,score,label"
