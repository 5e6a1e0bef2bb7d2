from fractions import Fraction

import numpy as np
import pytest

from red_anticipation.data import FeatureSequence, LabelTrack, Video
from red_anticipation.evaluation import (Clip, Predictions, ScoredFrame, UndefinedMetricError,
                                         anticipation_delay, average_precision,
                                         calibrated_average_precision, calibration_ratio,
                                         clip_accuracy, evaluate_horizons,
                                         metrics_from_predictions, predict_horizons,
                                         ranked_precision_ap)
from red_anticipation.model import Hyper, Model

from helpers import LabelOracle, constant_class_videos, copy_last_model


def frames(scores, pos):
    return [ScoredFrame("v", i, 1, s, p) for i, (s, p) in enumerate(zip(scores, pos))]


def brute_force_ap(scores, positives, w=Fraction(1)):
    """Exact rationals; for each positive, count every item ranked at or above it."""
    n = len(scores)
    key = [(-scores[i], i) for i in range(n)]
    total = Fraction(0)
    for i in range(n):
        if not positives[i]:
            continue
        above = [j for j in range(n) if key[j] <= key[i]]
        tp = sum(1 for j in above if positives[j])
        fp = len(above) - tp
        total += Fraction(tp) / (tp + Fraction(fp) / w)
    return float(total / sum(positives))


def test_worked_examples():
    items = frames([0.9, 0.8, 0.7], [True, False, True])
    assert average_precision(items) == float(Fraction(5, 6))
    assert calibrated_average_precision(items, w=2) == float(Fraction(9, 10))
    assert calibrated_average_precision(items, w=Fraction(2)) == float(Fraction(9, 10))


def test_perfect_ranking():
    items = frames([5, 4, 3, 2], [True, True, False, False])
    assert average_precision(items) == 1.0
    for w in (0.1, 1, 7.5):
        assert calibrated_average_precision(items, w) == 1.0


def test_against_brute_force_oracle():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        # coarse scores so ties are common
        scores = rng.integers(0, 8, size=n).astype(float) / 7
        pos = rng.random(n) < rng.uniform(0.05, 0.9)
        if not pos.any():
            pos[rng.integers(n)] = True
        ap = ranked_precision_ap(scores, pos)
        assert ap == brute_force_ap(list(scores), list(pos))
        w = calibration_ratio(pos)
        assert ranked_precision_ap(scores, pos, w) == brute_force_ap(list(scores), list(pos), w)
        assert ranked_precision_ap(scores, pos, 1) == ap


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    s = rng.random(40)
    pos = rng.random(40) < 0.4
    pos[0] = True
    for f in (np.exp, lambda x: 3 * x - 1, lambda x: x ** 3):
        assert ranked_precision_ap(f(s), pos) == ranked_precision_ap(s, pos)


def test_constant_scores_give_prevalence_on_average():
    rng = np.random.default_rng(4)
    n, k = 1000, 300
    pos = np.zeros(n, dtype=bool)
    pos[:k] = True
    aps = [ranked_precision_ap(np.zeros(n), rng.permutation(pos)) for _ in range(200)]
    assert abs(np.mean(aps) - k / n) < 0.01


def test_ap_errors():
    with pytest.raises(UndefinedMetricError):
        ranked_precision_ap([0.1, 0.2], [False, False])
    with pytest.raises(ValueError):
        ranked_precision_ap([0.1], [True, False])
    with pytest.raises(ValueError):
        ranked_precision_ap([np.nan], [True])


def test_calibration_ratio_exact():
    assert calibration_ratio([True, False, False, True, False]) == Fraction(3, 2)


# ---------------------------------------------------------------- horizon sweeps

def test_oracle_model_scores_one_everywhere():
    C = 3
    model = copy_last_model(C, t_enc=4, t_dec=8)
    videos = constant_class_videos(C)
    report = evaluate_horizons(model, videos, [1, 4, 8])
    assert len(report.rows) == C * 3
    assert all(r.ap == 1.0 and r.cap == 1.0 for r in report.rows)
    assert all(report.accuracy[h] == 1.0 for h in (1, 4, 8))


def test_report_csv_layout():
    model = copy_last_model(2, t_enc=3, t_dec=4)
    report = evaluate_horizons(model, constant_class_videos(2), [1, 4])
    lines = report.to_csv().splitlines()
    assert lines[0] == "class,horizon_chunks,horizon_seconds,ap,cap,w"
    assert len(lines) == 1 + 2 * (2 + 1)
    assert lines[3].startswith("__mean__,1,0.25,1,1,")
    assert lines[6].startswith("__mean__,4,1,")


def test_prediction_dump_round_trip():
    rng = np.random.default_rng(0)
    hyper = Hyper(t_enc=4, t_dec=3, d=3, h=5, c=2)
    model = Model.initialise("encdec", hyper, 1)
    videos = constant_class_videos(2, length=20)
    for v in videos:
        v.features.chunks += rng.normal(size=v.features.chunks.shape)
    preds = predict_horizons(model, videos, [1, 3])
    back = Predictions.from_csv(preds.to_csv())
    assert back.to_csv() == preds.to_csv()
    a = metrics_from_predictions(preds, videos).to_csv()
    assert metrics_from_predictions(back, videos).to_csv() == a


def test_predict_horizon_alignment():
    C = 2
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 0, 0])
    vid = Video(FeatureSequence("x", np.zeros((10, 1))), LabelTrack(labels, C))
    oracle = LabelOracle([vid], C, t_enc=2, t_dec=3)
    preds = predict_horizons(oracle, [vid], [1, 3])
    # horizon h at anchor t scores chunk t+h-1 (anchors 2..9, in bounds only)
    assert preds.chunks[1].tolist() == list(range(2, 10))
    assert preds.chunks[3].tolist() == list(range(4, 10))
    assert np.array_equal(preds.probs[3].argmax(axis=1), labels[4:])


def test_invalid_horizon():
    model = copy_last_model(2, t_enc=3, t_dec=8)
    with pytest.raises(ValueError):
        predict_horizons(model, constant_class_videos(2), [9])


def test_global_w_flag():
    model = copy_last_model(2, t_enc=3, t_dec=2)
    videos = constant_class_videos(2)
    per_class = evaluate_horizons(model, videos, [1])
    glob = evaluate_horizons(model, videos, [1], global_w=True)
    assert {r.w for r in per_class.rows} == {2.0}
    assert {r.w for r in glob.rows} == {0.5}


# ---------------------------------------------------------------- clips / earliness

def clip_set(C, n_per_class, length=6, K=None):
    K = K or C + 1
    return [Clip(np.tile(np.eye(K)[c], (length, 1)), c) for c in range(1, C + 1) for _ in range(n_per_class)]


def test_clip_accuracy_oracle_and_determinism():
    model = copy_last_model(3, t_enc=4, t_dec=8)
    clips = clip_set(3, 2)
    assert clip_accuracy(model, clips) == 1.0
    assert clip_accuracy(model, clips) == clip_accuracy(model, clips)


def test_clip_accuracy_uniform_model_is_chance():
    hyper = Hyper(t_enc=4, t_dec=8, d=5, h=5, c=4)
    flat = Model("encdec", hyper, {k: np.zeros_like(v) for k, v in
                                   Model.initialise("encdec", hyper, 0).params.items()})
    clips = clip_set(4, 5)
    # exact ties resolve to the first action class: one class in four
    assert clip_accuracy(flat, clips) == 0.25

    class RandomGuesser:
        horizons = tuple(range(1, 9))

        def __init__(self, seed):
            self.rng = np.random.default_rng(seed)

        def predict_history(self, history):
            return self.rng.dirichlet(np.ones(5), size=8)

    accs = [clip_accuracy(RandomGuesser(s), clips) for s in range(200)]
    assert abs(np.mean(accs) - 0.25) < 0.02


def test_clip_accuracy_empty():
    with pytest.raises(UndefinedMetricError):
        clip_accuracy(copy_last_model(2), [])


def delay_videos():
    rng = np.random.default_rng(8)
    out = []
    for v in range(3):
        y = np.zeros(120, dtype=np.int64)
        t = 10
        while t < 110:
            L = int(rng.integers(3, 8))
            y[t:t + L] = rng.integers(1, 3)
            t += L + int(rng.integers(4, 10))
        out.append(Video(FeatureSequence(f"d{v}", np.zeros((120, 1))), LabelTrack(y, 2)))
    return out


def test_anticipation_delay_constructions():
    vids = delay_videos()
    assert anticipation_delay(LabelOracle(vids, 2, t_enc=4, t_dec=8), vids) == 0.0
    assert anticipation_delay(LabelOracle(vids, 2, t_enc=4, t_dec=8, shift=1), vids) == 1.0
    assert anticipation_delay(LabelOracle(vids, 2, t_enc=4, t_dec=8, background=True), vids) == 8.0


def test_anticipation_delay_needs_onsets():
    vids = constant_class_videos(2)
    with pytest.raises(UndefinedMetricError):
        anticipation_delay(LabelOracle(vids, 2), vids)
