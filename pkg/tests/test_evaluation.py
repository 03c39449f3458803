"""Tests for frame matching and average precision."""
import csv
import json

import numpy as np
import pytest

from msma_sim.errors import ParseError, ValidationError
from msma_sim.evaluation import (
    EvalConfig,
    FrameMatch,
    MatchedPair,
    TrackPoint,
    TruthFrame,
    aggregate,
    average_precision,
    evaluate,
    evaluate_frames,
    interpolated_ap,
    match_frame,
    mean_average_precision,
)
from msma_sim.geometry import BoundingBox3D, ClassLabel

CAR = ClassLabel.CAR


def _truth(*objects, tick=0, time=0.0, ego=(0.0, 0.0, 0.0)):
    boxes = tuple(BoundingBox3D(center=(x, y, 0.75), dimensions=(4.5, 1.9, 1.5), yaw=0.0, object_id=oid,
                                class_label=label)
                  for oid, x, y, label in objects)
    return TruthFrame(tick, time, boxes, np.asarray(ego, dtype=float))


def _point(track_id, x, y, score=1.0, label="car", confirmed=True):
    return TrackPoint(track_id, ClassLabel(label), np.array([x, y, 0.75]), score, confirmed)


class TestMatchFrame:
    """Test per-frame matching."""

    def test_exact_match(self):
        """A track on top of its object is a true positive."""
        fm = match_frame([_point(1, 10.0, 0.0)], _truth((5, 10.0, 0.0, "car")))
        assert (fm.tp, fm.fp, fm.fn) == (1, 0, 0)
        assert fm.matches[0] == MatchedPair(1, 5, CAR, 1.0, 0.0)

    def test_too_far(self):
        """Beyond the match distance a track is a false positive and the object a miss."""
        fm = match_frame([_point(1, 12.5, 0.0)], _truth((5, 10.0, 0.0, "car")))
        assert (fm.tp, fm.fp, fm.fn) == (0, 1, 1)

    def test_class_must_agree(self):
        """A car track does not match a pedestrian."""
        fm = match_frame([_point(1, 10.0, 0.0)], _truth((5, 10.0, 0.0, "pedestrian")))
        assert (fm.tp, fm.fp, fm.fn) == (0, 1, 1)

    def test_greedy_nearest_first(self):
        """The closest pair is fixed first, then the remainder."""
        truth = _truth((1, 10.0, 0.0, "car"), (2, 11.5, 0.0, "car"))
        fm = match_frame([_point(7, 10.9, 0.0), _point(8, 9.5, 0.0)], truth)
        assert {(m.track_id, m.object_id) for m in fm.matches} == {(7, 2), (8, 1)}

    def test_ties_broken_by_ids(self):
        """Equal distances resolve to the lower track id, then object id."""
        truth = _truth((1, 10.0, 1.0, "car"), (2, 10.0, -1.0, "car"))
        fm = match_frame([_point(3, 10.0, 0.0)], truth)
        assert fm.matches[0].object_id == 1
        assert fm.false_negatives == ((2, CAR),)

    def test_range_gate(self):
        """Truth beyond the gate is not counted; tracks are kept within gate + match distance."""
        cfg = EvalConfig(range_gate=50.0)
        truth = _truth((1, 49.5, 0.0, "car"), (2, 80.0, 0.0, "car"))
        fm = match_frame([_point(1, 51.0, 0.0), _point(2, 80.0, 0.0)], truth, cfg)
        assert (fm.tp, fm.fp, fm.fn) == (1, 0, 0)

    def test_gate_follows_ego(self):
        """The range gate is centered on the ego position."""
        cfg = EvalConfig(range_gate=10.0)
        truth = _truth((1, 105.0, 0.0, "car"), ego=(100.0, 0.0, 0.0))
        assert match_frame([], truth, cfg).fn == 1

    def test_unconfirmed_ignored(self):
        """Tentative tracks are not scored."""
        fm = match_frame([_point(1, 10.0, 0.0, confirmed=False)], _truth((5, 10.0, 0.0, "car")))
        assert (fm.tp, fm.fp, fm.fn) == (0, 0, 1)

    def test_tp_plus_fn_is_truth_count(self):
        """Every in-gate object is either matched or missed."""
        rng = np.random.default_rng(4)
        for _ in range(20):
            objs = [(i, *rng.uniform(-40, 40, 2), "car") for i in range(8)]
            tracks = [_point(i, *rng.uniform(-40, 40, 2)) for i in range(8)]
            fm = match_frame(tracks, _truth(*objs))
            assert fm.tp + fm.fn == 8
            assert fm.tp + fm.fp == 8

    def test_track_order_does_not_matter(self):
        """Shuffling the track list gives the same frame match, ties included."""
        rng = np.random.default_rng(9)
        labels = ["car", "pedestrian"]
        for _ in range(50):
            objs = [(i, *np.round(rng.uniform(-20, 20, 2) * 2) / 2, labels[i % 2]) for i in range(6)]
            tracks = [_point(10 + i, *np.round(rng.uniform(-20, 20, 2) * 2) / 2, score=float(rng.random()),
                             label=labels[int(rng.integers(2))]) for i in range(8)]
            truth = _truth(*objs)
            base = match_frame(tracks, truth)
            for _ in range(3):
                shuffled = [tracks[k] for k in rng.permutation(len(tracks))]
                assert match_frame(shuffled, truth) == base

    def test_rms_error(self):
        """RMS over matched distances."""
        fm = match_frame([_point(1, 10.0, 1.0), _point(2, 20.0, 0.0)],
                         _truth((1, 10.0, 0.0, "car"), (2, 20.0, 0.0, "car")))
        assert fm.rms_error == pytest.approx(np.sqrt(0.5))
        assert FrameMatch(0, 0.0).rms_error is None


class TestAveragePrecision:
    """Test the precision/recall sweep."""

    def test_perfect(self):
        """All truth found and nothing else gives AP 1."""
        frames = [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car"), tick=t)) for t in range(5)]
        assert average_precision(frames, "car") == pytest.approx(1.0)

    def test_no_truth(self):
        """A class that never appears has no AP."""
        frames = [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car")))]
        assert average_precision(frames, "truck") is None

    def test_truth_but_no_tracks(self):
        """Missing everything scores zero."""
        frames = [match_frame([], _truth((1, 10.0, 0.0, "car")))]
        assert average_precision(frames, "car") == 0.0

    def test_half_recall(self):
        """Finding one of two objects with no false positives: 51 of 101 recall levels at precision 1."""
        frames = [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car"), (2, 30.0, 0.0, "car")))]
        assert average_precision(frames, "car") == pytest.approx(51 / 101)

    def test_low_score_false_positive_does_not_hurt(self):
        """A false positive ranked below every hit leaves AP at 1."""
        frames = [match_frame([_point(1, 10.0, 0.0, score=0.9), _point(2, 40.0, 0.0, score=0.1)],
                              _truth((1, 10.0, 0.0, "car")))]
        assert average_precision(frames, "car") == pytest.approx(1.0)

    def test_high_score_false_positive_hurts(self):
        """A confident false positive halves precision at full recall."""
        frames = [match_frame([_point(1, 10.0, 0.0, score=0.1), _point(2, 40.0, 0.0, score=0.9)],
                              _truth((1, 10.0, 0.0, "car")))]
        assert average_precision(frames, "car") == pytest.approx(0.5)

    def test_interpolation_takes_max_to_the_right(self):
        """Precision at each recall level is the best at that recall or beyond."""
        ap = interpolated_ap([1.0, 0.5, 0.67], [0.5, 0.5, 1.0])
        assert ap == pytest.approx((51 * 1.0 + 50 * 0.67) / 101)

    def test_hand_computed_sweep(self):
        """Scores 0.9 hit, 0.8 miss, 0.7 hit against two objects."""
        truth = _truth((1, 10.0, 0.0, "car"), (2, 30.0, 0.0, "car"))
        tracks = [_point(1, 10.0, 0.0, score=0.9), _point(2, 50.0, 0.0, score=0.8),
                  _point(3, 30.0, 0.0, score=0.7)]
        ap = average_precision([match_frame(tracks, truth)], "car")
        assert ap == pytest.approx((51 * 1.0 + 50 * (2 / 3)) / 101)

    def test_recall_level_reached_exactly(self):
        """57 hits, one miss, 43 hits against 100 objects: recall 0.57 still counts precision 1."""
        hits = np.array([1.0] * 57 + [0.0] + [1.0] * 43)
        tp = np.cumsum(hits)
        precision = tp / np.arange(1, hits.size + 1)
        assert interpolated_ap(precision, tp / 100) == pytest.approx(0.9957847269875503, rel=1e-12)

    @pytest.mark.parametrize("score", [0.1, 0.5, 0.95])
    def test_turning_a_false_positive_into_a_hit_never_lowers_ap(self, score):
        """Moving a stray track onto a missed object cannot reduce AP."""
        truth = _truth((1, 10.0, 0.0, "car"), (2, 30.0, 0.0, "car"), (3, -20.0, 5.0, "car"))
        base = [_point(1, 10.0, 0.0, score=0.9), _point(2, -20.0, 5.0, score=0.6)]
        stray = average_precision([match_frame(base + [_point(3, 60.0, 0.0, score=score)], truth)], "car")
        hit = average_precision([match_frame(base + [_point(3, 30.0, 0.0, score=score)], truth)], "car")
        assert hit >= stray

    def test_mean_skips_undefined(self):
        """mAP averages only classes with an AP."""
        assert mean_average_precision({"car": 1.0, "truck": None, "pedestrian": 0.5}) == pytest.approx(0.75)
        assert mean_average_precision({"car": None}) is None


class TestEvaluate:
    """Test run-level scoring."""

    def test_aggregate(self):
        """mAP is the plain mean over defined classes; frame counts carry through."""
        frames = [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car"), (2, 30.0, 0.0, "car")))]
        metrics = aggregate({"car": 1.0, "pedestrian": 0.5, ClassLabel.TRUCK: None}, frames)
        assert metrics.mean_ap == pytest.approx(0.75)
        assert metrics.per_class_ap == {"car": 1.0, "pedestrian": 0.5, "truck": None}
        assert (metrics.true_positives, metrics.false_negatives) == ((1,), (1,))
        assert aggregate({"car": 0.4}).mean_ap == pytest.approx(0.4)

    def test_burn_in_dropped(self):
        """Frames before the burn-in time are not scored."""
        frames = [match_frame([], _truth((1, 10.0, 0.0, "car"), tick=t, time=t * 0.1)) for t in range(20)]
        frames += [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car"), tick=t, time=t * 0.1))
                   for t in range(20, 40)]
        metrics = evaluate(frames, EvalConfig(burn_in=2.0, classes=("car",)))
        assert metrics.ticks[0] == 20
        assert metrics.mean_ap == pytest.approx(1.0)
        assert metrics.total_fn == 0

    def test_config_validation(self):
        """Gates are positive."""
        with pytest.raises(ValidationError):
            EvalConfig(range_gate=0.0)

    def test_outputs(self, tmp_path):
        """JSON and CSV outputs carry the same numbers."""
        frames = [match_frame([_point(1, 10.0, 0.0)], _truth((1, 10.0, 0.0, "car"), tick=t, time=2.0 + t))
                  for t in range(3)]
        metrics = evaluate(frames, EvalConfig(classes=("car", "truck")))
        metrics.write_json(tmp_path / "metrics.json", {"seed": 1})
        metrics.write_csv(tmp_path / "metrics.csv")
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["config"] == {"seed": 1}
        assert doc["metrics"]["per_class_ap"] == {"car": 1.0, "truck": None}
        assert doc["metrics"]["mAP"] == 1.0
        rows = list(csv.reader(open(tmp_path / "metrics.csv")))
        assert rows[0] == ["tick", "tp", "fp", "fn", "rms_error"]
        assert rows[1] == ["0", "1", "0", "0", "0.0"]

    def test_rescore_frame_log(self, tmp_path):
        """A stored frame record re-scores to the same metrics."""
        truth = _truth((1, 10.0, 0.0, "car"), tick=30, time=3.0)
        record = {
            "tick": 30,
            "time": 3.0,
            "ego_tracks": [{"track_id": 4, "class": "car", "mean": [10.2, 0.0, 0.75, 0, 0, 0], "score": 0.8,
                            "status": "confirmed"}],
            "truth": truth.to_dict(),
        }
        path = tmp_path / "frames.ndjson"
        path.write_text(json.dumps(record) + "\n")
        metrics = evaluate_frames(path, EvalConfig(classes=("car",)))
        assert metrics.mean_ap == pytest.approx(1.0)
        assert metrics.true_positives == (1,)

    def test_rescore_bad_record(self, tmp_path):
        """Malformed records name their line."""
        path = tmp_path / "frames.ndjson"
        path.write_text("\n{\"tick\": 1}\n")
        with pytest.raises(ParseError) as exc:
            evaluate_frames(path)
        assert exc.value.line == 2
