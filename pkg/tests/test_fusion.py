"""Tests for covariance intersection and the ego fusion strategies."""
import numpy as np
import pytest

from msma_sim.errors import SingularCovariance, ValidationError
from msma_sim.fusion import (
    EgoModel,
    FusionConfig,
    FusionWeight,
    TrackReport,
    covariance_intersection,
    fuse_at_tracking,
    fuse_independent,
    fuse_post_tracking,
    report_to_detection,
)
from msma_sim.tracking import GaussianEstimate, Track, Tracker, TrackStatus, kalman_update

PA = np.diag([1.0, 2.0, 0.5])
PB = np.diag([2.0, 1.0, 1.5])


def _track(track_id, position, var=1.0, label="car", status=TrackStatus.CONFIRMED, provenance=("ego",)):
    mean = np.concatenate([position, np.zeros(3)])
    return Track(track_id, GaussianEstimate(mean, var * np.eye(6)), label, hits=3, age=3, status=status,
                 provenance=frozenset(provenance))


def _correlated_errors(rng, n, pa, pb, rho):
    """Error pairs with marginals pa, pb and per-axis correlation rho."""
    z1 = rng.standard_normal((n, pa.shape[0]))
    z2 = rng.standard_normal((n, pa.shape[0]))
    sa, sb = np.linalg.cholesky(pa), np.linalg.cholesky(pb)
    return z1 @ sa.T, (rho * z1 + np.sqrt(1.0 - rho ** 2) * z2) @ sb.T


def _mean_nees(errors, covariance):
    info = np.linalg.inv(covariance)
    return float(np.mean(np.einsum("ij,jk,ik->i", errors, info, errors)))


class TestEgoModel:
    """Test strategy names."""

    @pytest.mark.parametrize("name,model", [("local", EgoModel.LOCAL),
                                            ("track-fusion", EgoModel.FUSION_AT_TRACKING),
                                            ("ddf", EgoModel.FUSION_POST_TRACKING),
                                            ("fusion_post_tracking", EgoModel.FUSION_POST_TRACKING)])
    def test_parse(self, name, model):
        """CLI spellings and enum values both parse."""
        assert EgoModel.parse(name) == model

    def test_cli_name_round_trip(self):
        """cli_name parses back to the same model."""
        for model in EgoModel:
            assert EgoModel.parse(model.cli_name) == model

    def test_unknown(self):
        """Unknown names are validation errors."""
        with pytest.raises(ValidationError):
            EgoModel.parse("centralized")


class TestCovarianceIntersection:
    """Test CI fusion."""

    def test_identical_inputs(self):
        """Fusing an estimate with itself returns it with omega 0.5."""
        a = GaussianEstimate([1.0, 2.0, 3.0], PA)
        fused, weight = covariance_intersection(a, a)
        assert weight.omega == 0.5
        assert np.allclose(fused.mean, a.mean)
        assert np.allclose(fused.covariance, a.covariance)

    def test_equal_covariances_fuse_midway(self):
        """Equal covariances with different means meet in the middle."""
        a = GaussianEstimate(np.zeros(3), np.eye(3))
        b = GaussianEstimate([2.0, 0.0, 0.0], np.eye(3))
        fused, weight = covariance_intersection(a, b)
        assert weight.omega == 0.5
        assert np.allclose(fused.mean, [1.0, 0.0, 0.0])
        assert np.allclose(fused.covariance, np.eye(3))

    def test_dominating_input(self):
        """When one estimate is uniformly better, CI keeps it alone."""
        a = GaussianEstimate([0.0, 0.0, 0.0], 0.1 * np.eye(3))
        b = GaussianEstimate([1.0, 1.0, 1.0], 10.0 * np.eye(3))
        fused, weight = covariance_intersection(a, b)
        assert weight.omega == pytest.approx(1.0, abs=1e-3)
        assert np.allclose(fused.mean, a.mean, atol=1e-2)

    def test_never_worse_than_inputs(self):
        """The fused trace is no larger than either input's."""
        a = GaussianEstimate(np.zeros(3), PA)
        b = GaussianEstimate(np.ones(3), PB)
        fused, _ = covariance_intersection(a, b)
        assert np.trace(fused.covariance) <= min(np.trace(PA), np.trace(PB)) + 1e-9

    def test_det_criterion(self):
        """The log-determinant criterion also yields a valid weight."""
        a = GaussianEstimate(np.zeros(3), PA)
        b = GaussianEstimate(np.ones(3), PB)
        fused, weight = covariance_intersection(a, b, criterion="det")
        assert 0.0 <= weight.omega <= 1.0
        assert np.linalg.det(fused.covariance) <= min(np.linalg.det(PA), np.linalg.det(PB)) + 1e-9

    @pytest.mark.parametrize("rho", [-0.9, 0.0, 0.25, 0.5, 0.75, 0.9, 1.0])
    def test_consistent_under_any_correlation(self, rho):
        """Mean NEES of the CI estimate stays at or below the dimension."""
        rng = np.random.default_rng(17)
        _, weight = covariance_intersection(GaussianEstimate(np.zeros(3), PA), GaussianEstimate(np.zeros(3), PB))
        w = weight.omega
        ia, ib = np.linalg.inv(PA), np.linalg.inv(PB)
        p = np.linalg.inv(w * ia + (1.0 - w) * ib)
        ea, eb = _correlated_errors(rng, 10_000, PA, PB, rho)
        fused_err = (p @ (w * ia @ ea.T + (1.0 - w) * ib @ eb.T)).T
        assert _mean_nees(fused_err, p) <= 3.0 * 1.05

    def test_naive_fusion_overconfident_when_correlated(self):
        """Independent fusion of correlated equal-covariance estimates underestimates its error.

        With equal covariances the naive NEES mean is dim * (1 + rho).
        """
        rng = np.random.default_rng(23)
        p = np.eye(3)
        for rho, floor in [(0.5, 1.45), (0.75, 1.5)]:
            ea, eb = _correlated_errors(rng, 10_000, p, p, rho)
            fused = fuse_independent(GaussianEstimate(np.zeros(3), p), GaussianEstimate(np.zeros(3), p))
            errors = 0.5 * (ea + eb)
            assert _mean_nees(errors, fused.covariance) >= floor * 3.0

    def test_independent_matches_kalman(self):
        """Information fusion equals a full-state Kalman update."""
        a = GaussianEstimate([0.0, 1.0, 2.0], PA)
        b = GaussianEstimate([1.0, 0.0, 2.5], PB)
        via_kalman = kalman_update(a, b.mean, b.covariance)
        fused = fuse_independent(a, b)
        assert np.allclose(fused.mean, via_kalman.mean)
        assert np.allclose(fused.covariance, via_kalman.covariance)

    def test_singular_input(self):
        """Inputs must be invertible."""
        good = GaussianEstimate(np.zeros(3), PA)
        bad = GaussianEstimate.__new__(GaussianEstimate)
        object.__setattr__(bad, "mean", np.zeros(3))
        object.__setattr__(bad, "covariance", np.zeros((3, 3)))
        with pytest.raises(SingularCovariance):
            covariance_intersection(good, bad)

    def test_weight_range(self):
        """Weights outside [0, 1] are rejected."""
        with pytest.raises(ValidationError):
            FusionWeight(1.5)


class TestFuseAtTracking:
    """Test remote tracks as measurements."""

    def test_report_becomes_detection(self):
        """Position block and provenance carry over."""
        report = TrackReport.from_track(_track(4, [10.0, 2.0, 0.5], var=0.5), "pole")
        det = report_to_detection(report, 9)
        assert det.sensor_id == "pole:tracks"
        assert det.tick == 9
        assert np.allclose(det.position, [10.0, 2.0, 0.5])
        assert np.allclose(det.covariance, 0.5 * np.eye(3))
        assert det.provenance == {"ego", "pole"}

    def test_updates_matching_track(self):
        """A report on top of an ego track updates it instead of spawning one."""
        tracker = Tracker("ego", 0.1)
        tracker.tracks = [_track(1, [10.0, 0.0, 0.0])]
        tracker.begin_tick(0)
        fuse_at_tracking(tracker, [TrackReport.from_track(_track(8, [10.2, 0.0, 0.0]), "pole")])
        assert len(tracker.tracks) == 1
        assert "pole" in tracker.tracks[0].provenance
        assert np.trace(tracker.tracks[0].position_covariance) < 3.0

    def test_repeated_estimate_counted_twice(self):
        """The same remote estimate delivered twice shrinks the covariance twice."""
        tracker = Tracker("ego", 0.1)
        tracker.tracks = [_track(1, [10.0, 0.0, 0.0])]
        tracker.begin_tick(0)
        report = TrackReport.from_track(_track(8, [10.0, 0.0, 0.0]), "pole")
        fuse_at_tracking(tracker, [report])
        assert np.trace(tracker.tracks[0].position_covariance) == pytest.approx(1.5)
        fuse_at_tracking(tracker, [report])
        assert np.trace(tracker.tracks[0].position_covariance) == pytest.approx(1.0)

    def test_empty_payload(self):
        """Nothing to fuse leaves the tracker alone."""
        tracker = Tracker("ego", 0.1)
        tracker.begin_tick(0)
        assert fuse_at_tracking(tracker, []).tracks == []


class TestFusePostTracking:
    """Test track-to-track fusion."""

    def test_matched_pair_fused(self):
        """A remote track near an ego track replaces it with the CI estimate."""
        ego = [_track(1, [10.0, 0.0, 0.0])]
        remote = [TrackReport.from_track(_track(5, [10.5, 0.0, 0.0], var=0.5), "pole")]
        out = fuse_post_tracking(ego, remote, tick=4)
        assert len(out) == 1
        assert out[0].track_id == 1
        assert out[0].hits == 4
        assert out[0].last_hit_tick == 4
        assert out[0].provenance == {"ego", "pole"}
        assert np.trace(out[0].estimate.covariance) <= 3.0 + 1e-9

    def test_unmatched_remote_is_born(self):
        """Remote tracks with no partner become inflated tentative ego tracks."""
        ego = [_track(1, [10.0, 0.0, 0.0])]
        remote = [TrackReport.from_track(_track(5, [40.0, 0.0, 0.0], var=0.5), "pole")]
        out = fuse_post_tracking(ego, remote, tick=2, cfg=FusionConfig(birth_inflation=3.0))
        assert len(out) == 2
        born = out[1]
        assert born.track_id == 2
        assert born.status == TrackStatus.TENTATIVE
        assert np.allclose(born.estimate.covariance, 1.5 * np.eye(6))
        assert born.last_hit_tick == 2

    def test_unconfirmed_remote_ignored(self):
        """Tentative remote tracks are not shared into the ego picture."""
        ego = [_track(1, [10.0, 0.0, 0.0])]
        remote = [_track(5, [40.0, 0.0, 0.0], status=TrackStatus.TENTATIVE)]
        assert fuse_post_tracking(ego, remote, tick=0) == ego

    def test_classes_kept_apart(self):
        """A pedestrian report does not fuse into a car track."""
        ego = [_track(1, [10.0, 0.0, 0.0])]
        remote = [TrackReport.from_track(_track(5, [10.0, 0.0, 0.0], label="pedestrian"), "pole")]
        out = fuse_post_tracking(ego, remote, tick=0)
        assert [t.class_label.value for t in out] == ["car", "pedestrian"]

    def test_repeated_report_does_not_shrink_below_inputs(self):
        """Fusing the same remote estimate many times stays bounded by it."""
        ego = [_track(1, [10.0, 0.0, 0.0], var=2.0)]
        report = TrackReport.from_track(_track(5, [10.0, 0.0, 0.0], var=1.0), "pole")
        tracks = ego
        for tick in range(20):
            tracks = fuse_post_tracking(tracks, [report], tick=tick)
        assert np.trace(tracks[0].estimate.covariance) >= np.trace(report.covariance) - 1e-6
