import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posture_forecaster.motion.markers import MARKER_NAMES, SEGMENT_NAMES, SEGMENTS, SegmentSpec, get_segment
from posture_forecaster.motion.preprocess import (N_FRAMES, WINDOW, butterworth_zero_lag, encode_task_meta,
                                                  fit_normalizer, make_windows, pair_lengths,
                                                  preprocess_task, resample_task, segment_frames,
                                                  split_by_subject, split_sizes, stack_windows)
from posture_forecaster.motion.recording import TaskRecording
from posture_forecaster.motion.synthetic import (REACH_TOLERANCE_MM, Skeleton, TaskSpec,
                                                 UnreachableTaskError, forward_kinematics, hand_positions,
                                                 task_grid, synthesize_task)

from oracles import amplitude, analytic_two_pass_gain


def _recording(frames, sample_rate=120.0, **kw):
    defaults = dict(subject_id="S01", mass=70.0, height=180.0, lifting_technique="stoop",
                    handling_technique="two_handed", load_position=(0.0, 580.6, 128.3))
    defaults.update(kw)
    return TaskRecording(sample_rate=sample_rate, frames=frames, **defaults)


# -- markers and segments --------------------------------------------------------------


def test_marker_set_has_41_unique_labels():
    assert len(MARKER_NAMES) == 41 == len(set(MARKER_NAMES))
    assert {"T12", "S1"} <= set(MARKER_NAMES)


def test_segments_partition_the_marker_set():
    counts = {n: SEGMENTS[n].n_markers for n in SEGMENT_NAMES}
    assert counts == {"head": 4, "arms": 14, "body_pelvic": 11, "legs": 12}
    members = [m for n in SEGMENT_NAMES for m in SEGMENTS[n].member_markers]
    assert sorted(members) == sorted(MARKER_NAMES)


def test_feature_widths():
    assert [get_segment(n).n_features for n in SEGMENT_NAMES] == [19, 49, 40, 43]


def test_constraint_pairs():
    assert len(get_segment("arms").constraint_pairs) == 4
    assert len(get_segment("legs").constraint_pairs) == 2
    assert get_segment("head").constraint_pairs == ()
    assert get_segment("body_pelvic").constraint_pairs == ()
    assert ("RSHO", "RELB") in get_segment("arms").constraint_pairs


def test_segment_spec_validation():
    with pytest.raises(ValueError, match="needs 4 markers"):
        SegmentSpec("head", ("LFHD", "RFHD"))
    with pytest.raises(ValueError, match="not inside"):
        SegmentSpec("head", SEGMENTS["head"].member_markers, (("LFHD", "RKNE"),))
    with pytest.raises(ValueError):
        get_segment("torso")


# -- recording ------------------------------------------------------------------------


def test_recording_rejects_bad_input():
    good = np.zeros((5, 41, 3))
    with pytest.raises(ValueError, match="non-finite"):
        bad = good.copy()
        bad[2, 3, 1] = np.nan
        _recording(bad)
    with pytest.raises(ValueError, match="at least 2 frames"):
        _recording(np.zeros((1, 41, 3)))
    with pytest.raises(ValueError, match="unique"):
        _recording(np.zeros((3, 2, 3)), marker_names=("A", "A"))
    with pytest.raises(ValueError, match="lifting"):
        _recording(good, lifting_technique="kneel")


# -- filtering ------------------------------------------------------------------------


def test_filter_keeps_constants():
    x = np.full(200, 3.25)
    np.testing.assert_allclose(butterworth_zero_lag(x), x, rtol=0, atol=1e-12)


def test_filter_passes_1hz_with_zero_lag():
    fs, n = 120.0, 1200
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * 1.0 * t)
    y = butterworth_zero_lag(x, fs)
    core = slice(120, n - 120)
    gain = amplitude(y[core], 1.0) / amplitude(x[core], 1.0)
    assert gain == pytest.approx(analytic_two_pass_gain(1.0), rel=0.01)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[core], np.roll(y, -lag)[core]) for lag in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_filter_attenuates_50hz():
    fs, n = 120.0, 1200
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * 50.0 * t)
    y = butterworth_zero_lag(x, fs)
    core = slice(120, n - 120)
    db = 20 * np.log10(amplitude(y[core], 50.0) / amplitude(x[core], 50.0))
    assert db < -40
    assert 20 * np.log10(analytic_two_pass_gain(50.0)) < -40


def test_filter_idempotent_on_band_limited_signal():
    t = np.arange(600) / 120.0
    x = np.sin(2 * np.pi * 0.5 * t) + 0.3 * np.sin(2 * np.pi * 2.0 * t)
    once = butterworth_zero_lag(x)
    twice = butterworth_zero_lag(once)
    core = slice(60, 540)
    np.testing.assert_allclose(twice[core], once[core], atol=0.01 * np.abs(once).max())


def test_filter_rejects_short_series():
    with pytest.raises(ValueError, match="need more than 15"):
        butterworth_zero_lag(np.zeros(15))


# -- resampling -----------------------------------------------------------------------


def test_resample_identity_on_101_frames(one_task):
    out = resample_task(one_task)
    np.testing.assert_array_equal(out.frames, one_task.frames)


def test_resample_linear_ramp():
    ramp = np.linspace(0.0, 200.0, 201)
    frames = np.repeat(ramp[:, None, None], 3, axis=2).repeat(41, axis=1)
    out = resample_task(_recording(frames))
    assert out.n_frames == 101
    np.testing.assert_allclose(out.frames[:, 0, 0], np.arange(0, 201, 2.0), rtol=0, atol=1e-9)


def test_resample_50_frames_preserves_endpoints():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(50, 41, 3))
    out = resample_task(_recording(frames, sample_rate=100.0))
    assert out.n_frames == 101
    np.testing.assert_array_equal(out.frames[0], frames[0])
    np.testing.assert_array_equal(out.frames[-1], frames[-1])
    # duration is unchanged
    assert (out.n_frames - 1) / out.sample_rate == pytest.approx(49 / 100.0)


def test_preprocess_produces_101_frames():
    rng = np.random.default_rng(1)
    frames = np.cumsum(rng.normal(size=(240, 41, 3)), axis=0)
    out = preprocess_task(_recording(frames))
    assert out.n_frames == N_FRAMES


# -- meta encoding --------------------------------------------------------------------


def test_encode_worked_example():
    v = encode_task_meta("stoop", "two_handed", (0, 580.6, 128.3), height_cm=180, mass_kg=70)
    np.testing.assert_array_equal(v, [0, 580.6, 128.3, 2, 1, 180, 70])


def test_encode_codes():
    assert tuple(encode_task_meta("upright", "one_handed", (0, 0, 0), 170, 60)[3:5]) == (1, 0)
    assert encode_task_meta("full_squat", "two_handed", (0, 0, 0), 170, 60)[4] == 3
    with pytest.raises(ValueError):
        encode_task_meta("crouch", "two_handed", (0, 0, 0), 170, 60)


# -- windows --------------------------------------------------------------------------


@pytest.mark.parametrize("name", SEGMENT_NAMES)
def test_windows_count_and_width(one_task, name):
    seg = get_segment(name)
    w = make_windows(one_task, seg)
    assert len(w) == 76
    assert w[0].X.shape == (WINDOW, seg.n_features)
    assert w[0].y.shape == (3 * seg.n_markers,)


def test_window_contents(one_task):
    seg = get_segment("arms")
    coords = segment_frames(one_task, seg)
    w = make_windows(one_task, seg)
    # sample 0 label is frame 26 (1-based)
    np.testing.assert_array_equal(w[0].y, coords[25])
    np.testing.assert_array_equal(w[10].X[:, :42], coords[10:35])
    meta = w[0].X[:, 42:]
    assert np.all(meta == meta[0])
    labels = np.stack([s.y for s in w])
    np.testing.assert_array_equal(labels, coords[25:])


def test_windows_need_101_frames():
    with pytest.raises(ValueError, match="101"):
        make_windows(_recording(np.zeros((50, 41, 3))), get_segment("head"))


def test_missing_marker_is_named(one_task):
    names = tuple("XXXX" if m == "RKNE" else m for m in one_task.marker_names)
    rec = _recording(one_task.frames, marker_names=names)
    with pytest.raises(KeyError, match="RKNE"):
        make_windows(rec, get_segment("legs"))


# -- normalisation --------------------------------------------------------------------


def test_normalizer_round_trip_and_mean(one_task):
    X, _, _ = stack_windows(make_windows(one_task, get_segment("legs")))
    stats = fit_normalizer(X)
    Xn = stats.normalize(X)
    np.testing.assert_allclose(stats.denormalize(Xn), X, rtol=0, atol=1e-9)
    at_mean = stats.normalize(np.broadcast_to(stats.mean, X.shape[1:]))
    np.testing.assert_array_equal(at_mean, 0.0)


def test_normalizer_guards_constant_features(one_task):
    X, _, _ = stack_windows(make_windows(one_task, get_segment("legs")))
    stats = fit_normalizer(X)
    # the lifting code is constant in a single-task set
    assert stats.std[-3] == 0.0
    Xn = stats.normalize(X)
    assert np.all(np.isfinite(Xn))
    np.testing.assert_array_equal(Xn[..., -3], 0.0)


# -- splitting ------------------------------------------------------------------------


def test_split_sizes():
    assert split_sizes(20) == (14, 4, 2)
    assert split_sizes(6) == (4, 1, 1)
    assert split_sizes(3) == (1, 1, 1)
    with pytest.raises(ValueError):
        split_sizes(2)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000))
def test_split_is_disjoint_and_deterministic(n, seed):
    recs = [_recording(np.zeros((2, 41, 3)), subject_id=f"S{i:02d}") for i in range(n)]
    tr, va, te = split_by_subject(recs, seed)
    ids = [{r.subject_id for r in g} for g in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert tuple(map(len, ids)) == split_sizes(n)
    again = split_by_subject(recs, seed)
    assert [[r.subject_id for r in g] for g in again] == [[r.subject_id for r in g] for g in (tr, va, te)]


# -- synthetic generator --------------------------------------------------------------


def test_task_grid_has_204_tasks():
    grid = task_grid()
    assert len(grid) == 204
    assert sum(t.handling_technique == "one_handed" for t in grid) == 105


def test_synthetic_task_is_rigid(one_task):
    for name in ("arms", "legs"):
        seg = get_segment(name)
        lengths = pair_lengths(segment_frames(one_task, seg), seg.pair_indices())
        assert lengths.std(axis=0).max() < 1e-9


def test_synthetic_first_frame_is_neutral(one_task, skeleton):
    np.testing.assert_allclose(one_task.frames[0], forward_kinematics(np.zeros(12), skeleton), atol=1e-9)


def test_synthetic_final_hand_reaches_load(one_task, skeleton):
    right, left = hand_positions(one_task.extra["q_final"], skeleton)
    hand = 0.5 * (right + left)
    assert np.linalg.norm(hand - one_task.load_position) <= REACH_TOLERANCE_MM
    # the recorded finger markers agree with the kinematic hand points
    fin = one_task.frames[-1, [MARKER_NAMES.index("RFIN"), MARKER_NAMES.index("LFIN")]]
    np.testing.assert_allclose(fin.mean(axis=0), hand, atol=1e-9)


def test_synthetic_is_deterministic(skeleton):
    spec = TaskSpec("upright", "one_handed", (300.0, 300.0, 1200.0))
    a = synthesize_task(skeleton, spec, 11)
    b = synthesize_task(skeleton, spec, 11)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_unreachable_task_reports_deficit(skeleton):
    spec = TaskSpec("upright", "one_handed", (0.0, 3000.0, 1200.0))
    with pytest.raises(UnreachableTaskError, match="deficit") as info:
        synthesize_task(skeleton, spec, 0)
    assert info.value.deficit_mm > 1000


def test_dataset_shape(small_dataset):
    assert len(small_dataset) == 6
    assert len({r.subject_id for r in small_dataset}) == 3
    assert all(r.n_frames == 101 for r in small_dataset)
    assert len({r.task_id for r in small_dataset}) == 6


def test_skeleton_scales_with_height():
    short, tall = Skeleton(1650.0, 70.0), Skeleton(1900.0, 70.0)
    assert tall.forearm / short.forearm == pytest.approx(1900 / 1650)
