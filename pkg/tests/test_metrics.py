import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from idadapt import metrics as mt
from idadapt.errors import DegenerateInputError, DimensionError, EmptyInputError, FormatError

# square bounding box, centroid (15, 15.2); fits a 32x32 frame under any rotation
BASE = np.array([[13.0, 13.0], [17.0, 13.0], [13.0, 17.0], [17.0, 17.0], [15.0, 16.0]])
# integer centroid, so exact-zero comparisons are free of rounding
CENTRED = np.array([[12.0, 13.0], [18.0, 13.0], [13.0, 17.0], [17.0, 17.0], [15.0, 15.0]])


def lms(points, w=32.0, h=32.0):
    return mt.LandmarkSet(np.asarray(points, np.float64), w, h)


def clip(embeddings, refs, landmarks=()):
    return mt.VideoEval(np.asarray(embeddings), np.asarray(refs), list(landmarks))


def unit(v):
    v = np.asarray(v, np.float64)
    return v / np.linalg.norm(v)


finite = st.floats(-10, 10, allow_nan=False).filter(lambda x: abs(x) > 1e-3)


# -- identity similarity ------------------------------------------------------


def test_frames_equal_to_reference():
    r = np.array([0.3, -1.2, 2.0])
    assert mt.id_similarity_avg(clip([r, 2 * r, r], [r])) == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_frames():
    assert mt.id_similarity_avg(clip([[0.0, 1.0, 0.0], [0.0, 0.0, 5.0]], [[2.0, 0.0, 0.0]])) == 0.0


def test_pooled_similarity_matches_brute_force():
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((3, 6))
    refs = rng.standard_normal((2, 6))
    pooled = unit(unit(refs[0]) + unit(refs[1]))
    expected = sum(float(unit(f) @ pooled) for f in frames) / 3
    assert mt.id_similarity_avg(clip(frames, refs)) == pytest.approx(expected, abs=1e-12)


def test_reference_pooling_ignores_reference_scale():
    rng = np.random.default_rng(1)
    frames, refs = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
    scaled = refs * np.array([[0.1], [7.0], [3.0]])
    assert mt.id_similarity_avg(clip(frames, refs)) == pytest.approx(mt.id_similarity_avg(clip(frames, scaled)), abs=1e-12)


def test_zero_norm_embedding_is_degenerate():
    with pytest.raises(DegenerateInputError):
        mt.id_similarity_avg(clip([[0.0, 0.0]], [[1.0, 0.0]]))
    with pytest.raises(DegenerateInputError):
        mt.id_similarity_avg(clip([[1.0, 0.0]], [[0.0, 0.0]]))
    with pytest.raises(DegenerateInputError):
        mt.id_similarity_avg(clip([[1.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]]))


def test_width_mismatch_and_empty():
    with pytest.raises(DimensionError):
        clip([[1.0, 0.0]], [[1.0, 0.0, 0.0]])
    with pytest.raises(EmptyInputError):
        mt.VideoEval(np.zeros((0, 3)), np.ones((1, 3)))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_similarity_and_decay_ranges(frames, refs):
    try:
        ev = clip(frames, refs)
        s = mt.id_similarity_avg(ev)
        d = mt.similarity_decay(ev)
    except DegenerateInputError:
        return
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert 0 <= d <= 2 + 1e-12


# -- similarity decay ---------------------------------------------------------


def test_constant_clip_has_zero_decay():
    r = np.array([1.0, 2.0, 3.0])
    assert mt.similarity_decay(clip([r] * 16, [r])) == 0.0
    rng = np.random.default_rng(2)
    e = rng.standard_normal(4)
    assert mt.similarity_decay(clip([e] * 5, [rng.standard_normal(4)])) == 0.0


def test_corruption_ramp():
    r, perp = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    angles = np.linspace(0.0, 1.2, 10)
    frames = [np.cos(a) * r + np.sin(a) * perp for a in angles]
    assert mt.similarity_decay(clip(frames, [r])) == pytest.approx(1.0 - math.cos(1.2), abs=1e-12)


def test_improving_clip_clamps_at_zero():
    r = np.array([1.0, 0.0])
    frames = [[0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]
    assert mt.similarity_decay(clip(frames, [r])) == 0.0


@pytest.mark.parametrize("n,expected", [
    (2, [0, 1]), (5, [0, 1, 2, 3, 4]), (8, list(range(8))), (15, [0, 2, 4, 6, 8, 10, 12, 14]),
])
def test_sampled_frames(n, expected):
    assert mt.sampled_frames(n).tolist() == expected


def test_decay_recompute_on_random_clips():
    rng = np.random.default_rng(3)
    for n in range(2, 30):
        frames, refs = rng.standard_normal((n, 5)), rng.standard_normal((2, 5))
        pooled = unit(unit(refs[0]) + unit(refs[1]))
        sims = [float(unit(f) @ pooled) for f in frames]
        k = min(8, n)
        first, last = 0, round((k - 1) * (n - 1) / (k - 1))
        assert mt.similarity_decay(clip(frames, refs)) == pytest.approx(max(0.0, sims[first] - sims[last]), abs=1e-12)


def test_decay_needs_two_frames():
    with pytest.raises(EmptyInputError):
        mt.similarity_decay(clip([[1.0, 0.0]], [[1.0, 0.0]]))


# -- FM_ref -------------------------------------------------------------------


def test_fm_ref_zero_under_translation_and_scale():
    ref = lms(CENTRED)
    # power-of-two scale and integer shift keep every coordinate exact
    moved = [lms(CENTRED * 0.5 + [2.0, 3.0]), lms(CENTRED + [-4.0, 7.0]), lms((CENTRED - 8.0) * 2.0)]
    assert mt.fm_ref(clip(np.ones((3, 2)), [[1.0, 0.0]], moved), ref) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.3, 1.5), st.floats(-5, 5), st.floats(-5, 5))
def test_fm_ref_similarity_invariance(scale, tx, ty):
    c = BASE.mean(axis=0)
    pts = (BASE - c) * scale + c + [tx, ty]
    assert mt.fm_ref(clip([[1.0]], [[1.0]], [lms(pts)]), lms(BASE)) < 1e-12


@pytest.mark.parametrize("theta", [math.pi / 2, math.pi, 3 * math.pi / 2])
def test_fm_ref_rotation_is_a_chord(theta):
    """Quarter-turn rotations keep the square bounding box, so each point moves along a chord."""
    c = BASE.mean(axis=0)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    turned = (BASE - c) @ rot.T + c
    diag = math.hypot(4.0, 4.0)
    radii = np.linalg.norm(BASE - c, axis=1) / diag
    expected = float(np.mean(2 * math.sin(theta / 2) * radii))
    got = mt.fm_ref(clip([[1.0]], [[1.0]], [lms(turned)]), lms(BASE))
    assert got > 0 and got == pytest.approx(expected, abs=1e-12)


def test_fm_ref_hand_built_two_frames():
    ref = [[10, 10], [12, 10], [10, 12], [12, 12], [11, 11]]
    moved = [[10, 10], [12, 10], [10, 12], [12, 12], [11, 12]]
    # frame 2: centroid y moves by 0.2, bbox diag stays sqrt(8); offsets 0.2 x4 and 0.8 x1
    expected = (0.0 + (4 * 0.2 + 0.8) / 5 / math.sqrt(8)) / 2
    got = mt.fm_ref(clip(np.ones((2, 1)), [[1.0]], [lms(ref), lms(moved)]), lms(ref))
    assert got == pytest.approx(expected, abs=1e-12)


def test_fm_ref_pairs_points_by_index():
    perm = [4, 2, 0, 3, 1]
    rng = np.random.default_rng(4)
    frames = [BASE + rng.uniform(-1, 1, BASE.shape) for _ in range(3)]
    a = mt.fm_ref(clip(np.ones((3, 1)), [[1.0]], [lms(f) for f in frames]), lms(BASE))
    b = mt.fm_ref(clip(np.ones((3, 1)), [[1.0]], [lms(f[perm]) for f in frames]), lms(BASE[perm]))
    c = mt.fm_ref(clip(np.ones((3, 1)), [[1.0]], [lms(f[perm]) for f in frames]), lms(BASE))
    assert a == pytest.approx(b, abs=1e-12) and c != pytest.approx(a, abs=1e-6)


def test_coincident_landmarks_are_degenerate():
    with pytest.raises(DegenerateInputError):
        mt.fm_ref(clip([[1.0]], [[1.0]], [lms(BASE)]), lms(np.full((5, 2), 3.0)))


def test_fm_needs_landmarks():
    with pytest.raises(EmptyInputError):
        mt.fm_ref(clip([[1.0]], [[1.0]]), lms(BASE))
    with pytest.raises(EmptyInputError):
        mt.fm_inter(clip([[1.0], [1.0]], [[1.0]]))


# -- FM_inter -----------------------------------------------------------------


def test_static_clip_has_no_motion():
    assert mt.fm_inter(clip(np.ones((4, 1)), [[1.0]], [lms(BASE)] * 4)) == 0.0


def test_single_jump():
    W = 32.0
    frames = [lms(BASE), lms(BASE), lms(BASE + [0.1 * W, 0.0]), lms(BASE + [0.1 * W, 0.0])]
    assert abs(mt.fm_inter(clip(np.ones((4, 1)), [[1.0]], frames)) - 0.1) < 1e-6


def test_fm_inter_uses_each_axis_dimension():
    frames = [mt.LandmarkSet(BASE, 40.0, 20.0), mt.LandmarkSet(BASE + [0.0, 2.0], 40.0, 20.0)]
    assert mt.fm_inter(clip(np.ones((2, 1)), [[1.0]], frames)) == pytest.approx(0.1, abs=1e-12)


def test_fm_inter_matches_brute_force_max():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        traj = [BASE + rng.uniform(-3, 3, BASE.shape) for _ in range(n)]
        best = 0.0
        for i in range(n):
            for j in range(n):
                if j == i + 1:
                    d = [math.hypot((traj[j][k, 0] - traj[i][k, 0]) / 32, (traj[j][k, 1] - traj[i][k, 1]) / 32)
                         for k in range(5)]
                    best = max(best, sum(d) / 5)
        ev = clip(np.ones((n, 1)), [[1.0]], [lms(t) for t in traj])
        assert mt.fm_inter(ev) == pytest.approx(best, abs=1e-12)
        assert mt.fm_inter(ev, "mean") <= mt.fm_inter(ev)


def test_translation_raises_fm_inter():
    static = [lms(BASE)] * 3
    shifted = [lms(BASE), lms(BASE + [1.0, 0.0]), lms(BASE)]
    assert mt.fm_inter(clip(np.ones((3, 1)), [[1.0]], shifted)) > mt.fm_inter(clip(np.ones((3, 1)), [[1.0]], static))


def test_unknown_statistic():
    with pytest.raises(ValueError):
        mt.fm_inter(clip(np.ones((2, 1)), [[1.0]], [lms(BASE)] * 2), "median")


def test_landmark_set_validation():
    with pytest.raises(DimensionError):
        lms(BASE[:4])
    with pytest.raises(ValueError):
        lms(BASE + 20.0)
    with pytest.raises(DimensionError):
        clip(np.ones((2, 1)), [[1.0]], [lms(BASE)])


# -- success rates ------------------------------------------------------------


def _moving(n=3, step=1.0):
    return [lms(BASE + [step * i, 0.0]) for i in range(n)]


def test_all_pass():
    r = [1.0, 0.0]
    evals = [clip([r] * 3, [r], _moving()) for _ in range(4)]
    rates = mt.success_rates(evals, mt.Thresholds(identity=0.5, motion=0.01))
    assert rates == {"face_recognized": 1.0, "identity_check": 1.0, "motion": 1.0, "text_alignment": None}


def test_all_fail():
    evals = [clip([[0.0, 0.0]] * 3, [[1.0, 0.0]], [lms(BASE)] * 3) for _ in range(3)]
    rates = mt.success_rates(evals)
    assert rates["face_recognized"] == rates["identity_check"] == rates["motion"] == 0.0


def test_mixed_batch_matches_hand_tally():
    r, o = [1.0, 0.0], [0.0, 1.0]
    evals = []
    # (recognised, identity ok, moving) per clip
    plan = [(1, 1, 1), (1, 1, 0), (1, 0, 1), (0, 0, 0), (1, 1, 1),
            (1, 0, 0), (0, 0, 1), (1, 1, 1), (1, 0, 1), (1, 1, 0)]
    for rec, ok, mov in plan:
        emb = [[0.0, 0.0]] * 3 if not rec else ([r] * 3 if ok else [o] * 3)
        evals.append(clip(emb, [r], _moving(step=1.0 if mov else 0.0)))
    rates = mt.success_rates(evals, mt.Thresholds(identity=0.5, motion=0.01))
    assert rates["face_recognized"] == 8 / 10
    assert rates["identity_check"] == 5 / 10
    assert rates["motion"] == 6 / 10


def test_motion_not_applicable_without_landmarks():
    assert mt.success_rates([clip([[1.0]], [[1.0]])])["motion"] is None


def test_empty_batch():
    with pytest.raises(EmptyInputError):
        mt.success_rates([])


# -- records and reports ------------------------------------------------------


def _write(path, records):
    mt.write_frame_records(path, records)
    return path


def test_frame_records_round_trip(tmp_path):
    recs = [mt.frame_record("a", [1.0, 2.0], BASE, 32, 32), mt.frame_record("b", [0.5, 0.5]),
            mt.frame_record("a", [3.0, 4.0], BASE + 1, 32, 32)]
    groups = mt.read_frame_records(_write(tmp_path / "f.jsonl", recs))
    assert list(groups) == ["a", "b"]
    embs, landmarks = groups["a"]
    assert embs.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert np.array_equal(landmarks[1].points, BASE + 1)
    assert groups["b"][1] == []


@pytest.mark.parametrize("line", [
    "{not json", json.dumps({"video": "a"}), json.dumps({"video": "a", "embedding": [[1.0]]}),
    json.dumps({"video": "a", "embedding": [1.0], "landmarks": [[1, 1]], "frame_w": 4, "frame_h": 4}),
])
def test_parse_errors_carry_line_numbers(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"video": "x", "embedding": [1.0]}) + "\n" + line + "\n")
    with pytest.raises(FormatError, match=r"bad\.jsonl:2:"):
        mt.read_frame_records(p)


def test_partial_landmarks_rejected(tmp_path):
    recs = [mt.frame_record("a", [1.0], BASE, 32, 32), mt.frame_record("a", [1.0])]
    with pytest.raises(FormatError):
        mt.read_frame_records(_write(tmp_path / "f.jsonl", recs))


def test_references_against_themselves(tmp_path):
    rng = np.random.default_rng(6)
    recs = [mt.frame_record(str(i), rng.standard_normal(8), BASE, 32, 32) for i in range(5)]
    path = _write(tmp_path / "refs.jsonl", recs)
    rows, summary, rates = mt.evaluate_files(path, path)
    assert all(r["id_similarity_avg"] == pytest.approx(1.0, abs=1e-12) for r in rows)
    assert summary["fm_ref"] == 0.0 and summary["clips"] == 5
    assert rates["face_recognized"] == 1.0


def test_evaluate_files_matches_library(tmp_path):
    rng = np.random.default_rng(7)
    samples, refs = [], []
    for v in "abc":
        for _ in range(4):
            samples.append(mt.frame_record(v, rng.standard_normal(6), BASE + rng.uniform(-2, 2, BASE.shape), 32, 32))
        refs.append(mt.frame_record(v, rng.standard_normal(6), BASE, 32, 32))
    rows, summary, _ = mt.evaluate_files(_write(tmp_path / "s.jsonl", samples), _write(tmp_path / "r.jsonl", refs))
    for i, v in enumerate("abc"):
        chunk = samples[4 * i:4 * i + 4]
        ev = mt.VideoEval([c["embedding"] for c in chunk], [refs[i]["embedding"]],
                          [lms(c["landmarks"]) for c in chunk])
        assert rows[i]["id_similarity_avg"] == mt.id_similarity_avg(ev)
        assert rows[i]["fm_ref"] == mt.fm_ref(ev, lms(BASE))
        assert rows[i]["fm_inter"] == mt.fm_inter(ev)
        assert rows[i]["similarity_decay"] == mt.similarity_decay(ev)
    assert summary["fm_inter"] == float(np.mean([r["fm_inter"] for r in rows]))


def test_missing_reference_and_empty_samples(tmp_path):
    s = _write(tmp_path / "s.jsonl", [mt.frame_record("a", [1.0])])
    r = _write(tmp_path / "r.jsonl", [mt.frame_record("b", [1.0])])
    with pytest.raises(FormatError):
        mt.evaluate_files(s, r)
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    with pytest.raises(EmptyInputError):
        mt.evaluate_files(empty, r)


def test_reports_agree():
    summary = {"id_similarity_avg": 0.5, "fm_ref": None, "clips": 2}
    rates = {"motion": None, "identity_check": 1.0}
    kv = dict(line.split("=", 1) for line in mt.report_kv(summary, rates).splitlines())
    assert kv == {"id_similarity_avg": "0.5", "fm_ref": "n/a", "clips": "2", "rate.motion": "n/a",
                  "rate.identity_check": "1.0"}
    text = mt.report_text(summary, rates)
    assert all(v in text for v in kv.values())
