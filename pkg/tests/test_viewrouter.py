import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvecho import aggregation as A
from mvecho import viewrouter as R
from mvecho.errors import DataError, DimensionError
from mvecho.preprocess import ViewKind


def pred(*probs):
    p = np.asarray(probs, dtype=np.float64)
    return R.ViewPrediction(p / p.sum())


def one_hot_ish(view, conf):
    p = np.full(5, (1.0 - conf) / 4)
    p[view] = conf
    return R.ViewPrediction(p)


def small_cfg(scheme="temporal"):
    return A.VideoConfig(scheme=scheme, input_size=16, conv_layers=3, width_multiplier=0.125,
                         fc1_units=12, fc2_units=8, rnn_hidden=3)


simplex = st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5).map(lambda v: R.ViewPrediction(np.array(v) / sum(v)))


def test_prediction_validation():
    with pytest.raises(DimensionError):
        R.ViewPrediction(np.ones(4) / 4)
    with pytest.raises(DataError):
        R.ViewPrediction(np.array([0.5, 0.5, 0.5, 0.0, 0.0]))
    p = pred(1, 2, 7, 0, 0)
    assert p.argmax == ViewKind.A4C
    assert p.confidence == max(p.probs)


def test_identity_assignment():
    preds = [(f"c{v}", one_hot_ish(v, 0.8)) for v in range(5)]
    out = R.resolve_assignment(preds)
    assert out.slot == {ViewKind(v): f"c{v}" for v in range(5)}
    assert out.unassigned == []


def test_pslax_conflict():
    strong = R.ViewPrediction(np.array([0.9, 0.04, 0.03, 0.02, 0.01]))
    weak = R.ViewPrediction(np.array([0.6, 0.05, 0.3, 0.03, 0.02]))
    out = R.resolve_assignment([("weak", weak), ("strong", strong)])
    assert out.slot[ViewKind.PSLAX] == "strong"
    assert out.slot[ViewKind.A4C] == "weak"
    assert sum(c is not None for c in out.slot.values()) == 2


def test_displacement_chain():
    # a displaced clip may take the favourite slot of a less confident clip
    a = R.ViewPrediction(np.array([0.9, 0.1, 0, 0, 0]))
    b = R.ViewPrediction(np.array([0.7, 0.3, 0, 0, 0]))
    c = R.ViewPrediction(np.array([0.0, 0.6, 0.4, 0, 0]))
    out = R.resolve_assignment([("a", a), ("b", b), ("c", c)])
    assert out.filled() == {ViewKind.PSLAX: "a", ViewKind.PSSAX: "b", ViewKind.A4C: "c"}


def test_single_clip_and_zero_filled_diagnosis():
    out = R.resolve_assignment([("only", one_hot_ish(3, 0.5))])
    assert out.filled() == {ViewKind.SXLAX: "only"}
    params = A.build_video_model(small_cfg(), seed=0, dtype=np.float64)
    frames = np.random.default_rng(0).random((3, 16, 16))
    study = A.StudyClips({int(v): frames for v in out.filled()})
    prediction = A.video_forward(params, study)
    assert prediction.present.tolist() == [False, False, False, True, False]
    assert np.isclose(prediction.probabilities.sum(), 1.0)


def test_confidence_tie_breaks_by_clip_id():
    p = one_hot_ish(2, 0.7)
    out = R.resolve_assignment([("b", p), ("a", p)])
    assert out.slot[ViewKind.A4C] == "a"
    # the loser goes to its next-best slot; equal probabilities keep view order
    assert out.slot[ViewKind.PSLAX] == "b"


def test_more_clips_than_slots():
    preds = [(f"c{i}", one_hot_ish(0, 0.5 + 0.01 * i)) for i in range(7)]
    out = R.resolve_assignment(preds)
    assert len(out.filled()) == 5
    assert out.unassigned == ["c1", "c0"]


def test_rejects_empty_and_duplicate_ids():
    with pytest.raises(DataError):
        R.resolve_assignment([])
    with pytest.raises(DataError):
        R.resolve_assignment([("x", pred(1, 1, 1, 1, 1)), ("x", pred(1, 2, 1, 1, 1))])


@settings(max_examples=200, deadline=None)
@given(st.lists(simplex, min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_partial_injection_and_order_invariance(preds, random):
    items = [(f"clip{i}", p) for i, p in enumerate(preds)]
    out = R.resolve_assignment(items)
    used = [c for c in out.slot.values() if c is not None]
    assert len(used) == len(set(used)) == len(items)
    assert out.unassigned == []
    shuffled = items[:]
    random.shuffle(shuffled)
    assert R.resolve_assignment(shuffled) == out


@settings(max_examples=100, deadline=None)
@given(st.lists(simplex, min_size=1, max_size=5))
def test_most_confident_clip_gets_its_argmax(preds):
    items = [(f"clip{i}", p) for i, p in enumerate(preds)]
    out = R.resolve_assignment(items)
    top = min(items, key=lambda it: (-it[1].confidence, it[0]))
    assert out.slot[top[1].argmax] == top[0]


def test_tied_confidences_every_input_order():
    # z (0.55) takes A4C; x and y tie at 0.5 so x picks first and takes PSLAX,
    # leaving y with its third choice
    preds = [
        ("x", R.ViewPrediction(np.array([0.5, 0.3, 0.2, 0, 0]))),
        ("y", R.ViewPrediction(np.array([0.45, 0.05, 0.5, 0, 0]))),
        ("z", R.ViewPrediction(np.array([0.1, 0.1, 0.55, 0.25, 0]))),
    ]
    expected = {ViewKind.A4C: "z", ViewKind.PSLAX: "x", ViewKind.PSSAX: "y"}
    for perm in itertools.permutations(preds):
        assert R.resolve_assignment(list(perm)).filled() == expected


def test_zero_head_gives_uniform_views():
    params = R.build_view_model(small_cfg(), seed=1, dtype=np.float64)
    params["head.w"].data[...] = 0.0
    params["head.b"].data[...] = 0.0
    p = R.classify_view(params, np.random.default_rng(0).random((4, 16, 16)))
    np.testing.assert_allclose(p.probs, 0.2, atol=1e-15)
    assert p.confidence == pytest.approx(0.2)


@pytest.mark.parametrize("scheme", A.SCHEMES)
def test_view_model_uses_diagnosis_scheme(scheme):
    cfg = R.view_model_config(small_cfg(scheme))
    assert (cfg.scheme, cfg.slots, cfg.head, cfg.num_outputs) == (scheme, 1, "view", 5)


def test_classify_rejects_diagnosis_model():
    params = A.build_video_model(small_cfg(), seed=0)
    with pytest.raises(DataError):
        R.classify_view(params, np.zeros((2, 16, 16)))


def test_parallel_classification_matches_serial():
    params = R.build_view_model(small_cfg(), seed=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    clips = [rng.random((int(k), 16, 16)) for k in rng.integers(1, 6, 11)]
    serial = R.classify_views(params, clips, workers=1, batch_size=3)
    parallel = R.classify_views(params, clips, workers=3, batch_size=3)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.probs, b.probs)
    for clip, p in zip(clips, serial):
        np.testing.assert_allclose(R.classify_view(params, clip).probs, p.probs, rtol=0, atol=1e-14)


def test_route_and_audit_csv(tmp_path):
    params = R.build_view_model(small_cfg(), seed=4, dtype=np.float64)
    rng = np.random.default_rng(5)
    clips = {f"clip{i}": rng.random((3, 16, 16)) for i in range(4)}
    assignment, preds = R.route_clips(params, clips)
    assert len(assignment.filled()) == 4
    path = tmp_path / "audit.csv"
    R.write_audit_csv(path, preds, assignment)
    rows = list(csv.DictReader(path.open()))
    assert [r["clip_id"] for r in rows] == sorted(clips)
    for r in rows:
        assert r["predicted_view"] == preds[r["clip_id"]].argmax.name
        assert float(r["confidence"]) == pytest.approx(preds[r["clip_id"]].confidence, rel=1e-7)
        assert assignment.slot[ViewKind[r["slot"]]] == r["clip_id"]


def test_view_training_set_labels_by_slot():
    study = A.StudyClips({0: np.zeros((2, 4, 4)), 3: np.ones((2, 4, 4))}, {3: 1}, 1, "s")
    examples = R.view_training_set([study])
    assert [e.label for e in examples] == [0, 3]
    assert examples[1].key_frames == {0: 1} and examples[0].key_frames == {}
