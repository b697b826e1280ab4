import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_cmc, brute_ranking, sklearn_map
from reidtl.data import ImageRecord
from reidtl.evaluation import (
    REPORT_SCHEMA,
    EvaluationError,
    FeatureMatrix,
    average_precision,
    compute_cmc,
    compute_map,
    evaluate_features,
    pairwise_distances,
    rank_gallery,
    read_features,
    write_features,
)


def _rec(i, pid, cam):
    return ImageRecord(f"r{i}", pid, cam, np.zeros((1, 1, 1), np.float32))


def test_hand_average_precision():
    # hits at ranks 1 and 3
    assert average_precision([0, 1, 2, 3], 7, [7, 1, 7, 2]) == pytest.approx(0.8333333333, abs=1e-9)


def test_rank_gallery_stable_ties():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [3.0, 0.0]])
    assert rank_gallery([0.0, 0.0], g).tolist() == [0, 1, 2, 3]


@st.composite
def retrieval_instance(draw):
    d = draw(st.integers(1, 4))
    ng = draw(st.integers(1, 50))
    npr = draw(st.integers(1, 8))
    # integer coordinates make exact ties common
    gallery = draw(arrays(np.float64, (ng, d), elements=st.integers(-3, 3).map(float)))
    probes = draw(arrays(np.float64, (npr, d), elements=st.integers(-3, 3).map(float)))
    gids = draw(st.lists(st.integers(0, 5), min_size=ng, max_size=ng))
    pids = draw(st.lists(st.sampled_from(gids), min_size=npr, max_size=npr))
    return probes, gallery, pids, gids


@settings(max_examples=200, deadline=None)
@given(retrieval_instance())
def test_metrics_match_brute_force(inst):
    probes, gallery, pids, gids = inst
    rankings = [rank_gallery(p, gallery) for p in probes]
    brute = [brute_ranking(p.tolist(), gallery.tolist()) for p in probes]
    assert [r.tolist() for r in rankings] == brute
    cmc = compute_cmc(rankings, pids, gids)
    assert np.max(np.abs(cmc - np.array(brute_cmc(brute, pids, gids, len(gids))))) <= 1e-9
    assert abs(compute_map(rankings, pids, gids) - sklearn_map(brute, pids, gids)) <= 1e-9


@given(retrieval_instance())
def test_cmc_monotone_and_bounded(inst):
    probes, gallery, pids, gids = inst
    cmc = compute_cmc([rank_gallery(p, gallery) for p in probes], pids, gids)
    assert np.all(np.diff(cmc) >= 0)
    assert cmc[-1] == 1.0
    assert 0 <= cmc[0] <= 1


def test_absent_identity_skipped_by_cmc_rejected_by_map():
    rankings = [np.array([0, 1]), np.array([1, 0])]
    cmc = compute_cmc(rankings, [5, 9], [5, 6])
    assert cmc.tolist() == [1.0, 1.0]
    with pytest.raises(EvaluationError, match="no correct gallery match"):
        compute_map(rankings, [5, 9], [5, 6])


def test_empty_probe_set():
    with pytest.raises(EvaluationError, match="empty"):
        compute_cmc([], [], [1])
    with pytest.raises(EvaluationError, match="empty"):
        evaluate_features(np.zeros((0, 2)), [], np.zeros((1, 2)), [_rec(0, 1, 1)])


def test_same_camera_matches_are_junk():
    probe = [_rec(0, 1, 0)]
    gallery = [_rec(1, 1, 0), _rec(2, 2, 1), _rec(3, 1, 1)]
    pf = np.array([[0.0]])
    gf = np.array([[0.0], [1.0], [2.0]])
    rep = evaluate_features(pf, probe, gf, gallery)
    # the same-camera copy at distance 0 is discarded, the true match sits behind identity 2
    assert rep.rank_table[1] == 0.0 and rep.cmc[1] == 1.0
    assert rep.map == pytest.approx(0.5)


def test_probe_without_cross_camera_match_is_counted_as_excluded():
    probe = [_rec(0, 1, 0), _rec(1, 2, 0)]
    gallery = [_rec(2, 1, 1), _rec(3, 2, 0)]
    rep = evaluate_features(np.zeros((2, 1)), probe, np.zeros((2, 1)), gallery)
    assert rep.num_probes == 1 and rep.num_excluded == 1


def test_multi_query_averages_group_features():
    probe = [_rec(0, 1, 0), _rec(1, 1, 0), _rec(2, 2, 0)]
    gallery = [_rec(3, 2, 1), _rec(4, 1, 1)]
    pf = np.array([[-1.0], [3.0], [10.0]])  # group mean for id 1 is 1.0
    gf = np.array([[2.2], [1.0]])
    rep = evaluate_features(pf, probe, gf, gallery, "multi_query")
    assert rep.protocol == "MQ"
    assert rep.num_probes == 2
    assert rep.rank1 == 1.0
    sq = evaluate_features(pf, probe, gf, gallery, "single_query")
    assert sq.rank1 < 1.0


def test_perfect_features_give_full_table():
    probe = [_rec(i, i, 0) for i in range(5)]
    gallery = [_rec(10 + i, i, 1) for i in range(5)]
    f = np.eye(5)
    rep = evaluate_features(f, probe, f + 0.01, gallery)
    assert all(v == 1.0 for v in rep.rank_table.values())
    assert rep.map == 1.0


def test_report_schema_and_rank_table(tmp_path):
    rng = np.random.default_rng(0)
    probe = [_rec(i, i % 8, 0) for i in range(8)]
    gallery = [_rec(10 + i, i % 8, 1) for i in range(24)]
    rep = evaluate_features(rng.normal(size=(8, 3)), probe, rng.normal(size=(24, 3)), gallery)
    data = json.loads(rep.write_json(tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    for k, v in data["rank_table"].items():
        assert v == data["cmc"][int(k) - 1]


def test_unknown_protocol():
    with pytest.raises(EvaluationError, match="protocol"):
        evaluate_features(np.zeros((1, 1)), [_rec(0, 1, 0)], np.zeros((1, 1)), [_rec(1, 1, 1)], "bogus")


def test_pairwise_distances_against_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(9, 5))
    d = pairwise_distances(a, b)
    for i in range(7):
        for j in range(9):
            assert d[i, j] == pytest.approx(np.sqrt(np.sum((a[i] - b[j]) ** 2)), abs=1e-12)
    with pytest.raises(EvaluationError, match="dimension"):
        pairwise_distances(a, b[:, :3])


def test_feature_matrix_validation():
    with pytest.raises(EvaluationError, match="align"):
        FeatureMatrix(np.zeros((2, 3)), ["a"])
    with pytest.raises(EvaluationError, match="NaN"):
        FeatureMatrix(np.array([[np.nan]]), ["a"])


def test_feature_export_round_trip(tmp_path):
    fm = FeatureMatrix(np.arange(12, dtype=np.float64).reshape(4, 3) / 7, ["a", "b", "c", "d"])
    path, ids = write_features(fm, tmp_path / "f.f32")
    assert path.stat().st_size == 4 * 3 * 4
    assert ids.read_text().splitlines() == ["image_id", "a", "b", "c", "d"]
    back = read_features(path)
    assert back.image_ids == fm.image_ids
    assert np.allclose(back.features, fm.features, atol=1e-7)
