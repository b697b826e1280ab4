import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reidtl.adapt.cotrain import (
    AdaptError,
    SoftLabeling,
    build_cross_view_graph,
    co_train,
    halve,
    label_agreement,
    labeling_for,
    mutual_nn_rate,
    relabel,
    select_lambda,
    self_train,
    self_train_round,
    soft_labels_from_features,
    split_views,
    subspace_codes,
)
from reidtl.data import SyntheticSpec, generate_synthetic
from reidtl.evaluation import FeatureMatrix, extract_features
from reidtl.model import build_model, parameter_hash
from reidtl.train import TrainConfig

TINY = TrainConfig(step1_iters=3, step2_iters=3, augmentations_per_image=0, batch_k=4, batch_m=2)


def brute_soft_labels(feats, a_ids, b_ids, row):
    labels = {img: k for k, img in enumerate(a_ids)}
    for img in b_ids:
        best, best_d = None, np.inf
        for k, anchor in enumerate(a_ids):
            d = float(np.sqrt(np.sum((feats[row[img]] - feats[row[anchor]]) ** 2)))
            if d < best_d:
                best, best_d = k, d
        labels[img] = best
    return labels


@given(arrays(np.float64, (9, 2), elements=st.integers(-2, 2).map(float)), st.integers(1, 8))
def test_soft_labels_match_brute_force(feats, n_a):
    ids = [f"x{i}" for i in range(9)]
    fm = FeatureMatrix(feats, ids)
    lab = soft_labels_from_features(fm, ids[:n_a], ids[n_a:])
    assert lab.labels == brute_soft_labels(feats, ids[:n_a], ids[n_a:], {i: n for n, i in enumerate(ids)})
    assert lab.num_classes == n_a
    assert [lab.labels[i] for i in ids[:n_a]] == list(range(n_a))


def test_soft_label_ties_go_to_lower_anchor():
    fm = FeatureMatrix(np.array([[1.0], [-1.0], [0.0]]), ["a0", "a1", "b0"])
    assert soft_labels_from_features(fm, ["a0", "a1"], ["b0"]).labels["b0"] == 0


def test_empty_views():
    fm = FeatureMatrix(np.zeros((2, 1)), ["a", "b"])
    with pytest.raises(AdaptError, match="anchor view is empty"):
        soft_labels_from_features(fm, [], ["a", "b"])
    lab = soft_labels_from_features(fm, ["a", "b"], [])
    assert lab.labels == {"a": 0, "b": 1}


def test_split_views(noisy_ds):
    anchor, a, b = split_views(noisy_ds)
    assert anchor == 0
    assert len(a) + len(b) == len(noisy_ds)
    with pytest.raises(AdaptError, match="anchor camera 7"):
        split_views(noisy_ds, 7)
    one_cam = noisy_ds.subset(keep=lambda r: r.camera_id == 0)
    with pytest.raises(AdaptError, match="two camera views"):
        split_views(one_cam)


def test_oracle_features_give_perfect_labels(noisy_ds):
    # features that encode identity make every cross-view match correct
    feats = np.array([[float(r.person_id), 0.0] for r in noisy_ds.records])
    fm = FeatureMatrix(feats, [r.image_id for r in noisy_ds.records])
    lab = labeling_for(noisy_ds, fm)
    pid = {r.image_id: r.person_id for r in noisy_ds.records}
    for img, k in lab.matches().items():
        assert pid[img] == pid[lab.anchor_ids[k]]


def test_relabel_requires_full_coverage(noisy_ds):
    with pytest.raises(AdaptError, match="does not cover"):
        relabel(noisy_ds, SoftLabeling({}, anchor_ids=("x",)))


def test_label_agreement():
    a = SoftLabeling({"a": 0, "b": 1, "c": 0, "d": 1}, anchor_ids=("a", "b"))
    b = SoftLabeling({"a": 0, "b": 1, "c": 0, "d": 0}, anchor_ids=("a", "b"))
    assert label_agreement(a, a) == 1.0
    assert label_agreement(a, b) == 0.5


def test_self_train_round_zero_iterations(noisy_ds):
    model = build_model(num_classes=4, verif_hidden=8)
    target = noisy_ds.unlabelled()
    lab = labeling_for(target, extract_features(model, target.records))
    before = parameter_hash(model, ["backbone", "verification"])
    self_train_round(model, target, lab, TrainConfig(step1_iters=0, step2_iters=0))
    assert parameter_hash(model, ["backbone", "verification"]) == before
    assert model.num_classes == lab.num_classes


def test_self_train_round_needs_two_classes(noisy_ds):
    with pytest.raises(AdaptError, match="at least 2"):
        self_train_round(build_model(verif_hidden=8), noisy_ds, SoftLabeling({}, anchor_ids=("a",)), TINY)


def test_co_train_history_and_determinism(noisy_ds):
    target = noisy_ds.unlabelled()
    hashes = []
    for _ in range(2):
        model = build_model(num_classes=4, verif_hidden=8, seed=2)
        history = []
        co_train(model, target, rounds=2, lam=0.1, cfg=TINY, history=history, solver_iters=10)
        hashes.append(parameter_hash(model))
    assert hashes[0] == hashes[1]
    assert [h.round for h in history] == [0, 1]
    assert history[0].agreement is None
    assert 0 <= history[1].agreement <= 1
    assert history[0].dict_model.Z.shape[1] == len(target)


def test_co_train_rejects_zero_rounds(noisy_ds):
    with pytest.raises(AdaptError, match="adapt.rounds"):
        co_train(build_model(verif_hidden=8), noisy_ds.unlabelled(), rounds=0)


def test_self_train_runs(noisy_ds):
    history = []
    self_train(build_model(num_classes=4, verif_hidden=8), noisy_ds.unlabelled(), 2, TINY, history=history)
    assert len(history) == 2 and history[1].agreement is not None


def test_subspace_codes_shape(noisy_ds):
    model = build_model(num_classes=4, verif_hidden=8)
    codes = subspace_codes(model, noisy_ds.records, lam=0.1, k=2, solver_iters=5)
    assert codes.features.shape[0] == len(noisy_ds)
    assert codes.image_ids == [r.image_id for r in noisy_ds.records]


def test_graph_rejects_excessive_k():
    with pytest.raises(AdaptError, match="exceeds"):
        build_cross_view_graph(np.zeros((3, 1)), [0, 0, 1], k=2)


def test_mutual_nn_rate():
    feats = FeatureMatrix(np.array([[0.0], [5.0], [0.1], [5.1]]), list("abcd"))
    assert mutual_nn_rate(feats, [0, 0, 1, 1]) == 1.0
    feats = FeatureMatrix(np.array([[0.0], [1.0], [0.9], [9.0]]), list("abcd"))
    assert mutual_nn_rate(feats, [0, 0, 1, 1]) == 0.5


def test_halve_is_stratified(noisy_ds):
    a, b = halve(noisy_ds, seed=1)
    assert len(a) + len(b) == len(noisy_ds)
    for cam in noisy_ds.cameras:
        na = sum(r.camera_id == cam for r in a.records)
        nb = sum(r.camera_id == cam for r in b.records)
        assert abs(na - nb) <= 1


def test_select_lambda_deterministic_and_single(noisy_ds):
    target = noisy_ds.unlabelled()
    model = build_model(num_classes=4, verif_hidden=8)
    assert select_lambda(model, target, [0.5]) == 0.5
    picks = [select_lambda(model, target, [0.0, 0.1], seed=3, cfg=TINY) for _ in range(2)]
    assert picks[0] == picks[1]
    with pytest.raises(AdaptError):
        select_lambda(model, target, [])


def _pixels(ds):
    return FeatureMatrix(np.stack([r.pixels.ravel() for r in ds.records]).astype(np.float64),
                         [r.image_id for r in ds.records], "pixels")


@pytest.mark.parametrize("seed", range(3))
def test_noise_free_views_get_true_pseudo_class(seed):
    ds = generate_synthetic(SyntheticSpec(num_identities=12, images_per_identity_per_camera=1, seed=seed))
    lab = labeling_for(ds, _pixels(ds))
    pid = {r.image_id: r.person_id for r in ds.records}
    assert lab.num_classes == 12
    assert all(pid[img] == pid[lab.anchor_ids[k]] for img, k in lab.matches().items())


def test_noise_free_one_nn_graph_links_counterparts():
    ds = generate_synthetic(SyntheticSpec(num_identities=12, images_per_identity_per_camera=1, seed=5))
    views = np.array([r.camera_id for r in ds.records])
    W = build_cross_view_graph(_pixels(ds), views, k=1)
    pids = np.array([r.person_id for r in ds.records])
    for i in range(len(ds)):
        j = int(np.argmax(W[i] * (views != views[i])))
        assert pids[i] == pids[j]


@pytest.mark.parametrize("seed", range(3))
def test_round_with_correct_labels_does_not_hurt(seed):
    from reidtl.data import make_probe_gallery
    from reidtl.evaluation import evaluate
    from reidtl.train import two_stepped_finetune

    src = generate_synthetic(SyntheticSpec(num_identities=20, images_per_identity_per_camera=2,
                                           cross_view_noise=0.3, seed=100 + seed, name="src"))
    model = build_model(num_classes=20, verif_hidden=16, seed=seed)
    two_stepped_finetune(model, src, TrainConfig(step1_iters=0, step2_iters=300, seed=seed))
    ds = generate_synthetic(SyntheticSpec(num_identities=15, images_per_identity_per_camera=1, seed=2 + seed))
    probe, gallery = make_probe_gallery(ds, "single_shot", seed=0)
    before = evaluate(model, probe, gallery).rank1
    truth = {r.image_id: r.person_id for r in ds.records}
    lab = labeling_for(ds, _pixels(ds))
    assert all(truth[i] == truth[lab.anchor_ids[k]] for i, k in lab.labels.items())
    self_train_round(model, ds, lab, TrainConfig(step1_iters=100, step2_iters=400, seed=0, batch_k=8, batch_m=2))
    assert evaluate(model, probe, gallery).rank1 >= before
