"""Member training, the logistic-regression stacker, and stacked inference."""

import numpy as np
import numpy.testing as npt
import pytest
import scipy.optimize

from conftest import fast_config, toy_store
from openworld import committee as cm
from openworld import nn
from openworld.architectures import build_cnn
from openworld.committee import (CommitteeConfig, MetaModel, evaluate,
                                 fit_logistic, fit_meta, member_scores,
                                 stacked_predict, train_committee, train_member)
from openworld.data import CropStore, LabelSet, Sample


def test_config_default_epochs_is_10():
    assert CommitteeConfig(n_members=2).epochs == 10


def test_config_rejects_single_member():
    with pytest.raises(nn.ParameterError):
        CommitteeConfig(n_members=1)


# ---------------------------------------------------------------------------
# member training

def test_single_sample_memorization():
    store = toy_store(["car", "person"], per_class=1, seed=3)
    one = store.subset([0])
    cfg = fast_config(epochs=50)
    net, history = train_member(cfg.make_blueprint(2), one, cfg, seed=5)
    assert history[-1] == 1.0


def test_separable_classes_reach_95(two_class_store):
    from openworld.synth import nearest_centroid_accuracy

    # the nearest-centroid oracle confirms the toy data is separable at all
    assert nearest_centroid_accuracy(two_class_store, two_class_store) >= 0.99
    cfg = fast_config(epochs=10)
    net, history = train_member(cfg.make_blueprint(2), two_class_store, cfg, seed=1)
    assert history[-1] >= 0.95


def test_train_member_rejects_empty_split():
    cfg = fast_config()
    empty = CropStore(LabelSet(["car", "person"]))
    with pytest.raises(nn.TrainingError):
        train_member(cfg.make_blueprint(2), empty, cfg, seed=0)


# ---------------------------------------------------------------------------
# member scores

def test_member_scores_deterministic(two_class_store):
    net = build_cnn("B", 2, seed=0, conv_filters=(4, 8), dense_width=16)
    s1 = member_scores(net, two_class_store[0])
    s2 = member_scores(net, two_class_store[0])
    npt.assert_array_equal(s1, s2)


def test_member_scores_zero_head_is_half(two_class_store):
    net = build_cnn("A", 2, seed=0, conv_filters=(4, 8), dense_width=16)
    net.head.weights[...] = 0.0
    net.head.bias[...] = 0.0
    npt.assert_array_equal(member_scores(net, two_class_store[0]),
                           np.array([0.5, 0.5], dtype=np.float32))


def _reference_forward(net, pixels):
    """Independent float64 forward path: explicit loops, no engine code."""
    act = pixels.astype(np.float64)
    for layer in net.layers:
        kind = layer.spec.kind
        if kind == "conv2d":
            k = layer.kernels.astype(np.float64)
            kh = k.shape[0]
            h, w, _ = act.shape
            ho, wo = h - kh + 1, w - kh + 1
            out = np.zeros((ho, wo, k.shape[3]))
            for i in range(ho):
                for j in range(wo):
                    window = act[i:i + kh, j:j + kh, :]
                    for co in range(k.shape[3]):
                        out[i, j, co] = (window * k[:, :, :, co]).sum() + layer.bias[co]
            act = out
        elif kind == "relu":
            act = np.maximum(act, 0)
        elif kind == "maxpool":
            w_ = layer.window
            ho, wo = act.shape[0] // w_, act.shape[1] // w_
            out = np.zeros((ho, wo, act.shape[2]))
            for i in range(ho):
                for j in range(wo):
                    out[i, j] = act[i * w_:(i + 1) * w_, j * w_:(j + 1) * w_].max(axis=(0, 1))
            act = out
        elif kind == "dropout":
            pass  # eval mode
        elif kind in ("dense", "sigmoid-output"):
            flat = act.reshape(-1)
            z = layer.weights.astype(np.float64) @ flat + layer.bias.astype(np.float64)
            act = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60))) if kind != "dense" else z
    return act


def test_member_scores_match_independent_forward(two_class_store):
    net = build_cnn("C", 2, seed=4, input_shape=(64, 64, 3),
                    conv_filters=(3, 4, 4), dense_width=8)
    for i in (0, 41):
        sample = two_class_store[i]
        fast = member_scores(net, sample)
        slow = _reference_forward(net, sample.pixels)
        npt.assert_allclose(fast, slow, atol=1e-5)


# ---------------------------------------------------------------------------
# logistic stacker

def test_fit_logistic_separable_features_reach_full_accuracy():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=60)
    targets = np.eye(2)[labels]
    # members already emit one-hot-perfect scores
    features = np.concatenate([targets, targets], axis=1)
    weights, history = fit_logistic(features, targets)
    model = MetaModel(weights, n_members=2)
    pred = model.posteriors(features).argmax(axis=1)
    assert (pred == labels).mean() == 1.0


def test_fit_logistic_huge_l2_gives_uniform_posteriors():
    rng = np.random.default_rng(1)
    targets = np.eye(3)[rng.integers(0, 3, size=30)]
    features = rng.random((30, 6))
    weights, _ = fit_logistic(features, targets, l2=1e9)
    assert np.abs(weights).max() < 1e-6
    model = MetaModel(weights, n_members=2)
    npt.assert_allclose(model.posteriors(features), 1.0 / 3.0, atol=1e-6)


def test_fit_logistic_matches_convex_oracle():
    # convexity implies a unique optimum; scipy L-BFGS is the second, independent
    # optimizer on the same penalized likelihood
    rng = np.random.default_rng(7)
    n, k, members = 40, 2, 2
    labels = rng.integers(0, k, size=n)
    targets = np.eye(k)[labels]
    features = rng.random((n, members * k)) + 0.5 * np.concatenate(
        [targets, targets], axis=1)
    l2 = 1e-4
    weights, history = fit_logistic(features, targets, l2=l2)

    features1 = np.concatenate([features, np.ones((n, 1))], axis=1)

    def objective(flat):
        w = flat.reshape(k, features1.shape[1])
        loss, grad = cm._meta_objective(w, features1, targets, l2)
        return loss, grad.reshape(-1)

    ref = scipy.optimize.minimize(objective, np.zeros(k * features1.shape[1]),
                                  jac=True, method="L-BFGS-B",
                                  options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 5000})
    assert history[-1] - ref.fun < 1e-6
    assert abs(history[-1] - ref.fun) < 1e-6


def test_fit_logistic_loss_non_increasing():
    rng = np.random.default_rng(2)
    targets = np.eye(3)[rng.integers(0, 3, size=45)]
    features = rng.random((45, 9))
    _, history = fit_logistic(features, targets)
    assert all(b <= a + 1e-15 for a, b in zip(history, history[1:]))


def test_fit_meta_errors_on_missing_class(two_class_store):
    cfg = fast_config(epochs=1, seed=3)
    committee = train_committee(two_class_store, cfg)
    only_car = committee.stacking_split.subset(
        [i for i, s in enumerate(committee.stacking_split) if s.label_id == 0])
    with pytest.raises(cm.MetaFitError, match="person"):
        fit_meta(committee, only_car)


# ---------------------------------------------------------------------------
# stacked prediction

def _trained(two_class_store, members=2, epochs=6, seed=11):
    cfg = fast_config(n_members=members, epochs=epochs, seed=seed)
    committee = train_committee(two_class_store, cfg)
    meta = fit_meta(committee, committee.stacking_split)
    return committee, meta


def test_prediction_invariants(two_class_store):
    committee, meta = _trained(two_class_store)
    for i in range(0, len(two_class_store), 7):
        pred = stacked_predict(committee, meta, two_class_store[i])
        assert abs(pred.meta_posteriors.sum() - 1.0) <= 1e-9
        assert pred.certainty == pred.meta_posteriors.max()
        assert pred.label_id == int(pred.meta_posteriors.argmax())
        assert pred.member_scores.shape == (2, 2)


def test_single_class_certainty_is_one():
    store = toy_store(["car"], per_class=30, seed=5)
    cfg = fast_config(epochs=2, seed=1)
    committee = train_committee(store, cfg)
    meta = fit_meta(committee, committee.stacking_split)
    pred = stacked_predict(committee, meta, store[0])
    assert pred.certainty == 1.0


def test_member_permutation_consistency(two_class_store):
    committee, meta = _trained(two_class_store)
    k = committee.num_classes
    swapped = cm.Committee(members=committee.members[::-1],
                           label_set=committee.label_set,
                           histories=committee.histories[::-1],
                           member_splits=committee.member_splits[::-1],
                           stacking_split=committee.stacking_split)
    w = meta.weights
    w_swapped = np.concatenate([w[:, k:2 * k], w[:, :k], w[:, -1:]], axis=1)
    meta_swapped = MetaModel(w_swapped, n_members=2)
    for i in (0, 13, 55):
        a = stacked_predict(committee, meta, two_class_store[i])
        b = stacked_predict(swapped, meta_swapped, two_class_store[i])
        npt.assert_allclose(a.meta_posteriors, b.meta_posteriors, atol=1e-12)


def test_stacked_tracks_best_member(two_class_store):
    committee, meta = _trained(two_class_store, epochs=8)
    test_store = toy_store(["car", "person"], per_class=25, seed=99, city="heldout")
    result = evaluate(committee, meta, test_store)
    assert result.stacked_accuracy >= max(result.member_accuracies) - 0.02
    assert result.stacked_accuracy >= 0.9


def test_evaluate_matches_counting_oracle(two_class_store):
    committee, meta = _trained(two_class_store, epochs=3)
    test_store = toy_store(["car", "person"], per_class=10, seed=55, city="x")
    result = evaluate(committee, meta, test_store)
    correct = sum(stacked_predict(committee, meta, s).label_id == s.label_id
                  for s in test_store)
    assert result.stacked_accuracy == correct / len(test_store)


def test_splits_disjoint_by_provenance(two_class_store):
    committee = train_committee(two_class_store, fast_config(n_members=3, epochs=1))
    parts = committee.member_splits + [committee.stacking_split]
    keys = [p.provenance_keys() for p in parts]
    assert sum(len(k) for k in keys) == len(two_class_store)
    assert set().union(*keys) == two_class_store.provenance_keys()


def test_pipeline_deterministic(two_class_store):
    results = []
    for _ in range(2):
        committee = train_committee(two_class_store, fast_config(epochs=2, seed=21))
        meta = fit_meta(committee, committee.stacking_split)
        results.append((committee, meta))
    c1, m1 = results[0]
    c2, m2 = results[1]
    for n1, n2 in zip(c1.members, c2.members):
        for l1, l2 in zip(n1.layers, n2.layers):
            for name, p in l1.params().items():
                npt.assert_array_equal(p, l2.params()[name])
    npt.assert_array_equal(m1.weights, m2.weights)
    assert c1.histories == c2.histories


# ---------------------------------------------------------------------------
# serialization

def test_meta_model_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    model = MetaModel(rng.normal(size=(3, 2 * 3 + 1)), n_members=2)
    p1, p2 = tmp_path / "a.owlr", tmp_path / "b.owlr"
    model.save(p1)
    loaded = MetaModel.load(p1)
    npt.assert_array_equal(model.weights, loaded.weights)
    assert loaded.n_members == 2
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_meta_model_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.owlr"
    p.write_bytes(b"ZZZZ" + b"\x00" * 24)
    with pytest.raises(nn.FormatError):
        MetaModel.load(p)


def test_bundle_roundtrip(tmp_path, two_class_store):
    committee, meta = _trained(two_class_store, epochs=1)
    cm.save_bundle(tmp_path / "bundle", committee, meta, extra={"seed": 11})
    loaded_committee, loaded_meta, manifest = cm.load_bundle(tmp_path / "bundle")
    assert manifest["seed"] == 11
    assert manifest["classes"] == ["car", "person"]
    npt.assert_array_equal(meta.weights, loaded_meta.weights)
    for n1, n2 in zip(committee.members, loaded_committee.members):
        for l1, l2 in zip(n1.layers, n2.layers):
            for name, p in l1.params().items():
                npt.assert_array_equal(p, l2.params()[name])
