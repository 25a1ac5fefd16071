import numpy as np
import pytest

from gravflow.geodata import FlowNetwork
from gravflow.netlink import (
    LinkClassifier,
    LinkDataset,
    build_link_dataset,
    calibrate_threshold,
    load_classifier,
    predict_edges,
    save_classifier,
    train_link_classifier,
)

from conftest import make_city


def _obs(city, positives, regions=None):
    regions = frozenset(regions if regions is not None else {r for p in positives for r in p})
    return FlowNetwork(
        flows={p: 1.0 for p in positives},
        observed_regions=regions,
        observed_edges=frozenset(positives),
    )


def _separable_city_and_obs(n=40, seed=0, cutoff=50.0, box_deg=1.2):
    """True links are exactly the pairs closer than ``cutoff`` km."""
    city = make_city(n, seed=seed, box_deg=box_deg)
    ids = city.ids
    positives = [
        (ids[i], ids[j])
        for i in range(n)
        for j in range(n)
        if i != j and city.distances[i, j] < cutoff
    ]
    return city, _obs(city, positives, regions=ids), positives


# ---------------------------------------------------------------- dataset

def test_build_dataset_counts():
    city = make_city(8, seed=1)
    ids = city.ids[:5]
    positives = [
        (ids[0], ids[1]),
        (ids[0], ids[2]),
        (ids[1], ids[0]),
        (ids[2], ids[3]),
        (ids[3], ids[4]),
        (ids[4], ids[0]),
        (ids[2], ids[1]),
    ]
    ds = build_link_dataset(city, _obs(city, positives, regions=ids))
    assert len(ds.y) == 5 * 4
    assert ds.n_positive == 7


def test_build_dataset_two_regions_both_directions():
    city = make_city(6, seed=2)
    a, b = city.ids[0], city.ids[1]
    ds = build_link_dataset(city, _obs(city, [(a, b), (b, a)]))
    assert len(ds.y) == 2
    assert ds.n_positive == 2


def test_build_dataset_empty_regions_error():
    city = make_city(5, seed=3)
    obs = FlowNetwork(flows={(city.ids[0], city.ids[1]): 1.0})
    with pytest.raises(ValueError):
        build_link_dataset(city, obs)


def test_dataset_feature_layout():
    city = make_city(5, seed=4)
    a, b = city.ids[0], city.ids[1]
    ds = build_link_dataset(city, _obs(city, [(a, b), (b, a)]))
    k = city.features.shape[1]
    assert ds.x.shape[1] == 2 * k + 2
    row = ds.x[list(ds.pairs).index((a, b))]
    d = city.distances[0, 1]
    assert row[-2] == pytest.approx(d)
    assert row[-1] == pytest.approx(np.log1p(d))


# ---------------------------------------------------------------- training

def test_train_separable_accuracy():
    city, obs, positives = _separable_city_and_obs(seed=5)
    ds = build_link_dataset(city, obs)
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(ds.y))
    cut = int(0.8 * len(perm))
    tr = LinkDataset(ds.x[perm[:cut]], ds.y[perm[:cut]],
                     tuple(ds.pairs[i] for i in perm[:cut]), ds.feature_names)
    te = LinkDataset(ds.x[perm[cut:]], ds.y[perm[cut:]],
                     tuple(ds.pairs[i] for i in perm[cut:]), ds.feature_names)
    clf = train_link_classifier(tr, seed=0)
    acc = float(np.mean((clf.predict_proba(te.x) >= 0.5) == te.y))
    assert acc >= 0.95


def test_train_duplicate_rows_same_decision_function():
    city, obs, _ = _separable_city_and_obs(n=20, seed=6)
    ds = build_link_dataset(city, obs)
    dup = LinkDataset(
        np.vstack([ds.x, ds.x]),
        np.concatenate([ds.y, ds.y]),
        ds.pairs + ds.pairs,
        ds.feature_names,
    )
    a = train_link_classifier(ds, seed=1)
    b = train_link_classifier(dup, seed=1)
    pa = a.predict_proba(ds.x)
    pb = b.predict_proba(ds.x)
    # identical up to the ensemble's float32 accumulation noise
    assert np.allclose(pa, pb, atol=1e-5)
    for t in (0.2, 0.5, 0.8):
        assert np.array_equal(pa >= t, pb >= t)


def test_train_single_class_error():
    city = make_city(5, seed=7)
    a, b = city.ids[0], city.ids[1]
    ds = build_link_dataset(city, _obs(city, [(a, b), (b, a)]))
    with pytest.raises(ValueError):
        train_link_classifier(ds)


def test_train_deterministic():
    city, obs, _ = _separable_city_and_obs(n=20, seed=8)
    ds = build_link_dataset(city, obs)
    a = train_link_classifier(ds, seed=3)
    b = train_link_classifier(ds, seed=3)
    assert np.array_equal(a.predict_proba(ds.x), b.predict_proba(ds.x))


def test_probabilities_in_unit_interval():
    city, obs, _ = _separable_city_and_obs(n=20, seed=9)
    ds = build_link_dataset(city, obs)
    clf = train_link_classifier(ds, seed=0)
    p = clf.predict_proba(ds.x)
    assert np.all(p >= 0) and np.all(p <= 1)


# ---------------------------------------------------------------- threshold

class _ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_proba(self, x):
        p = np.full(len(x), self.value)
        return np.stack([1 - p, p], axis=1)


class _PerfectModel:
    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)

    def predict_proba(self, x):
        return np.stack([1 - self.y, self.y], axis=1)


def _tiny_validation(y):
    y = np.asarray(y)
    x = np.random.default_rng(0).normal(size=(len(y), 3))
    pairs = tuple((f"a{i}", f"b{i}") for i in range(len(y)))
    return LinkDataset(x, y, pairs, ("f0", "f1", "f2"))


def test_threshold_perfect_classifier_ties_to_smallest():
    val = _tiny_validation([0, 1, 0, 1, 1])
    clf = LinkClassifier(model=_PerfectModel(val.y), threshold=0.5, feature_names=val.feature_names)
    assert calibrate_threshold(clf, val) == 0.05


def test_threshold_constant_half_prefers_all_positive():
    val = _tiny_validation([0, 1, 0, 1, 1, 0])
    clf = LinkClassifier(model=_ConstantModel(0.5), threshold=0.5, feature_names=val.feature_names)
    assert calibrate_threshold(clf, val) == 0.05


def test_threshold_no_positives_error():
    val = _tiny_validation([0, 0, 0])
    clf = LinkClassifier(model=_ConstantModel(0.5), threshold=0.5, feature_names=val.feature_names)
    with pytest.raises(ValueError):
        calibrate_threshold(clf, val)


# ---------------------------------------------------------------- prediction

def test_predict_edges_threshold_zero_all_pairs():
    city, obs, _ = _separable_city_and_obs(n=12, seed=10)
    ds = build_link_dataset(city, obs)
    clf = train_link_classifier(ds, seed=0)
    clf.threshold = 0.0
    edges = predict_edges(clf, city, obs)
    assert len(edges) == 12 * 11


def test_predict_edges_threshold_one_keeps_observed():
    city, obs, _ = _separable_city_and_obs(n=12, seed=11)
    clf = LinkClassifier(model=_ConstantModel(0.4), threshold=1.0,
                         feature_names=("x",) * (2 * city.features.shape[1] + 2))
    edges = predict_edges(clf, city, obs)
    idx = city.index
    expected = sorted((idx[a], idx[b]) for a, b in obs.observed_edges)
    assert [tuple(e) for e in edges] == expected


def test_predict_edges_contains_observed_and_recall():
    city, obs, positives = _separable_city_and_obs(n=40, seed=12)
    ds = build_link_dataset(city, obs)
    clf = train_link_classifier(ds, seed=0)
    clf.threshold = calibrate_threshold(clf, ds)
    edges = predict_edges(clf, city, obs)
    got = {tuple(e) for e in edges}
    idx = city.index
    obs_pairs = {(idx[a], idx[b]) for a, b in obs.observed_edges}
    assert obs_pairs <= got
    true_pairs = {(idx[a], idx[b]) for a, b in positives}
    recall = len(true_pairs & got) / len(true_pairs)
    assert recall >= 0.9


def test_raising_threshold_never_enlarges():
    city, obs, _ = _separable_city_and_obs(n=15, seed=13)
    ds = build_link_dataset(city, obs)
    clf = train_link_classifier(ds, seed=0)
    sizes = []
    for t in (0.1, 0.5, 0.9):
        clf.threshold = t
        sizes.append(len(predict_edges(clf, city, obs)))
    assert sizes[0] >= sizes[1] >= sizes[2]


# ---------------------------------------------------------------- serialization

def test_classifier_roundtrip(tmp_path):
    city, obs, _ = _separable_city_and_obs(n=15, seed=14)
    ds = build_link_dataset(city, obs)
    clf = train_link_classifier(ds, seed=0)
    clf.threshold = 0.35
    path = tmp_path / "link.pkl"
    save_classifier(clf, path)
    back = load_classifier(path)
    assert back.threshold == 0.35
    assert back.feature_names == clf.feature_names
    assert np.array_equal(back.predict_proba(ds.x), clf.predict_proba(ds.x))


def test_load_classifier_rejects_other_files(tmp_path):
    import pickle

    path = tmp_path / "junk.pkl"
    path.write_bytes(pickle.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_classifier(path)
