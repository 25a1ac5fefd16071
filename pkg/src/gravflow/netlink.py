"""Binary link-existence prediction building the candidate edge set.

A gradient-boosted tree ensemble scores every ordered region pair on the
concatenated endpoint features plus distance; pairs at or above a
calibrated probability threshold, together with all observed positive
edges, form the candidate set handed to the flow model. Training pairs
come from inside the observed region subset, where presence/absence labels
are known exactly under the internal observation scenario.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import HistGradientBoostingClassifier

#: above this many training pairs, negatives are subsampled to 10x positives
MAX_EXACT_PAIRS = 1_000_000

THRESHOLD_GRID = [round(0.05 * k, 2) for k in range(1, 20)]


@dataclass(frozen=True)
class LinkDataset:
    """Ordered-pair rows: [features_i | features_j | D_ij | log1p(D_ij)]."""

    x: np.ndarray
    y: np.ndarray
    pairs: tuple  # (origin_id, dest_id) per row
    feature_names: tuple

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or len(self.pairs) != self.y.shape[0]:
            raise ValueError("rows, labels and pairs must align")
        if not np.all(np.isin(self.y, (0, 1))):
            raise ValueError("labels must be binary")

    @property
    def n_positive(self):
        return int(self.y.sum())


def pair_feature_names(city):
    base = list(city.feature_names)
    return tuple(
        [f"o_{n}" for n in base] + [f"d_{n}" for n in base] + ["dist_km", "log1p_dist_km"]
    )


def _pair_rows(city, origins, dests):
    f = np.asarray(city.features)
    d = city.distances[origins, dests][:, None]
    return np.hstack([f[origins], f[dests], d, np.log1p(d)])


def build_link_dataset(city, obs, seed=0):
    """All ordered pairs inside the observed regions, labelled by flow presence.

    Positive rows are the observed positive flows; every other ordered pair
    within the observed region set is a negative. Beyond MAX_EXACT_PAIRS
    total pairs, negatives are subsampled to 10x the positives (seeded).
    """
    members = sorted(obs.observed_regions & set(city.index))
    if len(members) < 2:
        raise ValueError("need at least 2 observed regions to build link training data")
    idx = city.index
    rows = np.array(members)
    pos_set = {
        p for p in obs.observed_edges if p[0] in obs.observed_regions and p[1] in obs.observed_regions
    }
    pairs, labels = [], []
    for a in rows:
        for b in rows:
            if a == b:
                continue
            pairs.append((a, b))
            labels.append(1 if (a, b) in pos_set else 0)
    labels = np.array(labels, dtype=np.int64)
    if len(pairs) > MAX_EXACT_PAIRS:
        rng = np.random.default_rng(seed)
        pos_idx = np.flatnonzero(labels == 1)
        neg_idx = np.flatnonzero(labels == 0)
        keep_neg = rng.choice(neg_idx, size=min(len(neg_idx), 10 * len(pos_idx)), replace=False)
        keep = np.sort(np.concatenate([pos_idx, keep_neg]))
        pairs = [pairs[i] for i in keep]
        labels = labels[keep]
    o = np.array([idx[a] for a, _ in pairs], dtype=np.int64)
    d = np.array([idx[b] for _, b in pairs], dtype=np.int64)
    return LinkDataset(
        x=_pair_rows(city, o, d),
        y=labels,
        pairs=tuple(pairs),
        feature_names=pair_feature_names(city),
    )


@dataclass
class LinkClassifier:
    """Fitted tree ensemble plus decision threshold and feature schema."""

    model: HistGradientBoostingClassifier
    threshold: float
    feature_names: tuple

    def predict_proba(self, x):
        return self.model.predict_proba(np.asarray(x))[:, 1]


def train_link_classifier(ds, seed=0, n_estimators=200, max_depth=6, learning_rate=0.1):
    """Fit the ensemble with class-imbalance reweighting (w_pos = #neg/#pos)."""
    n_pos = ds.n_positive
    n_neg = len(ds.y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("link dataset must contain both classes")
    weights = np.where(ds.y == 1, n_neg / n_pos, 1.0)
    model = HistGradientBoostingClassifier(
        max_iter=n_estimators,
        max_depth=max_depth,
        learning_rate=learning_rate,
        early_stopping=False,
        random_state=seed,
    )
    model.fit(ds.x, ds.y, sample_weight=weights)
    return LinkClassifier(model=model, threshold=0.5, feature_names=ds.feature_names)


def calibrate_threshold(clf, validation):
    """F1-maximizing threshold over {0.05, ..., 0.95}; ties pick the smaller
    value (recall-friendly)."""
    if len(validation.y) == 0:
        raise ValueError("validation set is empty")
    if validation.n_positive == 0:
        raise ValueError("validation set has no positive pairs")
    probs = clf.predict_proba(validation.x)
    y = validation.y
    best_t, best_f1 = THRESHOLD_GRID[0], -1.0
    for t in THRESHOLD_GRID:
        pred = probs >= t
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        fn = int(np.sum(~pred & (y == 1)))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
        if f1 > best_f1 + 1e-12:
            best_f1, best_t = f1, t
    return best_t


def predict_edges(clf, city, obs):
    """Candidate ordered pairs: probability >= threshold, union observed.

    Returns an (E, 2) array of region row indices, sorted lexicographically.
    """
    n = city.n
    grid = np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64)
    probs = clf.predict_proba(_pair_rows(city, grid[:, 0], grid[:, 1]))
    keep = probs >= clf.threshold
    idx = city.index
    chosen = {tuple(p) for p in grid[keep]}
    chosen |= {
        (idx[a], idx[b])
        for a, b in obs.observed_edges
        if a in idx and b in idx
    }
    return np.array(sorted(chosen), dtype=np.int64)


def save_classifier(clf, path):
    """Self-describing pickle: schema, threshold and the tree ensemble."""
    payload = {
        "format": "gravflow-link-classifier-v1",
        "feature_names": list(clf.feature_names),
        "threshold": clf.threshold,
        "model": clf.model,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_classifier(path):
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != "gravflow-link-classifier-v1":
        raise ValueError(f"{path}: not a link classifier file")
    return LinkClassifier(
        model=payload["model"],
        threshold=payload["threshold"],
        feature_names=tuple(payload["feature_names"]),
    )
