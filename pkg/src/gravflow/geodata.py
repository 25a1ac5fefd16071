"""Regions, features, distances, flows, and observation sampling.

Data model conventions used across the package:

* regions are identified by string ids; arrays are ordered like
  ``CityGraph.regions`` and indexed through ``CityGraph.index``
* distances are great-circle km on a sphere of radius 6371.0 km
* flows are average daily trips stored as positive reals; a missing
  (i, j) entry means zero flow; self flows (i, i) are never modelled
* all containers are treated as immutable after construction so that
  any operation can run concurrently; numpy arrays are marked
  read-only to enforce this
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0

#: neighbor count used when adjacency must be derived from centroids only
KNN_NEIGHBORS = 6


class LoadError(ValueError):
    """Raised when an input file is malformed or referentially broken."""


def haversine(a, b):
    """Great-circle distance in km between two (lat, lon) points in degrees.

    Raises ValueError for coordinates outside [-90, 90] x [-180, 180].
    """
    for lat, lon in (a, b):
        if not (-90.0 <= lat <= 90.0):
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not (-180.0 <= lon <= 180.0):
            raise ValueError(f"longitude {lon} outside [-180, 180]")
    la1, lo1 = math.radians(a[0]), math.radians(a[1])
    la2, lo2 = math.radians(b[0]), math.radians(b[1])
    s = (
        math.sin((la2 - la1) / 2.0) ** 2
        + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def distance_matrix(lats, lons):
    """Pairwise haversine distances (km) for vectors of degrees."""
    la = np.radians(np.asarray(lats, dtype=float))[:, None]
    lo = np.radians(np.asarray(lons, dtype=float))[:, None]
    s = (
        np.sin((la.T - la) / 2.0) ** 2
        + np.cos(la) * np.cos(la.T) * np.sin((lo.T - lo) / 2.0) ** 2
    )
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(s)))
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Region:
    """One spatial unit: centroid, size, population, adjacency, optional income."""

    id: str
    lat: float
    lon: float
    area_km2: float
    population: float
    neighbors: frozenset = frozenset()
    income: float | None = None

    def __post_init__(self):
        if self.area_km2 <= 0:
            raise ValueError(f"region {self.id}: area must be > 0")
        if self.population < 0:
            raise ValueError(f"region {self.id}: population must be >= 0")
        if self.id in self.neighbors:
            raise ValueError(f"region {self.id}: self-adjacency not allowed")


def _freeze(arr):
    a = np.asarray(arr, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CityGraph:
    """Regions plus aligned feature matrix, distance matrix and candidate edges.

    ``features`` is (N, K) ordered like ``feature_names``; the last channel is
    always ``log1p_population`` appended by the loaders so that per-region
    population is part of the model input vector without dominating its scale.
    ``candidate_edges`` is an (E, 2) int array of (origin, destination) row
    indices, or None before link prediction has run.
    """

    regions: tuple
    feature_names: tuple
    features: np.ndarray
    distances: np.ndarray
    candidate_edges: np.ndarray | None = None
    index: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "features", _freeze(self.features))
        object.__setattr__(self, "distances", _freeze(self.distances))
        if self.candidate_edges is not None:
            ce = np.asarray(self.candidate_edges, dtype=np.int64)
            ce.setflags(write=False)
            object.__setattr__(self, "candidate_edges", ce)
        if not self.index:
            object.__setattr__(
                self, "index", {r.id: i for i, r in enumerate(self.regions)}
            )

    @property
    def n(self):
        return len(self.regions)

    @property
    def ids(self):
        return [r.id for r in self.regions]

    def populations(self):
        return np.array([r.population for r in self.regions])

    def areas(self):
        return np.array([r.area_km2 for r in self.regions])

    def incomes(self):
        vals = [r.income for r in self.regions]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=float)

    def with_candidate_edges(self, edges):
        return replace(self, candidate_edges=np.asarray(edges, dtype=np.int64))


@dataclass(frozen=True)
class FlowNetwork:
    """Sparse directed OD flows plus the observation mask.

    ``flows`` maps (origin_id, dest_id) -> trips/day, entries strictly
    positive. ``observed_edges`` is the subset of pairs whose flow value is
    known to the model; ``observed_regions`` is the region subset that
    produced them under the sampling scenario.
    """

    flows: dict
    observed_regions: frozenset = frozenset()
    observed_edges: frozenset = frozenset()

    def __post_init__(self):
        for (o, d), v in self.flows.items():
            if v <= 0:
                raise ValueError(f"flow {o}->{d} must be > 0, got {v}")
            if o == d:
                raise ValueError(f"self flow {o}->{o} not allowed")
        unknown = self.observed_edges - set(self.flows)
        if unknown:
            raise ValueError(f"observed edges without flow entries: {sorted(unknown)[:3]}")

    @property
    def n_edges(self):
        return len(self.flows)

    def hidden_edges(self):
        """Positive pairs not visible to the model (the evaluation universe)."""
        return set(self.flows) - set(self.observed_edges)

    def to_arrays(self, index):
        """(origins, dests, values) as aligned arrays of row indices/floats."""
        pairs = sorted(self.flows)
        o = np.array([index[p[0]] for p in pairs], dtype=np.int64)
        d = np.array([index[p[1]] for p in pairs], dtype=np.int64)
        v = np.array([self.flows[p] for p in pairs])
        return o, d, v


SCENARIOS = ("random_edges", "node_based", "internal")


@dataclass(frozen=True)
class ObservationSpec:
    """How partial flow observations are collected."""

    scenario: str
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean/std for z-scoring; reusable across cities."""

    feature_names: tuple
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _freeze(self.mean))
        object.__setattr__(self, "std", _freeze(self.std))

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.mean.shape[0]:
            raise ValueError(
                f"feature dimension mismatch: stats have {self.mean.shape[0]}, "
                f"data has {values.shape[-1]}"
            )
        safe = np.where(self.std > 0, self.std, 1.0)
        z = (values - self.mean) / safe
        return np.where(self.std > 0, z, 0.0)

    def invert(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.mean.shape[0]:
            raise ValueError("feature dimension mismatch in denormalization")
        return np.where(self.std > 0, z * self.std + self.mean, self.mean)


def normalize_features(city, stats=None):
    """Z-score each feature column; zero-variance columns map to 0.

    When ``stats`` is given (e.g. source-city statistics for zero-shot
    transfer), it is applied as-is; otherwise per-feature mean and
    population std (ddof=0) are computed from ``city``.
    """
    if stats is None:
        if city.n < 2:
            raise ValueError("need at least 2 regions to compute normalization stats")
        stats = NormStats(
            feature_names=tuple(city.feature_names),
            mean=city.features.mean(axis=0),
            std=city.features.std(axis=0),
        )
    else:
        if tuple(stats.feature_names) != tuple(city.feature_names):
            missing = set(stats.feature_names) - set(city.feature_names)
            extra = set(city.feature_names) - set(stats.feature_names)
            if missing or extra:
                raise ValueError(
                    f"feature schema mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
                )
            # same set, different order: align to the stats ordering
            order = [city.feature_names.index(n) for n in stats.feature_names]
            city = replace(
                city,
                feature_names=tuple(stats.feature_names),
                features=city.features[:, order],
            )
    return replace(city, features=stats.apply(city.features)), stats


def feature_dropout(features, rate, seed):
    """Independently zero each feature entry with probability ``rate``.

    Training-time augmentation only; inference always sees intact features.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    features = np.asarray(features, dtype=float)
    if rate == 0.0:
        return features.copy()
    rng = np.random.default_rng(seed)
    mask = rng.random(features.shape) >= rate
    return features * mask


def sample_observation(flows, city, spec):
    """Sample an observation mask over ``flows`` according to ``spec``.

    internal     sample ceil(ratio*N) regions; observe every positive flow
                 with both endpoints inside the sample
    node_based   sample regions as above; observe flows with at least one
                 endpoint inside
    random_edges sample ceil(ratio*|positive pairs|) positive pairs
                 uniformly; observed regions are the touched endpoints

    Deterministic for a fixed ``spec.seed``.
    """
    if not flows.flows:
        raise ValueError("flow network is empty")
    rng = np.random.default_rng(spec.seed)
    ids = city.ids
    if spec.scenario in ("internal", "node_based"):
        k = math.ceil(spec.ratio * len(ids))
        chosen = frozenset(rng.choice(len(ids), size=k, replace=False).tolist())
        chosen_ids = frozenset(ids[i] for i in chosen)
        if spec.scenario == "internal":
            edges = frozenset(
                p for p in flows.flows if p[0] in chosen_ids and p[1] in chosen_ids
            )
            if not edges:
                raise ValueError(
                    "internal sample produced zero observed edges; re-seed or raise the ratio"
                )
        else:
            edges = frozenset(
                p for p in flows.flows if p[0] in chosen_ids or p[1] in chosen_ids
            )
        regions = chosen_ids
    else:  # random_edges
        pairs = sorted(flows.flows)
        k = math.ceil(spec.ratio * len(pairs))
        picked = rng.choice(len(pairs), size=k, replace=False)
        edges = frozenset(pairs[i] for i in picked)
        regions = frozenset(r for p in edges for r in p)
    return FlowNetwork(flows=flows.flows, observed_regions=regions, observed_edges=edges)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

POP_FEATURE = "log1p_population"


def _parse_float(text, path, row, col):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise LoadError(f"{path}: row {row}: non-numeric value {text!r} in column {col!r}")


def _read_regions_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        required = ["id", "lat", "lon", "area_km2", "population"]
        for c in required:
            if c not in cols:
                raise LoadError(f"{path}: missing required column {c!r}")
        has_income = "income" in cols
        for i, rec in enumerate(reader, start=2):
            income = None
            if has_income and rec.get("income") not in (None, ""):
                income = _parse_float(rec["income"], path, i, "income")
            rows.append(
                dict(
                    id=rec["id"],
                    lat=_parse_float(rec["lat"], path, i, "lat"),
                    lon=_parse_float(rec["lon"], path, i, "lon"),
                    area_km2=_parse_float(rec["area_km2"], path, i, "area_km2"),
                    population=_parse_float(rec["population"], path, i, "population"),
                    income=income,
                    geometry=None,
                )
            )
    return rows


def _polygon_centroid(coords):
    # planar centroid of the outer ring; good enough for small regions
    ring = coords[0]
    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    return sum(ys) / len(ys), sum(xs) / len(xs)


def _read_regions_geojson(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise LoadError(f"{path}: expected a GeoJSON FeatureCollection")
    rows = []
    for i, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties", {})
        if "id" not in props:
            raise LoadError(f"{path}: feature {i} missing 'id' property")
        geom = feat.get("geometry")
        lat, lon = props.get("lat"), props.get("lon")
        if (lat is None or lon is None) and geom and geom["type"] == "Polygon":
            lat, lon = _polygon_centroid(geom["coordinates"])
        if lat is None or lon is None:
            raise LoadError(f"{path}: feature {props['id']} has no lat/lon and no polygon")
        if "area_km2" not in props:
            raise LoadError(f"{path}: feature {props['id']} missing 'area_km2'")
        rows.append(
            dict(
                id=str(props["id"]),
                lat=float(lat),
                lon=float(lon),
                area_km2=float(props["area_km2"]),
                population=float(props.get("population", 0.0)),
                income=(float(props["income"]) if props.get("income") is not None else None),
                geometry=geom,
            )
        )
    return rows


def _knn_adjacency(dist, k=KNN_NEIGHBORS):
    """Symmetric k-nearest-centroid adjacency; ties broken by index order."""
    n = dist.shape[0]
    nbrs = [set() for _ in range(n)]
    k = min(k, n - 1)
    for i in range(n):
        order = np.lexsort((np.arange(n), dist[i]))
        picked = [j for j in order if j != i][:k]
        for j in picked:
            nbrs[i].add(j)
            nbrs[j].add(i)
    return nbrs


def _polygon_adjacency(geoms, dist):
    """Adjacency from shared polygon boundaries (fallback to kNN on failure)."""
    try:
        from shapely.geometry import shape
    except ImportError:  # pragma: no cover - shapely is a soft dependency
        return _knn_adjacency(dist)
    polys = [shape(g) for g in geoms]
    n = len(polys)
    nbrs = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            inter = polys[i].boundary.intersection(polys[j].boundary)
            if not inter.is_empty and inter.length > 0:
                nbrs[i].add(j)
                nbrs[j].add(i)
    return nbrs


def _build_city(rows, feature_names, feature_matrix):
    ids = [r["id"] for r in rows]
    dist = distance_matrix([r["lat"] for r in rows], [r["lon"] for r in rows])
    n = len(rows)
    off = dist[~np.eye(n, dtype=bool)] if n > 1 else np.array([1.0])
    if n > 1 and off.min() <= 0:
        i, j = divmod(int(np.argmin(dist + np.eye(n) * 1e9)), n)
        raise LoadError(f"regions {ids[i]} and {ids[j]} share a centroid (zero distance)")
    geoms = [r["geometry"] for r in rows]
    if n > 1 and all(g is not None and g.get("type") == "Polygon" for g in geoms):
        nbrs = _polygon_adjacency(geoms, dist)
    elif n > 1:
        nbrs = _knn_adjacency(dist)
    else:
        nbrs = [set()]
    regions = tuple(
        Region(
            id=r["id"],
            lat=r["lat"],
            lon=r["lon"],
            area_km2=r["area_km2"],
            population=r["population"],
            neighbors=frozenset(ids[j] for j in nbrs[i]),
            income=r["income"],
        )
        for i, r in enumerate(rows)
    )
    pop_col = np.log1p(np.array([r["population"] for r in rows]))[:, None]
    feats = np.hstack([feature_matrix, pop_col])
    return CityGraph(
        regions=regions,
        feature_names=tuple(feature_names) + (POP_FEATURE,),
        features=feats,
        distances=dist,
    )


def load_city(regions_path, features_path, flows_path=None):
    """Load a city (and optionally its flows) from the CSV/GeoJSON formats.

    Returns (CityGraph, FlowNetwork or None). Referential problems raise
    LoadError naming the offending id; malformed numbers raise LoadError
    with the row number.
    """
    regions_path = Path(regions_path)
    if regions_path.suffix.lower() in (".geojson", ".json"):
        rows = _read_regions_geojson(regions_path)
    else:
        rows = _read_regions_csv(regions_path)
    if not rows:
        raise LoadError(f"{regions_path}: no regions")
    ids = [r["id"] for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0]
        raise LoadError(f"{regions_path}: duplicate region id {dup!r}")
    id_set = set(ids)

    feat_rows = {}
    with open(features_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise LoadError(f"{features_path}: first column must be 'id'")
        feature_names = header[1:]
        for i, rec in enumerate(reader, start=2):
            rid = rec[0]
            if rid not in id_set:
                raise LoadError(f"{features_path}: unknown region {rid}")
            if len(rec) != len(header):
                raise LoadError(f"{features_path}: row {i}: expected {len(header)} fields")
            feat_rows[rid] = [
                _parse_float(v, features_path, i, feature_names[k])
                for k, v in enumerate(rec[1:])
            ]
    missing = id_set - set(feat_rows)
    if missing:
        raise LoadError(f"{features_path}: missing features for region {sorted(missing)[0]}")
    matrix = np.array([feat_rows[i] for i in ids])
    if not np.all(np.isfinite(matrix)):
        raise LoadError(f"{features_path}: non-finite feature values")

    city = _build_city(rows, feature_names, matrix)

    network = None
    if flows_path is not None:
        flows = {}
        with open(flows_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for c in ("origin", "destination", "flow"):
                if c not in (reader.fieldnames or []):
                    raise LoadError(f"{flows_path}: missing required column {c!r}")
            for i, rec in enumerate(reader, start=2):
                o, d = rec["origin"], rec["destination"]
                for rid in (o, d):
                    if rid not in id_set:
                        raise LoadError(f"{flows_path}: unknown region {rid}")
                v = _parse_float(rec["flow"], flows_path, i, "flow")
                if o == d:
                    warnings.warn(f"{flows_path}: row {i}: self flow {o}->{o} skipped")
                    continue
                if v <= 0:
                    raise LoadError(f"{flows_path}: row {i}: flow must be > 0, got {v}")
                if (o, d) in flows:
                    raise LoadError(f"{flows_path}: row {i}: duplicate pair {o}->{d}")
                flows[(o, d)] = v
        network = FlowNetwork(flows=flows)
    return city, network


def save_city(city, out_dir, flows=None, float_fmt="%.17g"):
    """Write regions/features[/flows] CSVs in the formats ``load_city`` reads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    has_income = city.incomes() is not None
    with open(out / "regions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["id", "lat", "lon", "area_km2", "population"]
        if has_income:
            header.append("income")
        w.writerow(header)
        for r in city.regions:
            row = [r.id] + [float_fmt % v for v in (r.lat, r.lon, r.area_km2, r.population)]
            if has_income:
                row.append(float_fmt % r.income)
            w.writerow(row)
    # population channel is derived by the loader, so do not write it back
    names = [n for n in city.feature_names if n != POP_FEATURE]
    cols = [city.feature_names.index(n) for n in names]
    with open(out / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + names)
        for i, r in enumerate(city.regions):
            w.writerow([r.id] + [float_fmt % city.features[i, c] for c in cols])
    if flows is not None:
        save_flows(flows, out / "flows.csv", float_fmt=float_fmt)
    return out


def save_flows(flows, path, float_fmt="%.17g"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin", "destination", "flow"])
        for (o, d) in sorted(flows.flows):
            w.writerow([o, d, float_fmt % flows.flows[(o, d)]])
    return Path(path)
