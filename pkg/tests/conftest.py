import numpy as np
import pytest

from gravflow.geodata import CityGraph, FlowNetwork, Region


def make_city(n, seed=0, box_deg=0.5, feature_dim=4, incomes=None):
    """Small hand-rolled city on a jittered grid; no generator machinery."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n)))
    lats, lons = [], []
    for i in range(n):
        r, c = divmod(i, side)
        lats.append(0.05 + box_deg * r / side + 0.001 * rng.random())
        lons.append(0.05 + box_deg * c / side + 0.001 * rng.random())
    from gravflow.geodata import distance_matrix

    dist = distance_matrix(lats, lons)
    pops = rng.lognormal(8.0, 0.4, size=n)
    feats = rng.normal(size=(n, feature_dim))
    regions = []
    for i in range(n):
        order = np.argsort(dist[i])
        nbrs = frozenset(f"r{j:03d}" for j in order[1:5])
        regions.append(
            Region(
                id=f"r{i:03d}",
                lat=lats[i],
                lon=lons[i],
                area_km2=float(1.0 + rng.random()),
                population=float(pops[i]),
                neighbors=nbrs,
                income=None if incomes is None else float(incomes[i]),
            )
        )
    # symmetrize adjacency
    by_id = {r.id: set(r.neighbors) for r in regions}
    for r in regions:
        for nb in r.neighbors:
            by_id[nb].add(r.id)
    regions = [
        Region(r.id, r.lat, r.lon, r.area_km2, r.population, frozenset(by_id[r.id]), r.income)
        for r in regions
    ]
    names = tuple(f"f{k}" for k in range(feature_dim)) + ("log1p_population",)
    feats = np.hstack([feats, np.log1p(pops)[:, None]])
    return CityGraph(regions=tuple(regions), feature_names=names, features=feats, distances=dist)


def make_flows(city, seed=0, density=0.6, scale=2.0):
    rng = np.random.default_rng(seed)
    ids = city.ids
    flows = {}
    for i in range(city.n):
        for j in range(city.n):
            if i != j and rng.random() < density:
                flows[(ids[i], ids[j])] = float(scale * rng.lognormal(0.0, 0.8))
    return FlowNetwork(flows=flows)


@pytest.fixture
def tiny_city():
    return make_city(12, seed=1)


@pytest.fixture
def tiny_flows(tiny_city):
    return make_flows(tiny_city, seed=2)
