import numpy as np
import pytest

from gravflow.segregation import (
    CityStats,
    IncomeField,
    Partition,
    TRANSFER_FEATURES,
    agglomerate,
    bregman_information,
    decompose,
    default_k,
    fit_transferability_model,
    segregation_index,
    si_curve,
)


def chain_field(incomes, pops=None):
    n = len(incomes)
    pops = [1.0] * n if pops is None else pops
    adj = tuple(
        frozenset(j for j in (i - 1, i + 1) if 0 <= j < n) for i in range(n)
    )
    return IncomeField(
        ids=tuple(f"r{i:03d}" for i in range(n)),
        income=np.array(incomes, dtype=float),
        population=np.array(pops, dtype=float),
        adjacency=adj,
    )


def grid_field(values, pops=None):
    """Row-major grid with 4-adjacency."""
    values = np.asarray(values, dtype=float)
    rows, cols = values.shape
    n = rows * cols
    adj = []
    for i in range(n):
        r, c = divmod(i, cols)
        nbrs = set()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols:
                nbrs.add(rr * cols + cc)
        adj.append(frozenset(nbrs))
    pops = np.ones(n) if pops is None else np.asarray(pops, dtype=float)
    return IncomeField(
        ids=tuple(f"g{i:03d}" for i in range(n)),
        income=values.reshape(-1),
        population=pops,
        adjacency=tuple(adj),
    )


# independent brute-force implementations used as oracles ------------------

def brute_bi(incomes, pops):
    total = sum(pops)
    ybar = sum(p * y for p, y in zip(pops, incomes)) / total
    return sum((p / total) * (y - ybar) ** 2 for p, y in zip(pops, incomes))


def brute_decompose(incomes, pops, clusters):
    total = sum(pops)
    c_inc, c_pop = [], []
    intra = 0.0
    for members in clusters:
        cp = sum(pops[i] for i in members)
        c_pop.append(cp)
        cy = sum(pops[i] * incomes[i] for i in members) / cp if cp > 0 else 0.0
        c_inc.append(cy)
        if cp > 0:
            intra += (cp / total) * brute_bi(
                [incomes[i] for i in members], [pops[i] for i in members]
            )
    return brute_bi(c_inc, c_pop), intra


def random_connected_partition(field, k, rng):
    """Random merge order over adjacent clusters until k remain."""
    clusters = {i: {i} for i in range(field.n)}
    owner = list(range(field.n))
    while len(clusters) > k:
        pairs = set()
        for i in range(field.n):
            for j in field.adjacency[i]:
                a, b = owner[i], owner[j]
                if a != b:
                    pairs.add((min(a, b), max(a, b)))
        a, b = sorted(pairs)[rng.integers(len(pairs))]
        clusters[a] |= clusters.pop(b)
        for p in clusters[a]:
            owner[p] = a
    return Partition(clusters=tuple(tuple(sorted(m)) for m in clusters.values()))


# ---------------------------------------------------------------- BI

def test_bi_uniform_income_zero():
    assert bregman_information([5.0, 5.0, 5.0], [1.0, 2.0, 3.0]) == 0.0


def test_bi_equal_pops_hand_case():
    assert bregman_information([0.0, 2.0], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-12)


def test_bi_weighted_hand_case():
    assert bregman_information([0.0, 4.0], [3.0, 1.0]) == pytest.approx(3.0, abs=1e-12)


def test_bi_zero_population_error():
    with pytest.raises(ValueError):
        bregman_information([1.0, 2.0], [0.0, 0.0])


def test_bi_population_rescaling_invariant():
    rng = np.random.default_rng(0)
    inc, pop = rng.random(20) * 1e5, rng.random(20) + 0.1
    assert bregman_information(inc, 7.3 * pop) == pytest.approx(
        bregman_information(inc, pop), rel=1e-12
    )


def test_bi_income_rescaling_quadratic():
    rng = np.random.default_rng(1)
    inc, pop = rng.random(15), rng.random(15) + 0.1
    assert bregman_information(3.0 * inc, pop) == pytest.approx(
        9.0 * bregman_information(inc, pop), rel=1e-12
    )


# ---------------------------------------------------------------- agglomerate

def test_agglomerate_identity():
    f = chain_field([1.0, 2.0, 3.0, 4.0])
    part = agglomerate(f, 4)
    assert sorted(part.clusters) == [(0,), (1,), (2,), (3,)]


def test_agglomerate_chain_pairs():
    f = chain_field([1.0, 1.0, 9.0, 9.0])
    part = agglomerate(f, 2)
    assert sorted(tuple(sorted(c)) for c in part.clusters) == [(0, 1), (2, 3)]


def test_agglomerate_two_components():
    adj = (frozenset({1}), frozenset({0}), frozenset({3}), frozenset({2}))
    f = IncomeField(
        ids=("a", "b", "c", "d"),
        income=np.array([1.0, 2.0, 3.0, 4.0]),
        population=np.ones(4),
        adjacency=adj,
    )
    part = agglomerate(f, 2)
    assert sorted(tuple(sorted(c)) for c in part.clusters) == [(0, 1), (2, 3)]


def test_agglomerate_k_below_component_count():
    adj = (frozenset(), frozenset(), frozenset())
    f = IncomeField(
        ids=("a", "b", "c"),
        income=np.array([1.0, 2.0, 3.0]),
        population=np.ones(3),
        adjacency=adj,
    )
    with pytest.raises(ValueError):
        agglomerate(f, 2)


def test_agglomerate_k_validation():
    f = chain_field([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        agglomerate(f, 1)
    with pytest.raises(ValueError):
        agglomerate(f, 4)


def test_agglomerate_clusters_connected():
    rng = np.random.default_rng(2)
    f = grid_field(rng.random((5, 5)) * 1e4)
    part = agglomerate(f, 6)
    for members in part.clusters:
        members = set(members)
        start = next(iter(members))
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in f.adjacency[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    stack.append(v)
        assert seen == members


def test_agglomerate_bi_inter_monotone_in_k():
    rng = np.random.default_rng(3)
    f = grid_field(rng.random((4, 4)) * 100)
    inters = []
    for k in range(15, 2, -1):
        part = agglomerate(f, k)
        inter, _ = decompose(f, part)
        inters.append(inter)
    assert all(a >= b - 1e-9 for a, b in zip(inters, inters[1:]))


# ---------------------------------------------------------------- decompose

def test_decompose_singleton_partition():
    f = chain_field([1.0, 5.0, 2.0], pops=[2.0, 1.0, 3.0])
    part = Partition(clusters=((0,), (1,), (2,)))
    inter, intra = decompose(f, part)
    assert intra == pytest.approx(0.0, abs=1e-15)
    assert inter == pytest.approx(bregman_information(f.income, f.population), rel=1e-12)


def test_decompose_one_cluster_partition():
    f = chain_field([1.0, 5.0, 2.0], pops=[2.0, 1.0, 3.0])
    part = Partition(clusters=((0, 1, 2),))
    inter, intra = decompose(f, part)
    assert inter == pytest.approx(0.0, abs=1e-15)
    assert intra == pytest.approx(bregman_information(f.income, f.population), rel=1e-12)


def test_decompose_additivity_random_vs_bruteforce():
    rng = np.random.default_rng(4)
    f = grid_field(rng.random((3, 3)) * 1e4, pops=rng.random(9) + 0.5)
    part = random_connected_partition(f, 4, rng)
    inter, intra = decompose(f, part)
    b_inter, b_intra = brute_decompose(
        f.income.tolist(), f.population.tolist(), part.clusters
    )
    bi = brute_bi(f.income.tolist(), f.population.tolist())
    assert inter == pytest.approx(b_inter, rel=1e-12)
    assert intra == pytest.approx(b_intra, rel=1e-12)
    assert inter + intra == pytest.approx(bi, rel=1e-12)


def test_decompose_partition_must_cover():
    f = chain_field([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        decompose(f, Partition(clusters=((0, 1),)))


# ---------------------------------------------------------------- SI

def test_si_two_blocks_is_one():
    f = chain_field([10.0, 10.0, 50.0, 50.0])
    res = segregation_index(f, k=2)
    assert res.si == pytest.approx(1.0, abs=1e-9)
    assert res.bi_intra == pytest.approx(0.0, abs=1e-12)


def test_si_checkerboard_near_zero():
    vals = np.indices((10, 10)).sum(axis=0) % 2 * 40.0 + 30.0
    f = grid_field(vals)
    res = segregation_index(f, k=default_k(100))
    assert res.si < 0.1


def test_si_uniform_income_degenerate():
    f = chain_field([42.0] * 6)
    res = segregation_index(f)
    assert res.si == 0.0
    assert res.degenerate


def test_si_in_unit_interval_and_additive():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = rng.integers(6, 30)
        side = int(np.ceil(np.sqrt(n)))
        vals = rng.random((side, side)) * 1e5
        f = grid_field(vals, pops=rng.random(side * side) * 10 + 0.1)
        k = int(rng.integers(2, f.n))
        res = segregation_index(f, k=k)
        assert 0.0 <= res.si <= 1.0 + 1e-12
        assert res.bi_global == pytest.approx(res.bi_inter + res.bi_intra, rel=1e-9)


def test_si_invariant_under_rescalings():
    rng = np.random.default_rng(6)
    vals = rng.random((4, 4)) * 1e4
    pops = rng.random(16) + 0.2
    f1 = grid_field(vals, pops=pops)
    f2 = grid_field(vals * 2.5, pops=pops * 11.0)
    assert segregation_index(f1, k=4).si == pytest.approx(
        segregation_index(f2, k=4).si, rel=1e-9
    )


def test_si_curve_rows():
    rng = np.random.default_rng(7)
    f = grid_field(rng.random((4, 4)) * 100)
    curve = si_curve(f)
    assert [k for k, _ in curve] == list(range(2, 9))
    assert all(0.0 <= v <= 1.0 + 1e-12 for _, v in curve)


# ---------------------------------------------------------------- regression

def _stats(rng):
    return CityStats(
        si=float(rng.random()),
        area_mean=float(rng.random() * 10 + 1),
        area_cv=float(rng.random()),
        feature_density=float(rng.random() * 5),
    )


def test_transferability_recovers_known_linear_function():
    rng = np.random.default_rng(8)
    beta = rng.normal(size=9)
    intercept = 0.3
    rows = []
    from gravflow.segregation import transfer_design_row

    for _ in range(40):
        s, t = _stats(rng), _stats(rng)
        y = intercept + transfer_design_row(s, t) @ beta
        rows.append((s, t, y))
    model = fit_transferability_model(rows)
    got = np.array([model.coefficients[n] for n in TRANSFER_FEATURES])
    assert np.allclose(got, beta, atol=1e-8)
    assert model.intercept == pytest.approx(intercept, abs=1e-8)
    assert model.fit_r2 == pytest.approx(1.0, abs=1e-10)


def test_transferability_rank_deficient_named():
    rng = np.random.default_rng(9)
    rows = []
    for _ in range(20):
        s = _stats(rng)
        t = CityStats(si=s.si, area_mean=s.area_mean, area_cv=s.area_cv,
                      feature_density=s.feature_density)
        rows.append((s, t, float(rng.random())))
    with pytest.raises(ValueError, match="collinear"):
        fit_transferability_model(rows)


def test_transferability_constant_response_flagged():
    rng = np.random.default_rng(10)
    rows = [(_stats(rng), _stats(rng), 0.5) for _ in range(25)]
    model = fit_transferability_model(rows)
    assert model.fit_r2 == 0.0
    assert model.degenerate


def test_transferability_needs_enough_rows():
    rng = np.random.default_rng(11)
    rows = [(_stats(rng), _stats(rng), 0.1) for _ in range(5)]
    with pytest.raises(ValueError):
        fit_transferability_model(rows)
