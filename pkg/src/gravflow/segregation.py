"""Spatial income segregation index and the transferability regression.

The index measures how much of a city's income dispersion survives
aggregation into K contiguous clusters. Dispersion is quantified by the
Bregman information of the squared-Euclidean divergence: the
population-weighted mean squared deviation of regional incomes from the
global population-weighted mean. That quantity decomposes exactly into a
between-cluster term (the same functional applied to cluster aggregates)
plus a population-weighted sum of within-cluster terms, for any partition.
The segregation index SI is the between share: 0 when aggregation washes
every disparity out, 1 when clusters are internally income-uniform.

Clusters are produced by greedily merging adjacent units with the most
similar population-weighted mean incomes, so the index probes whether
income differences are spatially organized rather than merely present.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class IncomeField:
    """Per-region income and population over an adjacency graph.

    ``adjacency`` maps region position -> set of neighbor positions and
    must be symmetric without self loops.
    """

    ids: tuple
    income: np.ndarray
    population: np.ndarray
    adjacency: tuple

    def __post_init__(self):
        inc = np.asarray(self.income, dtype=float)
        pop = np.asarray(self.population, dtype=float)
        inc.setflags(write=False)
        pop.setflags(write=False)
        object.__setattr__(self, "income", inc)
        object.__setattr__(self, "population", pop)
        if len(self.ids) != inc.size or inc.size != pop.size:
            raise ValueError("ids, income and population must align")
        if np.any(pop < 0):
            raise ValueError("populations must be >= 0")
        if pop.sum() <= 0:
            raise ValueError("at least one region must have positive population")
        for i, nbrs in enumerate(self.adjacency):
            if i in nbrs:
                raise ValueError(f"self-adjacency at position {i}")
            for j in nbrs:
                if i not in self.adjacency[j]:
                    raise ValueError("adjacency must be symmetric")

    @property
    def n(self):
        return len(self.ids)


def field_from_city(city):
    """Build an IncomeField from a CityGraph whose regions carry income."""
    inc = city.incomes()
    if inc is None:
        raise ValueError("city has regions without income values")
    idx = city.index
    adjacency = tuple(
        frozenset(idx[nb] for nb in r.neighbors) for r in city.regions
    )
    return IncomeField(
        ids=tuple(city.ids),
        income=inc,
        population=city.populations(),
        adjacency=adjacency,
    )


def bregman_information(income, population):
    """Population-weighted mean squared deviation from the weighted mean income."""
    income = np.asarray(income, dtype=float)
    population = np.asarray(population, dtype=float)
    total = population.sum()
    if total <= 0:
        raise ValueError("total population must be > 0")
    w = population / total
    ybar = float(np.dot(w, income))
    return float(np.dot(w, (income - ybar) ** 2))


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of all regions; every cluster is internally connected."""

    clusters: tuple  # tuple of tuples of region positions

    def __post_init__(self):
        seen = sorted(itertools.chain.from_iterable(self.clusters))
        if seen != list(range(len(seen))):
            raise ValueError("clusters must partition 0..n-1")

    @property
    def k(self):
        return len(self.clusters)


def _components(adjacency):
    n = len(adjacency)
    comp = [-1] * n
    c = 0
    for start in range(n):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = c
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if comp[v] < 0:
                    comp[v] = c
                    stack.append(v)
        c += 1
    groups = [[] for _ in range(c)]
    for i, ci in enumerate(comp):
        groups[ci].append(i)
    return groups


def _allocate(sizes, k):
    """Largest-remainder split of k clusters across components, each >= 1."""
    total = sum(sizes)
    raw = [k * s / total for s in sizes]
    alloc = [max(1, min(s, int(r))) for r, s in zip(raw, sizes)]
    while sum(alloc) < k:
        rema = [
            (r - a, i)
            for i, (r, a, s) in enumerate(zip(raw, alloc, sizes))
            if a < s
        ]
        if not rema:
            raise ValueError(f"cannot form {k} connected clusters")
        _, i = max(rema)
        alloc[i] += 1
    while sum(alloc) > k:
        over = [(a - r, i) for i, (r, a) in enumerate(zip(raw, alloc)) if a > 1]
        if not over:
            raise ValueError(f"cannot form {k} connected clusters")
        _, i = max(over)
        alloc[i] -= 1
    return alloc


def _greedy_merge(field, members, k):
    """Merge adjacent clusters with the most similar mean incomes until k remain.

    Ties break toward the lexicographically smallest pair of cluster
    representatives (the minimum region id inside each cluster).
    """
    inc, pop, ids = field.income, field.population, field.ids
    clusters = {c: set(m) for c, m in enumerate(members)}
    pos_to_cluster = {p: c for c, m in clusters.items() for p in m}
    csum = {c: float(np.dot(pop[list(m)], inc[list(m)])) for c, m in clusters.items()}
    cpop = {c: float(pop[list(m)].sum()) for c, m in clusters.items()}
    rep = {c: min(ids[p] for p in m) for c, m in clusters.items()}
    nbrs = {c: set() for c in clusters}
    for p, c in pos_to_cluster.items():
        for q in field.adjacency[p]:
            if q in pos_to_cluster and pos_to_cluster[q] != c:
                nbrs[c].add(pos_to_cluster[q])

    def mean(c):
        return csum[c] / cpop[c] if cpop[c] > 0 else 0.0

    def push(heap, a, b):
        gap = abs(mean(a) - mean(b))
        ra, rb = sorted((rep[a], rep[b]))
        heapq.heappush(heap, (gap, ra, rb, a, b))

    heap = []
    for a in clusters:
        for b in nbrs[a]:
            if a < b:
                push(heap, a, b)
    alive = set(clusters)
    next_id = itertools.count(len(members))
    while len(alive) > k:
        while heap:
            gap, ra, rb, a, b = heapq.heappop(heap)
            if a in alive and b in alive and {ra, rb} == {rep[a], rep[b]}:
                break
        else:
            raise ValueError(f"adjacency exhausted before reaching {k} clusters")
        c = next(next_id)
        clusters[c] = clusters.pop(a) | clusters.pop(b)
        csum[c] = csum.pop(a) + csum.pop(b)
        cpop[c] = cpop.pop(a) + cpop.pop(b)
        rep[c] = min(rep.pop(a), rep.pop(b))
        nbrs[c] = (nbrs.pop(a) | nbrs.pop(b)) - {a, b}
        for d in nbrs[c]:
            nbrs[d].discard(a)
            nbrs[d].discard(b)
            nbrs[d].add(c)
            push(heap, c, d)
        alive.discard(a)
        alive.discard(b)
        alive.add(c)
    return [sorted(clusters[c]) for c in sorted(alive, key=lambda c: rep[c])]


def agglomerate(field, k):
    """Adjacency-constrained greedy agglomeration into k connected clusters.

    Disconnected adjacency graphs are handled per component, with k
    allocated proportionally to component sizes (each component >= 1).
    """
    if not (2 <= k <= field.n):
        raise ValueError(f"k must be within [2, {field.n}], got {k}")
    comps = _components(field.adjacency)
    if k < len(comps):
        raise ValueError(
            f"k={k} below the {len(comps)} connected components; cannot merge across gaps"
        )
    sizes = [len(c) for c in comps]
    alloc = _allocate(sizes, k)
    clusters = []
    for comp, kc in zip(comps, alloc):
        clusters.extend(_greedy_merge(field, [[p] for p in comp], kc))
    return Partition(clusters=tuple(tuple(c) for c in clusters))


def decompose(field, partition):
    """(between, within) Bregman information components for a partition.

    between: the dispersion functional applied to cluster aggregates
    (population-weighted mean income, summed population). within: the
    population-share-weighted sum of each cluster's internal dispersion.
    The two add up to the global value exactly.
    """
    covered = sorted(itertools.chain.from_iterable(partition.clusters))
    if covered != list(range(field.n)):
        raise ValueError("partition does not cover the region set")
    pop, inc = field.population, field.income
    total = pop.sum()
    c_pop, c_mean = [], []
    within = 0.0
    for members in partition.clusters:
        m = list(members)
        p = float(pop[m].sum())
        c_pop.append(p)
        if p > 0:
            mu = float(np.dot(pop[m], inc[m])) / p
            c_mean.append(mu)
            within += (p / total) * bregman_information(inc[m], pop[m])
        else:
            c_mean.append(0.0)
    between = bregman_information(np.array(c_mean), np.array(c_pop))
    return between, within


@dataclass(frozen=True)
class SegregationResult:
    bi_global: float
    bi_inter: float
    bi_intra: float
    si: float
    k: int
    degenerate: bool = False

    def to_text(self):
        return (
            f"k={self.k}\n"
            f"bi_global={self.bi_global:.10g}\n"
            f"bi_inter={self.bi_inter:.10g}\n"
            f"bi_intra={self.bi_intra:.10g}\n"
            f"si={self.si:.10g}\n"
            f"degenerate={str(self.degenerate).lower()}\n"
        )


def default_k(n):
    return max(2, math.ceil(n / 10))


def segregation_index(field, k=None):
    """Agglomerate, decompose, and report SI = between / global.

    A near-zero global dispersion (relative to the squared mean income)
    is reported as SI = 0 with the degenerate flag set.
    """
    if k is None:
        k = default_k(field.n)
    bi_global = bregman_information(field.income, field.population)
    w = field.population / field.population.sum()
    ybar = float(np.dot(w, field.income))
    if bi_global < 1e-12 * max(ybar**2, 1.0):
        part = agglomerate(field, k)
        return SegregationResult(bi_global, 0.0, 0.0, 0.0, part.k, degenerate=True)
    part = agglomerate(field, k)
    inter, intra = decompose(field, part)
    return SegregationResult(bi_global, inter, intra, inter / bi_global, part.k)


def si_curve(field, ks=None):
    """SI as a function of K; exposes sensitivity to the cluster count."""
    if ks is None:
        ks = range(2, max(3, field.n // 2 + 1))
    return [(k, segregation_index(field, k=k).si) for k in ks]


# ---------------------------------------------------------------------------
# transferability regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CityStats:
    """Summary covariates of one city used by the transferability model."""

    si: float
    area_mean: float
    area_cv: float
    feature_density: float


def city_stats(city, k=None):
    """Compute CityStats from a city with incomes; features per km2 averaged."""
    from gravflow.geodata import POP_FEATURE

    field = field_from_city(city)
    si = segregation_index(field, k=k).si
    areas = city.areas()
    cols = [i for i, n in enumerate(city.feature_names) if n != POP_FEATURE]
    dens = float(np.mean(np.abs(city.features[:, cols]).sum(axis=1) / areas))
    return CityStats(
        si=si,
        area_mean=float(areas.mean()),
        area_cv=float(areas.std() / areas.mean()),
        feature_density=dens,
    )


TRANSFER_FEATURES = (
    "si_source",
    "si_target",
    "si_gap",
    "area_mean_source",
    "area_mean_target",
    "area_cv_source",
    "area_cv_target",
    "feature_density_source",
    "feature_density_target",
)


def transfer_design_row(source, target):
    return np.array(
        [
            source.si,
            target.si,
            abs(source.si - target.si),
            source.area_mean,
            target.area_mean,
            source.area_cv,
            target.area_cv,
            source.feature_density,
            target.feature_density,
        ]
    )


@dataclass(frozen=True)
class TransferabilityModel:
    coefficients: dict
    intercept: float
    fit_r2: float
    ranking: tuple  # feature names sorted by |coefficient|, descending
    degenerate: bool = False

    def predict(self, source, target):
        x = transfer_design_row(source, target)
        beta = np.array([self.coefficients[n] for n in TRANSFER_FEATURES])
        return float(self.intercept + x @ beta)


def fit_transferability_model(rows):
    """OLS of observed transfer R^2 on source/target city covariates.

    rows: iterable of (CityStats source, CityStats target, transfer_r2).
    Raises on rank-deficient designs, naming the collinear columns. A
    constant response yields fit_r2 = 0 with the degenerate flag.
    """
    rows = list(rows)
    p = len(TRANSFER_FEATURES)
    if len(rows) < p + 1:
        raise ValueError(f"need at least {p + 1} rows, got {len(rows)}")
    x = np.array([transfer_design_row(s, t) for s, t, _ in rows])
    y = np.array([float(r) for _, _, r in rows])
    design = np.hstack([np.ones((len(rows), 1)), x])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        # name the columns whose removal restores full column rank
        bad = []
        for j in range(1, design.shape[1]):
            reduced = np.delete(design, j, axis=1)
            if np.linalg.matrix_rank(reduced) == rank:
                bad.append(TRANSFER_FEATURES[j - 1])
        raise ValueError(f"design matrix is rank deficient; collinear columns: {bad}")
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return TransferabilityModel(
            coefficients=dict(zip(TRANSFER_FEATURES, beta[1:])),
            intercept=float(beta[0]),
            fit_r2=0.0,
            ranking=tuple(sorted(TRANSFER_FEATURES, key=lambda n: -abs(dict(zip(TRANSFER_FEATURES, beta[1:]))[n]))),
            degenerate=True,
        )
    fit_r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    coefs = dict(zip(TRANSFER_FEATURES, beta[1:]))
    ranking = tuple(sorted(TRANSFER_FEATURES, key=lambda n: -abs(coefs[n])))
    return TransferabilityModel(
        coefficients=coefs, intercept=float(beta[0]), fit_r2=fit_r2, ranking=ranking
    )
