"""Flow-reconstruction evaluation: R2, CPC, ranking metrics, error profiles.

Unless stated otherwise everything operates on aligned 1-D arrays of true
and estimated flows over the evaluation edge set. The evaluation universe
is the hidden positive edges (true flow > 0 and not observed); candidate
edges predicted where the truth is zero are tallied separately as false
positives rather than entering the error sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats


def r_squared(f_true, f_est):
    """Coefficient of determination around the mean of the true flows."""
    f_true = np.asarray(f_true, dtype=float)
    f_est = np.asarray(f_est, dtype=float)
    if f_true.size < 2:
        raise ValueError("need at least 2 edges")
    ss_tot = float(np.sum((f_true - f_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("true flows are constant; R^2 undefined")
    ss_res = float(np.sum((f_true - f_est) ** 2))
    return 1.0 - ss_res / ss_tot


def cpc(f_true, f_est):
    """Common part of commuters: 2*sum(min)/(sum+sum), in [0, 1]."""
    f_true = np.asarray(f_true, dtype=float)
    f_est = np.asarray(f_est, dtype=float)
    total = float(f_true.sum() + f_est.sum())
    if total == 0.0:
        raise ValueError("both flow totals are zero; CPC undefined")
    return 2.0 * float(np.minimum(f_true, f_est).sum()) / total


def _top_k(values, k):
    # stable sort: ties resolved by input position, so callers ordering
    # edges by (origin, dest) get the documented id tie-break
    order = np.argsort(-np.asarray(values), kind="stable")
    return order[:k]


def rank_metrics(f_true, f_est, ks):
    """Spearman rho plus Recall@K and nDCG@K for each K in ``ks``.

    Recall@K counts the overlap of the true and predicted top-K sets.
    nDCG@K gains are the raw true flows, discounted by log2(rank+1) and
    normalized by the ideal ordering.
    """
    f_true = np.asarray(f_true, dtype=float)
    f_est = np.asarray(f_est, dtype=float)
    n = f_true.size
    for k in ks:
        if k > n:
            raise ValueError(f"K={k} exceeds edge count {n}")
    rho = float(sstats.spearmanr(f_true, f_est).statistic)
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    ideal = -np.sort(-f_true)
    recall, ndcg = {}, {}
    true_order = _top_k(f_true, n)
    est_order = _top_k(f_est, n)
    for k in ks:
        top_t = set(true_order[:k].tolist())
        top_e = set(est_order[:k].tolist())
        recall[k] = len(top_t & top_e) / k
        dcg = float(np.sum(f_true[est_order[:k]] * disc[:k]))
        idcg = float(np.sum(ideal[:k] * disc[:k]))
        ndcg[k] = dcg / idcg if idcg > 0 else 0.0
    return rho, recall, ndcg


def distance_binned_error(f_true, f_est, distances, bins=10):
    """Median and IQR of |log f_est - log f_true| per equal-count distance bin.

    Only edges with positive truth and estimate carry a log error; others
    are skipped (the caller reports them as misses).
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    f_true = np.asarray(f_true, dtype=float)
    f_est = np.asarray(f_est, dtype=float)
    distances = np.asarray(distances, dtype=float)
    ok = (f_true > 0) & (f_est > 0)
    if not np.any(ok):
        return []
    d = distances[ok]
    err = np.abs(np.log(f_est[ok]) - np.log(f_true[ok]))
    qs = np.quantile(d, np.linspace(0, 1, bins + 1))
    qs[-1] = np.inf
    table = []
    for b in range(bins):
        sel = (d >= qs[b]) & (d < qs[b + 1])
        if not np.any(sel):
            continue
        lo, med, hi = np.percentile(err[sel], [25, 50, 75])
        table.append(
            dict(
                d_lo=float(qs[b]),
                d_hi=float(min(qs[b + 1], d.max())),
                n=int(sel.sum()),
                median=float(med),
                q25=float(lo),
                q75=float(hi),
            )
        )
    return table


def marginal_profiles(flows_true, flows_est):
    """Per-region relative error of total outflow and inflow.

    Input are dicts (origin_id, dest_id) -> flow. When a region's true
    marginal is zero, the absolute error is reported instead and flagged.
    Errors are signed: (estimated - true) / true.
    """
    regions = sorted(
        {r for p in flows_true for r in p} | {r for p in flows_est for r in p}
    )
    out_t, in_t = {r: 0.0 for r in regions}, {r: 0.0 for r in regions}
    out_e, in_e = {r: 0.0 for r in regions}, {r: 0.0 for r in regions}
    for (o, d), v in flows_true.items():
        out_t[o] += v
        in_t[d] += v
    for (o, d), v in flows_est.items():
        out_e[o] += v
        in_e[d] += v
    profile = {}
    for r in regions:
        row = {}
        for key, true, est in (("outflow", out_t[r], out_e[r]), ("inflow", in_t[r], in_e[r])):
            if true > 0:
                row[key] = (est - true) / true
                row[key + "_absolute"] = False
            else:
                row[key] = est - true
                row[key + "_absolute"] = True
        profile[r] = row
    return profile


@dataclass
class EvalReport:
    """Bundle of all evaluation outputs for one prediction run."""

    r2: float
    cpc: float
    spearman: float
    recall_at_k: dict
    ndcg_at_k: dict
    distance_bins: list
    marginals: dict
    n_edges: int
    n_missed: int = 0
    n_false_positive: int = 0
    extras: dict = field(default_factory=dict)

    def to_text(self):
        lines = [
            f"n_edges={self.n_edges}",
            f"n_missed={self.n_missed}",
            f"n_false_positive={self.n_false_positive}",
            f"r2={self.r2:.10g}",
            f"cpc={self.cpc:.10g}",
            f"spearman={self.spearman:.10g}",
        ]
        for k in sorted(self.recall_at_k):
            lines.append(f"recall_at_{k}={self.recall_at_k[k]:.10g}")
        for k in sorted(self.ndcg_at_k):
            lines.append(f"ndcg_at_{k}={self.ndcg_at_k[k]:.10g}")
        for key in sorted(self.extras):
            lines.append(f"{key}={self.extras[key]:.10g}")
        return "\n".join(lines) + "\n"

    def bins_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["d_lo_km", "d_hi_km", "n", "median_abs_log_err", "q25", "q75"])
            for row in self.distance_bins:
                w.writerow(
                    [
                        "%.10g" % row["d_lo"],
                        "%.10g" % row["d_hi"],
                        row["n"],
                        "%.10g" % row["median"],
                        "%.10g" % row["q25"],
                        "%.10g" % row["q75"],
                    ]
                )


def evaluate(truth, predicted, city, ks=(10, 50, 100), hidden_only=True):
    """Score ``predicted`` against ``truth`` over the evaluation universe.

    truth, predicted: FlowNetwork. The universe is truth's positive edges,
    minus truth.observed_edges when ``hidden_only`` (the default, guarding
    against evaluation leakage). Universe edges missing from ``predicted``
    score as zero and are counted in ``n_missed``; predicted edges outside
    the universe with zero truth are counted as false positives.
    """
    universe = sorted(truth.hidden_edges() if hidden_only else set(truth.flows))
    if not universe:
        raise ValueError("evaluation universe is empty")
    f_true = np.array([truth.flows[p] for p in universe])
    f_est = np.array([predicted.flows.get(p, 0.0) for p in universe])
    n_missed = int(np.sum(f_est == 0.0))
    excluded = set(truth.flows) if hidden_only else set(truth.flows)
    n_false_pos = sum(1 for p in predicted.flows if p not in excluded)
    ks = tuple(k for k in ks if k <= len(universe)) or (len(universe),)
    rho, recall, ndcg = rank_metrics(f_true, f_est, ks)
    dists = np.array([city.distances[city.index[p[0]], city.index[p[1]]] for p in universe])
    return EvalReport(
        r2=r_squared(f_true, f_est),
        cpc=cpc(f_true, f_est),
        spearman=rho,
        recall_at_k=recall,
        ndcg_at_k=ndcg,
        distance_bins=distance_binned_error(f_true, f_est, dists),
        marginals=marginal_profiles(
            {p: truth.flows[p] for p in universe},
            {p: predicted.flows[p] for p in universe if p in predicted.flows},
        ),
        n_edges=len(universe),
        n_missed=n_missed,
        n_false_positive=n_false_pos,
    )
