"""Gravity law: classical two-parameter fit and the MLP-parameterized form.

Both produce flow = G * P_i * P_j / D^alpha per edge; the classical variant
holds (G, alpha) constant city-wide while the learned variant predicts them
per OD pair from the concatenated endpoint feature vectors. All flow
arithmetic happens in log space and is exponentiated once at the output,
so populations up to 1e8 and distances across [0.1, 2e4] km stay finite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ALPHA_MAX = 4.0

#: normalized features are expected; larger magnitudes trigger a warning
FEATURE_MAGNITUDE_LIMIT = 1e3


@dataclass(frozen=True)
class GravityParams:
    g: float
    alpha: float

    def __post_init__(self):
        if self.g <= 0:
            raise ValueError("G must be > 0")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")


def log_gravity_flow(params, p_i, p_j, d_ij):
    """log(G * P_i * P_j / D^alpha); -inf where either population is zero."""
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    d_ij = np.asarray(d_ij, dtype=float)
    if np.any(d_ij <= 0):
        raise ValueError("distance must be > 0")
    if np.any(p_i < 0) or np.any(p_j < 0):
        raise ValueError("populations must be >= 0")
    with np.errstate(divide="ignore"):
        return (
            np.log(params.g)
            + np.log(p_i)
            + np.log(p_j)
            - params.alpha * np.log(d_ij)
        )


def gravity_flow(params, p_i, p_j, d_ij):
    """Classical gravity flow, computed in log space."""
    out = np.exp(log_gravity_flow(params, p_i, p_j, d_ij))
    return out if out.shape else float(out)


def fit_classical_gravity(obs, city):
    """Least squares of log F = log G + log P_i + log P_j - alpha log D.

    Fit over the observed edges. Requires at least two observed edges at
    distinct distances, and positive populations on their endpoints.
    """
    edges = sorted(obs.observed_edges)
    if len(edges) < 2:
        raise ValueError("need at least 2 observed edges to fit gravity parameters")
    idx = city.index
    pops = city.populations()
    o = np.array([idx[a] for a, _ in edges])
    d = np.array([idx[b] for _, b in edges])
    dist = city.distances[o, d]
    p_i, p_j = pops[o], pops[d]
    if np.any(p_i <= 0) or np.any(p_j <= 0):
        raise ValueError("observed edges touch zero-population regions; cannot fit in log space")
    logd = np.log(dist)
    if np.ptp(logd) < 1e-12:
        raise ValueError("all observed pairs share one distance; alpha is unidentifiable")
    y = np.log([obs.flows[e] for e in edges]) - np.log(p_i) - np.log(p_j)
    design = np.column_stack([np.ones_like(logd), -logd])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return GravityParams(g=float(np.exp(beta[0])), alpha=float(beta[1]))


def _softplus_inverse(y):
    return float(np.log(np.expm1(y)))


def _sigmoid_inverse(y):
    return float(np.log(y / (1.0 - y)))


class PairMLP(nn.Module):
    """MLP over concatenated endpoint features, with the first layer split
    into per-node halves so it can be evaluated per node and gathered per
    edge (same function, far fewer flops on dense graphs)."""

    def __init__(self, in_dim, hidden, depth=2):
        super().__init__()
        self.first_src = nn.Linear(in_dim, hidden, dtype=torch.float64)
        self.first_dst = nn.Linear(in_dim, hidden, bias=False, dtype=torch.float64)
        self.hidden = nn.ModuleList(
            nn.Linear(hidden, hidden, dtype=torch.float64) for _ in range(depth - 1)
        )
        self.out = nn.Linear(hidden, 1, dtype=torch.float64)

    def forward(self, feats, src, dst):
        x = torch.relu(self.first_src(feats)[src] + self.first_dst(feats)[dst])
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.out(x).squeeze(-1)

    def freeze_to_constant(self, value, inverse_activation):
        """Zero all weights and set the output bias so every edge maps to
        ``value`` after the final activation."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
            self.out.bias.fill_(inverse_activation(value))


class MetaGravityNet(nn.Module):
    """Per-edge (G, alpha) from endpoint features; G > 0 via softplus,
    alpha in [0, ALPHA_MAX] via scaled sigmoid."""

    def __init__(self, feature_dim, hidden=32, alpha_max=ALPHA_MAX):
        super().__init__()
        self.feature_dim = feature_dim
        self.alpha_max = alpha_max
        self.g_net = PairMLP(feature_dim, hidden)
        self.alpha_net = PairMLP(feature_dim, hidden)

    def log_g(self, feats, src, dst):
        # log(softplus(x)) with a floor keeping the log finite for any input
        return torch.log(F.softplus(self.g_net(feats, src, dst)).clamp_min(1e-300))

    def alpha(self, feats, src, dst):
        return self.alpha_max * torch.sigmoid(self.alpha_net(feats, src, dst))

    def log_flows(self, feats, log_pops, log_dist, src, dst):
        """log F per edge for positive populations (log_pops precomputed)."""
        return (
            self.log_g(feats, src, dst)
            + log_pops[src]
            + log_pops[dst]
            - self.alpha(feats, src, dst) * log_dist
        )

    def freeze_to_constants(self, g, alpha):
        """Make every edge produce exactly (g, alpha); used for the
        reduction-to-classical-gravity property."""
        if not (0 < alpha < self.alpha_max):
            raise ValueError(f"alpha must be inside (0, {self.alpha_max}) to invert the sigmoid")
        self.g_net.freeze_to_constant(g, _softplus_inverse)
        self.alpha_net.freeze_to_constant(alpha / self.alpha_max, _sigmoid_inverse)

    def warm_start(self, g, alpha):
        """Zero only the output layers and bias them to (g, alpha), so
        training starts from a constant-parameter gravity law while the
        hidden layers keep their random initialization."""
        a = min(max(alpha, 0.05 * self.alpha_max), 0.95 * self.alpha_max)
        with torch.no_grad():
            self.g_net.out.weight.zero_()
            self.g_net.out.bias.fill_(_softplus_inverse(g) if g > 1e-290 else -700.0)
            self.alpha_net.out.weight.zero_()
            self.alpha_net.out.bias.fill_(_sigmoid_inverse(a / self.alpha_max))


def check_feature_scale(features, strict=False):
    """Warn (or raise when strict) if features look unnormalized."""
    mx = float(np.max(np.abs(features))) if np.size(features) else 0.0
    if mx > FEATURE_MAGNITUDE_LIMIT:
        msg = f"feature magnitudes up to {mx:.3g} suggest unnormalized inputs"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg)


def prepare_tensors(city):
    """(features, log populations, index tensors ready for the nets)."""
    feats = torch.tensor(np.asarray(city.features), dtype=torch.float64)
    pops = torch.tensor(city.populations(), dtype=torch.float64)
    log_pops = torch.log(pops.clamp_min(1e-300))
    return feats, pops, log_pops


def meta_gravity_forward(net, city, edges, strict_scale=False):
    """Per-edge gravity flows as a dict (origin_id, dest_id) -> flow.

    ``edges`` is an iterable of (origin_id, dest_id) pairs or an (E, 2)
    index array. Flows are exactly zero where an endpoint population is
    zero; all other outputs are finite and positive.
    """
    check_feature_scale(city.features, strict=strict_scale)
    idx = city.index
    if isinstance(edges, np.ndarray):
        pairs = [(city.regions[a].id, city.regions[b].id) for a, b in edges]
        src = torch.tensor(edges[:, 0], dtype=torch.int64)
        dst = torch.tensor(edges[:, 1], dtype=torch.int64)
    else:
        pairs = list(edges)
        src = torch.tensor([idx[a] for a, _ in pairs], dtype=torch.int64)
        dst = torch.tensor([idx[b] for _, b in pairs], dtype=torch.int64)
    feats, pops, log_pops = prepare_tensors(city)
    log_dist = torch.log(
        torch.tensor(city.distances, dtype=torch.float64)[src, dst]
    )
    with torch.no_grad():
        logf = net.log_flows(feats, log_pops, log_dist, src, dst)
        flow = torch.exp(logf)
        flow = torch.where((pops[src] > 0) & (pops[dst] > 0), flow, torch.zeros_like(flow))
    return {p: float(v) for p, v in zip(pairs, flow)}
