"""Edge-enhanced graph transformer and the log-space flow head.

Node states start from projected (normalized) region features; edge states
start from the standardized pair [log D_ij, log base_flow_ij], where the
base flow comes from the learned gravity component. Each layer updates all
node states through edge-modulated multi-head attention over incoming
edges, then updates edge states from their endpoints. The head predicts

    log F_ij = MLP(zP_i, zP_j, h_i, h_j, e_ij) - alpha * log D_ij + eps

with learnable scalars alpha and eps, so the power-law distance decay and
multiplicative structure of the gravity law survive by construction.

Everything runs in float64; forward passes are deterministic and pure
given frozen weights, so concurrent inference is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats as sstats
from torch import nn

from gravflow.physcore import MetaGravityNet


@dataclass(frozen=True)
class ArchConfig:
    """Model dimensions. Sized for desk hardware at 250-node graphs."""

    layers: int = 3
    d_node: int = 32
    d_edge: int = 16
    d_qkv: int = 32
    heads: int = 4
    head_hidden: int = 64
    meta_hidden: int = 32

    def __post_init__(self):
        if self.d_qkv % self.heads != 0:
            raise ValueError("d_qkv must be divisible by the head count")
        if self.d_node % self.heads != 0:
            raise ValueError("d_node must be divisible by the head count")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GraphInputs:
    """Tensorized city + candidate edge set, ready for the model.

    ``pairs`` maps edge rows back to (origin_id, dest_id).
    """

    feats: torch.Tensor      # (N, K) normalized features
    log_pops: torch.Tensor   # (N,) natural log of raw populations
    zlogp: torch.Tensor      # (N,) z-scored log1p populations
    log_dist: torch.Tensor   # (E,)
    src: torch.Tensor        # (E,) int64
    dst: torch.Tensor        # (E,) int64
    pairs: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.feats.shape[0]

    @property
    def n_edges(self):
        return self.src.shape[0]


def build_inputs(city, edges, pop_mean, pop_std, features_override=None):
    """Assemble GraphInputs from a normalized city and an (E, 2) edge array.

    ``pop_mean``/``pop_std`` standardize log1p(population) (source-city
    statistics under transfer). ``features_override`` substitutes the
    feature matrix, e.g. after training-time dropout.
    """
    edges = np.asarray(edges, dtype=np.int64)
    feats = features_override if features_override is not None else city.features
    pops = city.populations()
    logp1 = np.log1p(pops)
    zlogp = (logp1 - pop_mean) / (pop_std if pop_std > 0 else 1.0)
    ids = city.ids
    return GraphInputs(
        feats=torch.tensor(np.asarray(feats), dtype=torch.float64),
        log_pops=torch.log(torch.tensor(pops, dtype=torch.float64).clamp_min(1e-300)),
        zlogp=torch.tensor(zlogp, dtype=torch.float64),
        log_dist=torch.log(torch.tensor(city.distances[edges[:, 0], edges[:, 1]], dtype=torch.float64)),
        src=torch.tensor(edges[:, 0]),
        dst=torch.tensor(edges[:, 1]),
        pairs=[(ids[a], ids[b]) for a, b in edges],
    )


@dataclass(frozen=True)
class EdgeTransform:
    """Per-graph standardization for [log D, log base_flow]."""

    d_mean: float
    d_std: float
    f_mean: float
    f_std: float

    def apply(self, log_d, log_f):
        zd = (log_d - self.d_mean) / self.d_std if self.d_std > 0 else log_d * 0.0
        zf = (log_f - self.f_mean) / self.f_std if self.f_std > 0 else log_f * 0.0
        return zd, zf


def init_edge_features(city, base_flows):
    """Standardized [z(log D), z(log base flow)] per edge, plus the transform.

    ``base_flows`` maps (origin_id, dest_id) -> positive gravity estimate.
    The returned transform is stored with the model and reused verbatim at
    inference and transfer time.
    """
    pairs = sorted(base_flows)
    vals = np.array([base_flows[p] for p in pairs], dtype=float)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        bad = pairs[int(np.argmin(vals))]
        raise ValueError(f"base flow must be positive and finite; offending edge {bad}")
    idx = city.index
    d = np.array([city.distances[idx[a], idx[b]] for a, b in pairs])
    log_d, log_f = np.log(d), np.log(vals)
    tr = EdgeTransform(
        d_mean=float(log_d.mean()),
        d_std=float(log_d.std()),
        f_mean=float(log_f.mean()),
        f_std=float(log_f.std()),
    )
    zd, zf = tr.apply(log_d, log_f)
    return {p: np.array([zd[i], zf[i]]) for i, p in enumerate(pairs)}, tr


def _lin(i, o, bias=True):
    return nn.Linear(i, o, bias=bias, dtype=torch.float64)


class TransformerLayer(nn.Module):
    """One node+edge update round (all node updates happen before any edge
    update). Attention logits follow (W_Q h_j) . (W_K h_i + W_KE e_ij),
    scaled by sqrt(d_qkv) and softmax-normalized over the incoming edges of
    each target, independently per head."""

    def __init__(self, d_node, d_edge, d_qkv, heads):
        super().__init__()
        if d_qkv % heads or d_node % heads:
            raise ValueError("d_qkv and d_node must be divisible by the head count")
        self.d_node, self.d_edge, self.d_qkv, self.heads = d_node, d_edge, d_qkv, heads
        self.w_q = _lin(d_node, d_qkv, bias=False)
        self.w_k = _lin(d_node, d_qkv, bias=False)
        self.w_ke = _lin(d_edge, d_qkv, bias=False)
        # per-head message maps, laid out as row blocks of one affine map
        self.msg_node = _lin(d_node, d_node, bias=False)
        self.msg_edge = _lin(d_edge, d_node)
        # concatenated heads projected back to d_node; bias-free so that a
        # zeroed message map yields a pure residual update
        self.w_out = _lin(d_node, d_node, bias=False)
        self.res1 = _lin(d_node, d_node)
        self.res2 = _lin(d_node, d_node)
        self.edge_self = _lin(d_edge, d_edge)
        self.edge_src = _lin(d_node, d_edge, bias=False)
        self.edge_dst = _lin(d_node, d_edge, bias=False)
        self.edge_out = _lin(d_edge, d_edge)

    def attention(self, h, e, src, dst):
        """Per-edge attention weights, shape (E, heads)."""
        n, hds = h.shape[0], self.heads
        q = self.w_q(h)[dst]
        k = self.w_k(h)[src] + self.w_ke(e)
        logits = (q * k).view(-1, hds, self.d_qkv // hds).sum(-1) / (self.d_qkv ** 0.5)
        mx = torch.full((n, hds), -torch.inf, dtype=h.dtype).scatter_reduce(
            0, dst.unsqueeze(1).expand_as(logits), logits.detach(), "amax"
        )
        ex = torch.exp(logits - mx[dst])
        den = torch.zeros(n, hds, dtype=h.dtype).index_add_(0, dst, ex)
        return ex / den[dst]

    def residual(self, h):
        return self.res2(torch.relu(self.res1(h)))

    def forward(self, h, e, src, dst, edge_subset=None):
        """Returns (h', e'). ``edge_subset`` restricts which edge states are
        updated (used on the last layer when only the supervised edges are
        needed); node updates always see the full edge set."""
        lam = self.attention(h, e, src, dst)
        msg = (self.msg_node(h)[src] + self.msg_edge(e)).view(
            -1, self.heads, self.d_node // self.heads
        )
        weighted = (msg * lam.unsqueeze(-1)).reshape(-1, self.d_node)
        agg = torch.zeros_like(h).index_add_(0, dst, weighted)
        h_new = self.residual(h) + self.w_out(agg)
        if edge_subset is None:
            e_in, s, d = e, src, dst
        else:
            e_in, s, d = e[edge_subset], src[edge_subset], dst[edge_subset]
        # residual form: the initial distance/base-flow information survives
        # the stack unless the update learns to overwrite it
        e_new = e_in + self.edge_out(
            torch.relu(self.edge_self(e_in) + self.edge_src(h_new)[s] + self.edge_dst(h_new)[d])
        )
        return h_new, e_new


def attention_weights(layer, h, e, src, dst, target):
    """Attention map of one target node: {source index: (heads,) weights}.

    Isolated targets yield an empty map (residual-only update).
    """
    with torch.no_grad():
        lam = layer.attention(h, e, src, dst)
    sel = (dst == target).nonzero(as_tuple=True)[0]
    return {int(src[i]): lam[i].numpy().copy() for i in sel}


def layer_forward(layer, h, e, src, dst):
    """Functional wrapper over TransformerLayer.forward."""
    return layer(h, e, src, dst)


class LogFlowHead(nn.Module):
    """MLP over (zP_i, zP_j, h_i, h_j, e_ij) plus the gravity-style terms.

    The first layer is factorized into origin / destination / edge parts,
    which is the same affine map as concatenating the inputs. Buffers
    carry the log1p-population standardization so a checkpoint is
    self-contained.
    """

    def __init__(self, d_node, d_edge, hidden):
        super().__init__()
        self.in_src = _lin(d_node + 1, hidden)
        self.in_dst = _lin(d_node + 1, hidden, bias=False)
        self.in_edge = _lin(d_edge, hidden, bias=False)
        self.mid = _lin(hidden, hidden)
        self.out = _lin(hidden, 1)
        # linear skip over the edge state: lets the physically grounded
        # base-flow channel reach the output directly
        self.edge_skip = _lin(d_edge, 1)
        self.alpha = nn.Parameter(torch.tensor(1.0, dtype=torch.float64))
        self.eps = nn.Parameter(torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("pop_mean", torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("pop_std", torch.tensor(1.0, dtype=torch.float64))

    def set_pop_stats(self, mean, std):
        with torch.no_grad():
            self.pop_mean.fill_(mean)
            self.pop_std.fill_(std if std > 0 else 1.0)

    def mlp(self, zlogp, h, e, src, dst):
        node_in = torch.cat([h, zlogp.unsqueeze(1)], dim=1)
        pre = self.in_src(node_in)[src] + self.in_dst(node_in)[dst] + self.in_edge(e)
        return self.out(torch.relu(self.mid(torch.relu(pre)))).squeeze(-1) + self.edge_skip(e).squeeze(-1)

    def forward(self, zlogp, h, e, log_dist, src, dst):
        return self.mlp(zlogp, h, e, src, dst) - self.alpha * log_dist + self.eps

    def predict_one(self, p_i, p_j, h_i, h_j, e_ij, d_ij):
        """log flow for a single OD pair given raw populations."""
        if d_ij <= 0:
            raise ValueError("distance must be > 0")
        z = lambda p: (np.log1p(p) - float(self.pop_mean)) / float(self.pop_std)
        zlogp = torch.tensor([z(p_i), z(p_j)], dtype=torch.float64)
        h = torch.stack([torch.as_tensor(h_i, dtype=torch.float64),
                         torch.as_tensor(h_j, dtype=torch.float64)])
        e = torch.as_tensor(e_ij, dtype=torch.float64).unsqueeze(0)
        src = torch.tensor([0])
        dst = torch.tensor([1])
        logd = torch.tensor([float(np.log(d_ij))], dtype=torch.float64)
        with torch.no_grad():
            return float(self.forward(zlogp, h, e, logd, src, dst)[0])


def log_flow_predict(head, p_i, p_j, h_i, h_j, e_ij, d_ij):
    """Spec-level functional form of the head; returns log flow."""
    return head.predict_one(p_i, p_j, h_i, h_j, e_ij, d_ij)


class GravityGraphModel(nn.Module):
    """Full pipeline: learned gravity base flow -> edge features -> graph
    transformer -> log-flow head. The edge-feature standardization lives in
    buffers so checkpoints transfer without source data."""

    def __init__(self, feature_dim, cfg=None):
        super().__init__()
        cfg = cfg or ArchConfig()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.meta = MetaGravityNet(feature_dim, hidden=cfg.meta_hidden)
        self.node_proj = _lin(feature_dim, cfg.d_node)
        self.edge_proj = _lin(2, cfg.d_edge)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_node, cfg.d_edge, cfg.d_qkv, cfg.heads)
            for _ in range(cfg.layers)
        )
        self.head = LogFlowHead(cfg.d_node, cfg.d_edge, cfg.head_hidden)
        self.register_buffer("ed_mean", torch.zeros(2, dtype=torch.float64))
        self.register_buffer("ed_std", torch.ones(2, dtype=torch.float64))

    def set_edge_transform(self, tr):
        with torch.no_grad():
            self.ed_mean.copy_(torch.tensor([tr.d_mean, tr.f_mean], dtype=torch.float64))
            self.ed_std.copy_(
                torch.tensor(
                    [tr.d_std if tr.d_std > 0 else 1.0, tr.f_std if tr.f_std > 0 else 1.0],
                    dtype=torch.float64,
                )
            )

    def edge_transform(self):
        return EdgeTransform(
            d_mean=float(self.ed_mean[0]),
            d_std=float(self.ed_std[0]),
            f_mean=float(self.ed_mean[1]),
            f_std=float(self.ed_std[1]),
        )

    def base_log_flows(self, gi):
        return self.meta.log_flows(gi.feats, gi.log_pops, gi.log_dist, gi.src, gi.dst)

    def run_layers(self, gi, final_edge_subset=None):
        """(final node states, final edge states). Gradients flow through
        the gravity component via the standardized edge features."""
        log_fg = self.base_log_flows(gi)
        e0 = torch.stack([gi.log_dist, log_fg], dim=1)
        e0 = (e0 - self.ed_mean) / self.ed_std
        h = self.node_proj(gi.feats)
        e = self.edge_proj(e0)
        last = len(self.layers) - 1
        for li, layer in enumerate(self.layers):
            subset = final_edge_subset if li == last else None
            h, e = layer(h, e, gi.src, gi.dst, edge_subset=subset)
        return h, e

    def forward(self, gi, edge_subset=None):
        """Log flows for the requested edge rows (all edges by default)."""
        h, e = self.run_layers(gi, final_edge_subset=edge_subset)
        if edge_subset is None:
            src, dst, logd = gi.src, gi.dst, gi.log_dist
        else:
            src, dst, logd = gi.src[edge_subset], gi.dst[edge_subset], gi.log_dist[edge_subset]
        return self.head(gi.zlogp, h, e, logd, src, dst)


def export_embeddings(model, gi):
    """Final-layer node states for every region, as an (N, d_node) array."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        h, _ = model.run_layers(gi)
    if was_training:
        model.train()
    return h.numpy().copy()


@dataclass(frozen=True)
class EmbeddingGapTable:
    bins: tuple          # dicts with d_lo, d_hi, n, q25, median, q75
    spearman: float      # bin index vs median attribute gap
    degenerate: bool = False


def embedding_distance_analysis(embeddings, attribute, bins=10):
    """Attribute gaps versus embedding distance, bucketed into deciles.

    ``embeddings`` maps region id -> vector; ``attribute`` maps region id
    -> scalar. All ordered pairs of regions that carry an attribute enter
    the table (gaps and distances are symmetric, so deciles match the
    unordered analysis while pair counts follow the N*(N-1) convention).
    A constant attribute yields spearman = 0 with the degenerate flag.
    """
    ids = sorted(set(embeddings) & set(attribute))
    if len(ids) < 10:
        raise ValueError(f"need at least 10 regions with attribute values, got {len(ids)}")
    emb = np.array([np.asarray(embeddings[r], dtype=float) for r in ids])
    attr = np.array([float(attribute[r]) for r in ids])
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    gap = np.abs(attr[:, None] - attr[None, :])
    off = ~np.eye(len(ids), dtype=bool)
    dist, gap = dist[off], gap[off]
    if np.ptp(attr) == 0.0:
        return EmbeddingGapTable(bins=(), spearman=0.0, degenerate=True)
    qs = np.quantile(dist, np.linspace(0, 1, bins + 1))
    qs[-1] = np.inf
    rows, medians = [], []
    for b in range(bins):
        sel = (dist >= qs[b]) & (dist < qs[b + 1])
        if not np.any(sel):
            continue
        q25, med, q75 = np.percentile(gap[sel], [25, 50, 75])
        rows.append(
            dict(
                d_lo=float(qs[b]),
                d_hi=float(min(qs[b + 1], dist.max())),
                n=int(sel.sum()),
                q25=float(q25),
                median=float(med),
                q75=float(q75),
            )
        )
        medians.append(med)
    if len(medians) < 2 or np.ptp(medians) == 0.0:
        rho = 0.0
    else:
        rho = float(sstats.spearmanr(np.arange(len(medians)), medians).statistic)
    return EmbeddingGapTable(bins=tuple(rows), spearman=rho)
