"""Two-stage training, early stopping, ensembling, and zero-shot transfer.

Stage one fits the learned-gravity component alone on the observed flows;
stage two trains gravity, transformer and head jointly. Both stages
minimize a weighted Huber loss on log-flow residuals. Internal flows of a
fifth of the observed zones are held out; training stops once neither
validation R2 nor CPC has improved for ``patience`` epochs and the
checkpoint with the best validation R2 is restored.

Weighting follows the task: few-shot reconstruction exponentiates raw
flows (softmax over the training edges, temperature tau) so the largest,
most trustworthy observations dominate; transfer training, where data is
plentiful, weights uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from gravflow.geodata import FlowNetwork, NormStats, feature_dropout, normalize_features
from gravflow.graphflow import ArchConfig, GravityGraphModel, build_inputs, init_edge_features
from gravflow.metrics import cpc as cpc_metric
from gravflow.metrics import r_squared
from gravflow.netlink import (
    LinkDataset,
    build_link_dataset,
    calibrate_threshold,
    predict_edges,
    train_link_classifier,
)
from gravflow.physcore import fit_classical_gravity, gravity_flow


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.5          # quadratic-to-linear transition of the Huber loss
    tau: float = 2.0            # temperature of the flow-magnitude weighting
    weighting: str = "softmax"  # "softmax" (few-shot) or "uniform" (transfer)

    def __post_init__(self):
        if self.delta <= 0 or self.tau <= 0:
            raise ValueError("delta and tau must be > 0")
        if self.weighting not in ("softmax", "uniform"):
            raise ValueError("weighting must be 'softmax' or 'uniform'")


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_epochs: int = 200
    max_epochs: int = 3000
    patience: int = 100
    validation_fraction: float = 0.2
    lr: float = 1e-3
    pretrain_weight_decay: float = 3e-3  # guards the gravity nets against noise channels
    joint_weight_decay: float = 0.0     # the joint stage relies on dropout instead
    seed: int = 0

    def __post_init__(self):
        if self.patience <= 0:
            raise ValueError("patience must be > 0")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation fraction must be in (0, 1)")


#: training-time feature dropout used by the pipeline unless overridden;
#: together with weight decay it keeps the nets off the noise channels
DEFAULT_DROPOUT = 0.15


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def huber(r, delta=0.5):
    """0.5 r^2 inside [-delta, delta], linear with matched slope outside."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    r = np.abs(np.asarray(r, dtype=float))
    return np.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta))


def softmax_weights(values, tau):
    """exp(v/tau) normalized to sum 1, computed with max subtraction."""
    v = np.asarray(values, dtype=float) / tau
    v = v - v.max()
    w = np.exp(v)
    return w / w.sum()


def sample_weights(obs, cfg):
    """Per-edge loss weights over the observed edges.

    Uniform mode returns 1 for every edge; softmax mode applies the
    flow-magnitude weighting (weights sum to 1).
    """
    edges = sorted(obs.observed_edges)
    if not edges:
        raise ValueError("no observed edges")
    if cfg.weighting == "uniform":
        return {e: 1.0 for e in edges}
    w = softmax_weights([obs.flows[e] for e in edges], cfg.tau)
    return {e: float(x) for e, x in zip(edges, w)}


def _weighted_huber(pred_flows, target_flows, weights, delta):
    pred = np.asarray(pred_flows, dtype=float)
    tgt = np.asarray(target_flows, dtype=float)
    if np.any(tgt <= 0):
        raise ValueError("targets must be positive flows (observed edges only)")
    if np.any(pred <= 0):
        raise ValueError("predictions must be positive to compare in log space")
    r = np.log(pred) - np.log(tgt)
    return float(np.sum(np.asarray(weights, dtype=float) * huber(r, delta)))


def loss_meta(pred_flows, target_flows, weights, delta=0.5):
    """Stage-one loss: weighted Huber on log residuals of the gravity stage."""
    return _weighted_huber(pred_flows, target_flows, weights, delta)


def loss_joint(pred_flows, target_flows, weights, delta=0.5):
    """Stage-two loss: same functional, applied to the full model output."""
    return _weighted_huber(pred_flows, target_flows, weights, delta)


def split_validation_zones(obs, fraction, seed):
    """(train FlowNetwork, validation edge set, validation zones).

    Validation edges are the observed flows internal to the sampled
    validation zones; everything else stays in training. Training zones
    (the remaining observed zones) are disjoint from validation zones.
    """
    zones = sorted(obs.observed_regions)
    if len(zones) < 2:
        raise ValueError("need at least 2 observed zones to split validation")
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(fraction * len(zones))))
    if n_val >= len(zones):
        n_val = len(zones) - 1
    val_zones = frozenset(
        zones[i] for i in rng.choice(len(zones), size=n_val, replace=False)
    )
    val_edges = frozenset(
        e for e in obs.observed_edges if e[0] in val_zones and e[1] in val_zones
    )
    train_edges = frozenset(obs.observed_edges) - val_edges
    if not val_edges or len(val_edges) < 2:
        raise ValueError(
            "validation split has fewer than 2 edges; enlarge the observation "
            "(higher ratio) or re-seed"
        )
    if not train_edges:
        raise ValueError("no training edges left after the validation split")
    train_obs = FlowNetwork(
        flows=obs.flows,
        observed_regions=frozenset(obs.observed_regions) - val_zones,
        observed_edges=train_edges,
    )
    return train_obs, val_edges, val_zones


def _edge_tensors(city, pairs):
    idx = city.index
    o = torch.tensor([idx[a] for a, _ in pairs], dtype=torch.int64)
    d = torch.tensor([idx[b] for _, b in pairs], dtype=torch.int64)
    return o, d


def _make_optimizer(module, lr, weight_decay):
    """Adam with weight decay on matrices only; biases and the gravity-style
    scalars must keep their fitted magnitudes."""
    decay = [p for p in module.parameters() if p.requires_grad and p.ndim >= 2]
    plain = [p for p in module.parameters() if p.requires_grad and p.ndim < 2]
    return torch.optim.Adam(
        [
            {"params": decay, "weight_decay": weight_decay},
            {"params": plain, "weight_decay": 0.0},
        ],
        lr=lr,
    )


def pretrain_meta(net, obs, city, schedule, loss_cfg=None, dropout_rate=0.0):
    """Fit the gravity-component networks alone on the observed flows.

    ``city`` must carry normalized features. Returns the updated net,
    restored to its best (lowest loss) checkpoint. A non-finite loss
    raises TrainingDiverged carrying the last finite state.
    """
    loss_cfg = loss_cfg or LossConfig()
    if schedule.pretrain_epochs == 0:
        return net
    pairs = sorted(obs.observed_edges)
    if not pairs:
        raise ValueError("no observed edges to pretrain on")
    base_feats = np.asarray(city.features)
    feats = torch.tensor(base_feats, dtype=torch.float64)
    pops = torch.tensor(city.populations(), dtype=torch.float64)
    log_pops = torch.log(pops.clamp_min(1e-300))
    src, dst = _edge_tensors(city, pairs)
    log_dist = torch.log(torch.tensor(city.distances, dtype=torch.float64)[src, dst])
    target = torch.log(torch.tensor([obs.flows[p] for p in pairs], dtype=torch.float64))
    w = sample_weights(
        FlowNetwork(obs.flows, obs.observed_regions, frozenset(pairs)), loss_cfg
    )
    weights = torch.tensor([w[p] for p in pairs], dtype=torch.float64)

    opt = _make_optimizer(net, schedule.lr, schedule.pretrain_weight_decay)

    def weighted_huber(out):
        r = out - target
        return torch.sum(
            weights
            * torch.nn.functional.huber_loss(
                r, torch.zeros_like(r), delta=loss_cfg.delta, reduction="none"
            )
        )

    best = (np.inf, None)
    last_finite = None
    for epoch in range(schedule.pretrain_epochs):
        f_in = feats
        if dropout_rate > 0.0:
            f_in = torch.tensor(
                feature_dropout(base_feats, dropout_rate,
                                seed=np.random.SeedSequence((schedule.seed, 1, epoch))),
                dtype=torch.float64,
            )
        opt.zero_grad()
        loss = weighted_huber(net.log_flows(f_in, log_pops, log_dist, src, dst))
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            if last_finite is not None:
                net.load_state_dict(last_finite)
            raise TrainingDiverged(
                "pretraining loss became non-finite; lower the learning rate",
                last_checkpoint=last_finite,
            )
        last_finite = {k: v.detach().clone() for k, v in net.state_dict().items()}
        if dropout_rate > 0.0:
            # per-epoch losses see different dropout masks; score on the
            # intact features so checkpoints are comparable
            with torch.no_grad():
                loss_val = float(weighted_huber(net.log_flows(feats, log_pops, log_dist, src, dst)))
        if loss_val < best[0]:
            best = (loss_val, last_finite)
        loss.backward()
        opt.step()
    with torch.no_grad():
        final_val = float(weighted_huber(net.log_flows(feats, log_pops, log_dist, src, dst)))
    if np.isfinite(final_val) and final_val < best[0]:
        best = (final_val, {k: v.detach().clone() for k, v in net.state_dict().items()})
    if best[1] is not None:
        net.load_state_dict(best[1])
    return net


@dataclass
class TrainingReport:
    """Per-epoch curves plus the early-stopping bookkeeping."""

    epochs: list = field(default_factory=list)  # (train_loss, val_r2, val_cpc)
    stop_epoch: int = 0
    restored_epoch: int = 0
    best_val_r2: float = float("-inf")
    best_val_cpc: float = float("-inf")
    n_train_edges: int = 0
    n_val_edges: int = 0

    def to_text(self):
        lines = [
            f"n_train_edges={self.n_train_edges}",
            f"n_val_edges={self.n_val_edges}",
            f"stop_epoch={self.stop_epoch}",
            f"restored_epoch={self.restored_epoch}",
            f"best_val_r2={self.best_val_r2:.12g}",
            f"best_val_cpc={self.best_val_cpc:.12g}",
        ]
        for i, (tl, r2, cp) in enumerate(self.epochs, start=1):
            lines.append(f"epoch={i} train_loss={tl:.12g} val_r2={r2:.12g} val_cpc={cp:.12g}")
        return "\n".join(lines) + "\n"


def joint_train(model, obs, city, schedule, loss_cfg=None, dropout_rate=0.0):
    """End-to-end training of gravity + transformer + head.

    ``city`` must carry normalized features and the candidate edge set.
    The validation split, loss weights and early stopping follow the
    schedule and loss configuration; the returned report records every
    epoch. The model is left at the checkpoint with the best validation
    R2.
    """
    loss_cfg = loss_cfg or LossConfig()
    if city.candidate_edges is None:
        raise ValueError("city has no candidate edge set; run link prediction first")
    train_obs, val_edges, _ = split_validation_zones(
        obs, schedule.validation_fraction, schedule.seed
    )
    pairs = [tuple(p) for p in city.candidate_edges]
    ids = city.ids
    row_of = {(ids[a], ids[b]): r for r, (a, b) in enumerate(city.candidate_edges)}
    train_pairs = sorted(train_obs.observed_edges)
    val_pairs = sorted(val_edges)
    missing = [p for p in train_pairs + val_pairs if p not in row_of]
    if missing:
        raise ValueError(f"observed edges missing from the candidate set: {missing[:3]}")

    logp1 = np.log1p(city.populations())
    pop_mean, pop_std = float(logp1.mean()), float(logp1.std())
    model.head.set_pop_stats(pop_mean, pop_std)
    gi = build_inputs(city, city.candidate_edges, pop_mean, pop_std)

    # freeze the edge-feature standardization to the pretrained gravity output
    with torch.no_grad():
        base = torch.exp(model.base_log_flows(gi))
    base_flows = {p: float(v) for p, v in zip(gi.pairs, base)}
    _, transform = init_edge_features(city, base_flows)
    model.set_edge_transform(transform)

    w_map = sample_weights(train_obs, loss_cfg)
    weights = torch.tensor([w_map[p] for p in train_pairs], dtype=torch.float64)
    tgt_train = torch.log(
        torch.tensor([obs.flows[p] for p in train_pairs], dtype=torch.float64)
    )
    f_val = np.array([obs.flows[p] for p in val_pairs])
    tv_rows = torch.tensor(
        [row_of[p] for p in train_pairs] + [row_of[p] for p in val_pairs],
        dtype=torch.int64,
    )
    n_tr = len(train_pairs)
    val_rows = torch.tensor([row_of[p] for p in val_pairs], dtype=torch.int64)

    base_feats = np.asarray(city.features)
    opt = _make_optimizer(model, schedule.lr, schedule.joint_weight_decay)
    report = TrainingReport(n_train_edges=n_tr, n_val_edges=len(val_pairs))
    best_state, stale, last_finite = None, 0, None
    for epoch in range(1, schedule.max_epochs + 1):
        if dropout_rate > 0.0:
            dropped = feature_dropout(
                base_feats, dropout_rate, seed=np.random.SeedSequence((schedule.seed, 2, epoch))
            )
            gi.feats = torch.tensor(dropped, dtype=torch.float64)
        opt.zero_grad()
        out = model(gi, edge_subset=tv_rows)
        r = out[:n_tr] - tgt_train
        loss = torch.sum(
            weights
            * torch.nn.functional.huber_loss(
                r, torch.zeros_like(r), delta=loss_cfg.delta, reduction="none"
            )
        )
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            if last_finite is not None:
                model.load_state_dict(last_finite)
            raise TrainingDiverged(
                f"training loss became non-finite at epoch {epoch}",
                last_checkpoint=last_finite,
            )
        last_finite = {k: v.detach().clone() for k, v in model.state_dict().items()}
        loss.backward()
        opt.step()

        if dropout_rate > 0.0:
            gi.feats = torch.tensor(base_feats, dtype=torch.float64)
            with torch.no_grad():
                val_log = model(gi, edge_subset=val_rows)
        else:
            val_log = out[n_tr:].detach()
        f_hat = np.exp(val_log.numpy())
        val_r2 = r_squared(f_val, f_hat)
        val_cpc = cpc_metric(f_val, f_hat)
        report.epochs.append((loss_val, float(val_r2), float(val_cpc)))

        improved = False
        if val_r2 > report.best_val_r2:
            report.best_val_r2 = float(val_r2)
            report.restored_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            improved = True
        if val_cpc > report.best_val_cpc:
            report.best_val_cpc = float(val_cpc)
            improved = True
        stale = 0 if improved else stale + 1
        report.stop_epoch = epoch
        if stale >= schedule.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, report


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "gravflow-checkpoint-v1"


@dataclass
class ModelBundle:
    """Everything a checkpoint needs for reuse on unseen cities: the model
    weights (with edge/population standardization buffers), the feature
    normalization of the source city, and the link classifier + threshold."""

    model: GravityGraphModel
    arch: ArchConfig
    norm_stats: NormStats
    link_classifier: object
    seed: int = 0

    def _candidate_edges(self, normed_city, obs=None):
        obs = obs or FlowNetwork(flows={})
        return predict_edges(self.link_classifier, normed_city, obs)

    def _log_flows(self, normed_city, edges):
        logp1 = np.log1p(normed_city.populations())
        gi = build_inputs(
            normed_city,
            edges,
            float(self.model.head.pop_mean),
            float(self.model.head.pop_std),
        )
        self.model.eval()
        with torch.no_grad():
            out = self.model(gi)
        return {p: float(v) for p, v in zip(gi.pairs, out)}

    def normalize(self, city):
        normed, _ = normalize_features(city, stats=self.norm_stats)
        return normed

    def predict_flows(self, city, obs=None, edges=None):
        """FlowNetwork over the candidate edge set (or the given edges)."""
        normed = self.normalize(city)
        if edges is None:
            edges = self._candidate_edges(normed, obs)
        log_flows = self._log_flows(normed, edges)
        return FlowNetwork(flows={p: float(np.exp(v)) for p, v in log_flows.items()})

    def export_embeddings(self, city):
        from gravflow.graphflow import export_embeddings

        normed = self.normalize(city)
        edges = self._candidate_edges(normed)
        gi = build_inputs(
            normed, edges, float(self.model.head.pop_mean), float(self.model.head.pop_std)
        )
        emb = export_embeddings(self.model, gi)
        return {rid: emb[i] for i, rid in enumerate(city.ids)}

    def save(self, path):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "arch": self.arch.to_dict(),
            "state_dict": self.model.state_dict(),
            "feature_dim": self.model.feature_dim,
            "feature_names": list(self.norm_stats.feature_names),
            "norm_mean": np.asarray(self.norm_stats.mean),
            "norm_std": np.asarray(self.norm_stats.std),
            "link_classifier": self.link_classifier,
            "seed": self.seed,
        }
        torch.save(payload, path)
        return Path(path)

    @classmethod
    def load(cls, path):
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a gravflow checkpoint")
        arch = ArchConfig(**payload["arch"])
        model = GravityGraphModel(payload["feature_dim"], arch)
        model.load_state_dict(payload["state_dict"])
        stats = NormStats(
            feature_names=tuple(payload["feature_names"]),
            mean=payload["norm_mean"],
            std=payload["norm_std"],
        )
        return cls(
            model=model,
            arch=arch,
            norm_stats=stats,
            link_classifier=payload["link_classifier"],
            seed=payload.get("seed", 0),
        )


def _passthrough_init(model, city):
    """Initialize the joint model so its first forward reproduces the
    pretrained gravity flows exactly.

    The edge projection carries the standardized base flow and distance
    into fixed channels, the residual edge updates start at identity, and
    the head reduces to un-standardizing the base-flow channel. Training
    then refines a working physical solution instead of relearning it.
    """
    logp1 = np.log1p(city.populations())
    gi = build_inputs(city, city.candidate_edges, float(logp1.mean()), float(logp1.std()))
    model.head.set_pop_stats(float(logp1.mean()), float(logp1.std()))
    with torch.no_grad():
        base = torch.exp(model.base_log_flows(gi))
    base_flows = {p: float(v) for p, v in zip(gi.pairs, base)}
    _, transform = init_edge_features(city, base_flows)
    model.set_edge_transform(transform)
    with torch.no_grad():
        model.edge_proj.bias.zero_()
        model.edge_proj.weight[0].copy_(torch.tensor([0.0, 1.0], dtype=torch.float64))
        model.edge_proj.weight[1].copy_(torch.tensor([1.0, 0.0], dtype=torch.float64))
        for layer in model.layers:
            layer.edge_out.weight.zero_()
            layer.edge_out.bias.zero_()
        model.head.out.weight.zero_()
        model.head.out.bias.zero_()
        skip = torch.zeros_like(model.head.edge_skip.weight)
        skip[0, 0] = model.ed_std[1]
        model.head.edge_skip.weight.copy_(skip)
        model.head.edge_skip.bias.fill_(float(model.ed_mean[1]))
        model.head.alpha.zero_()
        model.head.eps.zero_()


def _calibrated_classifier(normed_city, obs, seed):
    ds = build_link_dataset(normed_city, obs, seed=seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds.y))
    cut = max(1, int(round(0.8 * len(perm))))
    tr_idx, va_idx = perm[:cut], perm[cut:]
    tr = LinkDataset(ds.x[tr_idx], ds.y[tr_idx], tuple(ds.pairs[i] for i in tr_idx), ds.feature_names)
    clf = None
    if len(set(tr.y.tolist())) == 2:
        clf = train_link_classifier(tr, seed=seed)
        va = LinkDataset(ds.x[va_idx], ds.y[va_idx], tuple(ds.pairs[i] for i in va_idx), ds.feature_names)
        if va.n_positive > 0 and va.n_positive < len(va.y):
            clf.threshold = calibrate_threshold(clf, va)
            return clf
    # degenerate split: train and calibrate on the full dataset
    clf = train_link_classifier(ds, seed=seed)
    clf.threshold = calibrate_threshold(clf, ds)
    return clf


def train_model(city, obs, schedule, loss_cfg=None, arch=None, dropout_rate=None):
    """Full reconstruction pipeline on one city.

    Normalizes features, builds the candidate edge set from the link
    classifier, warm-starts the gravity component at the classical fit,
    pretrains it, then trains everything jointly. ``dropout_rate`` of None
    selects the pipeline default (DEFAULT_DROPOUT); pass 0.0 to disable.
    Returns (ModelBundle, TrainingReport).
    """
    loss_cfg = loss_cfg or LossConfig()
    arch = arch or ArchConfig()
    if dropout_rate is None:
        dropout_rate = DEFAULT_DROPOUT
    torch.manual_seed(schedule.seed)
    normed, stats = normalize_features(city)
    clf = _calibrated_classifier(normed, obs, schedule.seed)
    edges = predict_edges(clf, normed, obs)
    normed = normed.with_candidate_edges(edges)

    train_obs, _, _ = split_validation_zones(obs, schedule.validation_fraction, schedule.seed)
    model = GravityGraphModel(feature_dim=normed.features.shape[1], cfg=arch)

    params0 = fit_classical_gravity(train_obs, normed)
    model.meta.warm_start(params0.g, params0.alpha)
    pretrain_meta(model.meta, train_obs, normed, schedule, loss_cfg, dropout_rate=dropout_rate)
    _passthrough_init(model, normed)

    model, report = joint_train(model, obs, normed, schedule, loss_cfg, dropout_rate)
    bundle = ModelBundle(
        model=model, arch=arch, norm_stats=stats, link_classifier=clf, seed=schedule.seed
    )
    return bundle, report


def transfer_apply(checkpoint, target_city):
    """Zero-shot application of a trained checkpoint to a new city.

    ``checkpoint`` is a ModelBundle or a path to one. Target features are
    normalized with the source-city statistics; the stored link classifier
    builds the candidate set; no target flow data is involved (the
    operation does not accept any).
    """
    bundle = checkpoint if isinstance(checkpoint, ModelBundle) else ModelBundle.load(checkpoint)
    return bundle.predict_flows(target_city)


def gravity_baseline(obs, city, pairs):
    """Classical-gravity predictions for the given pairs, fit on ``obs``."""
    params = fit_classical_gravity(obs, city)
    idx = city.index
    pops = city.populations()
    flows = {}
    for a, b in pairs:
        f = gravity_flow(params, pops[idx[a]], pops[idx[b]], city.distances[idx[a], idx[b]])
        if f > 0:
            flows[(a, b)] = float(f)
    return FlowNetwork(flows=flows)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(self.members):
            m.save(directory / f"member_{i:02d}.pt")
        return directory

    @classmethod
    def load(cls, directory):
        paths = sorted(Path(directory).glob("member_*.pt"))
        if not paths:
            raise ValueError(f"{directory}: no ensemble members found")
        return cls(members=[ModelBundle.load(p) for p in paths])


def median_log_aggregate(per_member):
    """Median of members' log flows per edge, exponentiated.

    ``per_member`` is a list of dicts (origin, dest) -> log flow; every
    edge present in any member is aggregated over the members that have it.
    """
    edges = sorted(set().union(*per_member))
    out = {}
    for e in edges:
        vals = [m[e] for m in per_member if e in m]
        out[e] = float(np.exp(np.median(vals)))
    return out


def subsample_observation(obs, fraction, seed):
    """Observation restricted to a random zone subset, keeping the edges
    internal to it (the internal-observation structure)."""
    zones = sorted(obs.observed_regions)
    rng = np.random.default_rng(seed)
    k = max(2, int(round(fraction * len(zones))))
    kept = frozenset(zones[i] for i in rng.choice(len(zones), size=min(k, len(zones)), replace=False))
    edges = frozenset(e for e in obs.observed_edges if e[0] in kept and e[1] in kept)
    return FlowNetwork(flows=obs.flows, observed_regions=kept, observed_edges=edges)


def ensemble_train(obs, city, schedule, members, seed=None, loss_cfg=None, arch=None,
                   subsample_fraction=0.8):
    """Train ``members`` models on independently sub-sampled observations.

    Each member re-samples 80% of the observed zones (keeping internal
    edges), re-runs the full pipeline with its own seed, and is aggregated
    at prediction time by the member-median of log flows.
    """
    if members < 1:
        raise ValueError("members must be >= 1")
    seed = schedule.seed if seed is None else seed
    bundles = []
    for m in range(members):
        obs_m = subsample_observation(obs, subsample_fraction, seed=seed * 1000 + m)
        sched_m = replace(schedule, seed=seed + m)
        bundle, _ = train_model(city, obs_m, sched_m, loss_cfg=loss_cfg, arch=arch)
        bundles.append(bundle)
    return Ensemble(members=bundles)


def ensemble_predict(ensemble, city):
    """Median-of-log-flows prediction over the union of member edge sets."""
    per_edge_sets = []
    for m in ensemble.members:
        normed = m.normalize(city)
        per_edge_sets.append({tuple(e) for e in m._candidate_edges(normed)})
    union = np.array(sorted(set().union(*per_edge_sets)), dtype=np.int64)
    logs = []
    for m in ensemble.members:
        normed = m.normalize(city)
        logs.append(m._log_flows(normed, union))
    return FlowNetwork(flows=median_log_aggregate(logs))
