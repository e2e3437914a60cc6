"""Round orchestration: broadcast, personalise, local training, pruning, upload, aggregate."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import wire
from .agg import (
    AggConfig,
    ClientReport,
    cosine_weights,
    dense_aggregate,
    fedavg_weights,
    klaw_raw,
    klaw_weights,
    klpwa_client_weights,
    praw_weights,
    sas_aggregate,
)
from .losses import (
    LossWeights,
    build_bank,
    camera_aware_loss,
    inter_loss,
    intra_loss,
    kll_from_embeddings,
    total_loss,
)
from .nnet import AdamState, NetConfig, adam_step, backward, forward, init_params
from .params import ParamVector, PruneMask, apply_mask, pruning_ratio
from .prune import (
    HALT,
    CrrState,
    Decision,
    PruneControllerState,
    controller_step,
    crr_stage1,
    crr_stage2,
    magnitude_prune,
)
from .pseudo import EmptyEpoch, assign_proxies, dbscan
from .synthdata import TEST, TRAIN, VAL, ClientDataset, SkewSpec, evaluate_retrieval, generate_clients

log = logging.getLogger(__name__)

_INIT_STREAM = 1_000_003
_VAL_STREAM = 1_000_033


@dataclass
class PruneConfig:
    enabled: bool = True
    target_ratio: float = 0.70
    per_event_cap: float = 0.09
    eval_epochs_max: int = 10
    acc_threshold: float = 0.55
    delta_rd: float = 0.01
    delta_ep: float = 0.03
    window: int = 3
    finetune_epochs: int = 1

    def __post_init__(self):
        if not 0 < self.target_ratio <= 1:
            raise ValueError("target_ratio must lie in (0, 1]")
        if not 0 < self.per_event_cap <= 1:
            raise ValueError("per_event_cap must lie in (0, 1]")
        if self.eval_epochs_max < 1 or self.window < 2 or self.finetune_epochs < 0:
            raise ValueError("eval_epochs_max >= 1, window >= 2, finetune_epochs >= 0 required")


@dataclass
class ClusterConfig:
    eps: float = 0.4
    min_pts: int = 3
    mu: float = 0.2
    tau: float = 0.05

    def __post_init__(self):
        if not self.eps > 0 or self.min_pts < 1:
            raise ValueError("eps must be > 0 and min_pts >= 1")


@dataclass
class OptimConfig:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    num_clients: int = 8
    rounds: int = 20
    local_epochs: int = 5
    seed: int = 0
    val_batch_size: int = 32
    parallel_workers: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    agg: AggConfig = field(default_factory=AggConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SkewSpec = field(default_factory=SkewSpec)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.net.input_dim != self.data.input_dim:
            raise ValueError("net.input_dim must equal data.input_dim")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class ClientState:
    data: ClientDataset
    mask: PruneMask
    crr: CrrState
    ctrl: PruneControllerState
    next_target: float | None
    halted: bool
    val_batch: np.ndarray


@dataclass
class ClientRoundStats:
    client_id: int
    rank1: float
    mAP: float
    pruning_ratio: float
    klaw: float
    weight: float
    upload_bytes: int
    download_bytes: int
    events: dict = field(default_factory=dict)


@dataclass
class RoundRecord:
    round: int
    clients: list[ClientRoundStats]
    global_checksum: str


def checksum(p: ParamVector) -> str:
    h = hashlib.sha256()
    for l in p.layers:
        h.update(l.name.encode())
        h.update(np.ascontiguousarray(l.values, dtype="<f4").tobytes())
    return h.hexdigest()


def personalize(global_params: ParamVector, client_mask: PruneMask) -> ParamVector:
    return apply_mask(global_params, client_mask)


def _f32(x: float) -> float:
    return float(np.float32(x))


def _rank1(params, cfg: ExperimentConfig, ds: ClientDataset, part: int):
    idx = ds.indices(part)
    emb = forward(params, cfg.net, ds.x[idx])
    return evaluate_retrieval(emb, ds.identity[idx], ds.camera[idx], ds.is_query[idx])


def gate_accuracy(params, cfg: ExperimentConfig, ds: ClientDataset) -> float:
    """Leave-one-out Rank-1 on the held-out split: every row queries all others."""
    idx = ds.indices(VAL)
    emb = forward(params, cfg.net, ds.x[idx])
    everything = np.ones(len(idx), dtype=bool)
    return evaluate_retrieval(emb, ds.identity[idx], ds.camera[idx], everything, everything)[0]


def _train_epoch(model, mask, adam, ref, cfg: ExperimentConfig, ds: ClientDataset, rng):
    """Re-cluster, rebuild the memory bank and run one pass of minibatch steps."""
    cc, w = cfg.cluster, cfg.loss
    tr = ds.indices(TRAIN)
    x, cams = ds.x[tr], ds.camera[tr]
    emb_all = forward(model, cfg.net, x)
    try:
        lab = assign_proxies(dbscan(emb_all, cc.eps, cc.min_pts), cams)
    except EmptyEpoch:
        return model, adam, {"skipped": True}
    bank = build_bank(emb_all, lab, cc.mu, cc.tau)
    members = np.flatnonzero(lab.proxy >= 0)
    order = rng.permutation(members)
    bs = cfg.optim.batch_size
    for s in range(0, len(order), bs):
        b = order[s:s + bs]
        sub = lab.subset(b)
        emb = forward(model, cfg.net, x[b])
        terms = {
            "intra": intra_loss(bank, emb, sub),
            "inter": inter_loss(bank, emb, sub, w.K_hard),
            "ca": camera_aware_loss(bank, emb, sub, w.K_hard),
        }
        if w.delta_kl > 0:
            terms["kl"] = kll_from_embeddings(emb, forward(ref, cfg.net, x[b]))
        _, g = total_loss(terms, w)
        grad = backward(model, cfg.net, x[b], g)
        model, adam = adam_step(adam, model, grad, mask)
        bank.update_batch(sub.proxy, emb)
    return model, adam, {"skipped": False, "Z": lab.Z, "outliers": int(np.sum(lab.pid < 0))}


def local_round(state: ClientState, personalized: ParamVector, rnd: int, cfg: ExperimentConfig):
    """One client's work for round ``rnd``; returns ``(report, new_state, events, cos_pair)``."""
    ds = state.data
    rng = np.random.default_rng([cfg.seed, ds.client_id, rnd])
    ref = personalized.astype(np.float64)
    model = ref.copy()
    mask = state.mask
    adam = AdamState.for_model(model, lr=cfg.optim.lr, beta1=cfg.optim.beta1,
                               beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    events: dict = {"epochs_skipped": 0}
    for _ in range(cfg.local_epochs):
        model, adam, info = _train_epoch(model, mask, adam, ref, cfg, ds, rng)
        events["epochs_skipped"] += int(info["skipped"])

    crr, ctrl, next_target, halted = state.crr, state.ctrl, state.next_target, state.halted
    if cfg.prune.enabled and not halted:
        acc = gate_accuracy(model, cfg, ds)
        decision, crr = crr_stage1(crr, acc)
        events["val_rank1"] = acc
        events["stage1"] = decision.value
        if decision == Decision.PROCEED:
            saved_model, saved_mask = model.copy(), mask.copy()
            mask = magnitude_prune(model, mask, next_target)
            model = apply_mask(model, mask)
            for _ in range(cfg.prune.finetune_epochs):
                model, adam, info = _train_epoch(model, mask, adam, ref, cfg, ds, rng)
            post = gate_accuracy(model, cfg, ds)
            decision2, crr = crr_stage2(crr, post)
            events.update(target=next_target, post_rank1=post, stage2=decision2.value)
            if decision2 == Decision.ROLLBACK:
                model, mask = saved_model, saved_mask
            nxt, ctrl = controller_step(ctrl, pruning_ratio(mask), decision2)
            if nxt == HALT:
                halted = True
                crr = replace(crr, pruning_halted=True)
                next_target = None
                events["controller"] = HALT
            else:
                next_target = nxt
                events["controller"] = nxt

    upload = apply_mask(model.astype(np.float32), mask)
    events["local_test_rank1"] = _rank1(upload, cfg, ds, TEST)[0]
    ratio = pruning_ratio(mask)
    f = klaw_raw(personalized, upload, cfg.net, state.val_batch)
    report = ClientReport(ds.client_id, rnd, upload, mask, _f32(ratio), _f32(f), ds.n_train)
    cos_pair = (
        forward(personalized, cfg.net, state.val_batch).mean(axis=0),
        forward(upload, cfg.net, state.val_batch).mean(axis=0),
    )
    new_state = replace(state, mask=mask, crr=crr, ctrl=ctrl, next_target=next_target, halted=halted)
    return report, new_state, events, cos_pair


def _local_round_job(args):
    return local_round(*args)


def init_clients(cfg: ExperimentConfig, global_params: ParamVector) -> list[ClientState]:
    data = generate_clients(replace(cfg.data, seed=cfg.seed), cfg.num_clients)
    states = []
    for ds in data:
        rng = np.random.default_rng([cfg.seed, ds.client_id, _VAL_STREAM])
        tr = ds.indices(TRAIN)
        pick = rng.choice(tr, size=min(cfg.val_batch_size, len(tr)), replace=False)
        ctrl = PruneControllerState(
            target_ratio=cfg.prune.target_ratio,
            per_event_cap=cfg.prune.per_event_cap,
            eval_epochs_max=cfg.prune.eval_epochs_max,
        )
        first, ctrl = controller_step(ctrl, 0.0, None)
        crr = CrrState(cfg.prune.acc_threshold, cfg.prune.delta_rd, cfg.prune.delta_ep, cfg.prune.window)
        states.append(ClientState(
            ds, PruneMask.ones_like(global_params), crr, ctrl,
            None if first == HALT else first, first == HALT, ds.x[np.sort(pick)],
        ))
    return states


def client_weights(cfg: ExperimentConfig, reports, cos_pairs) -> np.ndarray:
    strategy = cfg.agg.strategy
    if strategy == "fedavg":
        return fedavg_weights([r.dataset_size for r in reports])
    if strategy == "cosine":
        return cosine_weights([p for p, _ in cos_pairs], [n for _, n in cos_pairs])
    return klpwa_client_weights(
        klaw_weights([r.klaw_raw for r in reports]),
        praw_weights([r.pruning_ratio for r in reports]),
        cfg.agg,
    )


def aggregate(cfg: ExperimentConfig, reports, weights, prev_global: ParamVector) -> ParamVector:
    if cfg.agg.sas_enabled:
        new = sas_aggregate(reports, weights, prev_global, cfg.agg.empty_rule)
    else:
        new = dense_aggregate(reports, weights)
    return new.astype(np.float32)


def run_experiment(cfg: ExperimentConfig, parallel_workers: int | None = None, on_round=None, on_upload=None):
    """Run ``cfg.rounds`` rounds and return one :class:`RoundRecord` per round.

    ``parallel_workers > 0`` trains clients in worker processes; results are
    identical to the sequential path because every client draws from its own
    seeded stream. ``on_upload(round, client_id, message)`` sees every encoded
    upload and ``on_round(record)`` every finished round.
    """
    workers = cfg.parallel_workers if parallel_workers is None else parallel_workers
    global_params = init_params(cfg.net, np.random.default_rng([cfg.seed, _INIT_STREAM])).astype(np.float32)
    states = init_clients(cfg, global_params)
    records = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            jobs = [(s, personalize(global_params, s.mask), rnd, cfg) for s in states]
            results = list(pool.map(_local_round_job, jobs)) if pool else [local_round(*j) for j in jobs]
            download = wire.dense_bytes(global_params)
            received, uploads = [], []
            for report, _, _, _ in results:
                msg = wire.encode(report)
                if on_upload is not None:
                    on_upload(rnd, report.client_id, msg)
                uploads.append(wire.cost_bytes(msg))
                received.append(wire.decode(msg, dataset_size=report.dataset_size))
            states = [r[1] for r in results]
            weights = client_weights(cfg, received, [r[3] for r in results])
            global_params = aggregate(cfg, received, weights, global_params)

            stats = []
            for k, (rep, st, res) in enumerate(zip(received, states, results)):
                events = res[2]
                rank1, mAP, _ = _rank1(personalize(global_params, st.mask), cfg, st.data, TEST)
                stats.append(ClientRoundStats(
                    rep.client_id, rank1, mAP, rep.pruning_ratio, rep.klaw_raw,
                    float(weights[k]), uploads[k], download, events,
                ))
            rec = RoundRecord(rnd, stats, checksum(global_params))
            records.append(rec)
            log.info("round %d: mean rank1 %.4f, mean ratio %.3f", rnd,
                     np.mean([s.rank1 for s in stats]), np.mean([s.pruning_ratio for s in stats]))
            if on_round is not None:
                on_round(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return records
