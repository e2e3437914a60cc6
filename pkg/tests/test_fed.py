from dataclasses import replace

import numpy as np
import pytest

from fedklpr import wire
from fedklpr.agg import AggConfig, fedavg_aggregate, sas_aggregate
from fedklpr.fed import (
    ExperimentConfig,
    PruneConfig,
    aggregate,
    checksum,
    client_weights,
    init_clients,
    local_round,
    personalize,
    run_experiment,
)
from fedklpr.nnet import NetConfig, init_params
from fedklpr.params import pruning_ratio
from fedklpr.synthdata import SkewSpec


def tiny(**kw):
    base = dict(
        num_clients=2,
        rounds=2,
        local_epochs=1,
        net=NetConfig(input_dim=8, hidden_dims=[16], embed_dim=8),
        data=SkewSpec(input_dim=8, train_ids=[10, 8], cameras=[2, 3], test_ids=8),
        prune=PruneConfig(acc_threshold=0.0, delta_rd=1.0, delta_ep=1.0),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def rows(records):
    return [
        (r.round, s.client_id, s.rank1, s.mAP, s.pruning_ratio, s.klaw, s.weight, s.upload_bytes, s.download_bytes)
        for r in records
        for s in r.clients
    ] + [r.global_checksum for r in records]


def test_run_is_deterministic():
    cfg = tiny()
    assert rows(run_experiment(cfg)) == rows(run_experiment(cfg))


def test_seed_changes_run():
    assert rows(run_experiment(tiny(seed=1)))[-1] != rows(run_experiment(tiny(seed=2)))[-1]


def test_parallel_matches_sequential():
    cfg = tiny()
    assert rows(run_experiment(cfg, parallel_workers=2)) == rows(run_experiment(cfg, parallel_workers=0))


def test_pruning_progresses_and_is_monotone():
    recs = run_experiment(tiny(rounds=3))
    for k in range(2):
        ratios = [r.clients[k].pruning_ratio for r in recs]
        assert ratios == sorted(ratios) and ratios[-1] > 0


def test_pruning_disabled_keeps_dense_masks():
    recs = run_experiment(tiny(prune=PruneConfig(enabled=False)))
    assert all(s.pruning_ratio == 0.0 for r in recs for s in r.clients)


def test_upload_bytes_shrink_with_pruning():
    dense = run_experiment(tiny(prune=PruneConfig(enabled=False)))
    pruned = run_experiment(tiny())
    assert sum(s.upload_bytes for s in pruned[-1].clients) < sum(s.upload_bytes for s in dense[-1].clients)


def _one_round(cfg):
    g = init_params(cfg.net, np.random.default_rng(0)).astype(np.float32)
    states = init_clients(cfg, g)
    out = [local_round(s, personalize(g, s.mask), 1, cfg) for s in states]
    reports = [wire.decode(wire.encode(o[0]), o[0].dataset_size) for o in out]
    return g, reports, out


def test_single_client_global_is_its_upload():
    cfg = tiny(num_clients=1, data=SkewSpec(input_dim=8, train_ids=[10], cameras=[2], test_ids=8))
    g, reports, out = _one_round(cfg)
    w = client_weights(cfg, reports, [o[3] for o in out])
    assert w.tolist() == [1.0]
    new = aggregate(cfg, reports, w, g)
    keep = reports[0].mask.flat()
    assert np.array_equal(new.flat()[keep], reports[0].params.flat()[keep])
    assert np.array_equal(new.flat()[~keep], g.flat()[~keep])


def test_fedavg_strategy_without_sas_is_fedavg():
    cfg = tiny(agg=AggConfig(strategy="fedavg", sas_enabled=False), prune=PruneConfig(enabled=False))
    g, reports, out = _one_round(cfg)
    w = client_weights(cfg, reports, [o[3] for o in out])
    assert aggregate(cfg, reports, w, g).bitwise_equal(fedavg_aggregate(reports).astype(np.float32))


def test_klpwa_uses_sas():
    cfg = tiny()
    g, reports, out = _one_round(cfg)
    w = client_weights(cfg, reports, [o[3] for o in out])
    assert abs(w.sum() - 1) < 1e-9
    expect = sas_aggregate(reports, w, g).astype(np.float32)
    assert aggregate(cfg, reports, w, g).bitwise_equal(expect)


def test_report_fields_are_consistent():
    _, reports, out = _one_round(tiny())
    for rep, (orig, state, events, _) in zip(reports, out):
        assert rep.pruning_ratio == np.float32(pruning_ratio(state.mask))
        assert rep.klaw_raw >= 0 and "local_test_rank1" in events
        assert rep.dataset_size == state.data.n_train


def test_on_round_callback_and_checksum():
    seen = []
    recs = run_experiment(tiny(), on_round=seen.append)
    assert [r.round for r in seen] == [1, 2] and seen[-1] is recs[-1]
    p = init_params(NetConfig(input_dim=8, hidden_dims=[16], embed_dim=8))
    assert checksum(p) == checksum(p.copy()) and len(checksum(p)) == 64


@pytest.mark.parametrize(
    "kw",
    [dict(num_clients=0), dict(rounds=0), dict(local_epochs=0), dict(seed=-1), dict(seed=2**64)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_input_dim_must_match():
    with pytest.raises(ValueError):
        replace(tiny(), net=NetConfig(input_dim=5))
