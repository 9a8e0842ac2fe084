import numpy as np
import pytest

from cd2pfed.decouple import PartitionPlan, SharedPart, ownership
from cd2pfed.exceptions import ProtocolError
from cd2pfed.server import (aggregate, build_data, client_weights, init_federation, personalized_models,
                            run_experiment, run_round)
from conftest import small_config

PLAN = PartitionPlan((), ())


def _part(*vals):
    return SharedPart(PLAN, tuple(np.array(v, dtype=float) for v in vals))


def test_aggregate_equal_weights():
    out = aggregate([(0, _part([1.0])), (1, _part([3.0]))], {0: 0.5, 1: 0.5})
    assert out.values[0].tolist() == [2.0]


def test_aggregate_unequal_weights():
    out = aggregate([(1, _part([4.0])), (0, _part([0.0]))], client_weights({0: 1, 1: 3}))
    assert out.values[0].tolist() == [3.0]


def test_aggregate_single_client_and_identical_uploads_are_exact():
    v = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(aggregate([(0, _part(v))], {0: 1.0}).values[0], v)
    alphas = client_weights({0: 3, 1: 7, 2: 11})
    out = aggregate([(k, _part(v)) for k in range(3)], alphas)
    assert np.array_equal(out.values[0], v)


def test_aggregate_protocol_errors():
    alphas = {0: 0.5, 1: 0.5}
    with pytest.raises(ProtocolError, match="missing"):
        aggregate([(0, _part([1.0]))], alphas)
    with pytest.raises(ProtocolError, match="duplicate"):
        aggregate([(0, _part([1.0])), (0, _part([1.0]))], alphas)
    with pytest.raises(ProtocolError, match="unknown"):
        aggregate([(0, _part([1.0])), (1, _part([1.0])), (5, _part([1.0]))], alphas)
    with pytest.raises(ProtocolError, match="shape"):
        aggregate([(0, _part([1.0])), (1, _part([1.0, 2.0]))], alphas)
    with pytest.raises(ProtocolError):
        aggregate([], alphas)


def test_shared_entries_are_weighted_mean_and_private_entries_diverge():
    cfg = small_config(rounds=2, toggles={"LI": False, "TA": True, "CD": True})
    data = build_data(cfg)
    strat = cfg.build_strategy()
    arch = cfg.build_architecture(data.shards[0].train.inputs.shape[1:])
    server, clients = init_federation(cfg, data, arch, strat)
    run_round(server, clients, arch, cfg, strat)
    own = ownership(arch, server.plan)
    per_client = [c.params.tensors() for c in clients]
    for i, (g, o) in enumerate(zip(server.global_params.tensors(), own)):
        expected = sum(server.alphas[c.client_id] * t[i] for c, t in zip(clients, per_client))
        np.testing.assert_allclose(g[~o], expected[~o], rtol=0, atol=1e-12)
        if o.any():
            stacked = np.stack([t[i][o] for t in per_client])
            assert (stacked != stacked[0]).any()


def test_fedavg_clients_end_round_with_common_model():
    cfg = small_config(strategy="fedavg", rounds=2)
    res = run_experiment(cfg)
    models = [m.tensors() for m in personalized_models(res.server, res.clients, res.arch)]
    for m in models[1:]:
        assert all(np.array_equal(a, b) for a, b in zip(m, models[0]))


def test_lgfed_and_fedper_private_sets_are_complementary_layers():
    cfg = small_config(strategy="lgfed")
    arch = cfg.build_architecture((5,))
    assert cfg.build_strategy().plan(arch, 1, 3).private_counts == (8, 0)
    assert cfg.replace(strategy="fedper").build_strategy().plan(arch, 1, 3).private_counts == (0, 6)


def test_parallel_matches_serial():
    cfg = small_config()
    a = run_experiment(cfg)
    b = run_experiment(cfg, parallel=4)
    assert [(r.metric, r.value, r.client_id) for r in a.metrics] == [(r.metric, r.value, r.client_id) for r in b.metrics]
    assert a.server.global_params.equals(b.server.global_params)


def test_persisted_metrics_are_byte_identical_across_runs(tmp_path):
    cfg = small_config()
    r1 = run_experiment(cfg, out_dir=tmp_path)
    r2 = run_experiment(cfg, out_dir=tmp_path, parallel=3)
    assert r1.run_dir != r2.run_dir and r2.run_dir.name.endswith(".1")
    assert (r1.run_dir / "metrics.csv").read_bytes() == (r2.run_dir / "metrics.csv").read_bytes()
    for name in ("config.json", "partition.json", "rounds.csv", "checkpoints/global.json", "checkpoints/client_0.bin"):
        assert (r1.run_dir / name).exists()
    header = (r1.run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "round,strategy,metric,value,client_id,seed"


def test_shard_count_mismatch_is_protocol_error():
    cfg = small_config()
    data = build_data(cfg)
    with pytest.raises(ProtocolError):
        run_experiment(cfg.replace(clients=3), data)
