"""Acceptance criteria.  Each test records one PASS/FAIL line, printed at the end of the session.

Run alone with ``pytest tests/test_acceptance.py -v``.  Trend criteria share
one desk-scale configuration (``TREND``) and a run cache.
"""
import functools
import json
import math
import time

import mpmath
import numpy as np
import pytest

from cd2pfed import FederationConfig
from cd2pfed.cli import main as cli_main
from cd2pfed.client import ramp_beta
from cd2pfed.decouple import merge_from_download, ownership, promote, schedule_p, split_for_upload
from cd2pfed.gradcheck import run_gradcheck
from cd2pfed.nn import forward
from cd2pfed.server import aggregate, build_data, init_federation, run_experiment, run_round
from conftest import ACCEPTANCE_LINES

SEEDS = range(5)

# desk-scale trend setting: 10 Gaussian classes in 5 dims, K=10, two hidden layers of 32
TREND = {
    "clients": 10, "rounds": 20, "local_epochs": 1, "batch_size": 32, "lr": 0.05,
    "model": {"hidden": [32, 32]},
    "data": {"num_classes": 10, "dims": 5, "per_class": 150, "spread": 1.2, "modes": 1},
}


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def degeneracy_config(**over):
    d = {"clients": 4, "rounds": 10, "batch_size": 16, "lr": 0.05, "model": {"hidden": [12, 8]},
         "data": {"num_classes": 6, "dims": 5, "per_class": 40, "heterogeneity": {"kind": "label_skew", "s": 2}},
         "toggles": {"LI": False, "TA": False, "CD": False}}
    d.update(over)
    return FederationConfig.from_dict(d)


def trajectories(cfg):
    data = build_data(cfg)
    arch = cfg.build_architecture(data.shards[0].train.inputs.shape[1:])
    strategy = cfg.build_strategy()
    server, clients = init_federation(cfg, data, arch, strategy)
    globals_, locals_ = [], []
    for _ in range(cfg.rounds):
        run_round(server, clients, arch, cfg, strategy)
        globals_.append(server.global_params.copy())
        locals_.append([c.params.copy() for c in clients])
    return globals_, locals_


def test_1_fedavg_degeneracy():
    t = time.perf_counter()
    a, _ = trajectories(degeneracy_config(strategy="cd2pfed", p_max=0.0))
    b, _ = trajectories(degeneracy_config(strategy="fedavg"))
    same = all(x.equals(y) for x, y in zip(a, b))
    dt = time.perf_counter() - t
    assert record(1, same and dt < 30, f"w0 bitwise identical over 10 rounds, K=4: {same} ({dt:.1f}s)")


def test_2_local_degeneracy():
    t = time.perf_counter()
    _, a = trajectories(degeneracy_config(strategy="cd2pfed", p_max=1.0))
    _, b = trajectories(degeneracy_config(strategy="local"))
    same = all(x.equals(y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))
    dt = time.perf_counter() - t
    assert record(2, same and dt < 30, f"per-client weights bitwise identical over 10 rounds: {same} ({dt:.1f}s)")


def test_3_gradient_oracle():
    t = time.perf_counter()
    cases = run_gradcheck(seed=0, cases=20, max_layers=4)
    worst = max(c.max_rel_error for c in cases)
    with_cd = all(0 < c < n for case in cases
                  for c, n in zip(case.private_counts, case.arch.widths))
    dt = time.perf_counter() - t
    ok = len(cases) >= 20 and worst < 1e-4 and with_cd and dt < 60
    assert record(3, ok, f"max relative error {worst:.2e} over {len(cases)} nets, CE + lambda*CD ({dt:.1f}s)")


def test_4_aggregation_and_ownership():
    cfg = degeneracy_config(strategy="cd2pfed", rounds=3, toggles={"LI": True, "TA": True, "CD": True})
    data = build_data(cfg)
    arch = cfg.build_architecture(data.shards[0].train.inputs.shape[1:])
    strategy = cfg.build_strategy()
    server, clients = init_federation(cfg, data, arch, strategy)
    worst_mean, private_ok, audit_ok = 0.0, True, True
    for _ in range(cfg.rounds):
        run_round(server, clients, arch, cfg, strategy)
        own = ownership(arch, server.plan)
        uploads = [(c.client_id, split_for_upload(c.params, c.plan, arch)) for c in clients]
        uploaded = np.concatenate([v for _, up in uploads for v in up.values])
        expected = aggregate(uploads, server.alphas)
        for i, o in enumerate(own):
            # shared: alpha-weighted mean of the uploads
            mean = sum(server.alphas[cid] * up.values[i] for cid, up in uploads)
            worst_mean = max(worst_mean, float(np.max(np.abs(server.global_params.tensors()[i][~o] - mean),
                                                      initial=0.0)))
            assert np.array_equal(server.global_params.tensors()[i][~o], expected.values[i])
            if o.any():
                stacked = np.stack([c.params.tensors()[i][o] for c in clients])
                private_ok &= bool(np.all((stacked != stacked[0]).any(axis=0)))
                # payload audit: no private value of any client occurs in any upload
                audit_ok &= not np.isin(stacked, uploaded).any()
    ok = worst_mean < 1e-12 and private_ok and audit_ok
    assert record(4, ok, f"shared max |w - weighted mean| {worst_mean:.1e}; private entries differ: {private_ok}; "
                         f"payload audit clean: {audit_ok}")


def test_5_promotion_invariance():
    cfg = degeneracy_config(strategy="cd2pfed", rounds=10, toggles={"LI": True, "TA": True, "CD": True})
    data = build_data(cfg)
    arch = cfg.build_architecture(data.shards[0].train.inputs.shape[1:])
    strategy = cfg.build_strategy()
    server, clients = init_federation(cfg, data, arch, strategy)
    probes = np.random.default_rng(123).normal(size=(10,) + arch.input_shape)
    promotions, identical = 0, True
    for t in range(1, cfg.rounds + 1):
        c = clients[0]
        new_plan = strategy.plan(arch, t, cfg.rounds)
        if new_plan != c.plan:
            download = split_for_upload(server.global_params, server.plan, arch)
            before = merge_from_download(c.params, c.plan, download, arch)
            after = promote(before, c.plan, new_plan)
            identical &= np.array_equal(forward(before, arch, probes)[0], forward(after, arch, probes)[0])
            promotions += 1
        run_round(server, clients, arch, cfg, strategy)
    ok = identical and promotions > 0
    assert record(5, ok, f"{promotions} promotions, full logits bitwise unchanged on 10 probes: {identical}")


@functools.lru_cache(maxsize=None)
def trend_run(strategy, s, seed, toggles=(True, True, True)):
    d = json.loads(json.dumps(TREND))
    d.update(strategy=strategy, seed=seed, eval_every=d["rounds"],
             toggles=dict(zip(("LI", "TA", "CD"), toggles)))
    d["data"].update(seed=1000 + seed, heterogeneity={"kind": "label_skew", "s": s})
    res = run_experiment(FederationConfig.from_dict(d))
    return res.final("local"), res.final("new")


def mean_acc(strategy, s, toggles=(True, True, True)):
    vals = np.array([trend_run(strategy, s, seed, toggles) for seed in SEEDS])
    return vals.mean(axis=0)


@pytest.mark.slow
def test_6_heterogeneity_trend():
    t = time.perf_counter()
    gaps = [mean_acc("cd2pfed", s)[0] - mean_acc("fedavg", s)[0] for s in (2, 5, 10)]
    dt = time.perf_counter() - t
    ok = gaps[0] >= 10 and gaps[0] > gaps[1] > gaps[2] and gaps[2] <= 3 and dt < 300
    assert record(6, ok, "local gap (CD2-pFed - FedAvg) at s=2,5,10: "
                         + ", ".join(f"{g:+.2f}" for g in gaps) + f" ({dt:.0f}s)")


@pytest.mark.slow
def test_7_personalization_vs_fedavg_direction():
    cd_local, cd_new = mean_acc("cd2pfed", 2)
    fa_local, fa_new = mean_acc("fedavg", 2)
    ok = cd_local > fa_local and cd_new >= fa_new - 1
    assert record(7, ok, f"s=2 local {cd_local:.2f} vs FedAvg {fa_local:.2f}; "
                         f"new {cd_new:.2f} vs FedAvg {fa_new:.2f} (needs >= {fa_new - 1:.2f})")


@pytest.mark.slow
def test_8_ablation_direction():
    combos = {"plain": (False, False, False), "LI": (True, False, False), "TA": (False, True, False),
              "CD": (False, False, True), "full": (True, True, True)}
    local = {k: mean_acc("cd2pfed", 2, v)[0] for k, v in combos.items()}
    gains = {k: local[k] - local["plain"] for k in ("LI", "TA", "CD")}
    ok = local["full"] >= local["plain"] and max(gains, key=gains.get) == "CD"
    assert record(8, ok, f"local full {local['full']:.2f} vs plain {local['plain']:.2f}; single-toggle gains "
                         + ", ".join(f"{k} {v:+.2f}" for k, v in gains.items()))


def test_9_schedule_values():
    mpmath.mp.dps = 40
    exact = float(mpmath.mpf("0.5") * mpmath.exp(-5))
    a = schedule_p(25, 50, 0.5) == 0.25
    b = ramp_beta(5, 5, 0.5) == 0.5
    err = abs(ramp_beta(0, 5, 0.5) - exact)
    ok = a and b and err < 1e-12
    assert record(9, ok, f"schedule_p(25,50,0.5)=0.25: {a}; ramp_beta(t0)=beta: {b}; "
                         f"|ramp_beta(0) - 0.5e^-5| = {err:.1e}")


def test_10_serial_and_parallel_runs_are_byte_identical(tmp_path):
    cfg = degeneracy_config(strategy="cd2pfed", rounds=4, toggles={"LI": True, "TA": True, "CD": True}).to_dict()
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = []
    for name, extra in (("serial", []), ("parallel", ["--parallel", "4"])):
        assert cli_main(["run", "--config", str(cfg_path), "--out", str(tmp_path / name), *extra]) == 0
        (run_dir,) = (tmp_path / name).iterdir()
        out.append((run_dir / "metrics.csv").read_bytes())
    same = out[0] == out[1]
    assert record(10, same, f"metrics.csv serial vs --parallel 4 byte-identical: {same} ({len(out[0])} bytes)")
