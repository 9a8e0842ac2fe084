"""Federation orchestration: weighted aggregation of shared weights and the round loop."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import decouple
from .checkpoint import Checkpoint, save_checkpoint
from .client import ClientState, RoundReport, local_round
from .config import FederationConfig
from .data import FederatedData, federate
from .decouple import PartitionPlan, SharedPart
from .evaluation import MetricRow, external_accuracy, local_accuracy, new_accuracy
from .exceptions import CD2Error, ProtocolError
from .nn import Architecture, ModelParams, OptimizerState
from .strategies import Strategy

log = logging.getLogger(__name__)

METRIC_FIELDS = ("round", "strategy", "metric", "value", "client_id", "seed")
REPORT_FIELDS = ("round", "client_id", "mean_ce", "mean_cd", "samples", "wall_time")


def aggregate(uploads: Sequence[tuple], alphas: dict) -> SharedPart:
    """Entrywise sum of alpha_i * upload_i, accumulated in client-id order.

    Entries on which every upload agrees bitwise are returned unchanged, so
    averaging identical uploads is exact.
    """
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    ids = [cid for cid, _ in uploads]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client upload")
    if set(ids) != set(alphas):
        missing = sorted(set(alphas) - set(ids))
        raise ProtocolError(f"missing uploads from clients {missing}" if missing else "upload from unknown client")
    ordered = sorted(uploads, key=lambda u: u[0])
    plan = ordered[0][1].plan
    shapes = [v.shape for v in ordered[0][1].values]
    for cid, part in ordered:
        if part.plan != plan or [v.shape for v in part.values] != shapes:
            raise ProtocolError(f"client {cid} uploaded with a different plan or shape")
    out = []
    for i in range(len(shapes)):
        first = ordered[0][1].values[i]
        acc = np.zeros_like(first)
        same = np.ones(first.shape, dtype=bool)
        for cid, part in ordered:
            acc += alphas[cid] * part.values[i]
            same &= part.values[i] == first
        acc[same] = first[same]
        out.append(acc)
    return SharedPart(plan, tuple(out))


@dataclass
class ServerState:
    global_params: ModelParams
    plan: PartitionPlan
    alphas: dict
    t: int = 0
    metrics: list = field(default_factory=list)


def client_weights(sizes: dict) -> dict:
    total = sum(sizes.values())
    return {cid: n / total for cid, n in sizes.items()}


def init_federation(cfg: FederationConfig, data: FederatedData, arch: Architecture,
                    strategy: Optional[Strategy] = None) -> tuple[ServerState, list]:
    strategy = strategy or cfg.build_strategy()
    seeds = np.random.SeedSequence(cfg.seed).spawn(data.num_clients + 1)
    global_params = arch.init_params(np.random.default_rng(seeds[0]))
    plan0 = strategy.plan(arch, 0, cfg.rounds)
    alphas = client_weights({sh.client_id: len(sh.train) for sh in data.shards})
    clients = []
    for sh, ss in zip(data.shards, seeds[1:]):
        params = global_params.copy()
        clients.append(ClientState(
            client_id=sh.client_id, params=params,
            opt=OptimizerState.for_params(params, cfg.lr, cfg.momentum, cfg.weight_decay),
            ema_shadow=[t.copy() for t in params.tensors()], plan=plan0,
            x_train=sh.train.inputs, y_train=sh.train.labels, rng=np.random.default_rng(ss),
            alpha=alphas[sh.client_id], x_test=sh.local_test.inputs, y_test=sh.local_test.labels))
    return ServerState(global_params, plan0, alphas), clients


def run_round(server: ServerState, clients: Sequence[ClientState], arch: Architecture,
              cfg: FederationConfig, strategy: Optional[Strategy] = None,
              parallel: int = 1) -> list[RoundReport]:
    """Broadcast, train every client, aggregate the shared uploads."""
    strategy = strategy or cfg.build_strategy()
    t = server.t + 1
    if t > cfg.rounds:
        raise ValueError("all rounds already completed")
    download = decouple.split_for_upload(server.global_params, server.plan, arch)

    def work(state):
        try:
            return local_round(state, download, t, arch, strategy, cfg.rounds, cfg.local_epochs,
                               cfg.batch_size, cfg.t0_fraction)
        except CD2Error as exc:
            raise type(exc)(f"round {t}, client {state.client_id}: {exc}") from exc

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    uploads = [(c.client_id, up) for c, (up, _) in zip(clients, results)]
    merged = aggregate(uploads, server.alphas)
    server.plan = merged.plan
    server.global_params = decouple.merge_from_download(server.global_params, merged.plan, merged, arch)
    server.t = t
    return [rep for _, rep in results]


def personalized_models(server: ServerState, clients: Sequence[ClientState], arch: Architecture) -> list:
    """Each client's private entries combined with the latest aggregated shared entries."""
    shared = decouple.split_for_upload(server.global_params, server.plan, arch)
    return [decouple.merge_from_download(c.params, c.plan, shared, arch) for c in clients]


def evaluate(server: ServerState, clients: Sequence[ClientState], arch: Architecture, data: FederatedData,
             t: int, strategy_name: str, seed: int) -> list[MetricRow]:
    models = personalized_models(server, clients, arch)
    rows = []
    overall, per_client = local_accuracy(models, arch, [(c.x_test, c.y_test) for c in clients])
    rows.append(MetricRow(t, strategy_name, "local", overall, seed))
    rows += [MetricRow(t, strategy_name, "local", v, seed, c.client_id) for c, v in zip(clients, per_client)]
    if len(data.new_test):
        rows.append(MetricRow(t, strategy_name, "new", new_accuracy(models, arch, data.new_test.inputs,
                                                                    data.new_test.labels), seed))
    if data.external is not None and len(data.external):
        rows.append(MetricRow(t, strategy_name, "external", external_accuracy(
            models, arch, data.external.inputs, data.external.labels), seed))
    return rows


@dataclass
class RunResult:
    config: FederationConfig
    arch: Architecture
    server: ServerState
    clients: list
    metrics: list
    reports: list
    run_dir: Optional[Path] = None

    def final(self, metric: str) -> float:
        rows = [r for r in self.metrics if r.metric == metric and r.client_id is None]
        return max(rows, key=lambda r: r.round).value


def build_data(cfg: FederationConfig) -> FederatedData:
    ds = cfg.build_dataset()
    d = cfg.data
    return federate(ds, cfg.clients, d.hetero, cfg.seed, d.new_test_fraction, d.local_test_fraction,
                    d.external_fraction, d.external_shift)


def run_experiment(cfg: FederationConfig, data: Optional[FederatedData] = None, out_dir=None,
                   parallel: int = 1, strategy: Optional[Strategy] = None) -> RunResult:
    """Train for ``cfg.rounds`` rounds, evaluating every ``cfg.eval_every`` rounds.

    With ``out_dir`` the run is persisted to a fresh run directory inside it.
    """
    cfg.validate()
    data = data if data is not None else build_data(cfg)
    if data.num_clients != cfg.clients:
        raise ProtocolError(f"data has {data.num_clients} shards, config wants {cfg.clients} clients")
    arch = cfg.build_architecture(data.shards[0].train.inputs.shape[1:])
    strategy = strategy or cfg.build_strategy()
    server, clients = init_federation(cfg, data, arch, strategy)
    reports = []
    for t in range(1, cfg.rounds + 1):
        reports += run_round(server, clients, arch, cfg, strategy, parallel)
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            server.metrics += evaluate(server, clients, arch, data, t, cfg.strategy, cfg.seed)
        log.debug("round %d done", t)
    result = RunResult(cfg, arch, server, clients, server.metrics, reports)
    if out_dir is not None:
        result.run_dir = persist_run(result, data, Path(out_dir))
    return result


def fresh_run_dir(out_dir: Path, cfg: FederationConfig) -> Path:
    base = f"{cfg.name}-{cfg.strategy}-{cfg.config_hash()}-seed{cfg.seed}"
    path = out_dir / base
    n = 1
    while path.exists():
        path = out_dir / f"{base}.{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_metrics_csv(path: Path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.round, r.strategy, r.metric, f"{r.value:.6f}",
                        "" if r.client_id is None else r.client_id, r.seed])


def persist_run(result: RunResult, data: FederatedData, out_dir: Path) -> Path:
    cfg = result.config
    run_dir = fresh_run_dir(out_dir, cfg)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    data.write_manifest(run_dir / "partition.json")
    write_metrics_csv(run_dir / "metrics.csv", result.metrics)
    with open(run_dir / "rounds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in result.reports:
            w.writerow([r.round, r.client_id, f"{r.mean_ce:.8f}", f"{r.mean_cd:.8f}", r.samples, f"{r.wall_time:.4f}"])
    ck = run_dir / "checkpoints"
    ck.mkdir()
    h = cfg.config_hash()
    save_checkpoint(ck / "global", Checkpoint(result.server.global_params, result.arch, result.server.plan,
                                              result.server.t, h))
    for c in result.clients:
        save_checkpoint(ck / f"client_{c.client_id}", Checkpoint(c.params, result.arch, c.plan,
                                                                 result.server.t, h, c.client_id))
    return run_dir
