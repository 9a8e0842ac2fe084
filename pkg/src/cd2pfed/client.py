"""Client-side local training for one federated round."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import decouple
from .decouple import PartitionPlan, SharedPart
from .distill import total_loss
from .exceptions import TrainingError
from .nn import Architecture, ModelParams, OptimizerState, backward_from_logit_grad, forward, sgd_step
from .strategies import Strategy


def ramp_beta(t: float, t0: float, beta_max: float) -> float:
    """Ramp-up of the EMA coefficient: beta_max * exp(-5 (1 - t/t0)^2) until t0."""
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    if t > t0:
        return beta_max
    return beta_max * math.exp(-5.0 * (1.0 - t / t0) ** 2)


def ramp_length(T: int, t0_fraction: float = 0.1) -> int:
    return max(1, math.ceil(t0_fraction * T))


def ema_update(new: np.ndarray, old: np.ndarray, beta: float) -> np.ndarray:
    return beta * new + (1.0 - beta) * old


@dataclass
class ClientState:
    client_id: int
    params: ModelParams
    opt: OptimizerState
    ema_shadow: list
    plan: PartitionPlan
    x_train: np.ndarray
    y_train: np.ndarray
    rng: np.random.Generator
    alpha: float = 1.0
    x_test: Optional[np.ndarray] = None
    y_test: Optional[np.ndarray] = None

    @property
    def num_train(self) -> int:
        return len(self.y_train)

    def private_values(self, arch: Architecture) -> list[np.ndarray]:
        own = decouple.ownership(arch, self.plan)
        return [t[o] for t, o in zip(self.params.tensors(), own)]


@dataclass
class RoundReport:
    client_id: int
    round: int
    mean_ce: float
    mean_cd: float
    samples: int
    wall_time: float
    events: list = field(default_factory=list)


def local_round(state: ClientState, download: SharedPart, t: int, arch: Architecture,
                strategy: Strategy, rounds: int, local_epochs: int, batch_size: int,
                t0_fraction: float = 0.1) -> tuple[SharedPart, RoundReport]:
    """Download, update the plan, train ``local_epochs`` epochs, upload shared weights.

    ``state`` is updated in place.  Private entries never appear in the
    returned payload.
    """
    start = time.perf_counter()
    events = ["download"]
    params = decouple.merge_from_download(state.params, state.plan, download, arch)

    new_plan = strategy.plan(arch, t, rounds)
    events.append("update_p")
    if new_plan != state.plan:
        params = decouple.promote(params, state.plan, new_plan)
        fresh = decouple.newly_private(arch, state.plan, new_plan)
        for shadow, cur, f in zip(state.ema_shadow, params.tensors(), fresh):
            shadow[f] = cur[f]
        state.plan = new_plan
    own = decouple.ownership(arch, state.plan)

    empty = decouple.subnet_empty(state.plan)
    use_cd = strategy.uses_cd and not (empty["private"] or empty["shared"])
    masks = decouple.masks_for(state.plan) if use_cd else None
    beta = ramp_beta(t, ramp_length(rounds, t0_fraction), strategy.beta_max)

    ce_sum = cd_sum = 0.0
    seen = 0
    n = state.num_train
    for epoch in range(1, local_epochs + 1):
        order = state.rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, yb = state.x_train[idx], state.y_train[idx]
            logits, cache = forward(params, arch, xb)
            if use_cd:
                logits_l, cache_l = forward(params, arch, xb, masks["private"])
                logits_g, cache_g = forward(params, arch, xb, masks["shared"])
                loss = total_loss(logits, yb, logits_l, logits_g, strategy.lam)
            else:
                loss = total_loss(logits, yb, cd_enabled=False)
            if not math.isfinite(loss.total):
                raise TrainingError(f"client {state.client_id}, round {t}, epoch {epoch}: non-finite loss")
            grads = backward_from_logit_grad(cache, loss.grad_full)
            if use_cd:
                grads = grads + backward_from_logit_grad(cache_l, loss.grad_private)
                grads = grads + backward_from_logit_grad(cache_g, loss.grad_shared)
            try:
                params = sgd_step(params, grads, state.opt)
            except TrainingError as exc:
                raise TrainingError(f"client {state.client_id}, round {t}: {exc}") from None
            ce_sum += loss.ce * len(idx)
            cd_sum += loss.cd * len(idx)
            seen += len(idx)
        events.append(f"epoch:{epoch}")
        if strategy.uses_ema:
            tensors = params.tensors()
            for i, (cur, shadow, o) in enumerate(zip(tensors, state.ema_shadow, own)):
                if o.any():
                    smoothed = ema_update(cur[o], shadow[o], beta)
                    cur = cur.copy()
                    cur[o] = smoothed
                    shadow[o] = smoothed
                    tensors[i] = cur
            params = ModelParams.from_tensors(tensors)
            events.append(f"ema:{epoch}")

    state.params = params
    upload = decouple.split_for_upload(params, state.plan, arch)
    events.append("upload")
    report = RoundReport(state.client_id, t, ce_sum / seen if seen else 0.0,
                         cd_sum / seen if seen else 0.0, seen, time.perf_counter() - start, events)
    return upload, report
