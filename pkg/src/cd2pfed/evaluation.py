"""Local / new / external top-1 accuracy and multi-seed summaries."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .nn import Architecture, ModelParams, forward, softmax

METRICS = ("local", "new", "external")


@dataclass
class MetricRow:
    round: int
    strategy: str
    metric: str
    value: float
    seed: int
    client_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"accuracy {self.value} outside [0, 100]")


def predict_proba(params: ModelParams, arch: Architecture, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    out = [softmax(forward(params, arch, x[i:i + batch])[0]) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, arch.num_classes))


def top1(probs: np.ndarray, labels: np.ndarray) -> float:
    """Percent correct; argmax ties go to the lowest class index."""
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(np.argmax(probs, axis=1) == labels))


def local_accuracy(models: Sequence[ModelParams], arch: Architecture,
                   tests: Sequence[tuple]) -> tuple[float, list[float]]:
    """Each client scores its own local test set; returns (sample-weighted %, per-client %)."""
    correct = total = 0
    per_client = []
    for params, (x, y) in zip(models, tests):
        hits = int(np.sum(np.argmax(predict_proba(params, arch, x), axis=1) == y))
        per_client.append(100.0 * hits / len(y) if len(y) else 0.0)
        correct += hits
        total += len(y)
    return (100.0 * correct / total if total else 0.0), per_client


def ensemble_proba(models: Sequence[ModelParams], arch: Architecture, x: np.ndarray) -> np.ndarray:
    """Mean of the clients' softmax outputs (probabilities, not logits).

    Running mean, so an ensemble of identical models reproduces the single
    model bit for bit.
    """
    mean = None
    for k, params in enumerate(models, start=1):
        p = predict_proba(params, arch, x)
        mean = p if mean is None else mean + (p - mean) / k
    return mean


def new_accuracy(models: Sequence[ModelParams], arch: Architecture, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("new-test pool is empty")
    return top1(ensemble_proba(models, arch, x), y)


def external_accuracy(models: Sequence[ModelParams], arch: Architecture, x: np.ndarray, y: np.ndarray) -> float:
    return new_accuracy(models, arch, x, y)


def summarize(rows: Iterable[MetricRow], final_only: bool = True) -> dict:
    """Mean and sample std over seeds per (strategy, metric), using aggregate rows.

    With ``final_only`` each seed contributes its last evaluated round.
    """
    last: dict = {}
    for r in rows:
        if r.client_id is not None:
            continue
        key = (r.strategy, r.metric, r.seed)
        if final_only:
            if key not in last or r.round >= last[key].round:
                last[key] = r
        else:
            last[(r.strategy, r.metric, r.seed, r.round)] = r
    groups = defaultdict(list)
    for key, r in last.items():
        groups[(r.strategy, r.metric)].append(r.value)
    out = {}
    for key, vals in sorted(groups.items()):
        v = np.asarray(vals)
        out[key] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                    "n": len(v), "min": float(v.min()), "max": float(v.max())}
    return out


def format_summary(summary: dict) -> str:
    lines = [f"{'strategy':<10} {'metric':<9} {'mean±std':>16} {'n':>3}"]
    for (strategy, metric), s in summary.items():
        lines.append(f"{strategy:<10} {metric:<9} {s['mean']:>8.2f}±{s['std']:<6.2f} {s['n']:>3}")
    return "\n".join(lines)
