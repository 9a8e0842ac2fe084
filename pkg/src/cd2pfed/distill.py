"""Cyclic distillation between the private and shared subnets, and the total loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import cross_entropy, softmax

PROB_FLOOR = 1e-12


def kl(p: np.ndarray, q: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """KL(p || q) along the last axis, with both arguments clamped before the log."""
    p = np.maximum(p, floor)
    q = np.maximum(q, floor)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def cyclic_distillation_loss(y_private: np.ndarray, y_shared: np.ndarray) -> float:
    """Batch mean of 0.5 * (KL(y_L, y_G) + KL(y_G, y_L))."""
    return float(np.mean(0.5 * (kl(y_private, y_shared) + kl(y_shared, y_private))))


def cyclic_distillation_grads(y_private: np.ndarray, y_shared: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logit gradients of the cyclic loss with the target side of each KL held fixed.

    In KL(a, b) only b's logits receive gradient, which is softmax(b) - a.
    Returns (grad wrt private logits, grad wrt shared logits).
    """
    n = y_private.shape[0]
    g_shared = 0.5 * (y_shared - y_private) / n
    g_private = 0.5 * (y_private - y_shared) / n
    return g_private, g_shared


@dataclass
class LossResult:
    total: float
    ce: float
    cd: float
    grad_full: np.ndarray
    grad_private: Optional[np.ndarray] = None
    grad_shared: Optional[np.ndarray] = None


def total_loss(logits_full: np.ndarray, labels: np.ndarray,
               logits_private: Optional[np.ndarray] = None,
               logits_shared: Optional[np.ndarray] = None,
               lam: float = 1.0, cd_enabled: bool = True) -> LossResult:
    """CE on the full network plus ``lam`` times the cyclic loss of the two subnets.

    Subnet logits may be omitted, in which case the loss is plain CE.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    labels = np.asarray(labels)
    y = softmax(logits_full)
    ce = cross_entropy(y, labels)
    g_full = y.copy()
    g_full[np.arange(len(labels)), labels] -= 1.0
    g_full /= len(labels)
    use_cd = cd_enabled and logits_private is not None and logits_shared is not None
    if not use_cd:
        return LossResult(ce, ce, 0.0, g_full)
    y_l = softmax(logits_private)
    y_g = softmax(logits_shared)
    cd = cyclic_distillation_loss(y_l, y_g)
    g_l, g_g = cyclic_distillation_grads(y_l, y_g)
    return LossResult(ce + lam * cd, ce, cd, g_full, lam * g_l, lam * g_g)
