"""Central finite-difference check of the training objective's gradients.

The objective is CE on the full network plus lam * cyclic distillation
between the private and shared subnets, where each KL target is frozen at
the evaluation point.  The numerical side only calls ``forward``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decouple import PartitionPlan, make_plan, masks_for
from .distill import kl, total_loss
from .nn import Architecture, LayerSpec, ModelParams, backward_from_logit_grad, cross_entropy, forward, softmax


def random_architecture(rng: np.random.Generator, max_layers: int = 4) -> Architecture:
    """Random MLP or small CNN with 2..max_layers parametric layers."""
    n_param = int(rng.integers(2, max_layers + 1))
    n_cls = int(rng.integers(2, 5))
    if rng.random() < 0.3 and n_param >= 2:
        c_in, size = int(rng.integers(1, 3)), int(rng.integers(6, 9))
        c1 = int(rng.integers(2, 5))
        layers = [LayerSpec.conv2d(c_in, c1, 3), LayerSpec.relu()]
        side = size - 2
        if side >= 4 and rng.random() < 0.5:
            layers.append(LayerSpec.maxpool2d(2))
            side //= 2
        layers.append(LayerSpec.flatten())
        prev = c1 * side * side
        for _ in range(n_param - 2):
            w = int(rng.integers(2, 7))
            layers += [LayerSpec.dense(prev, w), LayerSpec.relu()]
            prev = w
        layers.append(LayerSpec.dense(prev, n_cls))
        return Architecture((c_in, size, size), layers)
    d_in = int(rng.integers(2, 6))
    layers, prev = [], d_in
    for _ in range(n_param - 1):
        w = int(rng.integers(2, 7))
        layers += [LayerSpec.dense(prev, w), LayerSpec.relu()]
        prev = w
    layers.append(LayerSpec.dense(prev, n_cls))
    return Architecture((d_in,), layers)


def objective(params, arch, x, y, masks, lam, target_private, target_shared) -> float:
    """CE(full) + lam * 0.5 * (KL(target_L, y_G) + KL(target_G, y_L)), batch mean."""
    logits, _ = forward(params, arch, x)
    value = cross_entropy(softmax(logits), y)
    if masks is not None:
        y_l = softmax(forward(params, arch, x, masks["private"])[0])
        y_g = softmax(forward(params, arch, x, masks["shared"])[0])
        value += lam * float(np.mean(0.5 * (kl(target_private, y_g) + kl(target_shared, y_l))))
    return value


def analytic_grads(params, arch, x, y, masks, lam) -> ModelParams:
    logits, cache = forward(params, arch, x)
    if masks is None:
        loss = total_loss(logits, y, cd_enabled=False)
        return backward_from_logit_grad(cache, loss.grad_full)
    logits_l, cache_l = forward(params, arch, x, masks["private"])
    logits_g, cache_g = forward(params, arch, x, masks["shared"])
    loss = total_loss(logits, y, logits_l, logits_g, lam)
    return (backward_from_logit_grad(cache, loss.grad_full)
            + backward_from_logit_grad(cache_l, loss.grad_private)
            + backward_from_logit_grad(cache_g, loss.grad_shared))


def numeric_grads(params, arch, x, y, masks, lam, step: float = 1e-5) -> ModelParams:
    target_l = target_g = None
    if masks is not None:
        target_l = softmax(forward(params, arch, x, masks["private"])[0])
        target_g = softmax(forward(params, arch, x, masks["shared"])[0])
    tensors = [t.copy() for t in params.tensors()]
    grads = []
    for i, t in enumerate(tensors):
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + step
            up = objective(ModelParams.from_tensors(tensors), arch, x, y, masks, lam, target_l, target_g)
            t[idx] = orig - step
            down = objective(ModelParams.from_tensors(tensors), arch, x, y, masks, lam, target_l, target_g)
            t[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return ModelParams.from_tensors(grads)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@dataclass
class GradcheckCase:
    index: int
    arch: Architecture
    p: float
    lam: float
    private_counts: tuple
    max_rel_error: float


def run_gradcheck(seed: int = 0, cases: int = 20, max_layers: int = 4, batch: int = 5,
                  step: float = 1e-5) -> list[GradcheckCase]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(cases):
        arch = random_architecture(rng, max_layers)
        params = arch.init_params(rng)
        for b in params.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=(batch,) + arch.input_shape)
        y = rng.integers(0, arch.num_classes, size=batch)
        p = float(rng.choice([0.25, 0.5, 0.75]))
        lam = float(rng.choice([0.5, 1.0, 2.0]))
        # keep both subnets non-empty so every case exercises the distillation term
        plan = make_plan(arch, p)
        plan = PartitionPlan(tuple(min(max(c, 1), n - 1) for c, n in zip(plan.private_counts, plan.total_channels)),
                             plan.total_channels)
        masks = masks_for(plan)
        a = analytic_grads(params, arch, x, y, masks, lam)
        n = numeric_grads(params, arch, x, y, masks, lam, step)
        err = max(relative_error(u, v) for u, v in zip(a.tensors(), n.tensors()))
        out.append(GradcheckCase(i, arch, p, lam, plan.private_counts, err))
    return out
