"""Channel decoupling of a network into shared and private parameter blocks.

Convention: in every hidden parametric layer the *last* ``private_count``
output channels are private and the leading ones are shared.  A hidden
channel owns its incoming weight row and its bias.  The classifier head is
never split along its outputs; a head weight column is private when the
feature it reads is produced by a private channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .exceptions import ProtocolError
from .nn import Architecture, ForwardMask, ModelParams


@dataclass(frozen=True)
class PartitionPlan:
    private_counts: tuple
    total_channels: tuple

    def __post_init__(self):
        if len(self.private_counts) != len(self.total_channels):
            raise ValueError("private_counts and total_channels differ in length")
        for c, n in zip(self.private_counts, self.total_channels):
            if not 0 <= c <= n:
                raise ValueError(f"private count {c} outside [0, {n}]")

    @property
    def head_bias_private(self) -> bool:
        """The head is fully private once every feature it reads is private."""
        return bool(self.private_counts) and self.private_counts[-1] == self.total_channels[-1]

    @property
    def all_shared(self) -> bool:
        return not any(self.private_counts)

    @property
    def all_private(self) -> bool:
        return bool(self.private_counts) and self.private_counts == self.total_channels

    def covers(self, other: "PartitionPlan") -> bool:
        """True if every channel private in ``other`` is also private here."""
        return self.total_channels == other.total_channels and all(
            a >= b for a, b in zip(self.private_counts, other.private_counts))

    def to_dict(self) -> dict:
        return {"private_counts": list(self.private_counts), "total_channels": list(self.total_channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(tuple(d["private_counts"]), tuple(d["total_channels"]))


def schedule_p(t: int, T: int, p_max: float, progressive: bool = True) -> float:
    """Personalization ratio for round ``t`` (linear growth when progressive)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not progressive:
        return p_max
    return p_max * t / T


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_plan(arch: Architecture, p_t: float, overrides: Optional[Mapping[int, float]] = None) -> PartitionPlan:
    """Private channel counts for ratio ``p_t``.

    ``overrides`` maps a hidden-layer position to its own ratio; whole-layer
    schemes (bottom or top layers private) are built from it.
    """
    if not 0.0 <= p_t <= 1.0:
        raise ValueError(f"p_t={p_t} outside [0, 1]")
    overrides = overrides or {}
    counts = []
    for pos, width in enumerate(arch.widths):
        ratio = overrides.get(pos, p_t)
        counts.append(min(width, _round_half_up(ratio * width)))
    return PartitionPlan(tuple(counts), arch.widths)


def layer_plan(arch: Architecture, private_layers) -> PartitionPlan:
    """Plan with whole hidden layers private (positions in ``private_layers``)."""
    private_layers = set(private_layers)
    return make_plan(arch, 0.0, {i: 1.0 for i in range(len(arch.widths)) if i in private_layers})


def channel_flags(plan: PartitionPlan) -> list[np.ndarray]:
    """Boolean private flag per output channel, per hidden layer."""
    flags = []
    for c, n in zip(plan.private_counts, plan.total_channels):
        f = np.zeros(n, dtype=bool)
        f[n - c:] = True
        flags.append(f)
    return flags


def ownership(arch: Architecture, plan: PartitionPlan) -> list[np.ndarray]:
    """Per tensor boolean map of PRIVATE entries, in canonical tensor order."""
    _check_plan(arch, plan)
    flags = channel_flags(plan)
    shapes = arch.param_shapes()
    out = []
    for pos, flag in enumerate(flags):
        wshape, bshape = shapes[pos]
        out.append(np.broadcast_to(flag.reshape((-1,) + (1,) * (len(wshape) - 1)), wshape).copy())
        out.append(flag.copy())
    wshape, bshape = shapes[-1]
    if flags:
        cols = flags[-1][arch.head_feature_channel]
        out.append(np.broadcast_to(cols[None, :], wshape).copy())
    else:
        out.append(np.zeros(wshape, dtype=bool))
    out.append(np.full(bshape, plan.head_bias_private))
    return out


def _check_plan(arch: Architecture, plan: PartitionPlan) -> None:
    if plan.total_channels != arch.widths:
        raise ProtocolError(f"plan widths {plan.total_channels} do not match architecture {arch.widths}")


def masks_for(plan: PartitionPlan) -> dict[str, ForwardMask]:
    """Forward masks for the full network and the shared / private subnets."""
    flags = channel_flags(plan)
    private = tuple(f.astype(np.float64) for f in flags)
    shared = tuple((~f).astype(np.float64) for f in flags)
    return {
        "full": ForwardMask(tuple(None for _ in flags)),
        "shared": ForwardMask(shared),
        "private": ForwardMask(private),
    }


def subnet_empty(plan: PartitionPlan) -> dict[str, bool]:
    """A subnet is empty if any hidden layer selects none of its channels."""
    return {
        "private": any(c == 0 for c in plan.private_counts) or not plan.private_counts,
        "shared": any(c == n for c, n in zip(plan.private_counts, plan.total_channels)) or not plan.private_counts,
    }


def promote(params: ModelParams, old_plan: PartitionPlan, new_plan: PartitionPlan) -> ModelParams:
    """Move channels from shared to private; their current values carry over unchanged."""
    if not new_plan.covers(old_plan):
        raise ValueError("promotion cannot shrink the private set")
    return params.copy()


def newly_private(arch: Architecture, old_plan: PartitionPlan, new_plan: PartitionPlan) -> list[np.ndarray]:
    old = ownership(arch, old_plan)
    new = ownership(arch, new_plan)
    return [n & ~o for o, n in zip(old, new)]


@dataclass(frozen=True)
class SharedPart:
    """Upload/download payload: the shared entries of each tensor, flattened."""

    plan: PartitionPlan
    values: tuple

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values)


def split_for_upload(params: ModelParams, plan: PartitionPlan, arch: Architecture) -> SharedPart:
    own = ownership(arch, plan)
    return SharedPart(plan, tuple(t[~o].copy() for t, o in zip(params.tensors(), own)))


def merge_from_download(params: ModelParams, plan: PartitionPlan, shared: SharedPart,
                        arch: Architecture) -> ModelParams:
    if shared.plan != plan:
        raise ProtocolError(f"payload plan {shared.plan.private_counts} != local plan {plan.private_counts}")
    own = ownership(arch, plan)
    out = []
    for t, o, v in zip(params.tensors(), own, shared.values):
        if v.shape != (int((~o).sum()),):
            raise ProtocolError("payload tensor size does not match the plan")
        t = t.copy()
        t[~o] = v
        out.append(t)
    return ModelParams.from_tensors(out)
