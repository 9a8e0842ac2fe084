"""Federation strategies expressed as partition-plan generators plus loss settings."""
from __future__ import annotations

from dataclasses import dataclass

from .decouple import PartitionPlan, layer_plan, make_plan, schedule_p
from .nn import Architecture

STRATEGY_NAMES = ("fedavg", "local", "lgfed", "fedper", "cd2pfed")


@dataclass(frozen=True)
class Strategy:
    """One of FedAvg, LocalOnly, LG-Fed, FedPer or CD2-pFed.

    ``num_private_layers`` is the count of whole hidden layers kept private
    by LG-Fed (bottom layers) and FedPer (top layers).  The toggles
    ``li``/``ta``/``cd`` only apply to ``cd2pfed``.
    """

    name: str = "cd2pfed"
    p_max: float = 0.5
    lam: float = 1.0
    beta_max: float = 0.5
    li: bool = True
    ta: bool = True
    cd: bool = True
    num_private_layers: int = 1

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.name!r}")

    @classmethod
    def fedavg(cls) -> "Strategy":
        return cls("fedavg", p_max=0.0, li=False, ta=False, cd=False)

    @classmethod
    def local_only(cls) -> "Strategy":
        return cls("local", p_max=1.0, li=False, ta=False, cd=False)

    @classmethod
    def lg_fed(cls, num_bottom_private_layers: int = 1) -> "Strategy":
        return cls("lgfed", li=False, ta=False, cd=False, num_private_layers=num_bottom_private_layers)

    @classmethod
    def fed_per(cls, num_top_private_layers: int = 1) -> "Strategy":
        return cls("fedper", li=False, ta=False, cd=False, num_private_layers=num_top_private_layers)

    @classmethod
    def cd2pfed(cls, p_max: float = 0.5, lam: float = 1.0, beta_max: float = 0.5,
                li: bool = True, ta: bool = True, cd: bool = True) -> "Strategy":
        return cls("cd2pfed", p_max, lam, beta_max, li, ta, cd)

    @property
    def uses_cd(self) -> bool:
        return self.name == "cd2pfed" and self.cd and self.lam > 0

    @property
    def uses_ema(self) -> bool:
        return self.name == "cd2pfed" and self.ta

    def ratio(self, t: int, T: int) -> float:
        if self.name == "cd2pfed":
            return schedule_p(t, T, self.p_max, self.li)
        return {"fedavg": 0.0, "local": 1.0}.get(self.name, 0.0)

    def plan(self, arch: Architecture, t: int, T: int) -> PartitionPlan:
        n = len(arch.widths)
        b = min(self.num_private_layers, n)
        if self.name == "lgfed":
            return layer_plan(arch, range(b))
        if self.name == "fedper":
            return layer_plan(arch, range(n - b, n))
        return make_plan(arch, self.ratio(t, T))
