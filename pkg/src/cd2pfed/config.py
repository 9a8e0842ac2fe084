"""Experiment configuration: strict JSON schema, defaults, validation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import HETEROGENEITY_KINDS, Dataset, HeterogeneityConfig, load_csv, load_idx, synth_generate
from .exceptions import ConfigurationError
from .nn import Architecture, lenet5, mlp
from .strategies import STRATEGY_NAMES, Strategy


def _strict(cls, d: dict, where: str, renames: Optional[dict] = None):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    renames = renames or {}
    known = {renames.get(f.name, f.name): f.name for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return {known[k]: v for k, v in d.items()}


@dataclass
class Toggles:
    LI: bool = True
    TA: bool = True
    CD: bool = True


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [64, 64])
    input_shape: Optional[list] = None
    layers: Optional[list] = None


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 10
    dims: int = 20
    per_class: int = 200
    spread: float = 1.0
    modes: int = 1
    shape: Optional[list] = None
    seed: Optional[int] = None
    path: Optional[str] = None
    labels_path: Optional[str] = None
    heterogeneity: dict = field(default_factory=lambda: {"kind": "label_skew", "s": 2, "strength": 1.0})
    new_test_fraction: float = 0.2
    local_test_fraction: float = 0.2
    external_fraction: float = 0.0
    external_shift: float = 1.0

    @property
    def hetero(self) -> HeterogeneityConfig:
        return HeterogeneityConfig(**self.heterogeneity)


@dataclass
class FederationConfig:
    name: str = "run"
    strategy: str = "cd2pfed"
    num_private_layers: int = 1
    clients: int = 10
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    p_max: float = 0.5
    lam: float = 1.0
    beta_max: float = 0.5
    t0_fraction: float = 0.1
    toggles: Toggles = field(default_factory=Toggles)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_every: int = 1
    seed: int = 0
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        kw = _strict(cls, d, "config", {"lam": "lambda"})
        if "toggles" in kw:
            kw["toggles"] = Toggles(**_strict(Toggles, kw["toggles"], "toggles"))
        if "model" in kw:
            kw["model"] = ModelConfig(**_strict(ModelConfig, kw["model"], "model"))
        if "data" in kw:
            data = DataConfig(**_strict(DataConfig, kw["data"], "data"))
            het = {"kind": "label_skew", "s": 2, "strength": 1.0}
            het.update(_strict(HeterogeneityConfig, data.heterogeneity, "data.heterogeneity"))
            data.heterogeneity = het
            kw["data"] = data
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "FederationConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "FederationConfig":
        d = self.to_dict()
        for key, value in changes.items():
            d["lambda" if key == "lam" else key] = value
        return FederationConfig.from_dict(d)

    def validate(self) -> None:
        """Range checks; every failure has its own message."""
        def num(name, v, lo=None, hi=None, integer=False):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
                raise ConfigurationError(f"{name} must be {'an integer' if integer else 'a number'}, got {v!r}")

        if self.strategy not in STRATEGY_NAMES:
            raise ConfigurationError(f"strategy must be one of {', '.join(STRATEGY_NAMES)}, got {self.strategy!r}")
        for name in ("clients", "rounds", "local_epochs", "batch_size", "eval_every", "num_private_layers", "seed"):
            num(name, getattr(self, name), integer=True)
        for name in ("lr", "momentum", "weight_decay", "p_max", "lam", "beta_max", "t0_fraction"):
            num(name, getattr(self, name))
        if not 0.0 <= self.p_max <= 1.0:
            raise ConfigurationError(f"p_max must lie in [0, 1], got {self.p_max}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds (T) must be >= 1, got {self.rounds}")
        if self.clients < 1:
            raise ConfigurationError(f"clients (K) must be >= 1, got {self.clients}")
        if self.local_epochs < 0:
            raise ConfigurationError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.beta_max <= 1.0:
            raise ConfigurationError(f"beta_max must lie in [0, 1], got {self.beta_max}")
        if not 0.0 < self.t0_fraction <= 1.0:
            raise ConfigurationError(f"t0_fraction must lie in (0, 1], got {self.t0_fraction}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.num_private_layers < 0:
            raise ConfigurationError("num_private_layers must be >= 0")
        for t in ("LI", "TA", "CD"):
            if not isinstance(getattr(self.toggles, t), bool):
                raise ConfigurationError(f"toggle {t} must be true or false")
        d = self.data
        if d.source not in ("synthetic", "csv", "idx"):
            raise ConfigurationError(f"data.source must be synthetic, csv or idx, got {d.source!r}")
        if d.source != "synthetic" and not d.path:
            raise ConfigurationError("data.path is required for file sources")
        if d.source == "idx" and not d.labels_path:
            raise ConfigurationError("data.labels_path is required for idx sources")
        if not isinstance(d.num_classes, int) or d.num_classes < 2:
            raise ConfigurationError("data.num_classes must be an integer >= 2")
        if d.source == "synthetic":
            if d.dims < 1 or d.per_class < 1 or d.modes < 1 or d.spread < 0:
                raise ConfigurationError("synthetic data needs dims, per_class, modes >= 1 and spread >= 0")
        h = d.hetero
        if h.kind not in HETEROGENEITY_KINDS:
            raise ConfigurationError(f"data.heterogeneity.kind must be one of {', '.join(HETEROGENEITY_KINDS)}")
        if h.kind == "label_skew" and not (isinstance(h.s, int) and 2 <= h.s <= d.num_classes):
            raise ConfigurationError(f"s must lie in [2, num_classes={d.num_classes}], got {h.s}")
        if h.strength < 0:
            raise ConfigurationError("data.heterogeneity.strength must be >= 0")
        for name in ("new_test_fraction", "local_test_fraction"):
            if not 0.0 < getattr(d, name) < 1.0:
                raise ConfigurationError(f"data.{name} must lie in (0, 1)")
        if not 0.0 <= d.external_fraction < 1.0:
            raise ConfigurationError("data.external_fraction must lie in [0, 1)")
        if self.model.kind not in ("mlp", "lenet5", "layers"):
            raise ConfigurationError(f"model.kind must be mlp, lenet5 or layers, got {self.model.kind!r}")

    def build_strategy(self) -> Strategy:
        if self.strategy == "cd2pfed":
            t = self.toggles
            return Strategy.cd2pfed(self.p_max, self.lam, self.beta_max, t.LI, t.TA, t.CD)
        if self.strategy == "fedavg":
            return Strategy.fedavg()
        if self.strategy == "local":
            return Strategy.local_only()
        if self.strategy == "lgfed":
            return Strategy.lg_fed(self.num_private_layers)
        return Strategy.fed_per(self.num_private_layers)

    def build_dataset(self) -> Dataset:
        d = self.data
        if d.source == "synthetic":
            seed = self.seed if d.seed is None else d.seed
            return synth_generate(d.num_classes, d.dims, d.per_class, d.spread, seed, d.shape, d.modes)
        if d.source == "csv":
            return load_csv(d.path, d.num_classes)
        return load_idx(d.path, d.labels_path, d.num_classes)

    def build_architecture(self, input_shape) -> Architecture:
        m = self.model
        n_cls = self.data.num_classes
        if m.kind == "mlp":
            if len(input_shape) != 1:
                raise ConfigurationError(f"mlp needs flat inputs, got shape {tuple(input_shape)}")
            return mlp(input_shape[0], m.hidden, n_cls)
        if m.kind == "lenet5":
            c, h, w = input_shape
            if h != w:
                raise ConfigurationError("lenet5 needs square inputs")
            return lenet5(n_cls, c, h)
        arch = Architecture.from_dict({"input_shape": m.input_shape or list(input_shape), "layers": m.layers or []})
        if arch.input_shape != tuple(input_shape):
            raise ConfigurationError(f"model input shape {arch.input_shape} != data shape {tuple(input_shape)}")
        if arch.num_classes != n_cls:
            raise ConfigurationError("model head width differs from data.num_classes")
        return arch
