from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np


class DefenseConfigError(ValueError):
    pass


@dataclass
class StripConfig:
    overlay_count: int = 16
    frr: float = 0.05
    seed: int = 0


@dataclass
class ACConfig:
    projection_dims: int = 8
    cluster_size_threshold: float = 0.35
    restarts: int = 10
    retrain: bool = False
    seed: int = 0


@dataclass
class FTConfig:
    epochs: int = 10
    clean_fraction: float = 0.1
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.1  # shrinks weights clean data does not use


@dataclass
class FPConfig:
    prune_fraction: float = 0.3
    ft_epochs: int = 10
    clean_fraction: float = 0.1
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.1  # shrinks weights clean data does not use


@dataclass
class ABLConfig:
    isolation_epochs: int = 2
    isolation_fraction: float = 0.1
    unlearn_epochs: int = 10
    unlearn_loss_cap: float = 10.0


@dataclass
class CLPConfig:
    u: float = 3.0
    power_steps: int = 50
    tolerance: float = 1e-8


@dataclass
class NCConfig:
    lam: float = 0.01
    steps: int = 300
    learning_rate: float = 0.1
    anomaly_threshold: float = 2.0
    batch_size: int = 32
    mitigate_epochs: int = 5
    stamp_fraction: float = 0.2
    clean_fraction: float = 0.1
    seed: int = 0


@dataclass
class DefenseConfig:
    strip: StripConfig = field(default_factory=StripConfig)
    ac: ACConfig = field(default_factory=ACConfig)
    ft: FTConfig = field(default_factory=FTConfig)
    fp: FPConfig = field(default_factory=FPConfig)
    abl: ABLConfig = field(default_factory=ABLConfig)
    clp: CLPConfig = field(default_factory=CLPConfig)
    nc: NCConfig = field(default_factory=NCConfig)

    def __post_init__(self):
        validate(self)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "DefenseConfig":
        d = d or {}
        kinds = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise DefenseConfigError(f"unknown defense config blocks {sorted(unknown)}")
        parts = {}
        for name, factory in kinds.items():
            sub = d.get(name) or {}
            known = {f.name for f in fields(factory())}
            bad = set(sub) - known
            if bad:
                raise DefenseConfigError(f"unknown fields for {name}: {sorted(bad)}")
            parts[name] = factory(**sub)
        return cls(**parts)


def validate(c: DefenseConfig) -> None:
    def frac(name, v, upper_open=False):
        if not (0 <= v < 1 if upper_open else 0 <= v <= 1):
            raise DefenseConfigError(f"{name}={v} outside the allowed range")

    if c.strip.overlay_count < 1:
        raise DefenseConfigError("strip.overlay_count must be >= 1")
    frac("strip.frr", c.strip.frr)
    frac("ac.cluster_size_threshold", c.ac.cluster_size_threshold)
    if c.ac.projection_dims < 1:
        raise DefenseConfigError("ac.projection_dims must be >= 1")
    frac("ft.clean_fraction", c.ft.clean_fraction)
    frac("fp.clean_fraction", c.fp.clean_fraction)
    frac("fp.prune_fraction", c.fp.prune_fraction, upper_open=True)
    frac("nc.clean_fraction", c.nc.clean_fraction)
    frac("abl.isolation_fraction", c.abl.isolation_fraction)
    if c.abl.isolation_fraction >= 0.5:
        raise DefenseConfigError("abl.isolation_fraction must be < 0.5")
    if not c.clp.u > 0:
        raise DefenseConfigError("clp.u must be positive")
    if not c.nc.lam > 0:
        raise DefenseConfigError("nc.lam must be positive")


@dataclass
class DetectionVerdict:
    """Per-sample suspicion scores; ``flags`` are the scores on the flagged
    side of ``threshold`` (``below`` or ``above``)."""
    scores: np.ndarray
    flags: np.ndarray
    threshold: float
    side: str = "below"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.flags = np.asarray(self.flags, dtype=bool)
        expect = self.scores < self.threshold if self.side == "below" else self.scores > self.threshold
        if not np.array_equal(expect, self.flags):
            raise ValueError("flags disagree with scores and threshold")
