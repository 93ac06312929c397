"""Experiment configuration: TOML in, validated dataclasses out.

Schema (version 1)::

    schema_version = 1
    experiment_id = "badnets-desk"
    seed = 0
    out = "runs"                       # optional output root

    [dataset]
    kind = "synth_image"               # synth_image | synth_text | synth_audio | idx | tsv
    classes = 10
    per_class = 250
    train_fraction = 0.8

    [noise]                            # optional; variants default to ["normal"]
    variants = ["normal", "noise", "mislabel"]
    data_noise_fraction = 0.25

    [[attack]]
    name = "badnets"
    trigger = { variant = "ImagePatch" }
    target_label = 0
    poison_ratio = 0.1

    [defense]
    names = ["none", "ft", "strip"]
    [defense.ft]
    epochs = 10

    [training]
    epochs = 10

    [sweep]                            # only read by the sweep command
    axis = "poison_ratio"
    values = [0.005, 0.01, 0.1, 0.5]
"""

from __future__ import annotations

import copy
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from ._util import derive_seed
from .defenses import DEFENSES, DefenseConfig, DefenseConfigError
from .models import TrainConfig
from .noise import NoiseConfig
from .poison import AttackConfig, PoisonError, StoreFormatError, trigger_from_json

SCHEMA_VERSION = 1
VARIANTS = ("normal", "noise", "mislabel")
DATASET_KINDS = ("synth_image", "synth_text", "synth_audio", "idx", "tsv")
SWEEP_AXES = ("poison_ratio", "epochs", "noise_level")
NO_DEFENSE = "none"


class ConfigError(ValueError):
    """Validation failure; ``field`` is the dotted path of the offending key."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetSpec:
    kind: str = "synth_image"
    classes: int = 10
    per_class: int = 100
    side: int = 16
    duration_s: float = 0.25
    seed: int | None = None          # generator seed; defaults to the global seed
    train_fraction: float = 0.8
    split_seed: int | None = None    # defaults to global seed + 1
    images: str | None = None        # idx
    labels: str | None = None        # idx
    path: str | None = None          # tsv


@dataclass
class SweepSpec:
    axis: str = "poison_ratio"
    values: list = field(default_factory=list)
    means: list = field(default_factory=list)      # noise_level axis
    variances: list = field(default_factory=list)  # noise_level axis


@dataclass
class ExperimentConfig:
    experiment_id: str = "experiment"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseConfig | None = None
    variants: tuple = ("normal",)
    attacks: list = field(default_factory=lambda: [AttackConfig(name="badnets")])
    defenses: tuple = (NO_DEFENSE,)
    defense_config: DefenseConfig = field(default_factory=DefenseConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepSpec | None = None
    out: str | None = None
    store: str | None = None
    checkpoint: str | None = None
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version, "experiment_id": self.experiment_id, "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "noise": self.noise.to_json() if self.noise else None, "variants": list(self.variants),
            "attacks": [a.to_json() for a in self.attacks], "defenses": list(self.defenses),
            "defense_config": self.defense_config.to_json(),
            "training": dataclasses.asdict(self.training),
            "sweep": dataclasses.asdict(self.sweep) if self.sweep else None,
        }

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)


def _build(cls, block, path: str):
    if block is None:
        block = {}
    if not isinstance(block, dict):
        raise ConfigError(path, "expected a table")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in block:
        if k not in names:
            raise ConfigError(f"{path}.{k}", f"unknown field (valid: {', '.join(sorted(names))})")
    try:
        return cls(**block)
    except (ValueError, TypeError) as e:
        # name the field when the message mentions one
        hit = next((n for n in sorted(names, key=len, reverse=True) if n in str(e)), None)
        raise ConfigError(f"{path}.{hit}" if hit else path, str(e)) from None


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "x"


def _attack(block: dict, i: int, global_seed: int) -> AttackConfig:
    path = f"attack[{i}]"
    if not isinstance(block, dict):
        raise ConfigError(path, "expected a table")
    known = {"name", "trigger", "target_label", "poison_ratio", "label_mode", "seed"}
    for k in block:
        if k not in known:
            raise ConfigError(f"{path}.{k}", f"unknown field (valid: {', '.join(sorted(known))})")
    trig = block.get("trigger", {"variant": "ImagePatch"})
    if isinstance(trig, str):
        trig = {"variant": trig}
    try:
        trigger = trigger_from_json(trig)
    except (StoreFormatError, PoisonError, ValueError) as e:
        raise ConfigError(f"{path}.trigger", str(e)) from None
    name = block.get("name") or type(trigger).__name__
    ratio = block.get("poison_ratio", 0.1)
    if not isinstance(ratio, (int, float)) or not 0 <= ratio <= 1:
        raise ConfigError(f"{path}.poison_ratio", f"{ratio!r} outside [0, 1]")
    seed = block.get("seed", derive_seed(global_seed, "attack", name) % 2**31)
    try:
        return AttackConfig(trigger, int(block.get("target_label", 0)), float(ratio),
                            block.get("label_mode", "dirty"), int(seed), name)
    except PoisonError as e:
        field_name = "label_mode" if "label_mode" in str(e) else "target_label"
        raise ConfigError(f"{path}.{field_name}", str(e)) from None


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw)
    known = {"schema_version", "experiment_id", "seed", "out", "dataset", "noise", "attack",
             "defense", "training", "sweep", "store", "checkpoint"}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown top-level key")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"{version} unsupported (expected {SCHEMA_VERSION})")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    exp_id = str(raw.get("experiment_id", "experiment"))
    if _slug(exp_id) != exp_id:
        raise ConfigError("experiment_id", "use lowercase letters, digits and dashes")

    ds = _build(DatasetSpec, raw.get("dataset"), "dataset")
    if ds.kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"{ds.kind!r} not one of {', '.join(DATASET_KINDS)}")
    if not 0 < ds.train_fraction < 1:
        raise ConfigError("dataset.train_fraction", "must lie in (0, 1)")
    if ds.kind == "idx" and not (ds.images and ds.labels):
        raise ConfigError("dataset.images", "idx datasets need images and labels paths")
    if ds.kind == "tsv" and not ds.path:
        raise ConfigError("dataset.path", "tsv datasets need a path")
    if base_dir is not None:
        for attr in ("images", "labels", "path"):
            v = getattr(ds, attr)
            if v and not Path(v).is_absolute():
                setattr(ds, attr, str(base_dir / v))

    noise_block = dict(raw.get("noise") or {})
    variants = noise_block.pop("variants", ["normal"])
    if isinstance(variants, str):
        variants = [variants]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError("noise.variants", f"{v!r} not one of {', '.join(VARIANTS)}")
    noise_block.setdefault("seed", derive_seed(seed, "noise") % 2**31)
    noise = _build(NoiseConfig, noise_block, "noise") if raw.get("noise") is not None else None
    if noise is None and any(v != "normal" for v in variants):
        raise ConfigError("noise", "noise variants need a noise block")

    attacks_raw = raw.get("attack", [{}])
    if isinstance(attacks_raw, dict):
        attacks_raw = [attacks_raw]
    attacks = [_attack(a, i, seed) for i, a in enumerate(attacks_raw)]
    if not attacks:
        raise ConfigError("attack", "at least one attack is required")
    labels = [_slug(a.label) for a in attacks]
    if len(set(labels)) != len(labels):
        raise ConfigError("attack", f"attack names must be distinct, got {labels}")

    dblock = dict(raw.get("defense") or {})
    names = dblock.pop("names", [NO_DEFENSE])
    if isinstance(names, str):
        names = [names]
    valid = (NO_DEFENSE,) + tuple(DEFENSES)
    for n in names:
        if n not in valid:
            raise ConfigError("defense.names", f"unknown defense {n!r}; valid names: {', '.join(valid)}")
    try:
        dconf = DefenseConfig.from_dict(dblock)
    except DefenseConfigError as e:
        msg = str(e)
        hit = re.search(r"([a-z]+\.[a-z_]+)", msg)
        raise ConfigError(f"defense.{hit.group(1)}" if hit else "defense", msg) from None
    except TypeError as e:
        raise ConfigError("defense", str(e)) from None

    training = _build(TrainConfig, raw.get("training"), "training")

    sweep = None
    if raw.get("sweep") is not None:
        sweep = _build(SweepSpec, raw["sweep"], "sweep")
        if sweep.axis not in SWEEP_AXES:
            raise ConfigError("sweep.axis", f"{sweep.axis!r} not one of {', '.join(SWEEP_AXES)}")
        if sweep.axis == "noise_level":
            if not sweep.means or not sweep.variances:
                raise ConfigError("sweep.means", "noise_level sweeps need means and variances")
            if any(v < 0 for v in sweep.variances):
                raise ConfigError("sweep.variances", "variances must be non-negative")
        elif not sweep.values:
            raise ConfigError("sweep.values", "empty sweep")
        if sweep.axis == "poison_ratio" and any(not 0 <= v <= 1 for v in sweep.values):
            raise ConfigError("sweep.values", "poison_ratio values must lie in [0, 1]")
        if sweep.axis == "epochs" and any(not isinstance(v, int) or v < 0 for v in sweep.values):
            raise ConfigError("sweep.values", "epochs values must be non-negative integers")

    def _path(key):
        v = raw.get(key)
        if v is None or base_dir is None or Path(v).is_absolute():
            return v
        return str(base_dir / v)

    return ExperimentConfig(exp_id, seed, ds, noise, tuple(variants), attacks, tuple(names), dconf,
                            training, sweep, raw.get("out"), _path("store"), _path("checkpoint"), version)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = tomli.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"{p} not found") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError("config", f"{p}: {e}") from None
    return parse_config(raw, p.parent)


def attack_slug(a: AttackConfig) -> str:
    return _slug(a.label)
