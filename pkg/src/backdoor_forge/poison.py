"""Backdoor poisoner: triggers, poison-index selection, curated test sets and
the on-disk poisoned-dataset store."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from ._util import rng_for, round_half_up
from .data import AUDIO, CANONICAL_RATE, IMAGE, TEXT, Dataset, Sample, Vocabulary, tokenize

STORE_VERSION = 1
DIRTY, CLEAN = "dirty", "clean"


class PoisonError(ValueError):
    pass


class EmptyPoolError(PoisonError):
    pass


class TriggerModalityError(PoisonError):
    pass


class PatchOutOfBoundsError(PoisonError):
    pass


class StoreFormatError(ValueError):
    pass


class VersionMismatchError(StoreFormatError):
    pass


class ChecksumMismatchError(StoreFormatError):
    pass


# ---------------------------------------------------------------------------
# triggers


@dataclass(frozen=True)
class ImagePatch:
    row: int = -3  # negative values count from the bottom/right edge
    col: int = -3
    height: int = 3
    width: int = 3
    pixel_value: float = 1.0
    modality = IMAGE

    def box(self, h: int, w: int) -> tuple[int, int]:
        r = self.row + h if self.row < 0 else self.row
        c = self.col + w if self.col < 0 else self.col
        if r < 0 or c < 0 or r + self.height > h or c + self.width > w or self.height < 1 or self.width < 1:
            raise PatchOutOfBoundsError(
                f"patch ({self.row},{self.col},{self.height}x{self.width}) outside {h}x{w} image")
        return r, c


@dataclass(frozen=True)
class ImageBlend:
    alpha: float = 0.2
    pattern_seed: int = 1234
    pattern: tuple | None = None  # nested lists (H, W, C); generated from pattern_seed when None
    modality = IMAGE

    def pattern_for(self, shape) -> np.ndarray:
        if self.pattern is not None:
            p = np.asarray(self.pattern, dtype=np.float64)
            if p.shape != tuple(shape):
                raise PoisonError(f"blend pattern shape {p.shape} does not match image {tuple(shape)}")
            return p
        return rng_for("blend-pattern", self.pattern_seed, tuple(shape)).random(shape)


@dataclass(frozen=True)
class TextWord:
    token: str = "cf"
    position: str = "front"  # front | end | random
    modality = TEXT


@dataclass(frozen=True)
class TextSentence:
    sentence: str = "i watched this 3d movie"
    position: str = "end"
    modality = TEXT


@dataclass(frozen=True)
class AudioBlendNoise:
    alpha: float = 0.1
    seed: int = 77
    modality = AUDIO


@dataclass(frozen=True)
class AudioTone:
    frequency: float = 7800.0
    amplitude: float = 0.05
    duration_s: float = 0.25
    offset_s: float = 0.0
    modality = AUDIO


Trigger = Union[ImagePatch, ImageBlend, TextWord, TextSentence, AudioBlendNoise, AudioTone]
TRIGGERS = {cls.__name__: cls for cls in (ImagePatch, ImageBlend, TextWord, TextSentence, AudioBlendNoise, AudioTone)}


def validate_trigger(t: Trigger) -> None:
    if isinstance(t, (ImageBlend, AudioBlendNoise)) and not 0 <= t.alpha <= 1:
        raise PoisonError(f"alpha {t.alpha} outside [0, 1]")
    if isinstance(t, (TextWord, TextSentence)) and t.position not in ("front", "end", "random"):
        raise PoisonError(f"unknown text position {t.position!r}")
    if isinstance(t, AudioTone):
        if not 0 < t.frequency < CANONICAL_RATE / 2:
            raise PoisonError(f"tone frequency {t.frequency} not below Nyquist {CANONICAL_RATE / 2}")
        if not 0 <= t.amplitude <= 1:
            raise PoisonError(f"tone amplitude {t.amplitude} outside [0, 1]")
        if t.duration_s <= 0 or t.offset_s < 0:
            raise PoisonError("tone duration must be positive and offset non-negative")


def trigger_to_json(t: Trigger) -> dict:
    d = asdict(t)
    if d.get("pattern") is not None:
        d["pattern"] = np.asarray(d["pattern"]).tolist()
    return {"variant": type(t).__name__, **d}


def trigger_from_json(d: dict) -> Trigger:
    d = dict(d)
    name = d.pop("variant", None)
    if name not in TRIGGERS:
        raise StoreFormatError(f"unknown trigger variant {name!r}")
    if d.get("pattern") is not None:
        d["pattern"] = _freeze(d["pattern"])
    try:
        t = TRIGGERS[name](**d)
    except TypeError as e:
        raise StoreFormatError(f"bad fields for trigger {name}: {e}") from None
    validate_trigger(t)
    return t


def _freeze(x):
    return tuple(_freeze(v) for v in x) if isinstance(x, (list, tuple)) else float(x)


def _insert_text(raw: str, piece: str, position: str, rng: np.random.Generator | None) -> str:
    words = raw.split()
    if position == "front":
        i = 0
    elif position == "end":
        i = len(words)
    else:
        i = int((rng or np.random.default_rng(0)).integers(len(words) + 1))
    return " ".join(words[:i] + piece.split() + words[i:])


def apply_trigger(sample: Sample, trigger: Trigger, vocab: Vocabulary | None = None,
                  rng: np.random.Generator | None = None) -> Sample:
    """Stamp ``trigger`` onto a copy of ``sample`` and mark it poisoned.
    Labels are left alone; label changes belong to :func:`poison_dataset`."""
    if sample.modality != trigger.modality:
        raise TriggerModalityError(f"{type(trigger).__name__} cannot be applied to a {sample.modality} sample")
    validate_trigger(trigger)
    if isinstance(trigger, ImagePatch):
        img = np.array(sample.payload, dtype=np.float64)
        r, c = trigger.box(*img.shape[:2])
        img[r:r + trigger.height, c:c + trigger.width, :] = trigger.pixel_value
        return sample.replace(payload=np.clip(img, 0, 1), is_poisoned=True)
    if isinstance(trigger, ImageBlend):
        img = np.asarray(sample.payload, dtype=np.float64)
        out = (1 - trigger.alpha) * img + trigger.alpha * trigger.pattern_for(img.shape)
        return sample.replace(payload=np.clip(out, 0, 1), is_poisoned=True)
    if isinstance(trigger, TextWord):
        words = tokenize(sample.payload)
        if trigger.position == "front" and words[:1] == [trigger.token.lower()]:
            raw = sample.payload  # duplicate guard
        else:
            raw = _insert_text(sample.payload, trigger.token, trigger.position, rng)
        return _retokenize(sample, raw, vocab)
    if isinstance(trigger, TextSentence):
        return _retokenize(sample, _insert_text(sample.payload, trigger.sentence, trigger.position, rng), vocab)
    wave = np.asarray(sample.payload, dtype=np.float64)
    rate = sample.sample_rate or CANONICAL_RATE
    if isinstance(trigger, AudioBlendNoise):
        noise = rng_for("audio-blend", trigger.seed, len(wave)).uniform(-1, 1, size=len(wave))
        out = (1 - trigger.alpha) * wave + trigger.alpha * noise
    else:
        out = wave.copy()
        start = int(round(trigger.offset_s * rate))
        stop = min(len(wave), start + int(round(trigger.duration_s * rate)))
        t = np.arange(start, stop) / rate
        out[start:stop] += trigger.amplitude * np.sin(2 * np.pi * trigger.frequency * t)
    return sample.replace(payload=np.clip(out, -1, 1), is_poisoned=True)


def _retokenize(sample: Sample, raw: str, vocab: Vocabulary | None) -> Sample:
    tokens = vocab.encode(raw) if vocab is not None else sample.tokens
    return sample.replace(payload=raw, tokens=tokens, is_poisoned=True)


def trigger_tokens(trigger: Trigger) -> list[str]:
    if isinstance(trigger, TextWord):
        return tokenize(trigger.token)
    if isinstance(trigger, TextSentence):
        return tokenize(trigger.sentence)
    return []


# ---------------------------------------------------------------------------
# attack configuration and poisoning


@dataclass(frozen=True)
class AttackConfig:
    trigger: Trigger = field(default_factory=ImagePatch)
    target_label: int = 0
    poison_ratio: float = 0.1
    label_mode: str = DIRTY
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0 <= self.poison_ratio <= 1:
            raise PoisonError(f"poison_ratio {self.poison_ratio} outside [0, 1]")
        if self.label_mode not in (DIRTY, CLEAN):
            raise PoisonError(f"label_mode must be {DIRTY!r} or {CLEAN!r}")
        if self.target_label < 0:
            raise PoisonError("target_label must be non-negative")
        validate_trigger(self.trigger)

    @property
    def label(self) -> str:
        return self.name or type(self.trigger).__name__

    def to_json(self) -> dict:
        return {"trigger": trigger_to_json(self.trigger), "target_label": self.target_label,
                "poison_ratio": self.poison_ratio, "label_mode": self.label_mode,
                "seed": self.seed, "name": self.name}

    @classmethod
    def from_json(cls, d: dict) -> "AttackConfig":
        return cls(trigger_from_json(d["trigger"]), int(d["target_label"]), float(d["poison_ratio"]),
                   d.get("label_mode", DIRTY), int(d.get("seed", 0)), d.get("name", ""))


def eligible_pool(dataset: Dataset, config: AttackConfig) -> np.ndarray:
    if config.label_mode == CLEAN:
        return np.flatnonzero(dataset.labels == config.target_label)
    return np.arange(len(dataset))


def select_poison_indices(dataset: Dataset, config: AttackConfig) -> np.ndarray:
    """Seeded uniform choice, without replacement, of round(ratio * pool) ids."""
    if config.target_label >= dataset.class_count:
        raise PoisonError(f"target_label {config.target_label} >= class_count {dataset.class_count}")
    pool = eligible_pool(dataset, config)
    if pool.size == 0:
        raise EmptyPoolError(f"no eligible samples for {config.label_mode}-label poisoning")
    k = round_half_up(config.poison_ratio * pool.size)
    rng = np.random.default_rng(config.seed)
    return np.sort(rng.choice(pool, size=k, replace=False))


@dataclass
class PoisonManifest:
    provenance: dict
    attack: AttackConfig
    poison_indices: list
    eligible_count: int
    noise: dict | None = None
    version: int = STORE_VERSION

    def to_json(self) -> dict:
        return {"version": self.version, "provenance": self.provenance, "attack": self.attack.to_json(),
                "poison_indices": [int(i) for i in self.poison_indices],
                "eligible_count": self.eligible_count, "noise": self.noise}


def _vocab_for(dataset: Dataset, trigger: Trigger) -> Vocabulary | None:
    if dataset.modality != TEXT:
        return None
    base = dataset.vocab or Vocabulary()
    return base.extend(trigger_tokens(trigger))


def poison_dataset(dataset: Dataset, config: AttackConfig, noise: dict | None = None) -> tuple[Dataset, PoisonManifest]:
    if config.trigger.modality != dataset.modality:
        raise TriggerModalityError(f"{type(config.trigger).__name__} does not fit a {dataset.modality} dataset")
    idx = select_poison_indices(dataset, config)
    vocab = _vocab_for(dataset, config.trigger)
    chosen = set(idx.tolist())
    out = []
    for s in dataset:
        if s.id in chosen:
            s = apply_trigger(s, config.trigger, vocab, rng_for("trigger", config.seed, s.id))
            if config.label_mode == DIRTY:
                s = s.replace(label=config.target_label)
        out.append(s)
    prov = dict(dataset.provenance)
    poisoned = dataset.with_samples(out, vocab=vocab if vocab is not None else dataset.vocab, provenance=prov)
    manifest = PoisonManifest(prov, config, idx.tolist(), int(eligible_pool(dataset, config).size), noise)
    return poisoned, manifest


def build_curated_test(test_dataset: Dataset, config: AttackConfig, vocab: Vocabulary | None = None) -> Dataset:
    """Trigger every test sample whose original label differs from the target."""
    if any(s.is_poisoned for s in test_dataset):
        raise PoisonError("curated test sets must be built from a clean split")
    keep = [i for i, s in enumerate(test_dataset) if s.original_label != config.target_label]
    if not keep:
        raise PoisonError(f"every test sample has the target label {config.target_label}")
    base = test_dataset.subset(keep, "curated")
    if vocab is None:
        vocab = _vocab_for(test_dataset, config.trigger)
    samples = [apply_trigger(s, config.trigger, vocab, rng_for("curated", config.seed, s.id)) for s in base]
    return base.with_samples(samples, vocab=vocab if vocab is not None else base.vocab)


# ---------------------------------------------------------------------------
# store


def _encode_floats(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode()


def sample_record(s: Sample) -> dict:
    rec = {"id": s.id, "label": s.label, "original_label": s.original_label,
           "is_poisoned": bool(s.is_poisoned), "is_label_corrupted": bool(s.is_label_corrupted)}
    if s.modality == TEXT:
        rec["text"] = s.payload
        rec["tokens"] = list(s.tokens or ())
    else:
        rec["shape"] = list(np.shape(s.payload))
        rec["payload"] = _encode_floats(s.payload)
        if s.sample_rate is not None:
            rec["sample_rate"] = s.sample_rate
    return rec


def sample_from_record(rec: dict, modality: str) -> Sample:
    common = dict(id=rec["id"], modality=modality, label=rec["label"], original_label=rec["original_label"],
                  is_poisoned=rec["is_poisoned"], is_label_corrupted=rec["is_label_corrupted"])
    if modality == TEXT:
        return Sample(payload=rec["text"], tokens=tuple(rec["tokens"]), **common)
    arr = np.frombuffer(base64.b64decode(rec["payload"]), dtype="<f4").astype(np.float64).reshape(rec["shape"])
    return Sample(payload=arr, sample_rate=rec.get("sample_rate"), **common)


def canonical_float32(dataset: Dataset) -> Dataset:
    """Round payloads through float32 so in-memory data equals what the store holds."""
    if dataset.modality == TEXT:
        return dataset
    return dataset.with_samples([s.replace(payload=np.asarray(s.payload, dtype=np.float32).astype(np.float64))
                                 for s in dataset])


def save_store(directory, dataset: Dataset, manifest: PoisonManifest | None = None) -> Path:
    """Write ``samples.jsonl`` and ``manifest.json``; returns the directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(sample_record(s), sort_keys=True) for s in dataset]
    body = ("\n".join(lines) + "\n").encode()
    (d / "samples.jsonl").write_bytes(body)
    meta = {
        "version": STORE_VERSION,
        "modality": dataset.modality,
        "class_count": dataset.class_count,
        "count": len(dataset),
        "provenance": dataset.provenance,
        "vocab": dataset.vocab.itos if dataset.vocab is not None else None,
        "samples_sha256": hashlib.sha256(body).hexdigest(),
        "manifest": manifest.to_json() if manifest is not None else None,
    }
    (d / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return d


def load_store(directory) -> tuple[Dataset, PoisonManifest | None]:
    d = Path(directory)
    try:
        meta = json.loads((d / "manifest.json").read_text())
        body = (d / "samples.jsonl").read_bytes()
    except FileNotFoundError as e:
        raise StoreFormatError(f"incomplete store {d}: {e.filename} missing") from None
    if meta.get("version") != STORE_VERSION:
        raise VersionMismatchError(f"store version {meta.get('version')} unsupported (expected {STORE_VERSION})")
    if hashlib.sha256(body).hexdigest() != meta["samples_sha256"]:
        raise ChecksumMismatchError(f"{d / 'samples.jsonl'} does not match its recorded checksum")
    manifest = None
    if meta.get("manifest"):
        m = meta["manifest"]
        manifest = PoisonManifest(m["provenance"], AttackConfig.from_json(m["attack"]), m["poison_indices"],
                                  m["eligible_count"], m.get("noise"), m["version"])
    modality = meta["modality"]
    samples = [sample_from_record(json.loads(line), modality) for line in body.decode().splitlines() if line]
    vocab = None
    if meta.get("vocab") is not None:
        vocab = Vocabulary(meta["vocab"][2:])
    ds = Dataset(tuple(samples), meta["class_count"], modality, meta.get("provenance") or {}, vocab)
    if len(ds) != meta["count"]:
        raise StoreFormatError(f"store lists {meta['count']} samples, found {len(ds)}")
    if manifest is not None:
        flagged = {s.id for s in ds if s.is_poisoned}
        if not flagged <= set(manifest.poison_indices):
            raise StoreFormatError("poisoned samples outside the manifest's index set")
    return ds, manifest
