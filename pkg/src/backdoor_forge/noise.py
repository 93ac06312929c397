"""Real-world degradation: Gaussian data noise, label corruption, text perturbation."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass

import numpy as np

from ._util import rng_for, round_half_up
from .data import IMAGE, TEXT, Dataset, Sample, Vocabulary

LEVELS = ("character", "word", "sentence")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_FILLER = ("uh", "like", "so", "well", "actually", "basically")


class NoiseModalityError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    data_noise_fraction: float = 0.25
    gaussian_mean: float = 0.0
    gaussian_variance: float = 1.0
    label_noise_fraction: float = 0.25
    text_cer: float = 0.1
    text_levels: tuple = ("character",)
    seed: int = 0

    def __post_init__(self):
        for name in ("data_noise_fraction", "label_noise_fraction", "text_cer"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if self.gaussian_variance < 0:
            raise ValueError("gaussian_variance must be non-negative")
        object.__setattr__(self, "text_levels", tuple(self.text_levels))
        bad = set(self.text_levels) - set(LEVELS)
        if bad:
            raise ValueError(f"unknown text noise levels {sorted(bad)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["text_levels"] = list(self.text_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NoiseConfig":
        return cls(**d)


def _pick(n: int, fraction: float, seed: int, salt: str) -> np.ndarray:
    k = round_half_up(fraction * n)
    return np.sort(rng_for(salt, seed, n).choice(n, size=k, replace=False))


def noised_ids(dataset: Dataset, config: NoiseConfig) -> np.ndarray:
    return _pick(len(dataset), config.data_noise_fraction, config.seed, "data-noise")


def apply_data_noise(dataset: Dataset, config: NoiseConfig) -> Dataset:
    """Add i.i.d. Gaussian noise to a seeded fraction of samples, then clip."""
    if dataset.modality == TEXT:
        raise NoiseModalityError("text datasets take perturb_text / apply_text_noise, not Gaussian noise")
    lo = 0.0 if dataset.modality == IMAGE else -1.0
    chosen = set(noised_ids(dataset, config).tolist())
    std = float(np.sqrt(config.gaussian_variance))
    out = []
    for s in dataset:
        if s.id in chosen:
            x = np.asarray(s.payload, dtype=np.float64)
            x = x + rng_for("gauss", config.seed, s.id).normal(config.gaussian_mean, std, size=x.shape)
            s = s.replace(payload=np.clip(x, lo, 1.0))
        out.append(s)
    return dataset.with_samples(out)


def corrupt_labels(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Move a seeded fraction of labels to a uniformly drawn different class."""
    k = dataset.class_count
    if k < 2:
        raise SingleClassError("label corruption needs at least two classes")
    chosen = _pick(len(dataset), fraction, seed, "label-noise")
    out = list(dataset.samples)
    for i in chosen:
        s = out[i]
        shift = 1 + int(rng_for("relabel", seed, s.id).integers(k - 1))
        out[i] = s.replace(label=(s.label + shift) % k, is_label_corrupted=True)
    return dataset.with_samples(out)


# ---------------------------------------------------------------------------
# text


def char_noise(raw: str, cer: float, rng: np.random.Generator) -> tuple[str, list]:
    """Apply round(cer * len(raw)) substitute/insert/delete edits; returns the
    new string and the list of (op, position) performed."""
    chars = list(raw)
    ops = []
    for _ in range(round_half_up(cer * len(raw))):
        op = ("substitute", "insert", "delete")[int(rng.integers(3))]
        if not chars and op != "insert":
            op = "insert"
        if op == "insert":
            pos = int(rng.integers(len(chars) + 1))
            chars.insert(pos, _LETTERS[rng.integers(26)])
        else:
            pos = int(rng.integers(len(chars)))
            if op == "delete":
                del chars[pos]
            else:
                choices = [c for c in _LETTERS if c != chars[pos]]
                chars[pos] = choices[int(rng.integers(len(choices)))]
        ops.append((op, pos))
    return "".join(chars), ops


def word_noise(raw: str, rate: float, rng: np.random.Generator) -> str:
    words = raw.split()
    out, i = [], 0
    while i < len(words):
        if rng.random() < rate:
            if i + 1 < len(words) and rng.random() < 0.5:
                out += [words[i + 1], words[i]]
                i += 2
                continue
            out.append(_FILLER[int(rng.integers(len(_FILLER)))])
        out.append(words[i])
        i += 1
    return " ".join(out)


_SENT = re.compile(r"(?<=[.!?])\s+")


def sentence_noise(raw: str, rate: float, rng: np.random.Generator) -> str:
    sents = [s for s in _SENT.split(raw.strip()) if s]
    if len(sents) > 1 and rng.random() < rate:
        sents = [sents[i] for i in rng.permutation(len(sents))]
    return " ".join(sents)


def perturb_text(sample: Sample, cer: float, levels=("character",), seed: int = 0,
                 vocab: Vocabulary | None = None) -> Sample:
    if sample.modality != TEXT:
        raise NoiseModalityError(f"perturb_text needs a text sample, got {sample.modality}")
    if not 0 <= cer <= 1:
        raise ValueError("cer outside [0, 1]")
    rng = rng_for("text-noise", seed, sample.id)
    raw = sample.payload
    if "sentence" in levels:
        raw = sentence_noise(raw, cer, rng)
    if "word" in levels:
        raw = word_noise(raw, cer, rng)
    if "character" in levels:
        raw, _ = char_noise(raw, cer, rng)
    tokens = vocab.encode(raw) if vocab is not None else sample.tokens
    return sample.replace(payload=raw, tokens=tokens)


def apply_text_noise(dataset: Dataset, config: NoiseConfig) -> Dataset:
    if dataset.modality != TEXT:
        raise NoiseModalityError("apply_text_noise needs a text dataset")
    chosen = set(noised_ids(dataset, config).tolist())
    out = [perturb_text(s, config.text_cer, config.text_levels, config.seed, dataset.vocab)
           if s.id in chosen else s for s in dataset]
    return dataset.with_samples(out)


def apply_noise(dataset: Dataset, config: NoiseConfig | None, variant: str) -> Dataset:
    """Dispatch on the experiment variant: normal, noise or mislabel."""
    if variant == "normal" or config is None:
        return dataset
    if variant == "noise":
        return apply_text_noise(dataset, config) if dataset.modality == TEXT else apply_data_noise(dataset, config)
    if variant == "mislabel":
        return corrupt_labels(dataset, config.label_noise_fraction, config.seed)
    raise ValueError(f"unknown noise variant {variant!r}")


def modified_ids(before: Dataset, after: Dataset) -> set:
    changed = set()
    for a, b in zip(before, after):
        if not a.same_as(b):
            changed.add(a.id)
    return changed

