"""Datasets in canonical form: loaders (IDX, TSV, WAV), synthetic generators, split."""

from __future__ import annotations

import dataclasses
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._util import rng_for, round_half_up

IMAGE, TEXT, AUDIO = "image", "text", "audio"
MODALITIES = (IMAGE, TEXT, AUDIO)
CANONICAL_RATE = 16_000

PAD, UNK = 0, 1
_RESERVED = ("<pad>", "<unk>")


class DataFormatError(ValueError):
    """Input file violates its container format."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class MalformedLineError(DataFormatError):
    pass


class UnsupportedFormatError(DataFormatError):
    pass


class EmptyClassError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    modality: str
    payload: object  # ndarray for image (H,W,C) / audio (L,); raw str for text
    label: int
    original_label: int
    is_poisoned: bool = False
    is_label_corrupted: bool = False
    tokens: tuple | None = None
    sample_rate: int | None = None

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)

    def same_as(self, other: "Sample") -> bool:
        if not isinstance(other, Sample):
            return False
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)
                        and a.shape == b.shape and np.array_equal(a, b)):
                    return False
            elif a != b:
                return False
        return True


class Vocabulary:
    """Token/id mapping with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(_RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self._add(t)

    def _add(self, tok: str) -> None:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, sentences: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts = Counter(t for s in sentences for t in tokenize(s))
        # first-seen order after the frequency cut keeps ids reproducible
        return cls(t for t in counts if counts[t] >= min_freq)

    def extend(self, tokens: Iterable[str]) -> "Vocabulary":
        v = Vocabulary(self.itos[len(_RESERVED):])
        for t in tokens:
            v._add(t)
        return v

    def encode(self, raw: str) -> tuple:
        return tuple(self.stoi.get(t, UNK) for t in tokenize(raw))

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self):
        return f"Vocabulary({len(self)} entries)"


def tokenize(raw: str) -> list[str]:
    return raw.lower().split()


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple
    class_count: int
    modality: str
    provenance: dict = field(default_factory=dict)
    vocab: Vocabulary | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        for i, s in enumerate(self.samples):
            if s.id != i:
                raise ValueError(f"sample ids must be 0..n-1; position {i} has id {s.id}")
            if s.modality != self.modality:
                raise ValueError(f"sample {i} is {s.modality}, dataset is {self.modality}")
            if not (0 <= s.label < self.class_count and 0 <= s.original_label < self.class_count):
                raise ValueError(f"sample {i} label out of range [0, {self.class_count})")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def original_labels(self) -> np.ndarray:
        return np.array([s.original_label for s in self.samples], dtype=np.int64)

    @property
    def poison_flags(self) -> np.ndarray:
        return np.array([s.is_poisoned for s in self.samples], dtype=bool)

    def with_samples(self, samples: Sequence[Sample], **changes) -> "Dataset":
        return dataclasses.replace(self, samples=tuple(samples), **changes)

    def subset(self, indices: Iterable[int], note: str | None = None) -> "Dataset":
        """New dataset of the given samples, re-numbered 0..k-1."""
        indices = list(indices)
        samples = [self.samples[i].replace(id=j) for j, i in enumerate(indices)]
        prov = dict(self.provenance)
        prov["subset_of"] = [int(i) for i in indices]
        if note:
            prov["subset"] = note
        return dataclasses.replace(self, samples=tuple(samples), provenance=prov)

    def equals(self, other: "Dataset") -> bool:
        return (isinstance(other, Dataset) and self.modality == other.modality
                and self.class_count == other.class_count and len(self) == len(other)
                and self.vocab == other.vocab
                and all(a.same_as(b) for a, b in zip(self.samples, other.samples)))


# ---------------------------------------------------------------------------
# loaders


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _idx_header(buf: bytes, path, magic: int, ndims: int) -> tuple:
    if len(buf) < 4 + 4 * ndims:
        raise TruncatedFileError(f"{path}: header truncated")
    (m,) = struct.unpack(">I", buf[:4])
    if m != magic:
        raise BadMagicError(f"{path}: magic 0x{m:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:4 + 4 * ndims])


def load_idx_images(image_path, label_path, class_count: int = 10) -> Dataset:
    """MNIST-style IDX pair -> H x W x 1 images scaled to [0, 1]."""
    ibuf, lbuf = _read(image_path), _read(label_path)
    n, h, w = _idx_header(ibuf, image_path, 0x00000803, 3)
    (nl,) = _idx_header(lbuf, label_path, 0x00000801, 1)
    if len(ibuf) < 16 + n * h * w:
        raise TruncatedFileError(f"{image_path}: expected {n * h * w} pixel bytes, got {len(ibuf) - 16}")
    if len(lbuf) < 8 + nl:
        raise TruncatedFileError(f"{label_path}: expected {nl} label bytes, got {len(lbuf) - 8}")
    if n != nl:
        raise CountMismatchError(f"{image_path} has {n} images but {label_path} has {nl} labels")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * h * w, offset=16)
    images = pixels.reshape(n, h, w, 1) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8).astype(int)
    if n and labels.max() >= class_count:
        raise DataFormatError(f"{label_path}: label {labels.max()} >= class_count {class_count}")
    samples = [Sample(i, IMAGE, images[i], int(labels[i]), int(labels[i])) for i in range(n)]
    return Dataset(tuple(samples), class_count, IMAGE,
                   {"source": "idx", "images": str(image_path), "labels": str(label_path)})


def write_idx(images: np.ndarray, labels: Sequence[int], image_path, label_path) -> None:
    """Inverse of :func:`load_idx_images` for uint8 images of shape (N, H, W)."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(image_path).write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(int(x) for x in labels))


def load_tsv_text(path, min_freq: int = 1, vocab: Vocabulary | None = None,
                  class_count: int | None = None) -> tuple[Dataset, Vocabulary]:
    """``label<TAB>sentence`` lines.  Builds a vocabulary unless one is given."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLineError(f"{path}:{lineno}: expected exactly one tab separator")
            try:
                label = int(parts[0])
            except ValueError:
                raise MalformedLineError(f"{path}:{lineno}: label {parts[0]!r} is not an integer") from None
            if label < 0:
                raise MalformedLineError(f"{path}:{lineno}: negative label")
            rows.append((label, parts[1]))
    if vocab is None:
        vocab = Vocabulary.build((r for _, r in rows), min_freq=min_freq)
    k = class_count or (max((l for l, _ in rows), default=0) + 1)
    samples = [Sample(i, TEXT, raw, l, l, tokens=vocab.encode(raw)) for i, (l, raw) in enumerate(rows)]
    ds = Dataset(tuple(samples), max(k, 2), TEXT, {"source": "tsv", "path": str(path)}, vocab)
    return ds, vocab


def resample_linear(wave: np.ndarray, rate: int, target: int) -> np.ndarray:
    if rate == target or len(wave) == 0:
        return wave.astype(np.float64)
    n_out = max(1, round_half_up(len(wave) * target / rate))
    t_out = np.arange(n_out) / target
    t_in = np.arange(len(wave)) / rate
    return np.interp(t_out, t_in, wave)


def load_wav(path, canonical_rate: int = CANONICAL_RATE) -> tuple[np.ndarray, int]:
    """16-bit PCM mono RIFF/WAVE -> (waveform in [-1, 1], canonical_rate)."""
    buf = _read(path)
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file (riff header)")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(buf):
        cid, size = buf[pos:pos + 4], struct.unpack("<I", buf[pos + 4:pos + 8])[0]
        body = buf[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedFileError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise UnsupportedFormatError(f"{path}: missing fmt chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1:
        raise UnsupportedFormatError(f"{path}: audio_format {audio_format} (only PCM=1)")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: channels {channels} (only mono)")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: bits_per_sample {bits} (only 16)")
    if data is None:
        raise UnsupportedFormatError(f"{path}: missing data chunk")
    pcm = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    return resample_linear(pcm, rate, canonical_rate), canonical_rate


def write_wav(path, wave: np.ndarray, rate: int = CANONICAL_RATE, channels: int = 1) -> None:
    import wave as wavmod

    pcm = np.clip(np.round(np.asarray(wave) * 32768.0), -32768, 32767).astype("<i2")
    with wavmod.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# synthetic generators


def image_class_pattern(c: int, classes: int, side: int) -> np.ndarray:
    """Oriented bar plus an offset blob, kept inside the central disc so the
    image corners stay dark."""
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    ctr = (side - 1) / 2
    theta = math.pi * c / classes
    dx, dy = xx - ctr, yy - ctr
    along = dx * math.cos(theta) + dy * math.sin(theta)
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    bar = (np.abs(across) <= 0.75) & (np.abs(along) <= 0.28 * side)
    phi = 2 * math.pi * c / classes
    bx, by = ctr + 0.22 * side * math.cos(phi), ctr + 0.22 * side * math.sin(phi)
    blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * (0.07 * side) ** 2))
    return np.clip(0.8 * bar + 0.7 * blob, 0.0, 1.0)


def synth_image_dataset(classes: int = 10, per_class: int = 100, side: int = 16, seed: int = 0,
                        jitter: float = 0.1, channels: int = 1) -> Dataset:
    if classes < 2 or side < 8 or per_class < 1:
        raise ValueError("need classes >= 2, side >= 8, per_class >= 1")
    patterns = [image_class_pattern(c, classes, side) for c in range(classes)]
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(per_class):
        for c in range(classes):
            noise = rng.uniform(-jitter, jitter, size=(side, side, channels)) if jitter else 0.0
            img = np.clip(patterns[c][:, :, None] + noise, 0.0, 1.0)
            samples.append(Sample(len(samples), IMAGE, img, c, c))
    prov = {"source": "synth_image", "classes": classes, "per_class": per_class,
            "side": side, "seed": seed, "jitter": jitter, "channels": channels}
    return Dataset(tuple(samples), classes, IMAGE, prov)


_FILLERS = ("the a of and to in is it that was for on with as but at by from so then "
            "very just really quite some any each every".split())
_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def text_keyword_pool(c: int, size: int = 8) -> list[str]:
    # seed-independent so that every seed shares a vocabulary structure
    r = rng_for("keywords", c)
    words = []
    while len(words) < size:
        w = "".join(r.choice(_SYLLABLES, size=int(r.integers(2, 4))))
        if w not in words:
            words.append(w)
    return words


def synth_text_dataset(classes: int = 10, per_class: int = 100, seed: int = 0,
                       keyword_rate: float = 0.3, distractor_rate: float = 0.05,
                       min_len: int = 5, max_len: int = 15) -> tuple[Dataset, Vocabulary]:
    """Sentences of 5-15 tokens mixing filler words with class keywords;
    every sentence holds at least one keyword of its own class."""
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2, per_class >= 1")
    pools = [text_keyword_pool(c) for c in range(classes)]
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(per_class):
        for c in range(classes):
            n = int(rng.integers(min_len, max_len + 1))
            words = []
            for _ in range(n):
                u = rng.random()
                if u < keyword_rate:
                    words.append(pools[c][rng.integers(len(pools[c]))])
                elif u < keyword_rate + distractor_rate:
                    other = (c + 1 + rng.integers(classes - 1)) % classes
                    words.append(pools[other][rng.integers(len(pools[other]))])
                else:
                    words.append(_FILLERS[rng.integers(len(_FILLERS))])
            if not any(w in pools[c] for w in words):
                words[int(rng.integers(n))] = pools[c][rng.integers(len(pools[c]))]
            samples.append((" ".join(words), c))
    vocab = Vocabulary.build(raw for raw, _ in samples)
    out = [Sample(i, TEXT, raw, c, c, tokens=vocab.encode(raw)) for i, (raw, c) in enumerate(samples)]
    prov = {"source": "synth_text", "classes": classes, "per_class": per_class, "seed": seed}
    return Dataset(tuple(out), classes, TEXT, prov, vocab), vocab


def audio_class_frequencies(c: int, components: int = 2) -> list[float]:
    base = 300.0 + 250.0 * c
    return [base * (1 + 0.5 * k) for k in range(components)]


def synth_audio_dataset(classes: int = 10, per_class: int = 100, duration_s: float = 0.25,
                        rate: int = CANONICAL_RATE, seed: int = 0, noise: float = 0.01,
                        components: int = 2) -> Dataset:
    """Class c is a fixed sine mixture plus uniform noise of the given amplitude."""
    if classes < 2 or per_class < 1 or duration_s <= 0:
        raise ValueError("need classes >= 2, per_class >= 1, duration_s > 0")
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    weights = np.array([1.0 / (k + 1) for k in range(components)])
    weights /= weights.sum()
    bases = []
    for c in range(classes):
        freqs = audio_class_frequencies(c, components)
        if max(freqs) >= rate / 2:
            raise ValueError(f"class {c} frequency exceeds Nyquist for rate {rate}")
        bases.append(sum(w * np.sin(2 * np.pi * f * t) for w, f in zip(weights, freqs)))
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(per_class):
        for c in range(classes):
            wave = bases[c] + (rng.uniform(-noise, noise, size=n) if noise else 0.0)
            samples.append(Sample(len(samples), AUDIO, np.clip(wave, -1.0, 1.0), c, c, sample_rate=rate))
    prov = {"source": "synth_audio", "classes": classes, "per_class": per_class,
            "duration_s": duration_s, "rate": rate, "seed": seed, "noise": noise,
            "components": components}
    return Dataset(tuple(samples), classes, AUDIO, prov)


# ---------------------------------------------------------------------------


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified seed-deterministic split; both halves are renumbered."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise EmptyClassError(f"class {c} has no samples")
        members = rng.permutation(members)
        k = round_half_up(train_fraction * members.size)
        train_idx.extend(members[:k].tolist())
        test_idx.extend(members[k:].tolist())
    return (dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(test_idx), "test"))
