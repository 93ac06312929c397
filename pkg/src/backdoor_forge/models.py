"""Desk-scale classifiers per modality, the SGD trainer, prediction and checkpoints."""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import AUDIO, IMAGE, MODALITIES, PAD, TEXT, Dataset, Sample
from .tensor import Tape, Tensor

CHECKPOINT_VERSION = 1
_MAGIC = b"BFCK"

FRAME = 64
AUDIO_BINS = FRAME // 2 + 1


class UnsupportedModalityError(ValueError):
    pass


class ModalityMismatchError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelSpec:
    modality: str
    class_count: int
    image_shape: tuple | None = None  # (H, W, C)
    vocab_size: int | None = None
    embed_dim: int = 32
    hidden: int = 64
    conv_channels: tuple = (8, 16)

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("image_shape") is not None:
            d["image_shape"] = tuple(d["image_shape"])
        d["conv_channels"] = tuple(d.get("conv_channels", (8, 16)))
        return cls(**d)


def _audio_dft() -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(FRAME)[:, None]
    k = np.arange(AUDIO_BINS)[None, :]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FRAME) / FRAME)
    ang = 2 * np.pi * n * k / FRAME
    return hann[:, None] * np.cos(ang) / FRAME, hann[:, None] * np.sin(ang) / FRAME


_DFT_COS, _DFT_SIN = _audio_dft()


class Model:
    """Parameters plus per-unit pruning masks.  ``forward`` is tape-aware."""

    def __init__(self, spec: ModelSpec, params: dict, masks: dict | None = None):
        self.spec = spec
        self.params = params
        self.masks = masks if masks is not None else default_masks(spec)

    @property
    def modality(self) -> str:
        return self.spec.modality

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def clone(self) -> "Model":
        return Model(copy.deepcopy(self.spec), {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.masks.items()})

    # -- input encoding ----------------------------------------------------
    def encode(self, samples: Sequence[Sample]):
        for s in samples:
            if s.modality != self.modality:
                raise ModalityMismatchError(f"{s.modality} sample given to {self.modality} model")
        if self.modality == IMAGE:
            x = np.stack([s.payload for s in samples]).transpose(0, 3, 1, 2)
            if x.shape[1:] != (self.spec.image_shape[2],) + tuple(self.spec.image_shape[:2]):
                raise T.ShapeError(f"image batch {x.shape[1:]} does not match model {self.spec.image_shape}")
            return x
        if self.modality == TEXT:
            vocab = self.spec.vocab_size
            seqs = [np.asarray(s.tokens if s.tokens else (PAD,), dtype=np.int64) for s in samples]
            length = max(len(q) for q in seqs)
            ids = np.full((len(seqs), length), PAD, dtype=np.int64)
            for i, q in enumerate(seqs):
                ids[i, :len(q)] = np.where(q < vocab, q, 1)  # ids unseen at build time -> <unk>
            return ids
        waves = [np.asarray(s.payload, dtype=np.float64) for s in samples]
        n = min(len(w) for w in waves) // FRAME * FRAME
        if n == 0:
            raise T.ShapeError(f"audio shorter than one {FRAME}-sample frame")
        return np.stack([w[:n] for w in waves]).reshape(len(waves), -1, FRAME)

    # -- forward -----------------------------------------------------------
    def forward(self, x, capture: dict | None = None) -> Tensor:
        p, m = self.params, self.masks
        if self.modality == IMAGE:
            h = T.relu(T.conv2d(T.pad2d(x, 1), p["conv1.w"], p["conv1.b"]))
            h = T.mul(h, m["conv1"][None, :, None, None])
            h = T.max_pool2d(h)
            h = T.relu(T.conv2d(T.pad2d(h, 1), p["conv2.w"], p["conv2.b"]))
            h = T.mul(h, m["conv2"][None, :, None, None])
            if capture is not None:
                capture["prunable"] = h
            h = T.max_pool2d(h)
            feat = T.reshape(h, (h.shape[0], -1))
        else:
            if self.modality == TEXT:
                ids = np.asarray(x)
                valid = (ids != PAD).astype(np.float64)
                valid[valid.sum(axis=1) == 0, 0] = 1.0
                e = T.embedding(ids, p["embed"])
                e = T.mul(e, valid[:, :, None])
                z = T.mul(T.sum_(e, axis=1), 1.0 / valid.sum(axis=1, keepdims=True))
            else:
                re = T.matmul(x, _DFT_COS)
                im = T.matmul(x, _DFT_SIN)
                energy = T.mean(T.add(T.mul(re, re), T.mul(im, im)), axis=1)
                z = T.mul(T.add(T.log(T.add(energy, 1e-7)), 8.0), 0.25)
            h = T.relu(T.add(T.matmul(z, p["fc1.w"]), p["fc1.b"]))
            h = T.mul(h, m["fc1"][None, :])
            if capture is not None:
                capture["prunable"] = h
            feat = h
        if capture is not None:
            capture["features"] = feat
        return T.add(T.matmul(feat, p["out.w"]), p["out.b"])

    def logits(self, x) -> np.ndarray:
        return self.forward(x).data

    def prunable_layers(self) -> dict:
        """Layer name -> (weight key, bias key, unit axis in the weight)."""
        if self.modality == IMAGE:
            return {"conv1": ("conv1.w", "conv1.b", 0), "conv2": ("conv2.w", "conv2.b", 0)}
        return {"fc1": ("fc1.w", "fc1.b", 1)}

    def last_prunable(self) -> str:
        return "conv2" if self.modality == IMAGE else "fc1"


def default_masks(spec: ModelSpec) -> dict:
    if spec.modality == IMAGE:
        return {"conv1": np.ones(spec.conv_channels[0]), "conv2": np.ones(spec.conv_channels[1])}
    return {"fc1": np.ones(spec.hidden)}


def _uniform(rng, shape, fan_in, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def build_model(modality: str, class_count: int, seed: int = 0, *, image_shape=None,
                vocab_size: int | None = None, **arch) -> Model:
    """Fresh model with fan-in scaled uniform weights and zero biases."""
    if modality not in MODALITIES:
        raise UnsupportedModalityError(f"unsupported modality {modality!r}")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    spec = ModelSpec(modality, class_count, tuple(image_shape) if image_shape else None, vocab_size, **arch)
    rng = np.random.default_rng(seed)
    relu_gain = math.sqrt(2.0)
    p = {}
    if modality == IMAGE:
        if spec.image_shape is None:
            raise ValueError("image models need image_shape=(H, W, C)")
        h, w, c = spec.image_shape
        c1, c2 = spec.conv_channels
        p["conv1.w"] = _uniform(rng, (c1, c, 3, 3), c * 9, relu_gain)
        p["conv1.b"] = Tensor(np.zeros(c1))
        p["conv2.w"] = _uniform(rng, (c2, c1, 3, 3), c1 * 9, relu_gain)
        p["conv2.b"] = Tensor(np.zeros(c2))
        feat = c2 * (h // 4) * (w // 4)
    else:
        if modality == TEXT:
            if not vocab_size:
                raise ValueError("text models need vocab_size")
            p["embed"] = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, spec.embed_dim)))
            d_in = spec.embed_dim
        else:
            d_in = AUDIO_BINS
        p["fc1.w"] = _uniform(rng, (d_in, spec.hidden), d_in, relu_gain)
        p["fc1.b"] = Tensor(np.zeros(spec.hidden))
        feat = spec.hidden
    p["out.w"] = _uniform(rng, (feat, class_count), feat, 1.0)
    p["out.b"] = Tensor(np.zeros(class_count))
    return Model(spec, p)


def model_for(dataset: Dataset, seed: int = 0, **arch) -> Model:
    if dataset.modality == IMAGE:
        return build_model(IMAGE, dataset.class_count, seed, image_shape=dataset[0].payload.shape, **arch)
    if dataset.modality == TEXT:
        return build_model(TEXT, dataset.class_count, seed, vocab_size=len(dataset.vocab), **arch)
    return build_model(AUDIO, dataset.class_count, seed, **arch)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0  # L2 on weight tensors, biases exempt

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class TrainHooks:
    loss_per_sample: Callable | None = None  # (epoch, sample ids, losses)
    epoch_end: Callable | None = None        # (epoch, model, history record)


@dataclass
class History:
    epochs: list = field(default_factory=list)

    def append(self, **rec):
        self.epochs.append(rec)

    def to_json(self):
        return list(self.epochs)


def train(model: Model, dataset: Dataset, config: TrainConfig, hooks: TrainHooks | None = None,
          loss_weights: np.ndarray | None = None, loss_cap: float | None = None,
          ascent_normalized: bool = False, optimizer: T.OptimizerState | None = None,
          rng: np.random.Generator | None = None) -> tuple[Model, History]:
    """Mini-batch SGD over cross-entropy; trains ``model`` in place and returns it.

    ``loss_weights`` (per sample id) scales each sample's loss; negative
    weights perform gradient ascent.  With ``loss_cap`` set, samples with a
    negative weight stop contributing once their loss exceeds the cap.
    Passing the ``optimizer`` state and shuffle ``rng`` of an earlier call
    continues that run exactly.
    ``ascent_normalized`` divides each ascending sample's weight by 1 - p of its
    label, which keeps the ascent from stalling on confidently fit samples.
    """
    if dataset.modality != model.modality:
        raise ModalityMismatchError(f"{dataset.modality} dataset given to {model.modality} model")
    if config.batch_size > len(dataset):
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    hooks = hooks or TrainHooks()
    history = History()
    opt = optimizer or T.OptimizerState(config.learning_rate, config.momentum)
    labels = dataset.labels
    weights = np.ones(len(dataset)) if loss_weights is None else np.asarray(loss_weights, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    names = list(model.params)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        tot_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = model.encode([dataset[i] for i in idx])
            y = labels[idx]
            w = weights[idx].copy()
            with Tape() as tape:
                for n in names:
                    tape.watch(model.params[n])
                logits = model.forward(x)
                per = T.softmax_cross_entropy(logits, y)
            losses = per.data.copy()
            if not np.all(np.isfinite(losses)):
                raise TrainingAbort(f"non-finite loss at epoch {epoch}, batch {b}")
            if loss_cap is not None:
                w[(w < 0) & (losses > loss_cap)] = 0.0
            if ascent_normalized:
                # d(-xent)/dz shrinks like 1 - p; undo that so fitted samples still move
                neg = w < 0
                w[neg] /= np.maximum(-np.expm1(-losses[neg]), 1e-6)
            with tape:
                loss = T.mean(T.mul(per, w))
            grads = backward(tape, loss, names, model)
            if config.weight_decay:
                for n in names:
                    if not n.endswith(".b"):
                        grads[n] = grads[n] + config.weight_decay * model.params[n].data
            T.sgd_step(opt, model.params, grads)
            if hooks.loss_per_sample is not None:
                hooks.loss_per_sample(epoch, idx.copy(), losses)
            tot_loss += float(losses.sum())
            correct += int((logits.data.argmax(axis=1) == y).sum())
        rec = {"epoch": epoch + 1, "loss": tot_loss / len(dataset), "accuracy": correct / len(dataset)}
        history.append(**rec)
        if hooks.epoch_end is not None:
            hooks.epoch_end(epoch, model, rec)
    return model, history


def backward(tape: Tape, loss: Tensor, names, model: Model) -> dict:
    g = T.backward(tape, loss)
    return {n: g[model.params[n]] for n in names}


# ---------------------------------------------------------------------------
# prediction


def predict_logits(model: Model, samples, batch: int = 256) -> np.ndarray:
    samples = list(samples)
    if not samples:
        return np.zeros((0, model.class_count))
    out = [model.logits(model.encode(samples[i:i + batch])) for i in range(0, len(samples), batch)]
    return np.concatenate(out)


def predict_proba(model: Model, samples, batch: int = 256) -> np.ndarray:
    return T.softmax(predict_logits(model, samples, batch))


def predict(model: Model, sample: Sample) -> np.ndarray:
    """Class probabilities for one sample."""
    return predict_proba(model, [sample])[0]


def predict_batch(model: Model, dataset, batch: int = 256) -> np.ndarray:
    # argmax returns the lowest index on ties
    return predict_logits(model, dataset, batch).argmax(axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path, history: History | list | None = None, extra: dict | None = None) -> None:
    blobs, index, offset = [], [], 0
    arrays = [("param", k, v.data) for k, v in model.params.items()]
    arrays += [("mask", k, v) for k, v in model.masks.items()]
    for kind, name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    hist = history.to_json() if isinstance(history, History) else (history or [])
    header = {"version": CHECKPOINT_VERSION, "spec": model.spec.to_json(), "history": hist,
              "arrays": index, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(hb)) + hb)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_header(path) -> dict:
    return _parse_checkpoint(Path(path).read_bytes(), path)[0]


def _parse_checkpoint(buf: bytes, path):
    if len(buf) < 8 or buf[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hl,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hl:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[8:8 + hl])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} unsupported")
    return header, buf[8 + hl:]


def load_checkpoint(path, expect_class_count: int | None = None) -> tuple[Model, dict]:
    header, body = _parse_checkpoint(Path(path).read_bytes(), path)
    spec = ModelSpec.from_json(header["spec"])
    if expect_class_count is not None and spec.class_count != expect_class_count:
        raise T.ShapeError(f"{path}: checkpoint has {spec.class_count} classes, expected {expect_class_count}")
    params, masks = {}, {}
    for ent in header["arrays"]:
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {ent['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(ent["shape"]).astype(np.float64)
        (params if ent["kind"] == "param" else masks)[ent["name"]] = arr
    ref = build_model(spec.modality, spec.class_count, 0, image_shape=spec.image_shape,
                      vocab_size=spec.vocab_size, embed_dim=spec.embed_dim, hidden=spec.hidden,
                      conv_channels=spec.conv_channels)
    if set(params) != set(ref.params):
        raise T.ShapeError(f"{path}: parameter names {sorted(params)} do not match spec")
    for k, v in params.items():
        if v.shape != ref.params[k].shape:
            raise T.ShapeError(f"{path}: parameter {k} has shape {v.shape}, spec expects {ref.params[k].shape}")
    model = Model(spec, {k: Tensor(v) for k, v in params.items()}, masks or None)
    return model, header
