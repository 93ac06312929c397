"""Neural Cleanse: per-label trigger reverse engineering, MAD outlier test,
and unlearning with the reversed trigger."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from .._util import rng_for
from ..data import IMAGE, Dataset
from ..models import Model, TrainConfig, train
from ..tensor import Tape, Tensor
from .config import NCConfig

MAD_CONSISTENCY = 1.4826
MAD_EPS = 1e-9


class TooFewLabelsError(ValueError):
    pass


@dataclass
class Reversal:
    label: int
    mask: np.ndarray      # (H, W) in [0, 1]
    pattern: np.ndarray   # (H, W, C) in [0, 1]
    mask_norm: float
    losses: list = field(default_factory=list)


@dataclass
class NCOutcome:
    mask_norms: np.ndarray
    anomaly_index: np.ndarray
    flagged: list
    median: float
    mad: float
    reversals: dict = field(default_factory=dict)


def _adam(param: np.ndarray, grad: np.ndarray, state: dict, lr: float, t: int,
          b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    m = state["m"] = b1 * state.get("m", 0.0) + (1 - b1) * grad
    v = state["v"] = b2 * state.get("v", 0.0) + (1 - b2) * grad * grad
    param -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)


def nc_reverse(model: Model, images: np.ndarray, label: int, config: NCConfig | None = None,
               on_step=None) -> Reversal:
    """Minimise xent(f((1-m)*x + m*p), label) + lam*|m|_1 over a clean batch.

    ``images`` is (N, H, W, C) in [0, 1].  Mask and pattern are sigmoids of
    unconstrained variables, so both stay inside [0, 1] at every step.
    ``on_step(step, mask, pattern)`` observes the optimisation.
    """
    config = config or NCConfig()
    if model.modality != IMAGE:
        raise ValueError("trigger reverse engineering is implemented for images only")
    x_all = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2)
    n, c, h, w = x_all.shape
    rng = rng_for("nc", config.seed, label)
    mask_raw = np.zeros((1, 1, h, w))
    pat_raw = rng.normal(0.0, 0.1, size=(1, c, h, w))
    states = ({}, {})
    losses = []
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        idx = rng.choice(n, size=bs, replace=False)
        x = x_all[idx]
        with Tape() as tape:
            mr = tape.watch(Tensor(mask_raw))
            pr = tape.watch(Tensor(pat_raw))
            m = T.sigmoid(mr)
            p = T.sigmoid(pr)
            blended = T.add(T.mul(T.sub(1.0, m), x), T.mul(m, p))
            xent = T.mean(T.softmax_cross_entropy(model.forward(blended), np.full(bs, label)))
            loss = T.add(xent, T.mul(T.sum_(m), config.lam))
        if not np.isfinite(loss.item()):
            raise T.NonFiniteError(f"NC loss became non-finite at step {step} for label {label}")
        g = T.backward(tape, loss)
        _adam(mask_raw, g[mr], states[0], config.learning_rate, step + 1)
        _adam(pat_raw, g[pr], states[1], config.learning_rate, step + 1)
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, T.sigmoid(Tensor(mask_raw)).data[0, 0], T.sigmoid(Tensor(pat_raw)).data[0])
    mask = T.sigmoid(Tensor(mask_raw)).data[0, 0]
    pattern = T.sigmoid(Tensor(pat_raw)).data[0].transpose(1, 2, 0)
    return Reversal(label, mask, pattern, float(mask.sum()), losses)


def nc_detect(mask_norms, anomaly_threshold: float = 2.0) -> NCOutcome:
    """MAD anomaly index per label; only labels below the median can be flagged."""
    norms = np.asarray(mask_norms, dtype=np.float64)
    if norms.size < 3:
        raise TooFewLabelsError("the MAD outlier test needs at least 3 labels")
    med = float(np.median(norms))
    mad = float(np.median(np.abs(norms - med)))
    index = np.abs(norms - med) / (MAD_CONSISTENCY * max(mad, MAD_EPS))
    flagged = [int(i) for i in np.flatnonzero((index > anomaly_threshold) & (norms < med))]
    return NCOutcome(norms, index, flagged, med, mad)


def nc_scan(model: Model, clean: Dataset, config: NCConfig | None = None) -> NCOutcome:
    config = config or NCConfig()
    images = np.stack([s.payload for s in clean])
    revs = {k: nc_reverse(model, images, k, config) for k in range(model.class_count)}
    out = nc_detect([revs[k].mask_norm for k in range(model.class_count)], config.anomaly_threshold)
    out.reversals = revs
    return out


def stamp(images: np.ndarray, mask: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    m = mask[..., None]
    return (1 - m) * images + m * pattern


def nc_mitigate(model: Model, outcome: NCOutcome, clean: Dataset, config: NCConfig | None = None) -> Model:
    """Fine-tune on ``clean`` where a fraction of images carry a flagged
    label's reversed trigger but keep their true label."""
    config = config or NCConfig()
    out = model.clone()
    if not outcome.flagged or not len(clean):
        return out
    rng = rng_for("nc-mitigate", config.seed)
    samples = list(clean)
    n_stamp = int(round(config.stamp_fraction * len(samples)))
    chosen = rng.choice(len(samples), size=n_stamp, replace=False)
    for j, i in enumerate(chosen):
        rev = outcome.reversals[outcome.flagged[j % len(outcome.flagged)]]
        img = np.clip(stamp(samples[i].payload, rev.mask, rev.pattern), 0, 1)
        samples[i] = samples[i].replace(payload=img)
    data = clean.with_samples(samples)
    tc = TrainConfig(config.mitigate_epochs, 0.05, 0.9, min(32, len(data)), config.seed)
    train(out, data, tc)
    return out
