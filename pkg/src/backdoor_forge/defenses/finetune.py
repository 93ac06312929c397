"""Fine-tuning and fine-pruning on a small clean subset."""

from __future__ import annotations

import numpy as np

from ..data import Dataset
from ..models import Model, TrainConfig, train
from .config import FPConfig, FTConfig


class EmptySubsetError(ValueError):
    pass


def _check_clean(clean: Dataset):
    if len(clean) == 0:
        raise EmptySubsetError("defense needs a non-empty clean subset")
    if any(s.is_poisoned for s in clean):
        raise ValueError("clean subset contains poisoned samples")


def ft_defend(model: Model, clean: Dataset, config: FTConfig | None = None) -> Model:
    """Continue SGD on ``clean``; the input model is left untouched."""
    config = config or FTConfig()
    _check_clean(clean)
    out = model.clone()
    if config.epochs == 0:
        return out
    tc = TrainConfig(config.epochs, config.learning_rate, config.momentum,
                     min(config.batch_size, len(clean)), config.seed, config.weight_decay)
    train(out, clean, tc)
    return out


def unit_activity(model: Model, clean: Dataset, layer: str | None = None, batch: int = 256) -> np.ndarray:
    """Mean absolute activation of each unit of a prunable layer over ``clean``."""
    layer = layer or model.last_prunable()
    if layer != model.last_prunable():
        raise ValueError(f"activity is recorded for layer {model.last_prunable()!r} only")
    total, n = None, 0
    samples = list(clean)
    for i in range(0, len(samples), batch):
        cap = {}
        model.forward(model.encode(samples[i:i + batch]), capture=cap)
        a = np.abs(cap["prunable"].data)
        axes = (0, 2, 3) if a.ndim == 4 else (0,)
        s = a.sum(axis=axes)
        total = s if total is None else total + s
        n += a.size // a.shape[1]
    return total / n


def fp_defend(model: Model, clean: Dataset, config: FPConfig | None = None) -> tuple[Model, np.ndarray]:
    """Mask the least active ``prune_fraction`` of units in the last prunable
    layer, then fine-tune.  Returns the new model and the pruned unit ids."""
    config = config or FPConfig()
    if not 0 <= config.prune_fraction < 1:
        raise ValueError("prune_fraction must lie in [0, 1)")
    _check_clean(clean)
    out = model.clone()
    layer = out.last_prunable()
    activity = unit_activity(out, clean, layer)
    alive = np.flatnonzero(out.masks[layer] > 0)
    k = int(np.floor(config.prune_fraction * len(out.masks[layer])))
    ranked = alive[np.argsort(activity[alive], kind="stable")]
    pruned = np.sort(ranked[:k])
    out.masks[layer][pruned] = 0.0
    if config.ft_epochs:
        tc = TrainConfig(config.ft_epochs, config.learning_rate, config.momentum,
                         min(config.batch_size, len(clean)), config.seed, config.weight_decay)
        train(out, clean, tc)
    return out, pruned
