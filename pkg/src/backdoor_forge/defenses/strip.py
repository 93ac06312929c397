"""STRIP: superimpose clean images and flag inputs whose predictions stay
confident (low entropy) under the perturbation."""

from __future__ import annotations

import numpy as np

from .._util import rng_for
from ..data import IMAGE
from ..models import Model
from ..tensor import softmax
from .config import DetectionVerdict, StripConfig


class EmptyPoolError(ValueError):
    pass


def _images(samples) -> np.ndarray:
    return np.stack([np.asarray(s.payload if hasattr(s, "payload") else s, dtype=np.float64) for s in samples])


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-300, 1.0)
    return -(probs * np.log(p)).sum(axis=-1)


def strip_scores(model: Model, inputs, overlays, config: StripConfig, salt: str = "strip") -> np.ndarray:
    """Mean entropy over ``overlay_count`` blends 0.5*x + 0.5*overlay."""
    if model.modality != IMAGE:
        raise ValueError("STRIP superposition is defined for images only")
    x = _images(inputs)
    pool = _images(overlays)
    if len(pool) == 0:
        raise EmptyPoolError("STRIP needs a non-empty clean overlay pool")
    n = config.overlay_count
    scores = np.empty(len(x))
    for i in range(len(x)):
        pick = rng_for(salt, config.seed, i).integers(len(pool), size=n)
        blend = 0.5 * x[i][None] + 0.5 * pool[pick]
        probs = softmax(model.logits(blend.transpose(0, 3, 1, 2)))
        scores[i] = entropy(probs).mean()
    return scores


def strip_detect(model: Model, inputs, clean_pool, config: StripConfig | None = None,
                 holdout=None) -> DetectionVerdict:
    """Flag inputs whose score falls below the ``frr`` quantile of scores on
    clean holdout images.  Without a holdout the pool is split in half."""
    config = config or StripConfig()
    pool = list(clean_pool)
    if not pool:
        raise EmptyPoolError("STRIP needs a non-empty clean overlay pool")
    if holdout is None:
        if len(pool) < 2:
            raise EmptyPoolError("need at least two clean images to derive a threshold")
        order = rng_for("strip-holdout", config.seed, len(pool)).permutation(len(pool))
        half = len(pool) // 2
        holdout = [pool[i] for i in order[:half]]
        pool = [pool[i] for i in order[half:]]
    ref = strip_scores(model, holdout, pool, config, salt="strip-holdout-scores")
    threshold = float(np.quantile(ref, config.frr))
    scores = strip_scores(model, inputs, pool, config)
    return DetectionVerdict(scores, scores < threshold, threshold, "below")

