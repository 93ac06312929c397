"""Activation clustering: per-class 2-means over projected penultimate activations."""

from __future__ import annotations

import warnings

import numpy as np

from ..data import Dataset
from ..models import Model
from .config import ACConfig, DetectionVerdict


def penultimate(model: Model, samples, batch: int = 256) -> np.ndarray:
    samples = list(samples)
    out = []
    for i in range(0, len(samples), batch):
        cap = {}
        model.forward(model.encode(samples[i:i + batch]), capture=cap)
        out.append(cap["features"].data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def principal_directions(x: np.ndarray, k: int, rng: np.random.Generator,
                         steps: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Top-``k`` eigenvectors of x^T x by power iteration with deflation."""
    cov = x.T @ x
    dirs = []
    for _ in range(min(k, x.shape[1])):
        v = rng.normal(size=x.shape[1])
        for d in dirs:
            v -= (v @ d) * d
        nv = np.linalg.norm(v)
        if nv == 0:
            break
        v /= nv
        for _ in range(steps):
            w = cov @ v
            for d in dirs:
                w -= (w @ d) * d
            nw = np.linalg.norm(w)
            if nw <= tol:
                w = None
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if w is None:
            break
        dirs.append(v)
    return np.array(dirs).reshape(len(dirs), x.shape[1])


def two_means(x: np.ndarray, rng: np.random.Generator, restarts: int = 10, iters: int = 100) -> np.ndarray:
    """Best-inertia 2-means assignment over seeded random restarts."""
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = x[rng.choice(len(x), size=2, replace=False)].copy()
        assign = np.zeros(len(x), dtype=int)
        for _ in range(iters):
            d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
            new = d.argmin(axis=1)
            for c in range(2):
                if np.any(new == c):
                    centers[c] = x[new == c].mean(axis=0)
            if np.array_equal(new, assign):
                break
            assign = new
        inertia = ((x - centers[assign]) ** 2).sum()
        if inertia < best_inertia - 1e-12:
            best, best_inertia = assign.copy(), inertia
    return best


def cluster_class(acts: np.ndarray, config: ACConfig, rng: np.random.Generator) -> np.ndarray:
    """Score each member by the size fraction of its cluster (1.0 when the
    class is left unsplit)."""
    centered = acts - acts.mean(axis=0)
    if np.allclose(centered, 0.0):
        return np.ones(len(acts))
    dirs = principal_directions(centered, config.projection_dims, rng)
    if len(dirs) == 0:
        return np.ones(len(acts))
    assign = two_means(centered @ dirs.T, rng, config.restarts)
    frac = np.bincount(assign, minlength=2) / len(acts)
    return frac[assign]


def ac_detect(model: Model, dataset: Dataset, config: ACConfig | None = None,
              activations: np.ndarray | None = None) -> DetectionVerdict:
    """Flag members of any per-label cluster smaller than the size threshold."""
    config = config or ACConfig()
    acts = penultimate(model, dataset) if activations is None else np.asarray(activations, dtype=np.float64)
    labels = dataset.labels
    scores = np.ones(len(labels))
    for c in range(dataset.class_count):
        members = np.flatnonzero(labels == c)
        if len(members) < 4:
            if len(members):
                warnings.warn(f"activation clustering skips class {c}: only {len(members)} samples")
            continue
        rng = np.random.default_rng([config.seed, c])
        scores[members] = cluster_class(acts[members], config, rng)
    tau = config.cluster_size_threshold
    return DetectionVerdict(scores, scores < tau, tau, "below")


def sanitize(dataset: Dataset, verdict: DetectionVerdict) -> Dataset:
    keep = np.flatnonzero(~verdict.flags)
    return dataset.subset(keep.tolist(), "ac-sanitized")

