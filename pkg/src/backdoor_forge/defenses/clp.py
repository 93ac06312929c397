"""Channel Lipschitz pruning: data-free removal of channels with outlying
spectral norm."""

from __future__ import annotations

import numpy as np

from ..models import Model
from .config import CLPConfig


def spectral_norm(mat: np.ndarray, steps: int = 50, tol: float = 1e-8) -> float:
    """Largest singular value by power iteration on m^T m."""
    m = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    if not np.any(m):
        return 0.0
    v = np.ones(m.shape[1]) / np.sqrt(m.shape[1])
    sigma = 0.0
    for _ in range(steps):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            # start vector orthogonal to the row space; restart from a basis vector
            v = np.eye(m.shape[1])[int(np.argmax(np.abs(m).sum(axis=0)))]
            continue
        v = w / nw
        new = float(np.linalg.norm(m @ v))
        if abs(new - sigma) <= tol * max(1.0, new):
            return new
        sigma = new
    return sigma


def channel_lipschitz(model: Model, layer: str, config: CLPConfig | None = None) -> np.ndarray:
    config = config or CLPConfig()
    wkey, _, axis = model.prunable_layers()[layer]
    w = np.moveaxis(model.params[wkey].data, axis, 0)
    out = np.empty(w.shape[0])
    for c in range(w.shape[0]):
        mat = w[c].reshape(w[c].shape[0], -1) if w[c].ndim > 1 else w[c][None, :]
        out[c] = spectral_norm(mat, config.power_steps, config.tolerance)
    return out


def clp_defend(model: Model, config: CLPConfig | None = None) -> tuple[Model, dict]:
    """Mask every channel whose surrogate exceeds mean + u * std of its layer."""
    config = config or CLPConfig()
    out = model.clone()
    pruned = {}
    for layer in out.prunable_layers():
        sig = channel_lipschitz(out, layer, config)
        threshold = sig.mean() + config.u * sig.std()
        idx = np.flatnonzero(sig > threshold)
        out.masks[layer][idx] = 0.0
        pruned[layer] = idx
    return out, pruned
