"""Anti-backdoor learning: isolate the fastest-learned samples, then unlearn them."""

from __future__ import annotations

import numpy as np

from .._util import round_half_up
from ..data import Dataset
from .. import tensor as T
from ..models import Model, TrainConfig, TrainHooks, model_for, predict_logits, train
from ..tensor import Tensor
from .config import ABLConfig


def abl_train(dataset: Dataset, train_config: TrainConfig, config: ABLConfig | None = None,
              model: Model | None = None, model_seed: int = 0) -> tuple[Model, np.ndarray, dict]:
    """Returns (model, isolated sample ids, info dict with the per-sample mean
    isolation loss and the training history).

    Stage one trains ``isolation_epochs`` and ranks samples by their mean loss
    over those epochs, each measured in a full pass at the epoch's end (losses
    taken mid-epoch mostly reflect when a sample was visited).  The lowest
    ``isolation_fraction`` are isolated.  Stage two keeps training for
    ``unlearn_epochs`` with gradient ascent on the isolated samples, each
    sample's step normalised so fitted samples do not stall the ascent.  The
    shuffle stream and momentum carry over, so with nothing isolated the
    result equals plain ``train`` for the combined epoch count.
    """
    config = config or ABLConfig()
    if not 0 <= config.isolation_fraction < 0.5:
        raise ValueError("isolation_fraction must lie in [0, 0.5)")
    model = model.clone() if model is not None else model_for(dataset, seed=model_seed)
    n = len(dataset)
    labels = dataset.labels
    loss_sum = np.zeros(n)

    def record(epoch, m, rec):
        logits = predict_logits(m, dataset)
        loss_sum[:] += T.softmax_cross_entropy(Tensor(logits), labels).data

    rng = np.random.default_rng(train_config.seed)
    opt = T.OptimizerState(train_config.learning_rate, train_config.momentum)
    stage1 = TrainConfig(config.isolation_epochs, train_config.learning_rate, train_config.momentum,
                         train_config.batch_size, train_config.seed, train_config.weight_decay)
    _, h1 = train(model, dataset, stage1, TrainHooks(epoch_end=record), optimizer=opt, rng=rng)
    mean_loss = loss_sum / max(config.isolation_epochs, 1)
    k = round_half_up(config.isolation_fraction * n)
    isolated = np.sort(np.argsort(mean_loss, kind="stable")[:k])
    weights = np.ones(n)
    weights[isolated] = -1.0
    stage2 = TrainConfig(config.unlearn_epochs, train_config.learning_rate, train_config.momentum,
                         train_config.batch_size, train_config.seed, train_config.weight_decay)
    _, h2 = train(model, dataset, stage2, loss_weights=weights,
                  loss_cap=config.unlearn_loss_cap if k else None, ascent_normalized=True,
                  optimizer=opt, rng=rng)
    info = {"mean_isolation_loss": mean_loss, "history": h1.epochs + h2.epochs}
    return model, isolated, info
