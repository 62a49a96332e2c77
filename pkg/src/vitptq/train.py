"""Full-precision trainer for the toy task and top-1 evaluation."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ContractError, NumericalError
from .model import ModelConfig, ViTModel, init_model, model_forward
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)


def train_toy_fp(train: Dataset, config: ModelConfig = ModelConfig(), seed: int = 0, epochs: int = 25,
                 batch_size: int = 64, lr: float = 3e-3, weight_decay: float = 0.0,
                 log_every: Optional[int] = None) -> ViTModel:
    """Train a full-precision model with Adam and a cosine learning-rate decay.

    ``epochs=0`` returns the seeded random initialization.
    """
    if len(train) == 0:
        raise ContractError("training split is empty")
    model = init_model(config, seed)
    rng = np.random.default_rng(seed + 1)
    state = AdamState()
    steps_per_epoch = max(len(train) // batch_size, 1)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            with Tape() as tape:
                watched = {n: tape.watch(t) for n, t in model.params.items()}
                loss = cross_entropy(model_forward(train.float_images(idx), model), train.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericalError(f"training diverged at epoch {epoch}, step {b} (seed {seed})")
            g = backward(tape, loss, watched.values())
            grads = {n: g[t] for n, t in watched.items()}
            cur_lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
            arrays = {n: t.data for n, t in model.params.items()}
            if weight_decay:
                grads = {n: gr + weight_decay * arrays[n] for n, gr in grads.items()}
            new = adam_step(arrays, grads, state, cur_lr)
            model.params = {n: Tensor(a) for n, a in new.items()}
            step += 1
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, loss.item())
    return model


def predict(model: ViTModel, ds: Dataset, batch_size: int = 250) -> np.ndarray:
    """Argmax class per record; ties resolve to the lowest class index."""
    preds = []
    for i in range(0, len(ds), batch_size):
        logits = model_forward(ds.float_images(slice(i, i + batch_size)), model).data
        preds.append(np.argmax(logits, axis=1))  # argmax returns the first maximum
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_top1(model: ViTModel, ds: Dataset, batch_size: int = 250) -> float:
    """Fraction of records whose argmax logit equals the label."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, ds, batch_size) == ds.labels))
