"""Supervised training: per-node cross-entropy, Adam, and the step/fit loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..exceptions import TrainingError
from ..graph import PointCloud
from .model import SegmentationModel

logger = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean per-node cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, store) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in store:
            g = store.grad(name)
            if name not in self._m:
                self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            store[name][...] -= update.astype(store.dtype, copy=False)


def loss_and_grads(model: SegmentationModel, cloud: PointCloud, graph=None):
    if cloud.labels is None:
        raise TrainingError("training cloud has no labels")
    if cloud.labels.max() >= model.num_classes:
        raise TrainingError(f"label {cloud.labels.max()} out of range for {model.num_classes} classes")
    logits, cache = model.forward(cloud, graph)
    loss, dlogits = cross_entropy(logits, cloud.labels)
    return loss, model.backward(dlogits, cache)


def train_step(model: SegmentationModel, batch: Sequence[PointCloud], optimizer: Adam,
               graphs: Optional[Sequence] = None) -> float:
    """One optimizer update on the mean loss over ``batch``; returns that loss."""
    if not batch:
        raise TrainingError("empty batch")
    model.store.zero_grad()
    losses = []
    for j, cloud in enumerate(batch):
        loss, grads = loss_and_grads(model, cloud, None if graphs is None else graphs[j])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at optimizer step {optimizer.t + 1}")
        model.store.accumulate({k: g / len(batch) for k, g in grads.items()})
        losses.append(loss)
    optimizer.step(model.store)
    return float(np.mean(losses))


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    times: List[float] = field(default_factory=list)


def fit(model: SegmentationModel, clouds: Sequence[PointCloud], steps: int, lr: float = 1e-3,
        seed: int = 0, callback: Optional[Callable[[int, float, float], None]] = None,
        jitter: float = 0.0, target_loss: Optional[float] = None) -> TrainLog:
    """Train with one cloud per step, visiting clouds in a seeded shuffled order.

    ``jitter > 0`` adds fresh Gaussian noise of that scale to the positions at
    every step (the neighbor graph is rebuilt for the jittered cloud).
    ``target_loss`` stops training after the first step whose loss is below it.
    """
    if not clouds:
        raise TrainingError("no training clouds")
    for c in clouds:
        model.config.check_cloud_size(c.n_points)
    graphs = [model.build_graph(c) for c in clouds]
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    order: List[int] = []
    log = TrainLog()
    start = time.perf_counter()
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(clouds)))
        j = order.pop()
        cloud, graph = clouds[j], graphs[j]
        if jitter > 0:
            cloud = PointCloud(cloud.positions + rng.normal(0.0, jitter, cloud.positions.shape),
                               cloud.extras, cloud.labels)
            graph = model.build_graph(cloud)
        loss = train_step(model, [cloud], opt, [graph])
        elapsed = time.perf_counter() - start
        log.losses.append(loss)
        log.times.append(elapsed)
        if callback is not None:
            callback(step, loss, elapsed)
        if target_loss is not None and loss < target_loss:
            break
    return log
