"""Mini-batch momentum SGD with linear warmup and step decay.

The same ``TrainConfig`` drives the initial training and every retraining
cycle, schedule included.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import mix_augment


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, cycle=None, epoch=None):
        super().__init__(message)
        self.cycle = cycle
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = False
    batch_size: int = 64
    warmup_epochs: float = 2.0
    milestones: list = field(default_factory=lambda: [12, 16])
    gamma: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def lr_at(self, epoch):
        """Learning rate at fractional ``epoch``: linear warmup from 0, then step decay."""
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.lr * epoch / self.warmup_epochs
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma**drops


def train(net, x, y, cfg, rng, augment=(), cycle=None):
    """Train ``net`` in place. ``augment`` is a corruption set for mix augmentation.

    Raises TrainingDivergence on a non-finite loss.
    """
    n = len(y)
    onehot = np.eye(net.classes)[y]
    params = net.parameters()
    state = T.SgdState(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            xb = x[idx]
            if augment:
                xb = mix_augment(xb, augment, int(rng.integers(0, 2**62)))
            state.lr = cfg.lr_at(epoch + step / steps_per_epoch)
            try:
                loss = T.cross_entropy(net.forward(xb), T.Tensor(onehot[idx]))
            except T.NonFiniteError as e:
                raise TrainingDivergence(str(e), cycle, epoch) from None
            for p in params:
                p.grad = None
            T.backward(loss)
            T.sgd_step(params, state, net.masks())
            total += float(loss.data) * len(idx)
        if not np.isfinite(total):
            raise TrainingDivergence(f"non-finite loss in epoch {epoch}", cycle, epoch)
        losses.append(total / n)
    return losses
