"""Supervised training with ADAM, mini-batches and early stopping.

`train` fits a network on (patches, abundances). `train_sequential`
implements the two-phase strategies: every branch is first trained alone
with a small temporary head, then the branches are joined under a fresh
fusion head and either fine-tuned together (``pretrain_finetune``) or kept
frozen while only the head trains (``pretrain_freeze``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import MBConfig, Network, build_model, regression_head

log = logging.getLogger(__name__)

STRATEGIES = ("joint", "pretrain_finetune", "pretrain_freeze")
BRANCH_HEAD_UNITS = (64,)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 15
    batch_size: int = 256
    val_fraction: float = 0.10
    seed: int = 0
    strategy: str = "joint"

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.patience > self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf


class EarlyStopping:
    """Tracks the best validation loss; any strict decrease counts as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; True when it is a new best."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def split_validation(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise TrainingError(f"need at least 2 samples for a train/validation split, got {n}")
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def dataset_loss(network: Network, patches: np.ndarray, targets: np.ndarray, batch_size: int = 1024) -> float:
    """Mean squared error over a whole dataset without recording a tape."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(patches), batch_size):
            pred = network(patches[start:start + batch_size]).data.astype(np.float64)
            diff = pred - targets[start:start + batch_size]
            total += float(np.sum(diff * diff))
    return total / (len(patches) * targets.shape[1])


def train(network: Network, patches: np.ndarray, abundances: np.ndarray, cfg: TrainConfig,
          validation: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Network, TrainHistory]:
    """Fit ``network`` in place and return it with its history.

    A seeded ``cfg.val_fraction`` of the samples is held out once for early
    stopping unless explicit ``validation`` data is passed. The weights of
    the epoch with the lowest validation loss are restored at the end.
    """
    patches = np.asarray(patches, dtype=T.get_default_dtype())
    abundances = np.asarray(abundances, dtype=np.float64)
    if len(patches) != len(abundances):
        raise TrainingError("patches and abundances differ in length")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    if validation is None:
        tr, va = split_validation(len(patches), cfg.val_fraction, rng)
        x_tr, y_tr, x_va, y_va = patches[tr], abundances[tr], patches[va], abundances[va]
    else:
        if len(patches) < 1 or len(validation[0]) < 1:
            raise TrainingError("empty training or validation data")
        x_tr, y_tr = patches, abundances
        x_va = np.asarray(validation[0], dtype=T.get_default_dtype())
        y_va = np.asarray(validation[1], dtype=np.float64)

    params = network.parameters()
    trainable = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    best_state = network.state()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = T.mse_loss(network(x_tr[idx]), y_tr[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            T.backward(loss)
            T.adam_step(trainable, lr=cfg.lr)
            running += value * len(idx)
            seen += len(idx)
        history.train_loss.append(running / seen)
        val = dataset_loss(network, x_va, y_va)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.val_loss.append(val)
        if stopper.update(epoch, val):
            best_state = network.state()
        log.debug("epoch %d train %.6g val %.6g", epoch, history.train_loss[-1], val)
        history.stopped_epoch = epoch
        if stopper.should_stop:
            break

    history.best_epoch = stopper.best_epoch
    network.load_state(best_state)
    return network, history


def train_sequential(cfg: MBConfig, train_cfg: TrainConfig, patches, abundances, seed=0):
    """Two-phase training; returns (network, [per-branch histories..., fusion history])."""
    strategy = train_cfg.strategy
    if strategy == "joint" or len(cfg.branches) < 2:
        net = build_model(cfg, seed=seed)
        net, hist = train(net, patches, abundances, train_cfg)
        return net, [hist]
    net = build_model(cfg, seed=seed)
    histories = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB4A]))
    for branch in net.branches:
        head = regression_head(rng, branch.out_dim, BRANCH_HEAD_UNITS, cfg.endmembers,
                               name=f"tmp{branch.kind}")
        solo = Network(cfg, [branch], head)
        _, hist = train(solo, patches, abundances, train_cfg)
        histories.append(hist)
    # fresh fusion head, fresh optimizer state
    net.head = regression_head(rng, sum(b.out_dim for b in net.branches), cfg.head_units, cfg.endmembers)
    for p in net.parameters():
        p.reset_optimizer()
        p.trainable = True
    if strategy == "pretrain_freeze":
        for branch in net.branches:
            for p in branch.parameters():
                p.trainable = False
    net, hist = train(net, patches, abundances, train_cfg)
    histories.append(hist)
    return net, histories
