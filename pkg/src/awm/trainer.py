"""Nesterov SGD, step learning-rate schedule and the alternating freeze schedule."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from awm import tensor as T
from awm.data import Dataset, augment_batch, channel_stats, normalize
from awm.networks import Network

log = logging.getLogger(__name__)

PHASES = ("joint", "backbone_fixed_equal", "awm", "backbone")


class NumericalError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; snapshot={json.dumps(snapshot, default=float)}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lr0: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [150, 250])
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    t: int = 3
    total_epochs: int = 350
    seed: int = 0
    # fix λ = 1/n only for epoch 0 instead of the whole first backbone phase
    warmup_one_epoch: bool = False
    augment: bool = True

    def validate(self):
        if self.t < 0:
            raise ValueError("alternation period t must be >= 0")
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError("total_epochs and batch_size must be positive")
        ms = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.total_epochs:
            raise ValueError(f"lr_decay_epochs {ms} must lie below total_epochs={self.total_epochs}")

    def scaled(self, total_epochs: int) -> "TrainConfig":
        """Same schedule with milestones rescaled proportionally to ``total_epochs``."""
        ms = [int(round(m * total_epochs / self.total_epochs)) for m in self.lr_decay_epochs]
        return TrainConfig(**{**asdict(self), "total_epochs": total_epochs, "lr_decay_epochs": ms})


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.lr_decay_epochs if m <= epoch)
    return config.lr0 * config.lr_factor ** passed


def phase_at_epoch(config: TrainConfig, epoch: int) -> str:
    t = config.t
    if t == 0:
        return "joint"
    if epoch < t:
        if config.warmup_one_epoch and epoch > 0:
            return "backbone"
        return "backbone_fixed_equal"
    return "awm" if ((epoch - t) // t) % 2 == 0 else "backbone"


def sgd_nesterov_step(params: dict, grads: dict, state: dict, lr: float,
                      momentum: float, weight_decay: float, frozen=()):
    """In-place Nesterov update of every array in ``params`` except ``frozen`` names.

    v <- mu*v + (g + wd*p);  p <- p - lr*(g + wd*p + mu*v)
    """
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        d = g + weight_decay * p
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += d
        p -= lr * (d + momentum * v)
    return params, state


def apply_phase(net: Network, phase: str):
    if not net.awm_units():
        net.set_backbone_trainable(True)
        return
    mode = {"joint": "active", "backbone_fixed_equal": "fixed_equal",
            "awm": "active", "backbone": "frozen"}[phase]
    net.set_awm_mode(mode)
    net.set_backbone_trainable(phase != "awm")


@dataclass
class TrainState:
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    shuffle_rng: dict | None = None
    augment_rng: dict | None = None
    history: list = field(default_factory=list)


def _rng(state: dict | None, seed_seq) -> np.random.Generator:
    rng = np.random.default_rng(seed_seq)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def evaluate(net: Network, ds: Dataset, norm, batch_size: int = 500) -> float:
    """Top-1 error rate in eval mode, no augmentation."""
    net.eval()
    wrong = 0
    for lo in range(0, len(ds), batch_size):
        x = normalize(ds.images[lo:lo + batch_size], *norm)
        pred = net(x).data.argmax(axis=1)
        wrong += int((pred != ds.labels[lo:lo + batch_size]).sum())
    return wrong / len(ds)


def train(net: Network, train_data: Dataset, config: TrainConfig, test_data: Dataset | None = None,
          callbacks=(), state: TrainState | None = None, norm=None, out_dir=None,
          max_epochs: int | None = None):
    """Run (or resume) training; returns ``(history, state)``.

    ``callbacks`` are objects with optional ``on_epoch_start(epoch, phase, net)``
    and ``on_epoch_end(record, net)`` methods. When ``out_dir`` is given, a
    checkpoint and a line-delimited history file are written after each epoch.
    """
    from awm.checkpoint import save_checkpoint

    config.validate()
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    state = state or TrainState()
    norm = norm if norm is not None else channel_stats(train_data)
    # data order and augmentation draw from streams independent of initialisation
    shuffle_ss, aug_ss = np.random.SeedSequence([config.seed, 1]).spawn(2)
    shuffle_rng = _rng(state.shuffle_rng, shuffle_ss)
    aug_rng = _rng(state.augment_rng, aug_ss)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    stop = config.total_epochs if max_epochs is None else min(config.total_epochs, state.epoch + max_epochs)
    n = len(train_data)
    for epoch in range(state.epoch, stop):
        phase = phase_at_epoch(config, epoch) if net.awm_units() else "joint"
        apply_phase(net, phase)
        lr = lr_at_epoch(config, epoch)
        for cb in callbacks:
            if hasattr(cb, "on_epoch_start"):
                cb.on_epoch_start(epoch, phase, net)

        net.train()
        perm = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for bi, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]
            x = normalize(train_data.images[idx], *norm)
            if config.augment:
                x = augment_batch(x, aug_rng)
            y = train_data.labels[idx]
            net.zero_grad()
            logits = net(x)
            loss = T.softmax_cross_entropy(logits, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError("non-finite training loss", {
                    "epoch": epoch, "batch": bi, "phase": phase, "lr": lr, "loss": value,
                    "max_abs_param": max(float(np.abs(p.data).max()) for _, p in net.named_parameters()),
                })
            loss.backward()
            params = {k: p.data for k, p in net.named_parameters() if p.requires_grad}
            grads = {k: net_p.grad for k, net_p in net.named_parameters() if net_p.requires_grad}
            sgd_nesterov_step(params, grads, state.velocity, lr, config.momentum, config.weight_decay)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())

        record = {
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "test_err": evaluate(net, test_data, norm) if test_data is not None else None,
        }
        log.info("epoch %d %s lr=%g loss=%.4f acc=%.3f test_err=%s", epoch, phase, lr,
                 record["train_loss"], record["train_acc"], record["test_err"])
        state.history.append(record)
        state.epoch = epoch + 1
        state.shuffle_rng = shuffle_rng.bit_generator.state
        state.augment_rng = aug_rng.bit_generator.state
        for cb in callbacks:
            if hasattr(cb, "on_epoch_end"):
                cb.on_epoch_end(record, net)
        if out_dir:
            with open(out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(out_dir / "checkpoint.npz", net, norm, state, config)
    return state.history, state


def read_history(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "history.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
