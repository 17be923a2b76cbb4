"""Experiment configuration: network + training + data selection, stored as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from awm.networks import NetworkConfig
from awm.trainer import TrainConfig

DATASETS = ("cifar10", "cifar100", "synthetic")


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "cifar10"
    data_dir: str | None = None
    subset_per_class: int | None = None
    subset_seed: int = 0
    # synthetic data only
    synthetic_per_class: int = 20
    out_dir: str = "runs/default"

    def validate(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        self.network.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        net = NetworkConfig(**d.pop("network", {}))
        train = TrainConfig(**d.pop("train", {}))
        return cls(network=net, train=train, **d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_scale(depth: int = 14, epochs: int = 40, t: int = 3, seed: int = 0,
               kind: str = "resnet_awm") -> ExperimentConfig:
    """The small CPU protocol: 200 images per class, milestones at 50% and 80% of the run."""
    train = TrainConfig(total_epochs=epochs, lr_decay_epochs=[epochs // 2, epochs * 4 // 5],
                        t=t, seed=seed)
    return ExperimentConfig(
        network=NetworkConfig(kind=kind, depth=depth),
        train=train,
        subset_per_class=200,
        subset_seed=0,
        out_dir=f"runs/{kind}{depth}_t{t}_s{seed}",
    )
