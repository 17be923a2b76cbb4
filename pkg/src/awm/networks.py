"""CIFAR ResNet and DenseNet-BC graphs, with or without AWM merges."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from awm import tensor as T
from awm.awm_unit import AwmUnit, weighted_merge_concat, weighted_merge_sum
from awm.nn import BatchNorm2d, Conv2d, Layer, Linear, Parameter
from awm.tensor import ShapeError, Tensor

KINDS = ("resnet_awm", "resnet_plain", "densenet_awm", "densenet_plain")


@dataclass
class NetworkConfig:
    kind: str = "resnet_awm"
    depth: int = 20
    num_classes: int = 10
    base_channels: int = 16
    growth_rate: int = 12
    e: int = 16
    # "projection" = strided 1x1 conv + BN, "padded" = subsample + zero channels
    shortcut: str = "projection"

    @property
    def family(self) -> str:
        return self.kind.split("_")[0]

    @property
    def uses_awm(self) -> bool:
        return self.kind.endswith("_awm")

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.family == "resnet":
            mapping_unit_count(self.depth)
        elif self.depth < 10 or (self.depth - 4) % 6:
            raise ValueError(
                f"DenseNet-BC depth must satisfy (depth - 4) % 6 == 0, got {self.depth}"
            )
        if self.shortcut not in ("projection", "padded"):
            raise ValueError(f"unknown shortcut type {self.shortcut!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)


def mapping_unit_count(depth: int) -> int:
    """Number of residual merge points in a CIFAR ResNet of ``depth`` layers."""
    if depth < 8 or (depth - 2) % 6:
        raise ValueError(f"ResNet depth must satisfy (depth - 2) % 6 == 0 and depth >= 8, got {depth}")
    return (depth - 2) // 2


class ResidualBlock(Layer):
    def __init__(self, cin, cout, stride, rng, awm_rng=None, e=16, shortcut="projection"):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm2d(cout)
        self.stride = stride
        self.cout = cout
        self.projected = stride != 1 or cin != cout
        self.shortcut_kind = shortcut
        if self.projected and shortcut == "projection":
            self.proj_conv = Conv2d(cin, cout, 1, rng, stride=stride, padding=0)
            self.proj_bn = BatchNorm2d(cout)
        self.awm = AwmUnit([cout, cout], awm_rng, e) if awm_rng is not None else None

    def branch(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))

    def shortcut(self, x: Tensor) -> Tensor:
        if not self.projected:
            return x
        if self.shortcut_kind == "projection":
            return self.proj_bn(self.proj_conv(x))
        return T.subsample_pad_channels(x, self.stride, self.cout)

    def merge(self, f: Tensor, s: Tensor) -> Tensor:
        if self.awm is None:
            return T.add(f, s)
        return weighted_merge_sum(f, s, self.awm([f, s]))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.merge(self.branch(x), self.shortcut(x)))


class DenseLayer(Layer):
    """Bottleneck layer; with AWM its unit weights every bundle seen so far plus its own output."""

    def __init__(self, cin, growth, bundle_dims, rng, awm_rng=None, e=16):
        self.bn1 = BatchNorm2d(cin)
        self.conv1 = Conv2d(cin, 4 * growth, 1, rng, padding=0)
        self.bn2 = BatchNorm2d(4 * growth)
        self.conv2 = Conv2d(4 * growth, growth, 3, rng)
        self.awm = AwmUnit(list(bundle_dims) + [growth], awm_rng, e) if awm_rng is not None else None

    def branch(self, x: Tensor) -> Tensor:
        return self.conv2(T.relu(self.bn2(self.conv1(T.relu(self.bn1(x))))))


class DenseBlock(Layer):
    def __init__(self, cin, n_layers, growth, rng, awm_rng=None, e=16):
        self.layers = []
        dims = [cin]
        for _ in range(n_layers):
            self.layers.append(DenseLayer(sum(dims), growth, dims, rng, awm_rng, e))
            dims = dims + [growth]
        self.out_channels = sum(dims)

    def __call__(self, x: Tensor) -> Tensor:
        bundles = [x]
        inp = x
        for layer in self.layers:
            bundles.append(layer.branch(inp))
            if layer.awm is None:
                inp = T.concat(bundles, axis=1)
            else:
                inp = weighted_merge_concat(bundles, layer.awm(bundles))
        return inp


class Transition(Layer):
    def __init__(self, cin, cout, rng):
        self.bn = BatchNorm2d(cin)
        self.conv = Conv2d(cin, cout, 1, rng, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(self.conv(T.relu(self.bn(x))), 2)


class Network(Layer):
    config: NetworkConfig

    def awm_units(self) -> list[AwmUnit]:
        return [m.awm for m in self.modules() if getattr(m, "awm", None) is not None]

    def set_awm_mode(self, mode: str):
        for unit in self.awm_units():
            unit.set_mode(mode)

    def set_backbone_trainable(self, flag: bool):
        for _, p in self.named_parameters():
            if p.group == "backbone":
                p.requires_grad = flag
                p.zero_grad()

    def train(self):
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.training = True
        return self

    def eval(self):
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.training = False
        return self

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.data for n, p in self.named_parameters()}
        out.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
        missing = expected - set(arrays)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            src = arrays[f"param/{name}"]
            if src.shape != p.shape:
                raise ShapeError(f"{name}: stored {src.shape}, network {p.shape}")
            p.data[...] = src
        for name, b in buffers.items():
            b[...] = arrays[f"buffer/{name}"]

    def body(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, batch, capture_traces: bool = False):
        """Logits for a Bx3x32x32 batch; optionally also the λ₁ trace per image."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 4 or x.shape[1:] != (3, 32, 32):
            raise ShapeError(f"expected a Bx3x32x32 batch, got {x.shape}")
        logits = self.body(x)
        if not capture_traces:
            return logits
        units = self.awm_units()
        if not units:
            raise ValueError("network has no AWM units to trace")
        traces = np.stack([u.last_lambda[:, 0] for u in units], axis=1)
        return logits, traces

    __call__ = forward


class ResNet(Network):
    def __init__(self, config: NetworkConfig, rng, awm_rng):
        self.config = config
        c = config.base_channels
        per_stage = (config.depth - 2) // 6
        awm = awm_rng if config.uses_awm else None
        self.stem = Conv2d(3, c, 3, rng)
        self.stem_bn = BatchNorm2d(c)
        self.blocks = []
        cin = c
        for stage, width in enumerate((c, 2 * c, 4 * c)):
            for i in range(per_stage):
                stride = 2 if stage > 0 and i == 0 else 1
                self.blocks.append(
                    ResidualBlock(cin, width, stride, rng, awm, config.e, config.shortcut)
                )
                cin = width
        self.fc = Linear(cin, config.num_classes, rng)

    def stem_forward(self, x: Tensor) -> Tensor:
        return T.relu(self.stem_bn(self.stem(x)))

    def head(self, h: Tensor) -> Tensor:
        return self.fc(T.global_avg_pool(h))

    def body(self, x: Tensor) -> Tensor:
        h = self.stem_forward(x)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class DenseNet(Network):
    def __init__(self, config: NetworkConfig, rng, awm_rng):
        self.config = config
        k = config.growth_rate
        n_layers = (config.depth - 4) // 6
        awm = awm_rng if config.uses_awm else None
        c = 2 * k
        self.stem = Conv2d(3, c, 3, rng)
        self.blocks = []
        self.transitions = []
        for i in range(3):
            block = DenseBlock(c, n_layers, k, rng, awm, config.e)
            self.blocks.append(block)
            c = block.out_channels
            if i < 2:
                self.transitions.append(Transition(c, c // 2, rng))
                c //= 2
        self.final_bn = BatchNorm2d(c)
        self.fc = Linear(c, config.num_classes, rng)

    def body(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.transitions):
                h = self.transitions[i](h)
        return self.fc(T.global_avg_pool(T.relu(self.final_bn(h))))


def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Deterministically construct a network.

    Backbone and AWM parameters come from separate child streams of ``seed``,
    so plain and AWM variants built with the same seed share their backbone.
    """
    config.validate()
    backbone_ss, awm_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(backbone_ss)
    awm_rng = np.random.default_rng(awm_ss)
    cls = ResNet if config.family == "resnet" else DenseNet
    return cls(config, rng, awm_rng)


def count_parameters(net: Network) -> dict[str, int]:
    counts = {"backbone": 0, "awm": 0}
    for _, p in net.named_parameters():
        counts[p.group] += p.data.size
    counts["total"] = counts["backbone"] + counts["awm"]
    return counts


def iter_parameters(net: Network, group: str | None = None) -> Iterator[tuple[str, Parameter]]:
    for name, p in net.named_parameters():
        if group is None or p.group == group:
            yield name, p
