"""Active weighted mapping: input-conditional weights for merging n paths.

Each path is summarised by its per-channel spatial mean, the summaries are
concatenated and passed through ``sigmoid(W2 relu(W1 z + b1) + b2)``, and the
sigmoid outputs are divided by their row sum so the weights of one image add
up to one.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from awm import tensor as T
from awm.nn import Layer, Parameter, he_normal
from awm.tensor import ShapeError, Tensor

MODES = ("active", "frozen", "fixed_equal")


class AwmUnit(Layer):
    def __init__(self, channel_dims: Sequence[int], rng: np.random.Generator, e: int = 16):
        channel_dims = [int(c) for c in channel_dims]
        if len(channel_dims) < 2:
            raise ValueError("an AWM unit merges at least two paths")
        width = sum(channel_dims)
        if not 2 < e < width:
            raise ValueError(f"reduction width e={e} must satisfy 2 < e < {width}")
        self.channel_dims = channel_dims
        self.n_paths = len(channel_dims)
        self.e = e
        self.W1 = Parameter(he_normal(rng, (e, width), width), "awm")
        self.b1 = Parameter(np.zeros(e), "awm")
        self.W2 = Parameter(he_normal(rng, (self.n_paths, e), e), "awm")
        self.b2 = Parameter(np.zeros(self.n_paths), "awm")
        self.mode = "active"
        self.last_lambda: np.ndarray | None = None
        self.last_raw: np.ndarray | None = None

    def set_mode(self, mode: str) -> "AwmUnit":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        trainable = mode == "active"
        for _, p in self.named_parameters():
            p.requires_grad = trainable
            p.zero_grad()
        return self

    def infer_weights(self, z: Tensor) -> Tensor:
        """Normalised path weights (B x n_paths) from pooled descriptors ``z``."""
        if self.mode == "fixed_equal":
            lam = Tensor(np.full((z.shape[0], self.n_paths), 1.0 / self.n_paths))
            self.last_raw = np.full(lam.shape, 0.5)
            self.last_lambda = lam.data
            return lam
        if z.data.ndim != 2 or z.shape[1] != sum(self.channel_dims):
            raise ShapeError(
                f"descriptor width {z.shape[-1]} != sum of channel dims {sum(self.channel_dims)}"
            )
        hidden = T.relu(T.fully_connected(z, self.W1, self.b1))
        pre = T.fully_connected(hidden, self.W2, self.b2)
        lam = T.normalized_sigmoid(pre)
        self.last_raw = T._sigmoid(pre.data)
        self.last_lambda = lam.data
        return lam

    def __call__(self, paths: Sequence[Tensor]) -> Tensor:
        if len(paths) != self.n_paths:
            raise ShapeError(f"unit expects {self.n_paths} paths, got {len(paths)}")
        if self.mode == "fixed_equal":
            return self.infer_weights(Tensor(np.empty((paths[0].shape[0], 0))))
        return self.infer_weights(embed_paths(paths))


def embed_paths(paths: Sequence[Tensor]) -> Tensor:
    """Global-average-pool every path and concatenate the channel means."""
    ref = paths[0].shape
    for p in paths:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"path shapes {[q.shape for q in paths]} disagree outside channels")
    return T.concat([T.global_avg_pool(p) for p in paths], axis=1)


def weighted_merge_sum(f: Tensor, x: Tensor, lam: Tensor) -> Tensor:
    """``lam[:, 0] * f + lam[:, 1] * x`` with one weight pair per batch row."""
    if f.shape != x.shape:
        raise ShapeError(f"branch {f.shape} and shortcut {x.shape} differ")
    if lam.shape != (f.shape[0], 2):
        raise ShapeError(f"weights {lam.shape} do not fit batch of {f.shape[0]}")
    return T.add(T.scale_rows(f, T.column(lam, 0)), T.scale_rows(x, T.column(lam, 1)))


def weighted_merge_concat(paths: Sequence[Tensor], lam: Tensor) -> Tensor:
    """Channel concatenation of the paths, path ``i`` scaled by ``lam[:, i]``."""
    if lam.shape != (paths[0].shape[0], len(paths)):
        raise ShapeError(f"weights {lam.shape} do not fit {len(paths)} paths")
    scaled = [T.scale_rows(p, T.column(lam, i)) for i, p in enumerate(paths)]
    return T.concat(scaled, axis=1)
