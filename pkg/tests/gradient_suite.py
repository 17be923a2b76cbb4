"""Finite-difference gradient cases, 20 random instances per operation.

Each case builder takes a Generator and returns ``(loss_fn, tensors)`` where
``loss_fn`` recomputes a scalar from the current contents of ``tensors``.
Non-scalar outputs are contracted with a fixed random tensor so every output
element contributes.
"""

from __future__ import annotations

import numpy as np

from awm import tensor as T
from awm.awm_unit import AwmUnit, weighted_merge_concat, weighted_merge_sum
from awm.networks import NetworkConfig, ResidualBlock, build
from awm.tensor import Tensor
from oracles import finite_difference_check

INSTANCES = 20


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def contract(out: Tensor, r: np.ndarray) -> Tensor:
    return T.total(T.mul(out, Tensor(r)))


def case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = k // 2 if rng.random() < 0.7 else 0
    x = leaf(rng.normal(size=(2, int(rng.integers(1, 4)), 5, 6)))
    w = leaf(rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], k, k)))
    r = rng.normal(size=T.conv2d(x, w, stride, pad).shape)
    return lambda: contract(T.conv2d(x, w, stride, pad), r), [x, w]


def case_batch_norm(rng):
    c = int(rng.integers(1, 4))
    x = leaf(rng.normal(1.0, 2.0, size=(3, c, 3, 2)))
    g, b = leaf(rng.normal(size=c)), leaf(rng.normal(size=c))
    train = bool(rng.random() < 0.75)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    r = rng.normal(size=x.shape)

    def loss():
        # running stats are side outputs; hand each evaluation fresh copies
        return contract(T.batch_norm(x, g, b, rm.copy(), rv.copy(), train=train), r)

    return loss, [x, g, b]


def case_fully_connected(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=4))
    r = rng.normal(size=(3, 4))
    return lambda: contract(T.fully_connected(x, w, b), r), [x, w, b]


def case_activations(rng):
    kind = ["relu", "sigmoid"][int(rng.integers(0, 2))]
    x = leaf(away_from_zero(rng, (4, 5)) * 3)
    r = rng.normal(size=(4, 5))
    return lambda: contract(T.activation(x, kind), r), [x]


def case_global_avg_pool(rng):
    x = leaf(rng.normal(size=(2, 3, 4, 3)))
    r = rng.normal(size=(2, 3))
    return lambda: contract(T.global_avg_pool(x), r), [x]


def case_softmax_cross_entropy(rng):
    x = leaf(rng.normal(scale=3, size=(4, 6)))
    y = rng.integers(0, 6, size=4)
    return lambda: T.softmax_cross_entropy(x, y), [x]


def case_infer_weights(rng):
    n = int(rng.integers(2, 5))
    dims = [int(v) for v in rng.integers(2, 5, size=n)]
    unit = AwmUnit(dims, rng, e=3)
    z = leaf(rng.normal(size=(3, sum(dims))))
    r = rng.normal(size=(3, n))
    params = [p for _, p in unit.named_parameters()]
    for p in params:
        p.data += rng.normal(scale=0.1, size=p.shape)  # move hidden units off the relu kink
    return lambda: contract(unit.infer_weights(z), r), [z] + params


def case_weighted_merge_sum(rng):
    f, x = leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=(3, 2, 3, 3)))
    lam = leaf(rng.uniform(0.1, 0.9, size=(3, 2)))
    r = rng.normal(size=f.shape)
    return lambda: contract(weighted_merge_sum(f, x, lam), r), [f, x, lam]


def case_weighted_merge_concat(rng):
    n = int(rng.integers(2, 5))
    paths = [leaf(rng.normal(size=(2, int(rng.integers(1, 4)), 3, 3))) for _ in range(n)]
    lam = leaf(rng.uniform(0.1, 0.9, size=(2, n)))
    r = rng.normal(size=(2, sum(p.shape[1] for p in paths), 3, 3))
    return lambda: contract(weighted_merge_concat(paths, lam), r), paths + [lam]


def case_awm_residual_block(rng):
    cin = int(rng.choice([3, 4]))
    projected = rng.random() < 0.5
    cout, stride = (2 * cin, 2) if projected else (cin, 1)
    shortcut = "padded" if projected and rng.random() < 0.3 else "projection"
    block = ResidualBlock(cin, cout, stride, rng, awm_rng=rng, e=3, shortcut=shortcut)
    for _, p in block.named_parameters():
        p.data += rng.normal(scale=0.05, size=p.shape)
    x = leaf(rng.normal(size=(2, cin, 4, 4)))
    r = rng.normal(size=(2, cout, 4 // stride, 4 // stride))
    params = [p for _, p in block.named_parameters()]
    return _restoring([b for _, b in block.named_buffers()], lambda: contract(block(x), r)), [x] + params


def _restoring(buffers, fn):
    saved = [b.copy() for b in buffers]

    def loss():
        for b, s in zip(buffers, saved):
            b[...] = s
        return fn()

    return loss


def case_dense_block(rng):
    """First dense block of the depth-22, growth-12 weighted-concat DenseNet."""
    net = build(NetworkConfig("densenet_awm", 22), seed=int(rng.integers(1 << 30))).train()
    block = net.blocks[0]
    x = leaf(rng.normal(size=(2, 24, 6, 6)))
    r = rng.normal(size=(2, block.out_channels, 6, 6))
    params = [p for _, p in block.named_parameters()]
    return _restoring([b for _, b in block.named_buffers()], lambda: contract(block(x), r)), [x] + params


CASES = {
    "conv2d": case_conv2d,
    "batch_norm": case_batch_norm,
    "fully_connected": case_fully_connected,
    "activations": case_activations,
    "global_avg_pool": case_global_avg_pool,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "infer_weights": case_infer_weights,
    "weighted_merge_sum": case_weighted_merge_sum,
    "weighted_merge_concat": case_weighted_merge_concat,
    "awm_residual_block": case_awm_residual_block,
}


def run_case(name, seed, max_entries=None):
    rng = np.random.default_rng([seed, len(name)])
    builder = CASES.get(name) or {"dense_block": case_dense_block}[name]
    loss_fn, tensors = builder(rng)
    return finite_difference_check(loss_fn, tensors, max_entries=max_entries, rng=rng)
