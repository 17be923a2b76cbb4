"""Single-file checkpoints (numpy ``.npz`` container, little-endian float64 arrays).

Layout::

    meta             uint8 JSON: format version, network config, train config,
                     epoch, RNG states, history
    norm/mean, norm/std
    param/<name>     trainable tensors
    buffer/<name>    batch-norm running statistics
    velocity/<name>  optimizer momentum buffers
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from awm.networks import Network, NetworkConfig, build

FORMAT_VERSION = 1


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f8")


def save_checkpoint(path, net: Network, norm, state=None, train_config=None):
    """Atomically write ``net`` plus optional trainer state to ``path``."""
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "network": net.config.to_dict(),
        "train_config": asdict(train_config) if train_config is not None else None,
        "epoch": state.epoch if state else 0,
        "shuffle_rng": state.shuffle_rng if state else None,
        "augment_rng": state.augment_rng if state else None,
        "history": state.history if state else [],
        "awm_modes": [u.mode for u in net.awm_units()],
    }
    arrays = {name: _le(a) for name, a in net.state_arrays().items()}
    arrays["norm/mean"] = _le(norm[0])
    arrays["norm/std"] = _le(norm[1])
    if state:
        arrays.update({f"velocity/{k}": _le(v) for k, v in state.velocity.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(net, norm, state, train_config)`` from a checkpoint file."""
    from awm.trainer import TrainConfig, TrainState

    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    net = build(NetworkConfig(**meta["network"]), seed=0)
    net.load_state_arrays({k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))})
    for unit, mode in zip(net.awm_units(), meta.get("awm_modes", [])):
        unit.set_mode(mode)
    norm = (arrays["norm/mean"], arrays["norm/std"])
    velocity = {k[len("velocity/"):]: v.copy() for k, v in arrays.items() if k.startswith("velocity/")}
    state = TrainState(
        epoch=meta["epoch"],
        velocity=velocity,
        shuffle_rng=meta["shuffle_rng"],
        augment_rng=meta["augment_rng"],
        history=meta["history"],
    )
    train_config = TrainConfig(**meta["train_config"]) if meta["train_config"] else None
    return net, norm, state, train_config
