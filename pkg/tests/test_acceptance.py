"""Acceptance criteria 1-11, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary). Run
alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.

Criteria 6-8 need the real CIFAR-10 binary archive. Point ``AWM_CIFAR10_DIR``
(or ``AWM_DATA_DIR``) at the unpacked ``cifar-10-batches-bin`` directory or its
parent. Trained models are cached under ``.pytest_cache`` so 7 and 8 reuse
the run from 6.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import criterion
from gradient_suite import CASES, INSTANCES, run_case
from awm import data as D
from awm import tensor as T
from awm.checkpoint import load_checkpoint, save_checkpoint
from awm.config import desk_scale
from awm.networks import NetworkConfig, build, count_parameters, mapping_unit_count
from awm.tensor import Tensor
from awm.traces import cmc_curve, extract_traces, fit_lda, fit_pca, fit_pipeline, trace_matrix
from awm.trainer import TrainConfig, evaluate, train

UNIT_CENSUS = {14: 6, 20: 9, 32: 15, 44: 21, 56: 27, 110: 54}
GRAD_TOL = 1e-4


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_suite():
    with criterion(1, "gradient suite") as notes:
        start = time.perf_counter()
        worst = {}
        for name in CASES:
            worst[name] = max(run_case(name, seed) for seed in range(INSTANCES))
        elapsed = time.perf_counter() - start
        bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
        notes["ops"] = len(worst)
        notes["instances_each"] = INSTANCES
        notes["max_rel_err"] = f"{max(worst.values()):.2e}"
        notes["runtime_s"] = f"{elapsed:.1f}"
        assert not bad, f"relative error >= {GRAD_TOL}: {bad}"
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------- 2

def test_criterion_02_unit_census():
    with criterion(2, "mapping-unit census") as notes:
        for depth, expected in UNIT_CENSUS.items():
            assert mapping_unit_count(depth) == expected, depth
            built = len(build(NetworkConfig("resnet_awm", depth)).awm_units())
            assert built == expected, f"depth {depth}: built graph has {built} units"
        notes["depths"] = "/".join(map(str, UNIT_CENSUS))


# ---------------------------------------------------------------- 3

def test_criterion_03_parameter_counts():
    with criterion(3, "ResNet-110 parameter counts") as notes:
        plain = count_parameters(build(NetworkConfig("resnet_plain", 110)))
        net = build(NetworkConfig("resnet_awm", 110))
        awm = count_parameters(net)
        closed_form = sum(2 * u.channel_dims[0] * u.e + u.e + 2 * u.e + 2 for u in net.awm_units())
        notes["plain"] = plain["total"]
        notes["awm"] = awm["total"]
        notes["overhead"] = awm["awm"]
        assert abs(plain["total"] / 1.70e6 - 1) <= 0.03
        assert abs(awm["total"] / 1.78e6 - 1) <= 0.03
        assert awm["backbone"] == plain["total"]
        assert awm["awm"] == closed_form


# ---------------------------------------------------------------- 4

def _equal_weight_gap(net, plain, x):
    """Walk the blocks by hand; compare each merge with 0.5 * (F(x) + x) from the plain twin."""
    h = net.stem_forward(Tensor(x))
    worst = 0.0
    for block, twin in zip(net.blocks, plain.blocks):
        merged = block.merge(block.branch(h), block.shortcut(h))
        ref = 0.5 * (twin.branch(h).data + twin.shortcut(h).data)
        worst = max(worst, float(np.abs(merged.data - ref).max()))
        h = T.relu(merged)
    # the hand walk must reproduce the real forward exactly
    assert np.array_equal(net.head(h).data, net(x).data)
    return worst


def test_criterion_04_equal_weight_reduction_and_normalisation():
    with criterion(4, "equal-weight reduction and normalisation") as notes:
        rng = np.random.default_rng(4)
        net = build(NetworkConfig("resnet_awm", 20), seed=7)
        plain = build(NetworkConfig("resnet_plain", 20), seed=7)
        net.set_awm_mode("fixed_equal")
        x = rng.normal(size=(4, 3, 32, 32))
        gaps = []
        for mode in ("eval", "train"):
            getattr(net, mode)()
            getattr(plain, mode)()
            gaps.append(_equal_weight_gap(net, plain, x))
        notes["max_block_gap"] = f"{max(gaps):.1e}"
        assert max(gaps) <= 1e-15

        units = build(NetworkConfig("resnet_awm", 110), seed=1).awm_units()
        worst = 0.0
        for i in range(10):
            unit = units[(i * 5) % len(units)].set_mode("active")
            width = sum(unit.channel_dims)
            z = rng.normal(size=(1000, width)) * rng.lognormal(0, 2, size=(1000, 1))
            lam = unit.infer_weights(Tensor(z)).data
            worst = max(worst, float(np.abs(lam.sum(axis=1) - 1).max()))
        notes["inputs"] = 10000
        notes["max_sum_dev"] = f"{worst:.1e}"
        assert worst <= 1e-9


# ---------------------------------------------------------------- 5

class _Snapshots:
    def __init__(self):
        self.start, self.end, self.phase = {}, {}, {}

    @staticmethod
    def grab(net):
        out = {"backbone": {}, "awm": {}}
        for name, p in net.named_parameters():
            out[p.group][name] = p.data.copy()
        return out

    def on_epoch_start(self, epoch, phase, net):
        self.start[epoch] = self.grab(net)
        self.phase[epoch] = phase

    def on_epoch_end(self, record, net):
        self.end[record["epoch"]] = self.grab(net)


def _same(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_criterion_05_freeze_integrity():
    with criterion(5, "freeze integrity (t=3)") as notes:
        data = D.synthetic_cifar(20, seed=0)
        net = build(NetworkConfig("resnet_awm", 8), seed=0)
        cfg = TrainConfig(lr0=0.05, lr_decay_epochs=[], total_epochs=12, batch_size=50, t=3)
        snaps = _Snapshots()
        train(net, data, cfg, callbacks=[snaps])
        frozen_of = {"backbone_fixed_equal": "awm", "awm": "backbone", "backbone": "awm"}
        learner_of = {"backbone_fixed_equal": "backbone", "awm": "awm", "backbone": "backbone"}
        blocks = [(e, e + 2) for e in range(0, 12, 3)]
        seen = []
        for first, last in blocks:
            phase = snaps.phase[first]
            assert all(snaps.phase[e] == phase for e in range(first, last + 1))
            frozen, learner = frozen_of[phase], learner_of[phase]
            for e in range(first, last + 1):
                assert _same(snaps.start[e][frozen], snaps.end[e][frozen]), f"{frozen} moved in epoch {e}"
            assert _same(snaps.start[first][frozen], snaps.end[last][frozen])
            assert not _same(snaps.start[first][learner], snaps.end[last][learner]), \
                f"{learner} did not change during its own phase {phase} ({first}-{last})"
            seen.append(phase)
        notes["phases"] = "/".join(seen)


# ---------------------------------------------------------------- CIFAR-backed criteria

def _cifar_root() -> Path | None:
    for var in ("AWM_CIFAR10_DIR", "AWM_DATA_DIR"):
        if os.environ.get(var):
            return Path(os.environ[var])
    for cand in (Path.home() / "data", Path("data"), Path("/data")):
        if (cand / D.ARCHIVE_DIRS["c10"]).is_dir() or (cand / "test_batch.bin").exists():
            return cand
    return None


def _require_cifar():
    root = _cifar_root()
    if root is None:
        raise FileNotFoundError(
            "CIFAR-10 binary archive not found; set AWM_CIFAR10_DIR to the unpacked cifar-10-batches-bin"
        )
    return D.load_split(root, "c10", "train"), D.load_split(root, "c10", "test")


def _desk_run(cache_dir: Path, seed: int, t: int):
    """Train (or resume / reuse) the 40-epoch AWM-ResNet-14 desk run; returns summary dict."""
    train_full, test = _require_cifar()
    cfg = desk_scale(depth=14, epochs=40, t=t, seed=seed)
    train_ds = D.subset(train_full, cfg.subset_per_class, cfg.subset_seed)
    run_dir = cache_dir / f"resnet_awm14_t{t}_s{seed}"
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text()), run_dir, train_ds, test
    state, norm, net = None, None, None
    ckpt = run_dir / "checkpoint.npz"
    if ckpt.exists():
        net, norm, state, _ = load_checkpoint(ckpt)
    else:
        net = build(cfg.network, seed)
    history, _ = train(net, train_ds, cfg.train, state=state, norm=norm, out_dir=run_dir)
    net, norm, _, _ = load_checkpoint(ckpt)
    summary = {
        "test_err": evaluate(net, test, norm),
        "train_acc": history[-1]["train_acc"],
        "loss_first5": float(np.mean([r["train_loss"] for r in history[:5]])),
        "loss_last5": float(np.mean([r["train_loss"] for r in history[-5:]])),
        "n_train": len(train_ds),
        "n_test": len(test),
    }
    summary_path.write_text(json.dumps(summary, indent=2))
    return summary, run_dir, train_ds, test


@pytest.fixture(scope="module")
def desk_cache(request):
    return Path(request.config.cache.mkdir("awm-desk"))


@pytest.mark.slow
def test_criterion_06_desk_scale_training(desk_cache):
    with criterion(6, "desk-scale AWM-ResNet-14 on CIFAR-10") as notes:
        s, _, _, _ = _desk_run(desk_cache, seed=0, t=3)
        notes.update(test_err=f"{s['test_err']:.4f}", train_acc=f"{s['train_acc']:.4f}",
                     loss=f"{s['loss_first5']:.3f}->{s['loss_last5']:.3f}")
        assert s["n_train"] == 2000 and s["n_test"] == 10000
        assert s["test_err"] < 0.70
        assert s["train_acc"] > 0.60
        assert s["loss_last5"] < s["loss_first5"]


@pytest.mark.slow
def test_criterion_07_t_sweep_direction(desk_cache):
    with criterion(7, "t=3 vs t=0 over 3 seeds") as notes:
        errs = {t: [_desk_run(desk_cache, seed, t)[0]["test_err"] for seed in (0, 1, 2)] for t in (0, 3)}
        m0, m3 = np.mean(errs[0]), np.mean(errs[3])
        notes.update(mean_err_t0=f"{m0:.4f}", mean_err_t3=f"{m3:.4f}")
        assert m3 <= m0


@pytest.mark.slow
def test_criterion_08_trace_discriminability(desk_cache):
    with criterion(8, "trace discriminability") as notes:
        _, run_dir, train_ds, test = _desk_run(desk_cache, seed=0, t=3)
        net, norm, _, _ = load_checkpoint(run_dir / "checkpoint.npz")
        Xte, yte, _ = trace_matrix(extract_traces(net, test, norm))
        Xtr, ytr, _ = trace_matrix(extract_traces(net, train_ds, norm))
        stds = Xte.std(axis=0)
        lively = int((stds > 1e-3).sum())
        model = fit_pipeline(Xtr, ytr, d=30)
        rank1 = float(cmc_curve(model, Xte, yte)[0])
        notes.update(units_nondegenerate=f"{lively}/{len(stds)}", rank1=f"{rank1:.4f}")
        assert lively >= len(stds) / 2
        assert rank1 >= 0.10 + 0.05


# ---------------------------------------------------------------- 9

def _brute_pca(X, p):
    w, V = np.linalg.eigh(np.cov(X, rowvar=False))
    return w[::-1][:p], V[:, ::-1][:, :p]


def _brute_lda(X, y, d):
    mu = X.mean(axis=0)
    pdim = X.shape[1]
    Sw = np.zeros((pdim, pdim))
    Sb = np.zeros((pdim, pdim))
    for c in np.unique(y):
        Xi = X[y == c]
        Sw += (Xi - Xi.mean(0)).T @ (Xi - Xi.mean(0))
        Sb += len(Xi) * np.outer(Xi.mean(0) - mu, Xi.mean(0) - mu)
    Sw += 1e-6 * np.trace(Sw) / pdim * np.eye(pdim)
    w, V = np.linalg.eig(np.linalg.solve(Sw, Sb))
    order = np.argsort(-w.real)[:d]
    return w.real[order], V.real[:, order]


def _unit(v):
    return v / np.linalg.norm(v, axis=0)


def test_criterion_09_pca_lda_oracles():
    with criterion(9, "PCA/LDA oracle equivalence") as notes:
        rng = np.random.default_rng(9)
        worst_pca = worst_lda = 0.0
        checked = 0
        for trial in range(60):
            D_ = int(rng.integers(2, 11))
            C = int(rng.integers(2, 6))
            n = int(rng.integers(max(D_ + 2, 2 * C), 40))
            y = np.arange(n) % C
            X = rng.normal(size=(n, D_)) * rng.uniform(0.2, 3, size=D_) + rng.normal(0, 2, (C, D_))[y]
            p = int(rng.integers(1, D_ + 1))
            model = fit_pca(X, p)
            w, V = _brute_pca(X, p)
            gaps = np.diff(np.linalg.eigvalsh(np.cov(X, rowvar=False)))
            if gaps.size and gaps.min() < 1e-3:
                continue  # near-repeated eigenvalues: directions are not unique
            worst_pca = max(worst_pca, np.abs(model.variances - w).max(),
                            np.abs(np.abs(model.basis.T @ V) - np.eye(p)).max())
            d = int(rng.integers(1, min(D_, C - 1) + 1))
            fit = fit_lda(X, y, d)
            g, U = _brute_lda(X, y, d)
            if d > 1 and np.min(np.abs(np.diff(g))) < 1e-3 * max(1.0, g[0]):
                continue
            cos = np.abs(np.sum(_unit(fit.basis) * _unit(U), axis=0))
            worst_lda = max(worst_lda, np.abs(fit.eigenvalues - g).max() / max(1.0, g[0]),
                            np.abs(cos - 1).max())
            curve = cmc_curve(fit_pipeline(X, y, d=d), X, y)
            assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
            checked += 1
        notes.update(instances=checked, pca_err=f"{worst_pca:.1e}", lda_err=f"{worst_lda:.1e}")
        assert checked >= 30
        assert worst_pca <= 1e-6 and worst_lda <= 1e-6


# ---------------------------------------------------------------- 10

def test_criterion_10_densenet_extension():
    with criterion(10, "weighted-concat DenseNet-22") as notes:
        net = build(NetworkConfig("densenet_awm", 22, growth_rate=12), seed=0)
        units = net.awm_units()
        assert len(units) == 9
        net.train()(np.random.default_rng(10).normal(size=(4, 3, 32, 32)))
        dev = max(float(np.abs(u.last_lambda.sum(axis=1) - 1).max()) for u in units)
        assert dev <= 1e-9, f"weights at a dense layer sum to 1 +- {dev}"

        grad = max(run_case("dense_block", seed, max_entries=8) for seed in range(INSTANCES))
        assert grad < GRAD_TOL, f"dense block gradient error {grad:.2e}"

        root = _cifar_root()
        if root is not None:
            data, source = D.subset(D.load_split(root, "c10", "train"), 200, 0), "cifar10"
        else:
            data, source = D.synthetic_cifar(200, seed=0), "synthetic"
        cfg = TrainConfig(lr0=0.1, lr_decay_epochs=[], total_epochs=5, batch_size=64, t=3, seed=0)
        history, _ = train(net, data, cfg)
        losses = [r["train_loss"] for r in history]
        notes.update(sum_dev=f"{dev:.1e}", block_grad_err=f"{grad:.1e}", data=source,
                     loss="->".join(f"{v:.3f}" for v in losses))
        assert len(history) == 5
        assert losses[-1] < losses[0]


# ---------------------------------------------------------------- 11

def _random_records(rng, variant, n):
    rec = D.RECORD_BYTES[variant]
    raw = rng.integers(0, 256, size=(n, rec), dtype=np.uint8)
    if variant == "c10":
        raw[:, 0] = rng.integers(0, 10, size=n)
    else:
        raw[:, 0] = rng.integers(0, 20, size=n)
        raw[:, 1] = rng.integers(0, 100, size=n)
    return raw.tobytes()


def test_criterion_11_io_bit_exactness(tmp_path):
    with criterion(11, "I/O bit-exactness and deterministic resume") as notes:
        rng = np.random.default_rng(11)
        for variant in ("c10", "c100"):
            raw = _random_records(rng, variant, 64)
            assert D.serialize_cifar(D.parse_cifar_bytes(raw, variant)) == raw
        root = _cifar_root()
        if root is not None:
            path = next(iter(sorted(Path(root).rglob("test_batch.bin"))))
            assert D.serialize_cifar(D.parse_cifar(path)) == path.read_bytes()
        notes["cifar_files"] = "real+random" if root is not None else "random records"

        data = D.synthetic_cifar(10, seed=3)
        cfg = TrainConfig(lr0=0.05, lr_decay_epochs=[1], total_epochs=2, batch_size=32, t=1, seed=5)

        unbroken = build(NetworkConfig("resnet_awm", 8), seed=5)
        full_history, _ = train(unbroken, data, cfg)

        first = build(NetworkConfig("resnet_awm", 8), seed=5)
        train(first, data, cfg, out_dir=tmp_path / "a", max_epochs=1)
        net, norm, state, tcfg = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
        before = first.state_arrays()
        after = net.state_arrays()
        assert before.keys() == after.keys()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        save_checkpoint(tmp_path / "b.npz", net, norm, state, tcfg)
        net2, _, state2, _ = load_checkpoint(tmp_path / "b.npz")
        again = net2.state_arrays()
        assert all(after[k].tobytes() == again[k].tobytes() for k in after)
        assert all(state.velocity[k].tobytes() == state2.velocity[k].tobytes() for k in state.velocity)

        resumed_history, _ = train(net, data, tcfg, state=state, norm=norm)
        assert resumed_history[1] == full_history[1], (resumed_history[1], full_history[1])
        final_a, final_b = unbroken.state_arrays(), net.state_arrays()
        assert all(final_a[k].tobytes() == final_b[k].tobytes() for k in final_a)
        notes["resumed_epoch"] = json.dumps(resumed_history[1]["train_loss"])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
