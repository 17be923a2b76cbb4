"""λ-trace extraction and the PCA + LDA class-mean classifier built on it."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from awm.data import Dataset, normalize
from awm.linalg import fix_signs, symmetric_eigh
from awm.networks import Network


@dataclass
class TraceRecord:
    lambda1: np.ndarray
    label: int
    image_id: int


def extract_traces(net: Network, ds: Dataset, norm, batch_size: int = 250,
                   image_ids: Sequence[int] | None = None) -> list[TraceRecord]:
    """One λ₁ vector per image, eval mode, no augmentation."""
    if not net.awm_units():
        raise ValueError("trace extraction needs a network with AWM units")
    ids = np.arange(len(ds)) if image_ids is None else np.asarray(image_ids)
    net.eval()
    records = []
    for lo in range(0, len(ds), batch_size):
        x = normalize(ds.images[lo:lo + batch_size], *norm)
        _, tr = net(x, capture_traces=True)
        for i, row in enumerate(tr):
            records.append(TraceRecord(row.copy(), int(ds.labels[lo + i]), int(ids[lo + i])))
    return records


def trace_matrix(traces: Sequence[TraceRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([t.lambda1 for t in traces])
    y = np.array([t.label for t in traces], dtype=np.int64)
    ids = np.array([t.image_id for t in traces], dtype=np.int64)
    return X, y, ids


# ---------------------------------------------------------------- PCA

@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # D x p, orthonormal columns
    variances: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X) - self.mean) @ self.basis


def fit_pca(X, p: int) -> PcaModel:
    """Top-``p`` principal directions of the sample covariance of ``X`` (n x D)."""
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if not 1 <= p < n:
        raise ValueError(f"need n > p >= 1, got n={n}, p={p}")
    if p > D:
        raise ValueError(f"cannot keep {p} components of {D}-dimensional data")
    mean = X.mean(axis=0)
    Xc = X - mean
    if n < D:
        # Gram-matrix route: eigenvectors of Xc Xc^T map to covariance eigenvectors
        w, U = symmetric_eigh(Xc @ Xc.T / (n - 1))
        w = w[:p]
        good = w > 1e-12 * max(w[0], 1e-300)
        basis = np.zeros((D, p))
        basis[:, good] = Xc.T @ U[:, :p][:, good] / np.sqrt(w[good] * (n - 1))
        if not good.all():
            basis = _complete(basis, good)
    else:
        w, V = symmetric_eigh(Xc.T @ Xc / (n - 1))
        w, basis = w[:p], V[:, :p]
    rank_cut = w <= 1e-12 * max(w[0], 1e-300)
    if rank_cut.any():
        warnings.warn(f"{int(rank_cut.sum())} of {p} principal directions carry no variance")
    return PcaModel(mean, fix_signs(basis), np.maximum(w, 0.0))


def _complete(basis: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Fill zero-variance columns with an orthonormal complement of the good ones."""
    D, p = basis.shape
    rng = np.random.default_rng(0)
    filler = rng.standard_normal((D, int((~good).sum())))
    q, _ = np.linalg.qr(np.concatenate([basis[:, good], filler], axis=1))
    out = basis.copy()
    out[:, ~good] = q[:, int(good.sum()):]
    return out


# ---------------------------------------------------------------- LDA

@dataclass
class LdaFit:
    basis: np.ndarray  # p x d
    eigenvalues: np.ndarray


def scatter_matrices(X, labels) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    mu = X.mean(axis=0)
    p = X.shape[1]
    Sw = np.zeros((p, p))
    Sb = np.zeros((p, p))
    for c in np.unique(labels):
        Xi = X[labels == c]
        mc = Xi.mean(axis=0)
        Dc = Xi - mc
        Sw += Dc.T @ Dc
        diff = (mc - mu)[:, None]
        Sb += len(Xi) * diff @ diff.T
    return Sw, Sb


def fit_lda(X, labels, d: int) -> LdaFit:
    """Fisher directions solving ``Sb v = g (Sw + eps I) v`` by whitening ``Sw``."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("LDA needs at least two classes")
    if counts.min() < 2:
        raise ValueError(f"class {classes[counts.argmin()]} has fewer than two samples")
    p = X.shape[1]
    if not 1 <= d <= min(p, len(classes) - 1):
        raise ValueError(f"d={d} must lie in [1, min(p={p}, classes-1={len(classes) - 1})]")
    Sw, Sb = scatter_matrices(X, labels)
    eps = 1e-6 * np.trace(Sw) / p
    if eps <= 0:
        eps = 1e-12
    lw, U = symmetric_eigh(Sw + eps * np.eye(p))
    whiten = U / np.sqrt(lw)
    g, Q = symmetric_eigh(whiten.T @ Sb @ whiten)
    return LdaFit(whiten @ Q[:, :d], g[:d])


# ---------------------------------------------------------------- pipeline

@dataclass
class LdaModel:
    mean: np.ndarray
    pca_basis: np.ndarray
    lda_basis: np.ndarray
    class_means: np.ndarray  # classes x d
    classes: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.mean):
            raise ValueError(f"feature dimension {X.shape[-1]} != model dimension {len(self.mean)}")
        return (X - self.mean) @ self.pca_basis @ self.lda_basis


def fit_pipeline(X, labels, p: int | None = None, d: int = 30) -> LdaModel:
    """PCA to ``p`` dims, LDA to ``d`` dims, then per-class means in the final space.

    ``d`` is clamped to ``classes - 1`` and ``p`` with a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n, D = X.shape
    classes = np.unique(labels)
    if p is None:
        p = D if D < n else min(n - 1, 200)
    p = min(p, n - 1, D)
    d_max = min(p, len(classes) - 1)
    if d > d_max:
        warnings.warn(f"LDA dimension {d} reduced to {d_max}")
        d = d_max
    pca = fit_pca(X, p)
    Z = pca.transform(X)
    lda = fit_lda(Z, labels, d)
    F = Z @ lda.basis
    means = np.stack([F[labels == c].mean(axis=0) for c in classes])
    return LdaModel(pca.mean, pca.basis, lda.basis, means, classes)


def rank_classes(model: LdaModel, X) -> np.ndarray:
    """Class ids ordered by distance to each class mean (ties: lower id first)."""
    F = model.transform(np.atleast_2d(X))
    dist = np.sqrt(((F[:, None, :] - model.class_means[None]) ** 2).sum(axis=2))
    order = np.lexsort((np.broadcast_to(model.classes, dist.shape), dist), axis=1)
    return model.classes[order]


def classify_class_mean(model: LdaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    return rank_classes(model, x)[0, 0]


def cmc_curve(model: LdaModel, X, labels) -> np.ndarray:
    """Rank-k accuracy for k = 1..number of classes."""
    ranking = rank_classes(model, X)
    labels = np.asarray(labels)
    hit = ranking == labels[:, None]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), ranking.shape[1])
    return np.array([(first < k).mean() for k in range(1, ranking.shape[1] + 1)])


def pixel_features(ds: Dataset, norm) -> np.ndarray:
    return normalize(ds.images, *norm).reshape(len(ds), -1)


# ---------------------------------------------------------------- summaries

def sort_by_weight_sum(traces: Sequence[TraceRecord], order: str = "ascending") -> list[int]:
    if not traces:
        raise ValueError("no traces to sort")
    sums = np.array([t.lambda1.sum() for t in traces])
    key = sums if order == "ascending" else -sums
    if order not in ("ascending", "descending"):
        raise ValueError("order must be 'ascending' or 'descending'")
    return [traces[i].image_id for i in np.argsort(key, kind="stable")]


def unit_statistics(traces: Sequence[TraceRecord]) -> list[dict]:
    """Per-unit λ₁ mean and variance, for all images and for each class."""
    X, y, _ = trace_matrix(traces)
    rows = []
    groups = [("all", np.ones(len(y), bool))] + [(int(c), y == c) for c in np.unique(y)]
    for cls, mask in groups:
        for u in range(X.shape[1]):
            col = X[mask, u]
            rows.append({"class": cls, "unit": u, "mean": col.mean(), "var": col.var(), "n": int(mask.sum())})
    return rows


# ---------------------------------------------------------------- files

def write_traces(path, traces: Sequence[TraceRecord], kind: str, depth: int):
    units = len(traces[0].lambda1) if traces else 0
    with open(path, "w") as fh:
        fh.write(f"#kind={kind},depth={depth},units={units}\n")
        for t in traces:
            vals = ",".join(repr(float(v)) for v in t.lambda1)
            fh.write(f"{t.image_id},{t.label},{vals}\n")


def read_traces(path) -> tuple[dict, list[TraceRecord]]:
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith("#"):
            raise ValueError(f"{path}: missing trace header line")
        meta = dict(kv.split("=", 1) for kv in head[1:].split(","))
        meta["depth"] = int(meta["depth"])
        meta["units"] = int(meta["units"])
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            vals = np.array([float(v) for v in parts[2:]])
            if len(vals) != meta["units"]:
                raise ValueError(f"{path}:{lineno}: expected {meta['units']} values, got {len(vals)}")
            records.append(TraceRecord(vals, int(parts[1]), int(parts[0])))
    return meta, records


def write_curve(path, curve) -> None:
    Path(path).write_text("".join(f"{k},{acc!r}\n" for k, acc in enumerate(np.asarray(curve).tolist(), 1)))


def read_curve(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([float(r[1]) for r in rows])
