"""Kernel PCA on STL Gram matrices.

Training coordinates are ``sqrt(lambda_j) * alpha_j[i]``; a new formula with
kernel row ``k`` against the training set is placed at
``alpha_j . center(k) / sqrt(lambda_j)``, which reproduces the training
coordinates exactly when ``k`` is a training row.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .kernel import array_hash

ZERO_EIGENVALUE = 1e-10  # relative to the largest eigenvalue


class RankError(ValueError):
    """More components requested than the centered Gram matrix supports."""


class StaleModelError(ValueError):
    """Cross-kernel rows were computed against a different training set."""


def center(k) -> np.ndarray:
    """Double-center a (symmetric) Gram matrix."""
    k = np.asarray(getattr(k, "values", k), dtype=float)
    row = k.mean(axis=1, keepdims=True)
    col = k.mean(axis=0, keepdims=True)
    return k - row - col + k.mean()


@dataclass
class KpcaModel:
    eigenvalues: np.ndarray  # all positive eigenvalues, descending
    eigenvectors: np.ndarray  # (D, d) unit columns for the retained components
    row_means: np.ndarray  # training Gram row means
    grand_mean: float
    d: int
    spectrum: np.ndarray  # every eigenvalue of the centered Gram, descending
    train_hash: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.eigenvectors.shape[0]

    def training_coordinates(self, d: int | None = None) -> np.ndarray:
        d = self.d if d is None else d
        self._check_dim(d)
        return self.eigenvectors[:, :d] * np.sqrt(self.eigenvalues[:d])

    def center_rows(self, cross: np.ndarray) -> np.ndarray:
        cross = np.atleast_2d(np.asarray(cross, dtype=float))
        if cross.shape[1] != self.n_train:
            raise ValueError(f"cross-kernel rows have {cross.shape[1]} columns, model has {self.n_train} training formulae")
        return cross - cross.mean(axis=1, keepdims=True) - self.row_means[None, :] + self.grand_mean

    def _check_dim(self, d: int) -> None:
        if not 0 <= d <= self.d:
            raise ValueError(f"requested {d} components, model retains {self.d}")

    def truncate(self, d: int) -> KpcaModel:
        self._check_dim(d)
        return KpcaModel(self.eigenvalues, self.eigenvectors[:, :d].copy(), self.row_means, self.grand_mean, d,
                         self.spectrum, self.train_hash, dict(self.metadata, d=d))

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "eigenvalues": self.eigenvalues.tolist(),
            "spectrum": self.spectrum.tolist(),
            "eigenvectors": self.eigenvectors.T.tolist(),
            "row_means": self.row_means.tolist(),
            "grand_mean": self.grand_mean,
            "train_hash": self.train_hash,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> KpcaModel:
        return cls(
            eigenvalues=np.asarray(data["eigenvalues"], dtype=float),
            eigenvectors=np.asarray(data["eigenvectors"], dtype=float).reshape(int(data["d"]), -1).T,
            row_means=np.asarray(data["row_means"], dtype=float),
            grand_mean=float(data["grand_mean"]),
            d=int(data["d"]),
            spectrum=np.asarray(data["spectrum"], dtype=float),
            train_hash=data.get("train_hash", ""),
            metadata=data.get("metadata", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> KpcaModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with threadpool_limits(limits=1):
        w, v = np.linalg.eigh(m)
    order = np.argsort(w, kind="stable")[::-1]
    w, v = w[order], v[:, order]
    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return w, v * signs


def positive_count(eigenvalues: np.ndarray) -> int:
    if eigenvalues.size == 0 or eigenvalues[0] <= 0:
        return 0
    return int(np.sum(eigenvalues > ZERO_EIGENVALUE * eigenvalues[0]))


def fit_kpca(k, d: int | None = None) -> KpcaModel:
    """Eigendecompose the centered Gram matrix and keep the top ``d`` components.

    ``d=None`` keeps every component with a non-negligible eigenvalue.
    """
    kv = np.asarray(getattr(k, "values", k), dtype=float)
    if kv.ndim != 2 or kv.shape[0] != kv.shape[1]:
        raise ValueError("Gram matrix must be square")
    kc = center(kv)
    kc = 0.5 * (kc + kc.T)
    w, v = _eigh(kc)
    npos = positive_count(w)
    if d is None:
        d = npos
    if d < 1:
        raise ValueError("d must be >= 1")
    if d > npos:
        raise RankError(f"d={d} exceeds the {npos} positive eigenvalues of the centered Gram matrix")
    meta = dict(getattr(k, "metadata", {}) or {})
    train_hash = meta.get("robustness_hash") or array_hash(kv)
    return KpcaModel(
        eigenvalues=w[:npos].copy(),
        eigenvectors=v[:, :d].copy(),
        row_means=kv.mean(axis=1),
        grand_mean=float(kv.mean()),
        d=d,
        spectrum=w,
        train_hash=train_hash,
        metadata={"D": kv.shape[0], "d": d, "gram_hash": array_hash(kv)},
    )


def project(model: KpcaModel, cross, d: int | None = None, source_hash: str | None = None) -> np.ndarray:
    """Coordinates of formulae given their kernel rows against the training set."""
    if source_hash is not None and model.train_hash and source_hash != model.train_hash:
        raise StaleModelError("kernel rows were computed against a different training set")
    d = model.d if d is None else d
    model._check_dim(d)
    kc = model.center_rows(cross)
    return (kc @ model.eigenvectors[:, :d]) / np.sqrt(model.eigenvalues[:d])


def variance_explained(model_or_eigs, d: int) -> float:
    """Share of the positive spectrum carried by the first ``d`` eigenvalues."""
    w = getattr(model_or_eigs, "spectrum", model_or_eigs)
    w = np.asarray(w, dtype=float)
    pos = w[w > 0]
    if d <= 0 or pos.size == 0:
        return 0.0
    pos = np.sort(pos)[::-1]
    return float(min(1.0, pos[:d].sum() / pos.sum()))


def components_for(model_or_eigs, threshold: float) -> int:
    """Smallest d with variance_explained(d) >= threshold."""
    w = np.asarray(getattr(model_or_eigs, "spectrum", model_or_eigs), dtype=float)
    pos = np.sort(w[w > 0])[::-1]
    ratios = np.cumsum(pos) / pos.sum()
    return int(np.searchsorted(ratios, threshold - 1e-15) + 1)


def write_embeddings_csv(path, coords: np.ndarray, indices=None) -> None:
    coords = np.atleast_2d(coords)
    indices = range(coords.shape[0]) if indices is None else indices
    with open(path, "w") as fh:
        fh.write(",".join(["formula_index"] + [f"c{j + 1}" for j in range(coords.shape[1])]) + "\n")
        for i, row in zip(indices, coords):
            fh.write(",".join([str(i)] + [repr(float(x)) for x in row]) + "\n")


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "formula_index":
            raise ValueError(f"{path}: not an embeddings file")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    coords = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
    return idx, coords
