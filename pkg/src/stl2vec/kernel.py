"""Monte-Carlo estimation of the STL kernel.

``k(phi, psi)`` is the mean over sampled trajectories of the product of the
two formulae's (normalized) robustness values.  With a robustness matrix
``r`` of shape (D, M) the Gram matrix is ``r @ r.T / M``.
"""
from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .logic import RobustnessMode, robustness_batch
from .trajgen import TrajectoryBatch


class MonitorError(ValueError):
    def __init__(self, formula_index: int, cause: Exception):
        self.formula_index = formula_index
        self.cause = cause
        super().__init__(f"formula {formula_index}: {cause}")


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype=np.float64)
    h = hashlib.sha256(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class RobustnessMatrix:
    """r[j, k] = robustness of formula j on trajectory k at time 0."""

    values: np.ndarray
    mode: RobustnessMode = RobustnessMode.NORMALIZED
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def hash(self) -> str:
        return array_hash(self.values)


@dataclass
class GramMatrix:
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return array_hash(self.values)


def robustness_matrix(formulae, trajectories, mode=RobustnessMode.NORMALIZED, threads: int = 1,
                      metadata: dict | None = None) -> RobustnessMatrix:
    """Monitor every formula on every trajectory (at t = 0).

    Rows are independent, so they may be filled by ``threads`` workers without
    affecting the result.  Errors are re-raised as ``MonitorError`` carrying
    the offending formula index (the trajectory axis is evaluated as a batch).
    """
    batch = TrajectoryBatch.stack(trajectories)
    mode = mode if isinstance(mode, RobustnessMode) else RobustnessMode(mode)
    cols = batch.columns()
    formulae = list(formulae)
    out = np.empty((len(formulae), len(batch)))

    def fill(j: int) -> None:
        try:
            out[j] = robustness_batch(formulae[j], batch.values, 0, mode, batch.dt, columns=cols)
        except (IndexError, ValueError) as exc:
            raise MonitorError(j, exc) from exc

    if threads > 1 and len(formulae) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(len(formulae))))
    else:
        for j in range(len(formulae)):
            fill(j)
    meta = {"D": len(formulae), "M": len(batch), "mode": mode.value}
    meta.update(metadata or {})
    return RobustnessMatrix(out, mode, meta)


def _inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # single-threaded BLAS: the reduction order then does not depend on the
    # caller's thread count, which keeps results bitwise reproducible
    with threadpool_limits(limits=1):
        return (a @ b.T) / a.shape[1]


def gram(rm: RobustnessMatrix, normalize: bool = False) -> GramMatrix:
    """K[i, j] = (1/M) sum_k r[i, k] r[j, k]; optionally cosine-normalized."""
    r = np.ascontiguousarray(rm.values, dtype=float)
    if r.shape[1] < 1:
        raise ValueError("need at least one trajectory")
    k = _inner(r, r)
    k = 0.5 * (k + k.T)  # exact symmetry
    if normalize:
        k = cosine_normalize(k)
    meta = {"D": r.shape[0], "M": r.shape[1], "normalized": normalize, "robustness_hash": rm.hash}
    meta.update({key: v for key, v in rm.metadata.items() if key not in meta})
    return GramMatrix(k, meta)


def cosine_normalize(k: np.ndarray, diag_rows=None, diag_cols=None) -> np.ndarray:
    d_rows = np.diag(k) if diag_rows is None else np.asarray(diag_rows)
    d_cols = np.diag(k) if diag_cols is None else np.asarray(diag_cols)
    denom = np.sqrt(np.outer(d_rows, d_cols))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, k / denom, 0.0)


def cross_kernel(test, train_rm: RobustnessMatrix, trajectories=None, threads: int = 1) -> np.ndarray:
    """Kernel rows k(psi_t, phi_i) of test formulae against the training set.

    ``test`` is either a RobustnessMatrix already evaluated on the training
    trajectories, or a list of formulae together with those ``trajectories``.
    """
    if isinstance(test, RobustnessMatrix):
        test_rm = test
    else:
        if trajectories is None:
            raise ValueError("formulae given without the training trajectories")
        test_rm = robustness_matrix(test, trajectories, train_rm.mode, threads)
    if test_rm.values.shape[1] != train_rm.values.shape[1]:
        raise ValueError(
            f"test robustness has {test_rm.values.shape[1]} trajectories, training has {train_rm.values.shape[1]}")
    return _inner(np.ascontiguousarray(test_rm.values), np.ascontiguousarray(train_rm.values))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(values):
            w.writerow([_fmt(x) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged matrix")
    return np.asarray(rows)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
