"""Learning model checking: ridge regression from formula representations to
robustness-derived targets, and the repeated train/test experiment harness."""
from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve
from threadpoolctl import threadpool_limits

from .analysis import quantiles
from .embedding import fit_kpca, project
from .formulagen import FormulaDistParams, sample_formulae
from .kernel import cross_kernel, gram, robustness_matrix
from .trajgen import Mu0Params, TrajectorySource, sirs

ERROR_LEVELS = (0.25, 0.5, 0.75, 0.99)
ERROR_NAMES = ("1quart", "median", "3quart", "99perc")
# default ridge penalty, relative to the mean kernel diagonal trace(K) / n
RIDGE_SCALE = 1e-4


class Target(enum.Enum):
    RHO = "rho"  # robustness on one trajectory
    R = "R"  # mean robustness over m trajectories
    S = "S"  # satisfaction probability over m trajectories


def targets(rm_values: np.ndarray, target: Target) -> np.ndarray:
    """Target values from a (formulae x trajectories) robustness block."""
    target = Target(target)
    if target is Target.RHO:
        return rm_values[:, 0].copy()
    if target is Target.R:
        return rm_values.mean(axis=1)
    return (rm_values > 0).mean(axis=1)


@dataclass
class RidgeModel:
    mode: str  # "kernel" or "feature"
    coef: np.ndarray
    intercept: float
    lam: float
    provenance: str = ""
    # kernel mode with an intercept centers kernel rows with these statistics
    row_means: np.ndarray | None = None
    grand_mean: float = 0.0


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with threadpool_limits(limits=1):
        try:
            return solve(a, b, assume_a="pos")
        except np.linalg.LinAlgError:
            x, res, rank, _ = np.linalg.lstsq(a, b, rcond=None)
            if rank < a.shape[0]:
                raise np.linalg.LinAlgError("singular system; increase the ridge penalty") from None
            return x


def fit_ridge(y, X=None, K=None, lam: float | None = None, fit_intercept: bool = True,
              provenance: str = "") -> RidgeModel:
    """Ridge regression in feature space (``X``, n x d) or kernel space (``K``, n x n).

    Kernel mode solves (K + lam I) c = y; feature mode (X^T X + lam I) w = X^T y.
    With ``fit_intercept`` the intercept is the training mean of y, features
    are centered and the kernel is double-centered, so the full-rank
    embedding and the kernel give identical predictions for the same ``lam``.
    The default ``lam`` is RIDGE_SCALE times trace(K) / n, or times the mean
    squared norm of the (centered) feature rows.
    """
    y = np.asarray(y, dtype=float)
    if (X is None) == (K is None):
        raise ValueError("give exactly one of X or K")
    ybar = float(y.mean()) if fit_intercept else 0.0
    yc = y - ybar
    if K is not None:
        K = np.asarray(K, dtype=float)
        if K.shape != (len(y), len(y)):
            raise ValueError("kernel and targets disagree in size")
        lam = RIDGE_SCALE * np.trace(K) / len(y) if lam is None else lam
        if lam < 0:
            raise ValueError("lam must be >= 0")
        row_means = K.mean(axis=1) if fit_intercept else None
        grand = float(K.mean()) if fit_intercept else 0.0
        Kc = K - row_means[:, None] - row_means[None, :] + grand if fit_intercept else K
        Kc = 0.5 * (Kc + Kc.T)
        c = _solve_spd(Kc + lam * np.eye(len(y)), yc)
        return RidgeModel("kernel", c, ybar, float(lam), provenance, row_means, grand)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != len(y):
        raise ValueError("features and targets disagree in size")
    mean = X.mean(axis=0) if fit_intercept else np.zeros(X.shape[1])
    Xc = X - mean
    lam = RIDGE_SCALE * float(np.sum(Xc * Xc)) / len(y) if lam is None else lam
    if lam < 0:
        raise ValueError("lam must be >= 0")
    with threadpool_limits(limits=1):
        gramx = Xc.T @ Xc
        rhs = Xc.T @ yc
    w = _solve_spd(gramx + lam * np.eye(X.shape[1]), rhs)
    return RidgeModel("feature", w, float(ybar - mean @ w), float(lam), provenance)


def predict(model: RidgeModel, rep, provenance: str | None = None) -> np.ndarray:
    """``rep`` holds cross-kernel rows (kernel mode) or feature rows."""
    if provenance is not None and model.provenance and provenance != model.provenance:
        raise ValueError("representation was built against a different training set")
    rep = np.atleast_2d(np.asarray(rep, dtype=float))
    if rep.shape[1] != len(model.coef):
        raise ValueError(f"representation has {rep.shape[1]} columns, model expects {len(model.coef)}")
    if model.mode == "kernel" and model.row_means is not None:
        rep = rep - rep.mean(axis=1, keepdims=True) - model.row_means[None, :] + model.grand_mean
    with threadpool_limits(limits=1):
        return rep @ model.coef + model.intercept


def errors(pred, truth, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """(relative, absolute) errors; RE divides by max(|y|, eps)."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("predictions and truth differ in length")
    ae = np.abs(pred - truth)
    with np.errstate(divide="ignore", invalid="ignore"):
        re = ae / np.maximum(np.abs(truth), eps)
    return re, ae


def evaluate(pred, truth, eps: float = 1e-6) -> dict[str, np.ndarray]:
    re, ae = errors(pred, truth, eps)
    return {"RE": quantiles(re, ERROR_LEVELS), "AE": quantiles(ae, ERROR_LEVELS)}


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    formulae: FormulaDistParams = field(default_factory=FormulaDistParams)
    kernel_source: dict | None = None  # TrajectorySource.to_dict(); default mu0 over n_vars
    target_source: dict | None = None  # default: the SIRS preset, standardized
    targets: tuple[str, ...] = ("rho", "R", "S")
    dims: tuple[int, ...] = (500,)
    full_kernel: bool = True
    repetitions: int = 20
    D: int = 1000
    n_test: int = 200
    M: int = 10_000
    m: int = 1000
    seed: int = 0
    # penalty shared by every representation: ridge_scale * trace(K) / D,
    # unless given explicitly
    ridge_scale: float = RIDGE_SCALE
    lam: float | None = None
    re_eps: float = 1e-6

    def kernel_trajectories(self) -> TrajectorySource:
        if self.kernel_source is None:
            return TrajectorySource(mu0=Mu0Params(dimension=self.formulae.n_vars))
        return TrajectorySource.from_dict(self.kernel_source)

    def target_trajectories(self) -> TrajectorySource:
        if self.target_source is None:
            return TrajectorySource(network=sirs())
        return TrajectorySource.from_dict(self.target_source)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formulae"] = self.formulae.to_dict()
        d["kernel_source"] = self.kernel_trajectories().to_dict()
        d["target_source"] = self.target_trajectories().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        if "formulae" in d:
            f = {k: v for k, v in d["formulae"].items() if k != "operators"}
            if "weights" in f:
                f["weights"] = tuple(f["weights"])
            d["formulae"] = FormulaDistParams(**f)
        for key in ("targets", "dims"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def representation_names(cfg: ExperimentConfig) -> list[str]:
    names = [f"stl2vec({d})" for d in cfg.dims]
    return names + (["kernel"] if cfg.full_kernel else [])


@dataclass
class ExperimentResult:
    """errors[(target, representation)] = list over repetitions of (RE, AE) arrays."""

    config: ExperimentConfig
    errors: dict = field(default_factory=dict)

    def table(self) -> list[list]:
        """Rows (target, representation, RE quantiles..., AE quantiles...), each
        quantile averaged over repetitions."""
        rows = []
        for (tgt, rep), runs in self.errors.items():
            re_q = np.mean([quantiles(re, ERROR_LEVELS) for re, _ in runs], axis=0)
            ae_q = np.mean([quantiles(ae, ERROR_LEVELS) for _, ae in runs], axis=0)
            rows.append([tgt, rep] + [float(x) for x in re_q] + [float(x) for x in ae_q])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "representation"] + [f"RE_{n}" for n in ERROR_NAMES]
                       + [f"AE_{n}" for n in ERROR_NAMES])
            for row in self.table():
                w.writerow(row[:2] + [repr(x) for x in row[2:]])


def run_repetition(cfg: ExperimentConfig, rep: int) -> dict:
    """One train/test split.  Returns {(target, representation): (RE, AE)}."""
    seed = cfg.seed
    ksrc = cfg.kernel_trajectories()
    tsrc = cfg.target_trajectories()
    if tsrc.dimension < cfg.formulae.n_vars or ksrc.dimension < cfg.formulae.n_vars:
        raise ValueError("trajectory sources have fewer dimensions than the formulae use")
    train = sample_formulae(cfg.formulae, cfg.D, seed, "train-formulae", start=rep * cfg.D)
    test = sample_formulae(cfg.formulae, cfg.n_test, seed, "test-formulae", start=rep * cfg.n_test)
    ktraj = ksrc.sample(cfg.M, seed, "kernel-trajectories", start=rep * cfg.M)
    ttraj = tsrc.sample(cfg.m, seed, "target-trajectories", start=rep * cfg.m)

    rm_train = robustness_matrix(train, ktraj)
    rm_test = robustness_matrix(test, ktraj)
    k_train = gram(rm_train).values
    k_test = cross_kernel(rm_test, rm_train)
    prov = rm_train.hash
    max_d = max(cfg.dims) if cfg.dims else 0
    model = None
    if max_d:
        model = fit_kpca(k_train)
        if max_d > model.d:
            raise ValueError(f"requested {max_d} components, the Gram matrix has {model.d} positive eigenvalues")
        model = model.truncate(max_d)
        z_train = model.training_coordinates()
        z_test = project(model, k_test)

    lam = cfg.lam if cfg.lam is not None else cfg.ridge_scale * float(np.trace(k_train)) / cfg.D
    y_train = {t: targets(robustness_matrix(train, ttraj).values, Target(t)) for t in cfg.targets}
    test_rm = robustness_matrix(test, ttraj).values
    out = {}
    for t in cfg.targets:
        truth = targets(test_rm, Target(t))
        for d in cfg.dims:
            m = fit_ridge(y_train[t], X=z_train[:, :d], lam=lam, provenance=prov)
            out[(t, f"stl2vec({d})")] = _errors_for(Target(t), predict(m, z_test[:, :d]), truth, cfg.re_eps)
        if cfg.full_kernel:
            m = fit_ridge(y_train[t], K=k_train, lam=lam, provenance=prov)
            out[(t, "kernel")] = _errors_for(Target(t), predict(m, k_test), truth, cfg.re_eps)
    return out


def _errors_for(target: Target, pred: np.ndarray, truth: np.ndarray, eps: float):
    if target is Target.S:
        pred = np.clip(pred, 0.0, 1.0)
    return errors(pred, truth, eps)


def experiment(cfg: ExperimentConfig, flush=None) -> ExperimentResult:
    """Run ``cfg.repetitions`` independent splits; ``flush(result)`` after each."""
    res = ExperimentResult(cfg)
    for rep in range(cfg.repetitions):
        for key, val in run_repetition(cfg, rep).items():
            res.errors.setdefault(key, []).append(val)
        if flush is not None:
            flush(res)
    return res

