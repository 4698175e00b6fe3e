"""Statistics toolbox and explanations of the leading principal components.

PC indices are 0-based: PC0 is the first component, the "second group" is
PC1..PCn and the "third group" PCn+1..PC2n for formulae over n variables.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .embedding import KpcaModel, fit_kpca, project
from .formulagen import FormulaDistParams, sample_formulae, with_variable
from .kernel import RobustnessMatrix, _inner, cross_kernel, gram, robustness_matrix
from .logic import Formula, variables
from .trajgen import Mu0Params, TrajectoryBatch, TrajectorySource

QUANTILE_LEVELS = (0.01, 0.25, 0.5, 0.75, 0.99)
QUANTILE_NAMES = ("1perc", "1quart", "median", "3quart", "99perc")

# ---------------------------------------------------------------------------
# statistics


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two vectors of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("zero-norm vector")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def quantiles(xs, ps=QUANTILE_LEVELS) -> np.ndarray:
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        raise ValueError("empty sample")
    return np.quantile(xs, ps, method="linear")


def _kolmogorov_sf(x: float) -> float:
    """P(K > x) for the Kolmogorov distribution."""
    if x <= 0:
        return 1.0
    if x < 0.2:
        # the alternating series cancels badly here; the true value exceeds 1 - 1e-15
        return 1.0
    k = np.arange(1, 101)
    return float(np.clip(2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * x * x)), 0.0, 1.0))


def ks_statistic(xs, ys) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    xs = np.sort(np.asarray(xs, dtype=float).ravel())
    ys = np.sort(np.asarray(ys, dtype=float).ravel())
    if xs.size == 0 or ys.size == 0:
        raise ValueError("empty sample")
    grid = np.concatenate([xs, ys])
    cdf_x = np.searchsorted(xs, grid, side="right") / xs.size
    cdf_y = np.searchsorted(ys, grid, side="right") / ys.size
    d = float(np.max(np.abs(cdf_x - cdf_y)))
    en = np.sqrt(xs.size * ys.size / (xs.size + ys.size))
    p = _kolmogorov_sf(en * d)
    return d, p


def best_assignment(score: np.ndarray) -> np.ndarray:
    """Column assigned to each row maximizing the total score (rows <= columns)."""
    score = np.asarray(score, dtype=float)
    r, c = score.shape
    if r > c:
        raise ValueError("more statistics than components")
    if r <= 8 and c <= 8:
        best, best_perm = -np.inf, None
        for perm in itertools.permutations(range(c), r):
            s = score[np.arange(r), perm].sum()
            if s > best:
                best, best_perm = s, perm
        return np.array(best_perm)
    rows, cols = linear_sum_assignment(score, maximize=True)
    out = np.empty(r, dtype=np.int64)
    out[rows] = cols
    return out


# ---------------------------------------------------------------------------
# explanation reports


@dataclass
class ExplanationReport:
    """One row per explained PC: (pc, statistic, |r|, group)."""

    rows: list[tuple[int, str, float, str]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def scores(self, group: str | None = None) -> np.ndarray:
        return np.array([r[2] for r in self.rows if group is None or r[3] == group])

    def extend(self, other: ExplanationReport) -> ExplanationReport:
        self.rows.extend(other.rows)
        self.metadata.update(other.metadata)
        return self

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pc", "statistic", "abs_r", "group"])
            for pc, stat, r, g in self.rows:
                w.writerow([pc, stat, repr(float(r)), g])


def _abs_r(coords: np.ndarray, stat: np.ndarray) -> float:
    try:
        return abs(pearson(coords, stat))
    except ValueError:
        return 0.0


def _assign_group(coords: np.ndarray, stats: list[np.ndarray], names: list[str], first_pc: int,
                  group: str) -> ExplanationReport:
    n = len(stats)
    pcs = list(range(first_pc, first_pc + n))
    if coords.shape[1] < pcs[-1] + 1:
        raise ValueError(f"need at least {pcs[-1] + 1} components, embeddings have {coords.shape[1]}")
    score = np.array([[_abs_r(coords[:, pc], s) for pc in pcs] for s in stats])
    perm = best_assignment(score)
    rows = sorted((pcs[perm[i]], names[i], float(score[i, perm[i]]), group) for i in range(n))
    return ExplanationReport(rows, {f"{group}_score_matrix": score.tolist()})


def median_robustness(rm: RobustnessMatrix) -> np.ndarray:
    return np.median(rm.values, axis=1)


def explain_pc0(coords: np.ndarray, formulae=None, trajectories=None, rm: RobustnessMatrix | None = None
                ) -> tuple[float, ExplanationReport]:
    """|r| between PC0 and each formula's median robustness over the trajectories."""
    if rm is None:
        rm = robustness_matrix(formulae, trajectories)
    med = median_robustness(rm)
    r = _abs_r(np.asarray(coords)[:, 0], med)
    return r, ExplanationReport([(0, "median_robustness", r, "pc0")], {"pc0_trajectories": rm.shape[1]})


@dataclass
class KernelContext:
    """What is needed to evaluate k(phi, .) for new formulae: the kernel's
    trajectories and the embedded formulae's robustness on them."""

    trajectories: TrajectoryBatch
    rm: RobustnessMatrix


def group2_statistics(formulae_rm: RobustnessMatrix, kernel_trajectories: TrajectoryBatch, n_vars: int,
                      source: TrajectorySource, fdist: FormulaDistParams, seed: int, per_variable: int = 400,
                      n_traj: int = 10_000, percentile: float = 90.0) -> tuple[list[np.ndarray], dict]:
    """Mean kernel similarity to high-variance single-variable formulae, one vector per variable."""
    fresh = source.sample(n_traj, seed, "group2-trajectories")
    single = replace(fdist, n_vars=1, max_depth=fdist.max_depth)
    stats, kept = [], []
    for i in range(n_vars):
        d_i = [with_variable(f, i) for f in sample_formulae(single, per_variable, seed, f"group2-formulae-{i}")]
        sigma = robustness_matrix(d_i, fresh).values.std(axis=1)
        cut = np.percentile(sigma, percentile)
        sel = [f for f, s in zip(d_i, sigma) if s > cut]
        if len(sel) < 10:
            raise ValueError(f"variable {i}: only {len(sel)} high-variance formulae survive the filter")
        sel_rm = robustness_matrix(sel, kernel_trajectories)
        k = _inner(np.ascontiguousarray(formulae_rm.values), np.ascontiguousarray(sel_rm.values))
        stats.append(k.mean(axis=1))
        kept.append(len(sel))
    return stats, {"group2_per_variable": per_variable, "group2_trajectories": n_traj, "group2_kept": kept}


def explain_group2(coords: np.ndarray, context: KernelContext, n_vars: int, source: TrajectorySource,
                   fdist: FormulaDistParams, seed: int, **kw) -> ExplanationReport:
    stats, meta = group2_statistics(context.rm, context.trajectories, n_vars, source, fdist, seed, **kw)
    rep = _assign_group(np.asarray(coords), stats, [f"kernel_similarity_x{i}" for i in range(n_vars)], 1, "group2")
    rep.metadata.update(meta)
    return rep


def group3_statistics(formulae, trajectories: TrajectoryBatch, n_vars: int,
                      base: RobustnessMatrix | None = None, signed: bool = False) -> list[np.ndarray]:
    """rho_i(phi): mean |rho(phi, xi) - rho(phi, xi with x_i := 0)| for each variable i.

    ``signed=True`` drops the absolute value.  Under the default measures the
    absolute statistic is even in each atom threshold, so it can only pick up
    components that are themselves even; the signed mean keeps the odd part.
    """
    formulae = list(formulae)
    if base is None:
        base = robustness_matrix(formulae, trajectories)
    out = []
    for i in range(n_vars):
        zeroed = trajectories.values.copy()
        zeroed[:, :, i] = 0.0
        rz = robustness_matrix(formulae, TrajectoryBatch(trajectories.times, zeroed))
        diff = base.values - rz.values
        out.append(np.mean(diff if signed else np.abs(diff), axis=1))
    return out


def explain_group3(coords: np.ndarray, formulae, trajectories: TrajectoryBatch, n_vars: int,
                   base: RobustnessMatrix | None = None, signed: bool = False) -> ExplanationReport:
    if len(trajectories) < 1000:
        raise ValueError("need at least 1000 trajectories")
    stats = group3_statistics(formulae, trajectories, n_vars, base, signed)
    rep = _assign_group(np.asarray(coords), stats, [f"variable_importance_x{i}" for i in range(n_vars)],
                        1 + n_vars, "group3")
    rep.metadata.update(group3_trajectories=len(trajectories), group3_signed=signed)
    return rep


# ---------------------------------------------------------------------------
# end-to-end datasets


@dataclass(frozen=True)
class DatasetSpec:
    formulae: FormulaDistParams = FormulaDistParams()
    source: dict | None = None  # TrajectorySource.to_dict(); None means mu0 over formulae.n_vars
    D: int = 1000
    M: int = 10_000
    d: int = 13
    seed: int = 0

    def trajectory_source(self) -> TrajectorySource:
        if self.source is None:
            return TrajectorySource(mu0=Mu0Params(dimension=self.formulae.n_vars))
        return TrajectorySource.from_dict(self.source)


@dataclass
class Dataset:
    spec: DatasetSpec
    formulae: list[Formula]
    trajectories: TrajectoryBatch
    rm: RobustnessMatrix
    model: KpcaModel
    coords: np.ndarray

    @property
    def context(self) -> KernelContext:
        return KernelContext(self.trajectories, self.rm)


def build_dataset(spec: DatasetSpec, threads: int = 1) -> Dataset:
    """Formulae and trajectories come from substreams of ``spec.seed``; the
    kernel always uses the spec's trajectory source."""
    source = spec.trajectory_source()
    if source.dimension < spec.formulae.n_vars:
        raise ValueError("trajectory source has fewer dimensions than the formulae use")
    formulae = sample_formulae(spec.formulae, spec.D, spec.seed, "formulae")
    trajs = source.sample(spec.M, spec.seed, "kernel-trajectories")
    rm = robustness_matrix(formulae, trajs, threads=threads)
    model = fit_kpca(gram(rm), spec.d)
    return Dataset(spec, formulae, trajs, rm, model, model.training_coordinates())


@dataclass
class StatisticSet:
    """Per-formula candidate statistics, grouped by the PC range they explain.

    ``groups[name] = (statistics, statistic names, first PC index)``.
    """

    groups: dict[str, tuple[list[np.ndarray], list[str], int]]
    metadata: dict = field(default_factory=dict)


def dataset_statistics(ds: Dataset, n_traj: int = 10_000, per_variable: int = 400,
                       signed_group3: bool = False) -> StatisticSet:
    """Median robustness, group-2 kernel similarities and group-3 variable importances.

    Group statistics are computed on trajectories from the dataset's own
    source, drawn from streams separate from the kernel's.
    """
    n = ds.spec.formulae.n_vars
    source = ds.spec.trajectory_source()
    stat_trajs = source.sample(n_traj, ds.spec.seed, "explain-trajectories")
    if len(stat_trajs) < 1000:
        raise ValueError("need at least 1000 trajectories")
    stat_rm = robustness_matrix(ds.formulae, stat_trajs)
    g2, meta = group2_statistics(ds.rm, ds.trajectories, n, source, ds.spec.formulae, ds.spec.seed,
                                 per_variable=per_variable, n_traj=n_traj)
    g3 = group3_statistics(ds.formulae, stat_trajs, n, base=stat_rm, signed=signed_group3)
    meta.update(pc0_trajectories=n_traj, group3_trajectories=n_traj, group3_signed=signed_group3,
                spec=_spec_dict(ds.spec))
    return StatisticSet({
        "pc0": ([median_robustness(stat_rm)], ["median_robustness"], 0),
        "group2": (g2, [f"kernel_similarity_x{i}" for i in range(n)], 1),
        "group3": (g3, [f"variable_importance_x{i}" for i in range(n)], 1 + n),
    }, meta)


def explain_statistics(coords: np.ndarray, stats: StatisticSet) -> ExplanationReport:
    """Assign every statistic group to its PC range of ``coords``."""
    rep = ExplanationReport(metadata=dict(stats.metadata))
    for group, (values, names, first) in stats.groups.items():
        rep.extend(_assign_group(np.asarray(coords), values, names, first, group))
    return rep


def explain_dataset(ds: Dataset, n_traj: int = 10_000, per_variable: int = 400,
                    signed_group3: bool = False) -> ExplanationReport:
    """PC0, second-group and third-group explanations of one dataset."""
    return explain_statistics(ds.coords, dataset_statistics(ds, n_traj, per_variable, signed_group3))


def _spec_dict(spec: DatasetSpec) -> dict:
    return {"formulae": spec.formulae.to_dict(), "source": spec.trajectory_source().to_dict(), "D": spec.D,
            "M": spec.M, "d": spec.d, "seed": spec.seed}


def shuffled_control(coords: np.ndarray, seed: int) -> np.ndarray:
    """Embeddings with rows permuted: any explanation should vanish."""
    from .rng import substream
    return np.asarray(coords)[substream(seed, "shuffle").permutation(len(coords))]


# ---------------------------------------------------------------------------
# stability across training sets


def match_axes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match the axes of two probe-coordinate matrices by |cosine|.

    Returns the matched column of ``b`` for each column of ``a`` and the
    corresponding |cosine| values.
    """
    if a.shape[0] != b.shape[0]:
        raise ValueError("probe sets differ in size")
    an = a / np.linalg.norm(a, axis=0, keepdims=True)
    bn = b / np.linalg.norm(b, axis=0, keepdims=True)
    sim = np.abs(an.T @ bn)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    order = np.argsort(rows)
    return cols[order], np.clip(sim[rows[order], cols[order]], 0.0, 1.0)


def stability_study(probe_coords: list[np.ndarray]) -> np.ndarray:
    """Matched |cosine| per axis for every pair of models: shape (pairs, d)."""
    if len(probe_coords) < 2:
        raise ValueError("need at least two models")
    out = []
    for i, j in itertools.combinations(range(len(probe_coords)), 2):
        out.append(match_axes(probe_coords[i], probe_coords[j])[1])
    return np.array(out)


def probe_coordinates(ds: Dataset, probes) -> np.ndarray:
    """Project shared probe formulae through a dataset's model."""
    cross = cross_kernel(list(probes), ds.rm, ds.trajectories)
    return project(ds.model, cross)


# ---------------------------------------------------------------------------
# ablations


def quantile_table(scores_by_setting: dict[str, dict[int, list[float]]]) -> list[list]:
    """Rows (setting, pc, q01, q25, median, q75, q99) of |r| across datasets."""
    rows = []
    for setting, per_pc in scores_by_setting.items():
        for pc in sorted(per_pc):
            rows.append([setting, pc] + [float(x) for x in quantiles(per_pc[pc])])
    return rows


def write_quantile_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "pc"] + list(QUANTILE_NAMES))
        for row in rows:
            w.writerow(row[:2] + [repr(float(x)) for x in row[2:]])


def ablation_suite(settings: dict[str, DatasetSpec], n_datasets: int = 10, n_traj: int = 10_000,
                   per_variable: int = 400, flush=None, threads: int = 1) -> list[list]:
    """Explain ``n_datasets`` independent datasets per setting and tabulate |r| quantiles.

    Dataset k of a setting uses seed ``spec.seed + k``.  ``flush(setting, rows)``
    is called after every setting so partial results survive interruption.
    """
    scores: dict[str, dict[int, list[float]]] = {}
    for name, spec in settings.items():
        per_pc: dict[int, list[float]] = {}
        for k in range(n_datasets):
            ds = build_dataset(replace(spec, seed=spec.seed + k), threads=threads)
            rep = explain_dataset(ds, n_traj=n_traj, per_variable=per_variable)
            for pc, _, r, _ in rep.rows:
                per_pc.setdefault(pc, []).append(r)
        scores[name] = per_pc
        if flush is not None:
            flush(name, quantile_table({name: per_pc}))
    return quantile_table(scores)


# ---------------------------------------------------------------------------
# variable identification in PC planes


def single_variable_labels(formulae) -> np.ndarray:
    """Variable index for formulae with exactly one variable, -1 otherwise."""
    out = []
    for f in formulae:
        v = variables(f)
        out.append(next(iter(v)) if len(v) == 1 else -1)
    return np.array(out, dtype=np.int64)


def centroid_accuracy(points: np.ndarray, labels: np.ndarray) -> float:
    """Training accuracy of a nearest-centroid classifier."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centroids = np.stack([points[labels == c].mean(axis=0) for c in classes])
    dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(classes[np.argmin(dist, axis=1)] == labels))


def write_scatter_csv(path, coords: np.ndarray, formulae, pcs=(0, 1)) -> None:
    """Scatter data (pc_x, pc_y, class); class is the sole variable or 'mixed'."""
    labels = single_variable_labels(formulae)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"pc{pcs[0]}", f"pc{pcs[1]}", "formula_class"])
        for row, lab in zip(np.asarray(coords), labels):
            w.writerow([repr(float(row[pcs[0]])), repr(float(row[pcs[1]])), f"x{lab}" if lab >= 0 else "mixed"])
