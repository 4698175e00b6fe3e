"""Trajectory generation.

Two sources of trajectories on a uniform time grid:

* ``sample_mu0`` draws piecewise-linear signals from the base measure used to
  define the STL kernel (small total variation, few monotonicity changes);
* ``simulate_ssa`` runs Gillespie's direct method on a mass-action reaction
  network and resamples each run onto the grid with a zero-order hold.

Trajectories of one run share a grid, so they are kept together in a
``TrajectoryBatch`` holding a ``(M, T, n)`` value array.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import comb

from .rng import substream


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray  # (T, n)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 1.0

    @property
    def dimension(self) -> int:
        return self.values.shape[1]


@dataclass
class TrajectoryBatch:
    """M trajectories sharing the grid ``times``; ``values`` has shape (M, T, n)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != len(self.times):
            raise ValueError(f"values shape {self.values.shape} does not match grid of {len(self.times)} points")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(steps[0])):
                raise ValueError("time grid must be uniform and strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory values must be finite")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 1.0

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i) -> Trajectory | TrajectoryBatch:
        if isinstance(i, slice):
            return TrajectoryBatch(self.times, self.values[i])
        return Trajectory(self.times, self.values[i])

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    def columns(self) -> list[np.ndarray]:
        """Per-variable (M, T) contiguous arrays, the layout the monitor prefers."""
        return [np.ascontiguousarray(self.values[:, :, i]) for i in range(self.dimension)]

    @classmethod
    def stack(cls, trajs: Sequence[Trajectory]) -> TrajectoryBatch:
        if isinstance(trajs, TrajectoryBatch):
            return trajs
        trajs = list(trajs)
        if not trajs:
            raise ValueError("no trajectories")
        times = trajs[0].times
        for tr in trajs[1:]:
            if len(tr.times) != len(times) or not np.allclose(tr.times, times):
                raise ValueError("trajectories do not share a time grid")
        return cls(times, np.stack([tr.values for tr in trajs]))


# ---------------------------------------------------------------------------
# base measure


@dataclass(frozen=True)
class Mu0Params:
    a: float = 0.0
    b: float = 100.0
    dt: float = 1.0
    init_mean: float = 0.0
    init_std: float = 1.0
    tv_mean: float = 0.0
    tv_std: float = 1.0  # the "K" ablation parameter
    q: float = 0.1
    dimension: int = 3
    # 'independent': each segment keeps the initial direction unless its own
    # Bernoulli(q) draw flips it; 'cumulative': flips compound along the path.
    sign_process: str = "independent"

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("need b > a")
        if not self.dt > 0:
            raise ValueError("need dt > 0")
        steps = (self.b - self.a) / self.dt
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError("dt must divide b - a")
        if not (self.init_std > 0 and self.tv_std > 0):
            raise ValueError("standard deviations must be positive")
        if not 0 <= self.q <= 0.5:
            raise ValueError("q must lie in [0, 0.5]")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.sign_process not in ("independent", "cumulative"):
            raise ValueError("sign_process must be 'independent' or 'cumulative'")

    @property
    def steps(self) -> int:
        return int(round((self.b - self.a) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.a + self.dt * np.arange(self.steps + 1)


def _mu0_path(rng: np.random.Generator, p: Mu0Params) -> np.ndarray:
    n_steps = p.steps
    dim = p.dimension
    start = rng.normal(p.init_mean, p.init_std, size=dim)
    total_var = rng.normal(p.tv_mean, p.tv_std, size=dim) ** 2
    cuts = np.sort(rng.uniform(0.0, 1.0, size=(dim, n_steps - 1)), axis=1) * total_var[:, None]
    knots = np.concatenate([np.zeros((dim, 1)), cuts, total_var[:, None]], axis=1)
    increments = np.diff(knots, axis=1)
    s0 = np.where(rng.random(dim) < 0.5, -1.0, 1.0)
    flips = np.where(rng.random((dim, n_steps)) < p.q, -1.0, 1.0)
    if p.sign_process == "cumulative":
        flips = np.cumprod(flips, axis=1)
    signs = s0[:, None] * flips
    path = start[:, None] + np.concatenate([np.zeros((dim, 1)), np.cumsum(signs * increments, axis=1)], axis=1)
    return path.T


def sample_mu0(p: Mu0Params, count: int, seed: int, label: str = "mu0", start: int = 0) -> TrajectoryBatch:
    """Draw ``count`` trajectories; trajectory i uses substream (seed, label, start + i)."""
    if count < 0:
        raise ValueError("count must be non-negative")
    values = np.empty((count, p.steps + 1, p.dimension))
    for i in range(count):
        values[i] = _mu0_path(substream(seed, label, start + i), p)
    return TrajectoryBatch(p.times, values)


def monotonicity_changes(values: np.ndarray) -> np.ndarray:
    """Sign changes of consecutive increments along axis -2 of (..., T, n) values."""
    d = np.sign(np.diff(values, axis=-2))
    return np.sum(d[..., 1:, :] * d[..., :-1, :] < 0, axis=-2)


def total_variation(values: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(np.diff(values, axis=-2)), axis=-2)


# ---------------------------------------------------------------------------
# stochastic simulation


@dataclass
class ReactionNetwork:
    species: list[str]
    init: list[float]
    reactants: np.ndarray  # (R, S) stoichiometric coefficients consumed
    products: np.ndarray  # (R, S)
    rates: np.ndarray  # (R,)
    horizon: float
    dt: float = 1.0
    name: str = "network"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reactants = np.atleast_2d(np.asarray(self.reactants, dtype=np.int64)).reshape(-1, len(self.species))
        self.products = np.atleast_2d(np.asarray(self.products, dtype=np.int64)).reshape(-1, len(self.species))
        self.rates = np.asarray(self.rates, dtype=float).reshape(-1)
        self.init = [float(x) for x in self.init]
        if len(self.init) != len(self.species):
            raise ValueError("init must give one count per species")
        if any(x < 0 or x != int(x) for x in self.init):
            raise ValueError("initial counts must be non-negative integers")
        if self.reactants.shape != self.products.shape or self.reactants.shape[0] != len(self.rates):
            raise ValueError("reactants, products and rates disagree on the number of reactions")
        if np.any(self.reactants < 0) or np.any(self.products < 0):
            raise ValueError("stoichiometric coefficients must be non-negative")
        if np.any(self.rates < 0):
            raise ValueError("rate constants must be non-negative")
        if not (self.horizon > 0 and self.dt > 0):
            raise ValueError("horizon and dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt must divide the horizon")

    @property
    def change(self) -> np.ndarray:
        return self.products - self.reactants

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(int(round(self.horizon / self.dt)) + 1)

    def propensities(self, state: np.ndarray) -> np.ndarray:
        """Mass-action propensities for states of shape (..., S) -> (..., R)."""
        state = np.asarray(state, dtype=float)
        factor = np.ones(state.shape[:-1] + (len(self.rates),))
        for r in range(len(self.rates)):
            for s in np.nonzero(self.reactants[r])[0]:
                factor[..., r] *= comb(state[..., s], self.reactants[r, s])
        return factor * self.rates

    @classmethod
    def from_config(cls, cfg: dict) -> ReactionNetwork:
        species = list(cfg["species"])
        index = {name: i for i, name in enumerate(species)}
        init = cfg["init"]
        if isinstance(init, dict):
            init = [init.get(name, 0) for name in species]

        def stoich(spec) -> np.ndarray:
            vec = np.zeros(len(species), dtype=np.int64)
            if isinstance(spec, dict):
                for name, k in spec.items():
                    vec[index[name]] += int(k)
            else:
                for name in spec:
                    vec[index[name]] += 1
            return vec

        reactions = cfg["reactions"]
        reactants = [stoich(r.get("reactants", [])) for r in reactions]
        products = [stoich(r.get("products", [])) for r in reactions]
        rates = [float(r["rate"]) for r in reactions]
        return cls(species, init, np.array(reactants).reshape(-1, len(species)),
                   np.array(products).reshape(-1, len(species)), rates,
                   float(cfg["horizon"]), float(cfg.get("dt", 1.0)), cfg.get("name", "network"),
                   dict(cfg.get("metadata", {})))

    def to_config(self) -> dict:
        def named(vec):
            return {self.species[i]: int(k) for i, k in enumerate(vec) if k}

        return {
            "name": self.name,
            "species": list(self.species),
            "init": {s: x for s, x in zip(self.species, self.init)},
            "reactions": [
                {"reactants": named(self.reactants[r]), "products": named(self.products[r]), "rate": float(self.rates[r])}
                for r in range(len(self.rates))
            ],
            "horizon": self.horizon,
            "dt": self.dt,
            "metadata": self.metadata,
        }


def sirs(beta: float = 0.3, gamma: float = 0.15, omega: float = 0.05, population: int = 100,
         infected: int = 5, horizon: float = 33.0, dt: float = 1.0) -> ReactionNetwork:
    """SIRS epidemic; infection propensity beta * S * I / N."""
    return ReactionNetwork(
        ["S", "I", "R"], [population - infected, infected, 0],
        reactants=[[1, 1, 0], [0, 1, 0], [0, 0, 1]],
        products=[[0, 2, 0], [0, 0, 1], [1, 0, 0]],
        rates=[beta / population, gamma, omega],
        horizon=horizon, dt=dt, name="sirs",
        metadata={"beta": beta, "gamma": gamma, "omega": omega, "population": population, "infected": infected},
    )


def immigration(rate: float = 1.0, death: float = 0.0, initial: int = 0, horizon: float = 50.0,
                dt: float = 1.0) -> ReactionNetwork:
    """Immigration (optionally immigration-death) of a single species X."""
    return ReactionNetwork(
        ["X"], [initial], reactants=[[0], [1]], products=[[1], [0]], rates=[rate, death],
        horizon=horizon, dt=dt, name="immigration", metadata={"rate": rate, "death": death, "initial": initial},
    )


PRESETS = {"sirs": sirs, "immigration": immigration}

_BUFFER = 256


def simulate_ssa(net: ReactionNetwork, count: int, seed: int, label: str = "ssa", start: int = 0,
                 return_events: bool = False):
    """Gillespie direct method for ``count`` independent runs, vectorised across runs.

    Run i draws its uniforms from substream (seed, label, start + i) in a fixed
    order, so its path does not depend on which other runs share the batch.
    With ``return_events`` the number of reaction events per run is returned too.
    """
    times = net.times
    n_grid = len(times)
    change = net.change.astype(float)
    gens = [substream(seed, label, start + i) for i in range(count)]
    buf = np.stack([g.random(2 * _BUFFER) for g in gens]) if count else np.zeros((0, 2 * _BUFFER))
    ptr = np.zeros(count, dtype=np.int64)

    state = np.tile(np.asarray(net.init, dtype=float), (count, 1))
    t = np.zeros(count)
    out = np.empty((count, n_grid, len(net.species)))
    next_grid = np.zeros(count, dtype=np.int64)
    events = np.zeros(count, dtype=np.int64)
    active = np.ones(count, dtype=bool)
    rows = np.arange(count)

    while active.any():
        idx = rows[active]
        need = ptr[idx] + 2 > buf.shape[1]
        for i in idx[need]:
            buf[i] = gens[i].random(2 * _BUFFER)
            ptr[i] = 0
        u1 = buf[idx, ptr[idx]]
        u2 = buf[idx, ptr[idx] + 1]
        ptr[idx] += 2

        props = net.propensities(state[idx])
        total = props.sum(axis=1)
        with np.errstate(divide="ignore"):
            tau = np.where(total > 0, -np.log1p(-u1) / total, np.inf)
        t_new = t[idx] + tau

        # hold the pre-event state on every grid point before the event
        while True:
            pending = (next_grid[idx] < n_grid)
            pending &= times[np.minimum(next_grid[idx], n_grid - 1)] < t_new
            if not pending.any():
                break
            j = idx[pending]
            out[j, next_grid[j]] = state[j]
            next_grid[j] += 1

        fire = np.isfinite(t_new) & (next_grid[idx] < n_grid)
        j = idx[fire]
        if j.size:
            cum = np.cumsum(props[fire], axis=1)
            target = u2[fire] * total[fire]
            choice = np.minimum((cum <= target[:, None]).sum(axis=1), cum.shape[1] - 1)
            state[j] += change[choice]
            t[j] = t_new[fire]
            events[j] += 1
        active[idx[~fire]] = False

    if np.any(out < 0):
        raise AssertionError("negative species count")
    batch = TrajectoryBatch(times, out)
    return (batch, events) if return_events else batch


# ---------------------------------------------------------------------------
# standardisation


@dataclass(frozen=True)
class AffineTransform:
    """Per-dimension z-scoring: standardized = (raw - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.shift) / self.scale

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.scale + self.shift

    def threshold_to_model_units(self, var: int, theta: float) -> float:
        return float(theta * self.scale[var] + self.shift[var])

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}


def fit_standardizer(trajs) -> AffineTransform:
    batch = TrajectoryBatch.stack(trajs)
    flat = batch.values.reshape(-1, batch.dimension)
    if flat.shape[0] == 0:
        raise ValueError("cannot standardize an empty set of trajectories")
    shift = flat.mean(axis=0)
    scale = flat.std(axis=0)
    zero = np.nonzero(~(scale > 0))[0]
    if zero.size:
        raise ValueError(f"zero pooled variance in dimension(s) {zero.tolist()}")
    return AffineTransform(shift, scale)


def standardize(trajs, transform: AffineTransform | None = None) -> tuple[TrajectoryBatch, AffineTransform]:
    """Z-score every dimension with pooled statistics (or a given transform)."""
    batch = TrajectoryBatch.stack(trajs)
    if transform is None:
        transform = fit_standardizer(batch)
    return TrajectoryBatch(batch.times, transform.apply(batch.values)), transform


# ---------------------------------------------------------------------------
# file formats


def write_csv(path, batch: TrajectoryBatch) -> None:
    m, length, n = batch.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"x{i}" for i in range(n)])
        for k in range(m):
            for j in range(length):
                w.writerow([k, repr(float(batch.times[j]))] + [repr(float(v)) for v in batch.values[k, j]])


def read_csv(path) -> TrajectoryBatch:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["traj_id", "t"] or header[2:] != [f"x{i}" for i in range(len(header) - 2)]:
            raise ValueError(f"{path}: bad trajectory CSV header {header}")
        rows = [[float(x) for x in row] for row in r if row]
    if not rows:
        raise ValueError(f"{path}: no trajectory rows")
    data = np.asarray(rows)
    ids = data[:, 0].astype(np.int64)
    if np.any(np.diff(ids) < 0):
        raise ValueError(f"{path}: rows must be sorted by traj_id")
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts != counts[0]):
        raise ValueError(f"{path}: trajectories have different lengths")
    length = int(counts[0])
    times = data[:length, 1]
    values = data[:, 2:].reshape(len(uniq), length, data.shape[1] - 2)
    if not np.allclose(data[:, 1].reshape(len(uniq), length), times):
        raise ValueError(f"{path}: trajectories do not share a time grid")
    return TrajectoryBatch(times, values)


def load_network(path) -> ReactionNetwork:
    with open(path) as fh:
        return ReactionNetwork.from_config(json.load(fh))


def mu0_to_dict(p: Mu0Params) -> dict:
    return asdict(p)


# ---------------------------------------------------------------------------
# trajectory sources


@dataclass
class TrajectorySource:
    """Either mu0 or a reaction network, optionally z-scored.

    Network trajectories are standardized with a transform fitted once on a
    reference sample (``reference_count`` runs of the ``standardizer`` stream),
    so every batch drawn from the source shares the same units.
    """

    mu0: Mu0Params | None = None
    network: ReactionNetwork | None = None
    standardize: bool = True
    reference_count: int = 1000

    def __post_init__(self):
        if (self.mu0 is None) == (self.network is None):
            raise ValueError("give exactly one of mu0 or network")
        self._transforms: dict[int, AffineTransform] = {}

    @property
    def dimension(self) -> int:
        return self.mu0.dimension if self.mu0 is not None else len(self.network.species)

    @property
    def name(self) -> str:
        return "mu0" if self.mu0 is not None else self.network.name

    def transform(self, seed: int) -> AffineTransform | None:
        if self.network is None or not self.standardize:
            return None
        if seed not in self._transforms:
            ref = simulate_ssa(self.network, self.reference_count, seed, label="standardizer")
            self._transforms[seed] = fit_standardizer(ref)
        return self._transforms[seed]

    def sample(self, count: int, seed: int, label: str, start: int = 0) -> TrajectoryBatch:
        if self.mu0 is not None:
            return sample_mu0(self.mu0, count, seed, label, start)
        batch = simulate_ssa(self.network, count, seed, label, start)
        tf = self.transform(seed)
        return batch if tf is None else standardize(batch, tf)[0]

    def to_dict(self) -> dict:
        if self.mu0 is not None:
            return {"kind": "mu0", "params": mu0_to_dict(self.mu0)}
        return {"kind": "network", "network": self.network.to_config(), "standardize": self.standardize,
                "reference_count": self.reference_count}

    @classmethod
    def from_dict(cls, d: dict) -> TrajectorySource:
        if d.get("kind", "mu0") == "mu0":
            return cls(mu0=Mu0Params(**d.get("params", {})))
        net = d["network"]
        net = PRESETS[net]() if isinstance(net, str) else ReactionNetwork.from_config(net)
        return cls(network=net, standardize=d.get("standardize", True),
                   reference_count=int(d.get("reference_count", 1000)))
