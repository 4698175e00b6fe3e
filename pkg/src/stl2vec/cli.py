"""Command-line front end.

Every subcommand writes a run manifest next to its outputs: ``<file>.manifest.json``
for a single output file, ``manifest.json`` inside an output directory.  The
manifest holds the effective configuration, the master seed, input and output
hashes and the tool build, and ``stl2vec rerun`` replays it.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (Dataset, DatasetSpec, ablation_suite, build_dataset, centroid_accuracy, explain_dataset,
                       ks_statistic, probe_coordinates, single_variable_labels, stability_study,
                       write_quantile_table, write_scatter_csv)
from .embedding import (KpcaModel, RankError, StaleModelError, components_for, fit_kpca, project,
                        variance_explained, write_embeddings_csv)
from .formulagen import DEFAULT_WEIGHTS, FormulaDistParams, mean_node_count, sample_formulae
from .kernel import (MonitorError, cosine_normalize, cross_kernel, file_hash, gram, read_matrix_csv, robustness_matrix,
                     write_matrix_csv)
from .logic import (HorizonError, IntervalError, ParseError, RobustnessMode, read_formulae, variables,
                    write_formulae)
from .regression import ExperimentConfig, experiment
from .rng import resolve_seed
from .trajgen import (PRESETS, Mu0Params, TrajectorySource, load_network, mu0_to_dict, read_csv, sample_mu0,
                      simulate_ssa, standardize, write_csv)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def build_id() -> str:
    """Version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# manifests


def manifest_path(output: str) -> Path:
    p = Path(output)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


class Run:
    """Collects inputs and outputs of one invocation and writes its manifest."""

    def __init__(self, command: str, config: dict, threads: int):
        self.command = command
        self.config = config
        self.threads = threads
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.results: dict = {}
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def add_input(self, path) -> str:
        path = str(Path(path).resolve())
        if not os.path.exists(path):
            raise DataError(f"{path}: no such file")
        digest = file_hash(path)
        check_upstream(path, digest)
        self.inputs[path] = digest
        return path

    def add_output(self, path) -> None:
        path = str(Path(path).resolve())
        self.outputs[path] = file_hash(path)

    def write(self, target) -> Path:
        mpath = manifest_path(target).resolve()
        data = {
            "command": self.command,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": {str(Path(k).relative_to(mpath.parent)) if Path(k).is_relative_to(mpath.parent) else k: v
                        for k, v in self.outputs.items()},
            "results": self.results,
            "build": build_id(),
            "threads": self.threads,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        with open(mpath, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
        return mpath


def _upstream_manifest(path: str) -> tuple[Path, dict] | None:
    p = Path(path)
    for cand in (p.with_name(p.name + ".manifest.json"), p.parent / "manifest.json"):
        if cand.exists() and cand != p:
            try:
                with open(cand) as fh:
                    return cand, json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{cand}: unreadable manifest ({exc})") from None
    return None


def check_upstream(path: str, digest: str) -> None:
    """Refuse an input whose hash disagrees with the manifest that produced it."""
    found = _upstream_manifest(path)
    if found is None:
        return
    mpath, data = found
    outs = data.get("outputs", {})
    for key in (str(Path(path).relative_to(mpath.parent)), path):
        if key in outs:
            if outs[key] != digest:
                raise DataError(f"{path}: content does not match the hash recorded in {mpath}")
            return


# ---------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


DEFAULTS: dict[str, dict] = {
    "sample-formulae": {"n_vars": 3, "p_leaf": 0.5, "t_max": 10, "count": 1000, "max_depth": None,
                        "weights": list(DEFAULT_WEIGHTS), "seed": None, "output": None},
    "sample-mu0": {"count": 1000, "dimension": 3, "a": 0.0, "b": 100.0, "dt": 1.0, "init_mean": 0.0,
                   "init_std": 1.0, "tv_mean": 0.0, "tv_std": 1.0, "q": 0.1, "sign_process": "independent",
                   "seed": None, "output": None},
    "simulate-ssa": {"network": "sirs", "count": 1000, "standardize": False, "seed": None, "output": None},
    "monitor": {"formulae": None, "trajectories": None, "mode": "normalized", "output": None},
    "kernel": {"formulae": None, "trajectories": None, "mu0_count": 10_000, "dimension": None,
               "normalize": False, "save_robustness": False, "seed": None, "output": None},
    "embed": {"gram": None, "dim": 13, "output": None},
    "project": {"model": None, "formulae": None, "dim": None, "output": None},
    "explain": {"model": None, "n_vars": 3, "p_leaf": 0.5, "t_max": 10, "source": "mu0", "D": 1000,
                "M": 10_000, "dim": 13, "n_traj": 10_000, "per_variable": 400, "signed_group3": False, "seed": None,
                "output": None},
    "stability": {"p_leaf": [0.4, 0.45, 0.5], "per_setting": 2, "n_vars": 3, "D": 1000, "M": 10_000, "dim": 13,
                  "probes": 500, "seed": None, "output": None},
    "ablate": {"param": "p_leaf", "values": [0.3, 0.35, 0.4, 0.45, 0.5], "datasets": 10, "n_vars": 3,
               "D": 1000, "M": 10_000, "dim": 13, "n_traj": 10_000, "per_variable": 400, "seed": None,
               "output": None},
    "regress": {"targets": ["rho", "R", "S"], "dims": [7, 250, 500], "full_kernel": True, "repetitions": 20,
                "n_vars": 3, "p_leaf": 0.5, "source": "sirs", "D": 1000, "n_test": 200, "M": 10_000, "m": 1000,
                "ridge_scale": 1e-4, "seed": None, "output": None},
    "export-conditioning": {"model": None, "formulae": None, "dim": 250, "output": None},
}


# options holding file paths; stored absolute so manifests replay from any directory
PATH_OPTIONS = ("output", "formulae", "trajectories", "gram", "model", "network", "source")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stl2vec", description="Finite-dimensional embeddings of STL formulae.")
    ap.add_argument("--version", action="version", version=f"stl2vec {build_id()}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    common.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    common.add_argument("-o", "--output", help="output file or directory")

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], argument_default=argparse.SUPPRESS)

    p = cmd("sample-formulae", "sample random STL formulae")
    p.add_argument("--n-vars", type=int)
    p.add_argument("--p-leaf", type=float)
    p.add_argument("--t-max", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--weights", type=_floats, help="not,and,or,eventually,always,until")
    p.add_argument("--seed", type=int)

    p = cmd("sample-mu0", "sample trajectories from mu0")
    p.add_argument("--count", type=int)
    p.add_argument("--dimension", type=int)
    for name in ("a", "b", "dt", "init-mean", "init-std", "tv-mean", "tv-std", "q"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--sign-process", choices=["independent", "cumulative"])
    p.add_argument("--seed", type=int)

    p = cmd("simulate-ssa", "simulate a reaction network with the SSA")
    p.add_argument("--network", help=f"preset ({', '.join(PRESETS)}) or JSON network file")
    p.add_argument("--count", type=int)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--seed", type=int)

    p = cmd("monitor", "robustness of formulae on trajectories")
    p.add_argument("--formulae")
    p.add_argument("--trajectories")
    p.add_argument("--mode", choices=["normalized", "raw"])

    p = cmd("kernel", "robustness and Gram matrices")
    p.add_argument("--formulae")
    p.add_argument("--trajectories", help="trajectory CSV; if absent, mu0 trajectories are sampled")
    p.add_argument("--mu0-count", type=int)
    p.add_argument("--dimension", type=int)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--save-robustness", action="store_true")
    p.add_argument("--seed", type=int)

    p = cmd("embed", "kernel PCA of a Gram matrix")
    p.add_argument("--gram")
    p.add_argument("--dim", type=int)

    p = cmd("project", "embed new formulae with a fitted model")
    p.add_argument("--model")
    p.add_argument("--formulae")
    p.add_argument("--dim", type=int)

    p = cmd("explain", "explain the leading principal components")
    p.add_argument("--model", help="model bundle from `embed`; otherwise a dataset is generated")
    p.add_argument("--n-vars", type=int)
    p.add_argument("--p-leaf", type=float)
    p.add_argument("--t-max", type=int)
    p.add_argument("--source", help="mu0, a network preset, or a JSON network file")
    p.add_argument("-D", dest="D", type=int)
    p.add_argument("-M", dest="M", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--per-variable", type=int)
    p.add_argument("--signed-group3", action="store_true",
                   help="use the signed mean robustness change for the third PC group")
    p.add_argument("--seed", type=int)

    p = cmd("stability", "compare principal axes across training sets")
    p.add_argument("--p-leaf", type=_floats)
    p.add_argument("--per-setting", type=int)
    p.add_argument("--n-vars", type=int)
    p.add_argument("-D", dest="D", type=int)
    p.add_argument("-M", dest="M", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--probes", type=int)
    p.add_argument("--seed", type=int)

    p = cmd("ablate", "explanation quality across parameter settings")
    p.add_argument("--param", choices=["p_leaf", "q", "K", "n_vars"])
    p.add_argument("--values", type=_floats)
    p.add_argument("--datasets", type=int)
    p.add_argument("--n-vars", type=int)
    p.add_argument("-D", dest="D", type=int)
    p.add_argument("-M", dest="M", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--per-variable", type=int)
    p.add_argument("--seed", type=int)

    p = cmd("regress", "learn robustness, expected robustness and satisfaction probability")
    p.add_argument("--targets", type=lambda s: [x for x in s.split(",") if x])
    p.add_argument("--dims", type=_ints)
    p.add_argument("--no-full-kernel", dest="full_kernel", action="store_false")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--n-vars", type=int)
    p.add_argument("--p-leaf", type=float)
    p.add_argument("--source", help="target trajectories: mu0, a network preset, or a JSON network file")
    p.add_argument("-D", dest="D", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("-M", dest="M", type=int)
    p.add_argument("-m", dest="m", type=int)
    p.add_argument("--ridge-scale", type=float)
    p.add_argument("--seed", type=int)

    p = cmd("export-conditioning", "per-formula conditioning vectors for external generators")
    p.add_argument("--model")
    p.add_argument("--formulae")
    p.add_argument("--dim", type=int)

    p = sub.add_parser("rerun", help="replay a run manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", help="write outputs here instead of the recorded location")
    p.add_argument("--threads", type=int)
    return ap


def effective_config(command: str, ns: argparse.Namespace) -> dict:
    """Built-in defaults < JSON config file < command-line flags."""
    cfg = dict(DEFAULTS[command])
    given = vars(ns)
    if "config" in given:
        try:
            with open(given["config"]) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{given['config']}: {exc}") from None
        if command in file_cfg and isinstance(file_cfg[command], dict):
            file_cfg = file_cfg[command]
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown option(s) in config: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for key, val in given.items():
        if key in cfg:
            cfg[key] = val
    if "seed" in cfg:
        cfg["seed"] = resolve_seed(cfg["seed"])
    for key in PATH_OPTIONS:
        if cfg.get(key) and (key != "network" or cfg[key] not in PRESETS) and \
                (key != "source" or os.path.exists(cfg[key])):
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _outdir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"{p} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _source(spec: str, dimension: int | None = None) -> TrajectorySource:
    if spec == "mu0":
        return TrajectorySource(mu0=Mu0Params(dimension=dimension or 3))
    if spec in PRESETS:
        return TrajectorySource(network=PRESETS[spec]())
    return TrajectorySource(network=load_network(spec))


def _formula_params(cfg: dict) -> FormulaDistParams:
    return FormulaDistParams(p_leaf=cfg.get("p_leaf", 0.5), t_max=cfg.get("t_max", 10), n_vars=cfg["n_vars"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample_formulae(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    p = FormulaDistParams(p_leaf=cfg["p_leaf"], t_max=cfg["t_max"], n_vars=cfg["n_vars"],
                          weights=tuple(cfg["weights"]), max_depth=cfg["max_depth"])
    fs = sample_formulae(p, cfg["count"], cfg["seed"])
    write_formulae(cfg["output"], fs)
    run.add_output(cfg["output"])
    run.results["mean_nodes"] = mean_node_count(fs) if fs else 0.0
    run.write(cfg["output"])


def _mu0_params(cfg: dict) -> Mu0Params:
    keys = ("a", "b", "dt", "init_mean", "init_std", "tv_mean", "tv_std", "q", "dimension", "sign_process")
    return Mu0Params(**{k: cfg[k] for k in keys})


def cmd_sample_mu0(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    batch = sample_mu0(_mu0_params(cfg), cfg["count"], cfg["seed"])
    write_csv(cfg["output"], batch)
    run.add_output(cfg["output"])
    run.write(cfg["output"])


def cmd_simulate_ssa(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    net_spec = cfg["network"]
    if net_spec in PRESETS:
        net = PRESETS[net_spec]()
    else:
        run.add_input(net_spec)
        net = load_network(net_spec)
    batch = simulate_ssa(net, cfg["count"], cfg["seed"])
    if cfg["standardize"]:
        batch, tf = standardize(batch)
        run.results["standardizer"] = tf.to_dict()
    write_csv(cfg["output"], batch)
    run.add_output(cfg["output"])
    run.results["network"] = net.to_config()
    run.write(cfg["output"])


def cmd_monitor(cfg: dict, run: Run) -> None:
    _require(cfg, "formulae", "trajectories", "output")
    fs = read_formulae(run.add_input(cfg["formulae"]))
    trajs = read_csv(run.add_input(cfg["trajectories"]))
    rm = robustness_matrix(fs, trajs, RobustnessMode(cfg["mode"]), threads=run.threads)
    write_matrix_csv(cfg["output"], rm.values)
    run.add_output(cfg["output"])
    run.write(cfg["output"])


def _kernel_inputs(cfg: dict, run: Run):
    """Formulae and kernel trajectories plus a provenance record that lets
    downstream commands regenerate them."""
    fpath = run.add_input(cfg["formulae"])
    fs = read_formulae(fpath)
    if not fs:
        raise DataError(f"{fpath}: no formulae")
    prov = {"formulae": {"path": fpath, "sha256": run.inputs[fpath]}}
    if cfg.get("trajectories"):
        tpath = run.add_input(cfg["trajectories"])
        trajs = read_csv(tpath)
        prov["trajectories"] = {"kind": "file", "path": tpath, "sha256": run.inputs[tpath]}
    else:
        dim = cfg.get("dimension") or max(max(variables(f), default=0) for f in fs) + 1
        params = Mu0Params(dimension=dim)
        trajs = sample_mu0(params, cfg["mu0_count"], cfg["seed"], label="kernel-trajectories")
        prov["trajectories"] = {"kind": "mu0", "count": cfg["mu0_count"], "seed": cfg["seed"],
                                "params": mu0_to_dict(params)}
    return fs, trajs, prov


def _regenerate(prov: dict, run: Run):
    """Rebuild the training formulae and kernel trajectories from a provenance record."""
    fpath = prov["formulae"]["path"]
    if not os.path.exists(fpath) or file_hash(fpath) != prov["formulae"]["sha256"]:
        raise StaleModelError(f"{fpath}: training formulae missing or changed since the model was built")
    run.add_input(fpath)
    fs = read_formulae(fpath)
    tp = prov["trajectories"]
    if tp["kind"] == "file":
        if not os.path.exists(tp["path"]) or file_hash(tp["path"]) != tp["sha256"]:
            raise StaleModelError(f"{tp['path']}: kernel trajectories missing or changed")
        run.add_input(tp["path"])
        trajs = read_csv(tp["path"])
    else:
        trajs = sample_mu0(Mu0Params(**tp["params"]), tp["count"], tp["seed"], label="kernel-trajectories")
    return fs, trajs


def cmd_kernel(cfg: dict, run: Run) -> None:
    _require(cfg, "formulae", "output")
    out = _outdir(cfg["output"])
    fs, trajs, prov = _kernel_inputs(cfg, run)
    rm = robustness_matrix(fs, trajs, threads=run.threads)
    k = gram(rm, normalize=cfg["normalize"])
    write_matrix_csv(out / "gram.csv", k.values)
    run.add_output(out / "gram.csv")
    if cfg["save_robustness"]:
        write_matrix_csv(out / "robustness.csv", rm.values)
        run.add_output(out / "robustness.csv")
    prov.update({"robustness_hash": rm.hash, "normalize": cfg["normalize"], "D": len(fs), "M": len(trajs)})
    run.results["kernel"] = prov
    run.write(out)


def cmd_embed(cfg: dict, run: Run) -> None:
    _require(cfg, "gram", "output")
    out = _outdir(cfg["output"])
    gpath = run.add_input(cfg["gram"])
    k = read_matrix_csv(gpath)
    model = fit_kpca(k, cfg["dim"])
    upstream = _upstream_manifest(gpath)
    prov = upstream[1].get("results", {}).get("kernel") if upstream else None
    if prov:
        model.train_hash = prov["robustness_hash"]
        model.metadata["kernel"] = prov
    model.metadata["gram"] = {"path": gpath, "sha256": run.inputs[gpath]}
    with open(out / "eigenvalues.csv", "w") as fh:
        fh.write("index,eigenvalue,variance_explained\n")
        pos = model.spectrum[model.spectrum > 0]
        cum = np.cumsum(pos) / pos.sum() if pos.size else pos
        for i, lam in enumerate(model.spectrum):
            x = repr(float(cum[i])) if i < len(cum) else "1.0"
            fh.write(f"{i},{float(lam)!r},{x}\n")
    write_embeddings_csv(out / "embeddings.csv", model.training_coordinates())
    model.save(out / "model.json")
    for name in ("eigenvalues.csv", "embeddings.csv", "model.json"):
        run.add_output(out / name)
    xd = variance_explained(model, model.d)
    run.results.update({"variance_explained": xd, "pcs_95": components_for(model, 0.95),
                        "pcs_98": components_for(model, 0.98)})
    print(f"X_{model.d} = {xd:.6f}")
    run.write(out)


def _load_model(path: str, run: Run) -> KpcaModel:
    try:
        return KpcaModel.load(run.add_input(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a model bundle ({exc})") from None


def _project_formulae(model: KpcaModel, fpath: str, dim: int, run: Run) -> np.ndarray:
    prov = model.metadata.get("kernel")
    if not prov:
        raise DataError("model bundle carries no kernel provenance; build it with `kernel` then `embed`")
    if dim > model.d:
        raise DataError(f"requested {dim} components, the model retains {model.d}")
    train, trajs = _regenerate(prov, run)
    train_rm = robustness_matrix(train, trajs, threads=run.threads)
    if train_rm.hash != model.train_hash:
        raise StaleModelError("regenerated training robustness does not match the model")
    test = read_formulae(run.add_input(fpath))
    cross = cross_kernel(test, train_rm, trajs, threads=run.threads)
    if prov.get("normalize"):
        test_diag = np.mean(robustness_matrix(test, trajs).values ** 2, axis=1)
        train_diag = np.mean(train_rm.values ** 2, axis=1)
        cross = cosine_normalize(cross, test_diag, train_diag)
    return project(model, cross, dim, source_hash=train_rm.hash)


def cmd_project(cfg: dict, run: Run) -> None:
    _require(cfg, "model", "formulae", "output")
    model = _load_model(cfg["model"], run)
    dim = cfg["dim"] or model.d
    coords = _project_formulae(model, cfg["formulae"], dim, run)
    write_embeddings_csv(cfg["output"], coords)
    run.add_output(cfg["output"])
    run.write(cfg["output"])


def cmd_export_conditioning(cfg: dict, run: Run) -> None:
    _require(cfg, "model", "formulae", "output")
    model = _load_model(cfg["model"], run)
    coords = _project_formulae(model, cfg["formulae"], cfg["dim"], run)
    write_embeddings_csv(cfg["output"], coords)
    run.add_output(cfg["output"])
    run.results["dim"] = cfg["dim"]
    run.write(cfg["output"])


def _dataset_from_model(cfg: dict, run: Run) -> Dataset:
    model = _load_model(cfg["model"], run)
    prov = model.metadata.get("kernel")
    if not prov:
        raise DataError("model bundle carries no kernel provenance")
    fs, trajs = _regenerate(prov, run)
    rm = robustness_matrix(fs, trajs, threads=run.threads)
    if rm.hash != model.train_hash:
        raise StaleModelError("regenerated training robustness does not match the model")
    if prov["trajectories"]["kind"] != "mu0":
        raise DataError("explain --model needs a model whose kernel used sampled mu0 trajectories")
    params = Mu0Params(**prov["trajectories"]["params"])
    spec = DatasetSpec(formulae=_formula_params(cfg), source={"kind": "mu0", "params": mu0_to_dict(params)},
                       D=len(fs), M=len(trajs), d=model.d, seed=cfg["seed"])
    return Dataset(spec, fs, trajs, rm, model, model.training_coordinates())


def cmd_explain(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    out = _outdir(cfg["output"])
    if cfg["model"]:
        ds = _dataset_from_model(cfg, run)
    else:
        src = _source(cfg["source"], cfg["n_vars"])
        spec = DatasetSpec(formulae=_formula_params(cfg), source=src.to_dict(), D=cfg["D"], M=cfg["M"],
                           d=cfg["dim"], seed=cfg["seed"])
        ds = build_dataset(spec, threads=run.threads)
    n = ds.spec.formulae.n_vars
    if ds.model.d < 2 * n + 1:
        raise DataError(f"need at least {2 * n + 1} components to explain {n}-variable formulae")
    rep = explain_dataset(ds, n_traj=cfg["n_traj"], per_variable=cfg["per_variable"],
                          signed_group3=cfg["signed_group3"])
    rep.write_csv(out / "explanations.csv")
    run.add_output(out / "explanations.csv")
    for j in range(1, 2 * n + 1):
        name = out / f"scatter_pc0_pc{j}.csv"
        write_scatter_csv(name, ds.coords, ds.formulae, (0, j))
        run.add_output(name)
    labels = single_variable_labels(ds.formulae)
    mask = labels >= 0
    if len(np.unique(labels[mask])) > 1:
        run.results["variable_identification_accuracy"] = centroid_accuracy(ds.coords[mask][:, :n + 1],
                                                                            labels[mask])
    run.results["explanations"] = [list(r) for r in rep.rows]
    for pc, stat, r, group in rep.rows:
        print(f"PC{pc} {stat}: |r| = {r:.4f}")
    run.write(out)


def cmd_stability(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    out = _outdir(cfg["output"])
    base = FormulaDistParams(n_vars=cfg["n_vars"])
    datasets = []
    for i, p in enumerate(cfg["p_leaf"]):
        for k in range(cfg["per_setting"]):
            spec = DatasetSpec(formulae=replace(base, p_leaf=p), D=cfg["D"], M=cfg["M"], d=cfg["dim"],
                               seed=cfg["seed"] + 1000 * i + k)
            datasets.append(build_dataset(spec, threads=run.threads))
    probes = sample_formulae(base, cfg["probes"], cfg["seed"], "probes")
    sims = stability_study([probe_coordinates(ds, probes) for ds in datasets])
    with open(out / "stability.csv", "w") as fh:
        fh.write("rank,min,median,mean\n")
        for j in range(sims.shape[1]):
            col = sims[:, j]
            fh.write(f"{j},{float(col.min())!r},{float(np.median(col))!r},{float(col.mean())!r}\n")
    run.add_output(out / "stability.csv")
    run.results["min_first5"] = float(sims[:, :5].min())
    print(f"minimum matched |cosine| over the first 5 axes: {sims[:, :5].min():.4f}")
    run.write(out)


def cmd_ablate(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    out = _outdir(cfg["output"])
    settings = {}
    for v in cfg["values"]:
        fp = FormulaDistParams(n_vars=cfg["n_vars"])
        mu = Mu0Params(dimension=cfg["n_vars"])
        if cfg["param"] == "p_leaf":
            fp = replace(fp, p_leaf=v)
        elif cfg["param"] == "n_vars":
            fp, mu = replace(fp, n_vars=int(v)), replace(mu, dimension=int(v))
        elif cfg["param"] == "q":
            mu = replace(mu, q=v)
        else:
            mu = replace(mu, tv_std=v)
        settings[f"{cfg['param']}={v:g}"] = DatasetSpec(formulae=fp, source={"kind": "mu0", "params": mu0_to_dict(mu)},
                                                         D=cfg["D"], M=cfg["M"], d=cfg["dim"], seed=cfg["seed"])
    partial = out / "ablation.partial.csv"
    done: list = []

    def flush(name, rows):
        done.extend(rows)
        write_quantile_table(partial, done)

    rows = ablation_suite(settings, cfg["datasets"], cfg["n_traj"], cfg["per_variable"], flush, run.threads)
    write_quantile_table(out / "ablation.csv", rows)
    partial.unlink(missing_ok=True)
    run.add_output(out / "ablation.csv")
    run.write(out)


def cmd_regress(cfg: dict, run: Run) -> None:
    _require(cfg, "output")
    out = _outdir(cfg["output"])
    fp = FormulaDistParams(n_vars=cfg["n_vars"], p_leaf=cfg["p_leaf"])
    tsrc = _source(cfg["source"], cfg["n_vars"])
    ecfg = ExperimentConfig(formulae=fp, target_source=tsrc.to_dict(), targets=tuple(cfg["targets"]),
                            dims=tuple(cfg["dims"]), full_kernel=cfg["full_kernel"],
                            repetitions=cfg["repetitions"], D=cfg["D"], n_test=cfg["n_test"], M=cfg["M"],
                            m=cfg["m"], seed=cfg["seed"], ridge_scale=cfg["ridge_scale"])
    partial = out / "regression.partial.csv"
    res = experiment(ecfg, flush=lambda r: r.write_csv(partial))
    res.write_csv(out / "regression.csv")
    partial.unlink(missing_ok=True)
    run.add_output(out / "regression.csv")
    ks = {}
    if cfg["full_kernel"] and cfg["dims"]:
        top = f"stl2vec({max(cfg['dims'])})"
        for t in cfg["targets"]:
            re_a, ae_a = res.errors[(t, top)][0]
            re_b, ae_b = res.errors[(t, "kernel")][0]
            ks[t] = {"representation": top, "RE_p": ks_statistic(re_a, re_b)[1], "AE_p": ks_statistic(ae_a, ae_b)[1]}
    run.results["ks_first_repetition"] = ks
    for row in res.table():
        print(f"{row[0]:>4} {row[1]:>14}  median RE {row[3]:.5f}  median AE {row[7]:.5f}")
    run.write(out)


COMMANDS = {
    "sample-formulae": cmd_sample_formulae,
    "sample-mu0": cmd_sample_mu0,
    "simulate-ssa": cmd_simulate_ssa,
    "monitor": cmd_monitor,
    "kernel": cmd_kernel,
    "embed": cmd_embed,
    "project": cmd_project,
    "explain": cmd_explain,
    "stability": cmd_stability,
    "ablate": cmd_ablate,
    "regress": cmd_regress,
    "export-conditioning": cmd_export_conditioning,
}


def execute(command: str, cfg: dict, threads: int) -> None:
    COMMANDS[command](cfg, Run(command, cfg, threads))


def rerun(manifest: str, output: str | None, threads: int | None) -> None:
    try:
        with open(manifest) as fh:
            data = json.load(fh)
        command, cfg = data["command"], dict(data["config"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{manifest}: not a run manifest ({exc})") from None
    if command not in COMMANDS:
        raise DataError(f"{manifest}: unknown command {command!r}")
    for path, digest in data.get("inputs", {}).items():
        if not os.path.exists(path) or file_hash(path) != digest:
            raise DataError(f"{path}: input changed or missing since the recorded run")
    if output is not None:
        cfg["output"] = str(Path(output).resolve())
    execute(command, cfg, threads or data.get("threads") or 1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return 1
    threads = getattr(ns, "threads", None) or os.cpu_count() or 1
    if threads < 1:
        print("stl2vec: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        if ns.command == "rerun":
            rerun(ns.manifest, ns.output, getattr(ns, "threads", None))
        else:
            execute(ns.command, effective_config(ns.command, ns), threads)
    except UsageError as exc:
        print(f"stl2vec: error: {exc}", file=sys.stderr)
        return 1
    except (RankError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"stl2vec: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, StaleModelError, ParseError, IntervalError, HorizonError, MonitorError, OSError,
            ValueError, KeyError, TypeError) as exc:
        print(f"stl2vec: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
