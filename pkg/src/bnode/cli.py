"""Command-line workflows: data generation, training, evaluation and the linear comparisons.

Every command resolves a JSON parameter tree (built-in defaults, then
``--config`` file, then ``--set key=value`` overrides, then explicit flags),
writes it to ``<out>/config.json`` and only then starts working.  Exit codes:
0 on success, 1 for usage or configuration errors, 2 when the work itself
fails.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import linear_baselines as lb
from .dataset import (DEFAULT_SPLIT, RrocsConfig, assign_splits, SamplingSpec, TrajectoryDataset, generate_dataset,
                      load_dataset, save_dataset)
from .odeint import SolverConfig
from .physics import KoopmanAnalyticModel, ShfModel, simulate_lti
from .surrogate import (BNodeConfig, BNodeModel, LatentOdeBaseline, LatentOdeConfig, SsNodeConfig,
                        SsNodeModel, error_metrics, latent_kl, load_model, mask_inactive_channels,
                        save_model)
from .trainer import TrainConfig, evaluate_model, sweep_beta, train

log = logging.getLogger("bnode")

SYSTEMS = {"shf": ShfModel, "koopman-analytic": KoopmanAnalyticModel}
SYSTEM_ALIASES = {"koopman": "koopman-analytic"}
VARIANTS = {
    "bnode-const": "const-var", "bnode-dyn": "dyn-var",
    "bnode-koopman-const": "koopman-const", "bnode-koopman-dyn": "koopman-dyn",
    "ssnode": None, "latentode": None,
}

SOLVER_DEFAULTS = {"method": "dopri5", "rtol": 1e-6, "atol": 1e-8}

DATA_DEFAULTS = {
    "shf": {
        "samples": 1024, "controls": "rrocs",
        "system": {"R": 1.0, "C": 1.0, "n_seg": 16},
        "sampling": {"t_start": 0.0, "t_stop": 1.2, "dt": 0.002, "drop_prefix": 0.2,
                     "u_lower": [273.15, 273.15], "u_upper": [473.15, 473.15],
                     "f_min": 2.0, "f_max": 20.0, "x0_lower": None, "x0_upper": None},
    },
    "koopman-analytic": {
        "samples": 1024, "controls": "rrocs",
        "system": {"a": -0.5, "b": -1.0},
        "sampling": {"t_start": 0.0, "t_stop": 10.0, "dt": 0.1, "drop_prefix": 0.2,
                     "u_lower": [], "u_upper": [], "f_min": 2.0, "f_max": 20.0,
                     "x0_lower": [-50.0, -50.0], "x0_upper": [50.0, 50.0]},
    },
}

# desk-scale recipes; every entry can be overridden from a config file or --set
TRAIN_DEFAULTS = {
    "ShfModel": {
        "variant": "bnode-const",
        "model": {"lat_x": 16, "lat_u": 16, "hidden": 64, "n_layers": 4, "time_scale": 0.1},
        "train": {"beta": 0.1, "lr": 1e-3, "batch_size": 64, "batches_per_epoch": 12,
                  "max_epochs": 170, "patience": 30,
                  "phases": [{"solver": "rk4", "tau": 10, "stable_epochs": 5, "max_epochs": 20},
                             {"solver": "rk4", "tau": 250, "ramp_batches": 100, "stable_epochs": 10,
                              "max_epochs": 150}]},
        "eval": {"method": "rk4"},
    },
    "KoopmanAnalyticModel": {
        "variant": "bnode-koopman-const",
        "model": {"lat_x": 64, "hidden": 64, "n_layers": 3, "time_scale": 1.0},
        "train": {"beta": 0.01, "lr": 1e-3, "batch_size": 128, "batches_per_epoch": 12,
                  "max_epochs": 300, "patience": 30,
                  "phases": [{"solver": "rk4", "tau": 10, "stable_epochs": 10, "max_epochs": 50},
                             {"solver": "rk4", "tau": 90, "ramp_batches": 100, "max_epochs": 250}]},
        "eval": {"method": "rk4"},
    },
}


class ConfigError(Exception):
    """Bad flags, config values or missing inputs (exit code 1)."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# parameter trees


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_set(items) -> dict:
    """``key.sub=value`` pairs; values are JSON when they parse, plain strings otherwise."""
    tree: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(tree, key.strip(), value)
    return tree


def read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        tree = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError("config file must hold a JSON object")
    return tree


def user_tree(args) -> dict:
    """File values overlaid with ``--set``; defaults and flags are added by each command."""
    return deep_merge(read_config_file(args.config), parse_set(args.set))


def resolve_seed(flag, tree: dict) -> int:
    """Flag, then config, then ``BNODE_SEED``, then 0."""
    for value in (flag, tree.get("seed"), os.environ.get("BNODE_SEED")):
        if value is not None:
            try:
                return int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"seed must be an integer, got {value!r}") from None
    return 0


def start_run(out, command: str, tree: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "version": __version__, **tree}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return out


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_rows(path: Path, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in fields})


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def parse_int_list(text: str) -> list[int]:
    """``"1..16"`` or ``"1,2,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..16 or a list like 1,2,4: {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def parse_float_list(text: str) -> list[float]:
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def solver_from(tree: dict) -> SolverConfig:
    try:
        return SolverConfig(**tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver settings: {exc}") from None


def open_dataset(path) -> TrajectoryDataset:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"no dataset at {p}")
    try:
        return load_dataset(p)
    except ValueError as exc:
        raise ConfigError(f"dataset {p}: {exc}") from None


def open_model(run: Path):
    for cand in (run / "model", run):
        if (cand / "model.json").is_file():
            return load_model(cand)
    raise ConfigError(f"no model checkpoint under {run}")


def rebuild_system(ds: TrajectoryDataset):
    name = ds.config.get("system")
    cls = {c.__name__: c for c in SYSTEMS.values()}.get(name)
    if cls is None:
        raise ConfigError(f"dataset system {name!r} is not one of the built-in models")
    return cls(**ds.config.get("system_params", {}))


# --------------------------------------------------------------------------
# generate-data


def cmd_generate_data(args) -> int:
    user = user_tree(args)
    model = args.model or user.get("model", "shf")
    model = SYSTEM_ALIASES.get(model, model)
    if model not in SYSTEMS:
        raise ConfigError(f"unknown model {model!r}; choose from {sorted(SYSTEMS)}")
    tree = deep_merge({"model": model, "solver": SOLVER_DEFAULTS, "fractions": DEFAULT_SPLIT,
                       **DATA_DEFAULTS[model]}, user)
    tree["model"] = model
    if "fractions" in user:  # a split table replaces the default instead of merging into it
        tree["fractions"] = dict(user["fractions"])
    if args.samples is not None:
        tree["samples"] = args.samples
    if args.controls is not None:
        tree["controls"] = args.controls
    tree["seed"] = resolve_seed(args.seed, tree)

    try:
        system = SYSTEMS[model](**tree["system"])
        s = tree["sampling"]
        controls = None
        if system.n_controls:
            controls = RrocsConfig(tuple(s["u_lower"]), tuple(s["u_upper"]), s["f_min"], s["f_max"])
        spec = SamplingSpec(
            n_samples=int(tree["samples"]), t_stop=s["t_stop"], dt=s["dt"], t_start=s["t_start"],
            drop_prefix=s["drop_prefix"],
            x0_lower=None if s["x0_lower"] is None else tuple(s["x0_lower"]),
            x0_upper=None if s["x0_upper"] is None else tuple(s["x0_upper"]),
            controls=controls, control_kind=tree["controls"])
        solver = solver_from(tree["solver"])
        assign_splits(spec.n_samples, dict(tree["fractions"]), 0)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid data configuration: {exc}") from None

    out = start_run(args.out, "generate-data", tree)
    ds = generate_dataset(system, spec, solver, dict(tree["fractions"]), seed=tree["seed"])
    save_dataset(ds, out)
    print(f"wrote {out}: N={ds.n_samples} T={ds.T} points={ds.T + 1} dims={ds.dims} "
          f"splits={ds.split_counts()}")
    return 0


# --------------------------------------------------------------------------
# model construction and training


_MODEL_FIELDS = {f.name for cls in (BNodeConfig, SsNodeConfig, LatentOdeConfig)
                 for f in dataclasses.fields(cls)}
_DIM_FIELDS = {"n_x", "n_u", "n_p", "n_y", "variant"}


def train_tree(args, ds: TrajectoryDataset) -> dict:
    system = ds.config.get("system", "ShfModel")
    defaults = TRAIN_DEFAULTS.get(system, TRAIN_DEFAULTS["ShfModel"])
    tree = deep_merge(defaults, user_tree(args))
    if getattr(args, "variant", None):
        tree["variant"] = args.variant
    if getattr(args, "beta", None) is not None:
        tree["train"]["beta"] = args.beta
    if getattr(args, "max_epochs", None) is not None:
        tree["train"]["max_epochs"] = args.max_epochs
    tree["seed"] = resolve_seed(args.seed, tree)
    tree["train"]["seed"] = tree["seed"]
    if tree["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {tree['variant']!r}; choose from {sorted(VARIANTS)}")
    unknown = set(tree.get("model", {})) - (_MODEL_FIELDS - _DIM_FIELDS)
    if unknown:
        raise ConfigError(f"unknown model settings: {sorted(unknown)}")
    return tree


def make_factory(tree: dict, ds: TrajectoryDataset):
    """``seed -> model`` for the configured variant; validates the configuration once."""
    variant = tree["variant"]
    dims = ds.dims
    settings = {k: v for k, v in tree.get("model", {}).items()}
    if settings.get("koopman_init") is not None:
        settings["koopman_init"] = tuple(settings["koopman_init"])
    if variant == "ssnode":
        cls, cfg_cls = SsNodeModel, SsNodeConfig
    elif variant == "latentode":
        cls, cfg_cls = LatentOdeBaseline, LatentOdeConfig
    else:
        cls, cfg_cls = BNodeModel, BNodeConfig
        settings["variant"] = VARIANTS[variant]
    names = {f.name for f in dataclasses.fields(cfg_cls)}
    try:
        cfg = cfg_cls(**dims, **{k: v for k, v in settings.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model settings: {exc}") from None

    def factory(seed: int):
        return cls(cfg, seed, ds.stats)

    return factory


def train_config(tree: dict) -> TrainConfig:
    try:
        return TrainConfig.from_json(tree["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training settings: {exc}") from None


def eval_solver(tree: dict) -> SolverConfig:
    return solver_from({**{"method": "rk4"}, **tree.get("eval", {})})


def public_report(rep: dict) -> dict:
    return {k: v for k, v in rep.items() if not k.startswith("_")}


def cmd_train(args) -> int:
    ds = open_dataset(args.data)
    tree = train_tree(args, ds)
    factory = make_factory(tree, ds)
    cfg = train_config(tree)
    solver = eval_solver(tree)
    if cfg.phases[-1].tau >= ds.T:
        raise ConfigError(f"final phase tau={cfg.phases[-1].tau} must be below the sequence length {ds.T}")
    out = start_run(args.out, "train", {**tree, "data": str(args.data)})

    def progress(row):
        log.info("epoch %d phase %d tau %d train %.5f val %.5f active_x %s", row["epoch"], row["phase"],
                 row["tau"], row["train_loss"], row["val_loss"], row["active_x"])

    res = train(factory(cfg.seed), ds, cfg, out, resume=args.resume, callback=progress)
    save_model(res.model, out / "model", {"best_epoch": res.best_epoch, "best_val": res.best_val})
    rep = public_report(evaluate_model(res.model, ds, "test", solver))
    rep.update({"variant": tree["variant"], "beta": cfg.beta, "best_epoch": res.best_epoch,
                "best_val": res.best_val, "epochs": len(res.history), "stopped_early": res.aborted})
    write_json(out / "report.json", rep)
    print(f"test rmse_mean_norm={rep['rmse_mean_norm']:.5g} rmse_var_norm={rep['rmse_var_norm']:.5g} "
          f"max_error={rep['max_error']:.5g} active_dims={rep.get('active_dims')} "
          f"rhs_evals={rep['rhs_evals']}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def trajectory_rows(rep: dict, ds: TrajectoryDataset, sample: int) -> tuple[list[dict], list[str]]:
    pred = rep["_prediction"]
    names = {"states": ds.names.get("states") or [f"x{i}" for i in range(pred["x"].shape[-1])],
             "outputs": ds.names.get("outputs") or [f"y{i}" for i in range(pred["y"].shape[-1])]}
    fields = ["sample", "time"]
    for n in names["states"] + names["outputs"]:
        fields += [f"{n}_true", f"{n}_pred"]
    rows = []
    for k, t in enumerate(ds.times):
        row = {"sample": sample, "time": float(t)}
        for n, i in zip(names["states"], range(pred["x"].shape[-1])):
            row[f"{n}_true"] = pred["x_true"][sample, k, i]
            row[f"{n}_pred"] = pred["x"][sample, k, i]
        for n, i in zip(names["outputs"], range(pred["y"].shape[-1])):
            row[f"{n}_true"] = pred["y_true"][sample, k, i]
            row[f"{n}_pred"] = pred["y"][sample, k, i]
        rows.append(row)
    return rows, fields


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    model = open_model(run)
    ds = open_dataset(args.data)
    tree = deep_merge({"split": "test", "eval": {"method": "rk4", "rtol": 1e-6, "atol": 1e-8}},
                      user_tree(args))
    if args.split:
        tree["split"] = args.split
    if args.solver:
        tree["eval"]["method"] = args.solver
    tree["data"] = str(args.data)
    solver = eval_solver(tree)
    split = tree["split"]
    try:
        if ds.indices(split).size == 0:
            raise ConfigError(f"split {split!r} of {args.data} is empty")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = start_run(args.out or run / f"eval_{split}", "evaluate", tree)
    rep = evaluate_model(model, ds, split, solver)
    # positions within the split, plus the dataset-wide index of the worst one
    sample = rep["worst_sample"]
    rep["worst_sample_dataset_index"] = int(ds.indices(split)[sample])
    rows, fields = trajectory_rows(rep, ds.subset(split), sample)
    write_rows(out / "worst_sample.csv", rows, fields)
    write_json(out / "metrics.json", public_report(rep))
    print(f"{split}: rmse_mean_norm={rep['rmse_mean_norm']:.5g} worst sample {sample} "
          f"({rep['worst_sample_rmse_mean_norm']:.5g}) mean {rep['mean_sample_rmse_mean_norm']:.5g}")
    return 0


# --------------------------------------------------------------------------
# sweep-beta


SWEEP_FIELDS = ["beta", "seed", "rmse_mean_norm", "rmse_var_norm", "max_error", "active_x", "best_val",
                "error"]


def cmd_sweep_beta(args) -> int:
    ds = open_dataset(args.data)
    tree = train_tree(args, ds)
    tree["betas"] = args.betas if args.betas is not None else tree.get("betas", [0.01, 0.1])
    factory = make_factory(tree, ds)
    cfg = train_config(tree)
    out = start_run(args.out, "sweep-beta", {**tree, "data": str(args.data)})
    rows = sweep_beta(factory, ds, tree["betas"], cfg, out, eval_solver(tree))
    write_rows(out / "sweep.csv", rows, SWEEP_FIELDS)
    for r in rows:
        print(f"beta={r['beta']:g} seed={r['seed']} active_x={r['active_x']} "
              f"rmse_mean_norm={r['rmse_mean_norm']} {r['error']}".rstrip())
    return 2 if all(r["error"] for r in rows) else 0


# --------------------------------------------------------------------------
# latent diagnostics


def reference_spectrum(ds: TrajectoryDataset) -> np.ndarray:
    system = rebuild_system(ds)
    if isinstance(system, KoopmanAnalyticModel):
        return lb.eigenvalues(system.lifted_lti())
    return lb.eigenvalues(system.as_lti())


def cmd_koopman_eigs(args) -> int:
    run = Path(args.run)
    model = open_model(run)
    if not isinstance(model, BNodeModel) or not model.cfg.koopman:
        raise ConfigError("koopman-eigs needs a linear (Koopman) B-NODE checkpoint")
    ds = open_dataset(args.data)
    tree = deep_merge({"split": "test", "threshold": 0.1}, user_tree(args))
    if args.split:
        tree["split"] = args.split
    tree["data"] = str(args.data)
    out = start_run(args.out or run / "koopman_eigs", "koopman-eigs", tree)

    local = dataclasses.replace(ds, stats=model.stats) if model.stats is not None else ds
    kl = latent_kl(model, local.standardized(tree["split"]), ds.dt)["x"]
    active = (kl > tree["threshold"]) & (model.masks["x"] > 0)
    A = model.koop["A_mu_mu"].data
    learned = lb.restricted_eigenvalues(A, active, model.cfg.time_scale)
    reference = reference_spectrum(ds)
    matches = lb.match_eigenvalues(learned, reference)
    rows = [{"reference_real": m["reference"].real, "reference_imag": m["reference"].imag,
             "learned_real": m["learned"].real, "learned_imag": m["learned"].imag,
             "distance": m["distance"], "relative": m["relative"]} for m in matches]
    write_rows(out / "eigenvalues.csv", rows)
    summary = {"active_dims": int(active.sum()), "active_channels": np.flatnonzero(active).tolist(),
               "kl_x": kl.tolist(), "learned": [[z.real, z.imag] for z in learned],
               "reference": [[z.real, z.imag] for z in reference],
               "max_relative_error": max(r["relative"] for r in rows)}
    write_json(out / "summary.json", summary)
    for r in rows:
        print(f"ref {r['reference_real']:+.4f}{r['reference_imag']:+.4f}j  learned "
              f"{r['learned_real']:+.4f}{r['learned_imag']:+.4f}j  rel {r['relative']:.3%}")
    return 0


def cmd_mask_latents(args) -> int:
    run = Path(args.run)
    model = open_model(run)
    if not isinstance(model, BNodeModel):
        raise ConfigError("mask-latents needs a B-NODE checkpoint")
    ds = open_dataset(args.data)
    tree = deep_merge({"threshold": 0.1, "kl_split": "train", "split": "test",
                       "groups": ["x"], "eval": {"method": "rk4"}}, user_tree(args))
    if args.threshold is not None:
        tree["threshold"] = args.threshold
    if args.finetune_epochs is not None:
        tree.setdefault("finetune", {})["epochs"] = args.finetune_epochs
    tree["seed"] = resolve_seed(args.seed, tree)
    tree["data"] = str(args.data)
    out = start_run(args.out or run / "masked", "mask-latents", tree)
    solver = eval_solver(tree)

    local = dataclasses.replace(ds, stats=model.stats) if model.stats is not None else ds
    kl = latent_kl(model, local.standardized(tree["kl_split"]), ds.dt, solver)
    try:
        masked = mask_inactive_channels(model, kl, tree["threshold"], tuple(tree["groups"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ft = finetune_config(tree, ds)
    before = public_report(evaluate_model(model, ds, tree["split"], solver))
    after = public_report(evaluate_model(masked, ds, tree["split"], solver))
    result = {"masks": {k: v.tolist() for k, v in masked.masks.items()},
              "kl": {k: v.tolist() for k, v in kl.items()},
              "kept": {k: int(v.sum()) for k, v in masked.masks.items()},
              "before": before, "after": after,
              "relative_change": _relative(after, before), "masked_change": _relative(after, before)}
    if ft is not None:
        # the masked copy shares parameters with ``model``; both are done being scored
        res = train(masked, local, ft, out / "finetune")
        masked = res.model
        tuned = public_report(evaluate_model(masked, ds, tree["split"], solver))
        result.update({"finetuned": tuned, "finetune_epochs": len(res.history),
                       "relative_change": _relative(tuned, before)})
    save_model(masked, out / "model")
    write_json(out / "mask.json", result)
    final = result.get("finetuned", after)
    print(f"kept {result['kept']} rmse_mean_norm {before['rmse_mean_norm']:.5g} -> "
          f"{final['rmse_mean_norm']:.5g} ({result['relative_change']:+.2%})")
    return 0


def _relative(new: dict, old: dict) -> float:
    return (new["rmse_mean_norm"] - old["rmse_mean_norm"]) / old["rmse_mean_norm"]


def finetune_config(tree: dict, ds: TrajectoryDataset) -> TrainConfig | None:
    """beta=0 training of the masked model, at the last default horizon unless overridden."""
    spec = dict(tree.get("finetune", {}))
    epochs = spec.pop("epochs", 0)
    if not isinstance(epochs, int) or epochs < 0:
        raise ConfigError("finetune epochs must be a non-negative integer")
    if epochs == 0:
        return None
    base = TRAIN_DEFAULTS.get(ds.config.get("system", "ShfModel"), TRAIN_DEFAULTS["ShfModel"])["train"]
    last = base["phases"][-1]
    ftree = deep_merge({k: v for k, v in base.items() if k != "phases"}, spec)
    ftree.setdefault("phases", [{"solver": last["solver"], "tau": last["tau"], "max_epochs": epochs}])
    ftree.update(beta=0.0, max_epochs=epochs, seed=tree["seed"])
    return train_config({"train": ftree})


# --------------------------------------------------------------------------
# linear comparisons


def _state_metric(pred, truth) -> dict:
    return error_metrics(pred, truth)


def cmd_tbr(args) -> int:
    ds = open_dataset(args.data)
    system = rebuild_system(ds)
    if not hasattr(system, "as_lti"):
        raise ConfigError("tbr needs a linear system")
    full = system.as_lti()
    tree = deep_merge({"split": "test", "orders": list(range(1, full.n_states + 1))}, user_tree(args))
    if args.orders is not None:
        tree["orders"] = args.orders
    if args.split:
        tree["split"] = args.split
    tree["data"] = str(args.data)
    bad = [r for r in tree["orders"] if not 1 <= r <= full.n_states]
    if bad:
        raise ConfigError(f"orders {bad} outside [1, {full.n_states}]")
    out = start_run(args.out, "tbr", tree)

    # the full state is the output, so the reduced model reconstructs every temperature
    sys_x = dataclasses.replace(full, C=np.eye(full.n_states), D=np.zeros((full.n_states, full.n_inputs)))
    idx = ds.indices(tree["split"])
    x = ds.states[idx].astype(np.float64)
    u = ds.controls[idx].astype(np.float64)
    rows = lb.tbr_curve(sys_x, x, u, ds.dt, tree["orders"], _state_metric)
    write_rows(out / "tbr.csv", rows, lb.BASELINE_FIELDS)
    hsv = lb.balance(sys_x)[0]
    write_json(out / "hankel.json", {"hankel_singular_values": hsv.tolist()})
    for r in rows:
        print(f"r={r['order']:3d} rmse_mean_norm={r['rmse_mean_norm']:.5g} max_error={r['max_error']:.5g}")
    return 0


def snapshots(ds: TrajectoryDataset, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = ds.indices(split)
    x = ds.states[idx].astype(np.float64)
    u = ds.controls[idx].astype(np.float64)
    X = x[:, :-1].reshape(-1, x.shape[-1]).T
    Xp = x[:, 1:].reshape(-1, x.shape[-1]).T
    U = u[:, :-1].reshape(-1, u.shape[-1]).T
    return X, Xp, U


def cmd_dmdc(args) -> int:
    ds = open_dataset(args.data)
    n, q = ds.dims["n_x"], ds.dims["n_u"]
    tree = deep_merge({"fit_split": "train", "split": "test", "ranks": [n + q]}, user_tree(args))
    if args.ranks is not None:
        tree["ranks"] = args.ranks
    tree["data"] = str(args.data)
    bad = [r for r in tree["ranks"] if not 1 <= r <= n + q]
    if bad:
        raise ConfigError(f"ranks {bad} outside [1, {n + q}]")
    out = start_run(args.out, "dmdc", tree)

    X, Xp, U = snapshots(ds, tree["fit_split"])
    idx = ds.indices(tree["split"])
    x = ds.states[idx].astype(np.float64)
    u = ds.controls[idx].astype(np.float64)
    rows, eig_rows = [], []
    for r in tree["ranks"]:
        res = lb.dmdc_fit(X, Xp, U if q else None, rank=r, dt=ds.dt)
        xs, _ = simulate_lti(res.sys, x[:, 0], u, ds.dt, ds.T)
        m = error_metrics(xs, x) if np.all(np.isfinite(xs)) else \
            {"rmse_mean_norm": np.inf, "rmse_var_norm": np.inf, "max_error": np.inf}
        rows.append({"method": "dmdc", "order": r, **{k: m[k] for k in lb.BASELINE_FIELDS[2:]},
                     "effective_rank": res.rank})
        disc = np.linalg.eigvals(res.sys.A)
        cont = lb.dmdc_continuous_eigenvalues(res)
        for i, (d, c) in enumerate(zip(disc, cont)):
            eig_rows.append({"rank": r, "index": i, "discrete_real": d.real, "discrete_imag": d.imag,
                             "continuous_real": c.real, "continuous_imag": c.imag})
    write_rows(out / "dmdc.csv", rows, lb.BASELINE_FIELDS + ["effective_rank"])
    write_rows(out / "dmdc_eigenvalues.csv", eig_rows)
    for r in rows:
        print(f"rank={r['order']:3d} (effective {r['effective_rank']}) rmse_mean_norm={r['rmse_mean_norm']:.5g}")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> Parser:
    p = Parser(prog="bnode", description="Balanced Neural ODE surrogates and linear baselines.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON parameter file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one parameter, dotted keys, JSON values (repeatable)")
        sp.add_argument("--seed", type=int, help="master seed (falls back to config, then BNODE_SEED)")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    g = common(sub.add_parser("generate-data", help="simulate a trajectory dataset"))
    g.add_argument("--model", help="shf or koopman-analytic")
    g.add_argument("--samples", type=positive_int)
    g.add_argument("--controls", choices=("rrocs", "step"))
    g.set_defaults(func=cmd_generate_data)

    def training(sp):
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--variant", choices=sorted(VARIANTS))
        sp.add_argument("--beta", type=float)
        sp.add_argument("--max-epochs", type=positive_int)
        return sp

    t = training(common(sub.add_parser("train", help="train a surrogate")))
    t.add_argument("--resume", action="store_true", help="continue from <out>/last")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("evaluate", help="inference-mode metrics and worst-sample CSV"), False)
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"))
    e.add_argument("--solver", choices=("euler", "rk4", "dopri5"))
    e.set_defaults(func=cmd_evaluate)

    s = training(common(sub.add_parser("sweep-beta", help="independent runs over beta values")))
    s.add_argument("--betas", type=parse_float_list, help="comma-separated, e.g. 0.01,0.1")
    s.set_defaults(func=cmd_sweep_beta)

    k = common(sub.add_parser("koopman-eigs", help="learned vs. lifted eigenvalues"), False)
    k.add_argument("--run", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--split", choices=("train", "val", "test"))
    k.set_defaults(func=cmd_koopman_eigs)

    m = common(sub.add_parser("mask-latents", help="pin low-KL channels to the prior"), False)
    m.add_argument("--run", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--threshold", type=float)
    m.add_argument("--finetune-epochs", type=int, help="train the masked model with beta=0 for this many epochs")
    m.set_defaults(func=cmd_mask_latents)

    b = common(sub.add_parser("tbr", help="balanced truncation error curve"))
    b.add_argument("--data", required=True)
    b.add_argument("--orders", type=parse_int_list, help="e.g. 1..16 or 1,2,4")
    b.add_argument("--split", choices=("train", "val", "test"))
    b.set_defaults(func=cmd_tbr)

    d = common(sub.add_parser("dmdc", help="DMD with control per rank"))
    d.add_argument("--data", required=True)
    d.add_argument("--ranks", type=parse_int_list, help="e.g. 18 or 4..18")
    d.set_defaults(func=cmd_dmdc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bnode {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure of the work itself
        log.debug("failure", exc_info=True)
        print(f"bnode {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
