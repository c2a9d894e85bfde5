"""Growing-horizon training with early stopping, metrics files and beta sweeps.

Training runs through a list of phases.  Inside a phase the window length
``tau`` ramps linearly (in completed batches) from the previous phase's
value to the phase target.  Every epoch ends with a full-length,
inference-mode validation pass whose loss drives checkpointing, phase
advancement and early stopping.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .dataset import TrajectoryDataset, random_windows, unstandardize
from .odeint import SolverConfig
from .surrogate import (BNodeModel, LatentOdeBaseline, RolloutError, count_active_dimensions,
                        error_metrics, load_model, loss_fn, predict, save_model)

__all__ = ["TrainPhase", "TrainConfig", "TrainResult", "TrainingAborted", "EarlyStopping",
           "tau_at", "train", "evaluate_model", "sweep_beta", "METRIC_FIELDS"]

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "epoch", "phase", "tau", "solver", "train_loss", "train_rec", "train_kl", "val_loss",
    "val_rec_x", "val_rec_y", "val_kl", "val_kl_p", "val_kl_u", "val_kl_x",
    "active_x", "active_u", "active_p", "rhs_evals", "val_rhs_evals", "skipped", "wall_time",
]


class TrainingAborted(RuntimeError):
    """Too many consecutive batches failed."""


@dataclass(frozen=True)
class TrainPhase:
    solver: str = "rk4"
    tau: int = 10
    ramp_batches: int = 0
    stable_epochs: int | None = None
    break_loss: float | None = None
    max_epochs: int = 1000
    substeps: int = 1

    def __post_init__(self) -> None:
        if self.solver not in ("euler", "rk4"):
            raise ValueError("training phases integrate with euler or rk4")
        if self.tau < 1 or self.ramp_batches < 0 or self.max_epochs < 1 or self.substeps < 1:
            raise ValueError("phase counts must be positive")
        if self.stable_epochs is not None and self.stable_epochs < 1:
            raise ValueError("stable_epochs must be positive")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float | None = 2.0
    batch_size: int = 256
    batches_per_epoch: int = 12
    max_epochs: int = 1000
    patience: int = 50
    rel_threshold: float = 1e-3
    seed: int = 0
    phases: tuple[TrainPhase, ...] = (TrainPhase(),)
    max_failures: int = 10

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("invalid learning rate or weight decay")
        for name in ("batch_size", "batches_per_epoch", "max_epochs", "patience", "max_failures"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.phases:
            raise ValueError("need at least one phase")
        taus = [p.tau for p in self.phases]
        if any(b < a for a, b in zip(taus, taus[1:])):
            raise ValueError("phase tau targets must be non-decreasing")

    def to_json(self) -> dict:
        d = asdict(self)
        d["phases"] = [asdict(p) for p in self.phases]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "phases" in d:
            d["phases"] = tuple(TrainPhase(**p) for p in d["phases"])
        return cls(**d)


class EarlyStopping:
    """Counts epochs without a relative improvement of at least ``threshold``."""

    def __init__(self, patience: int, threshold: float = 1e-3, best: float = math.inf, stale: int = 0):
        self.patience, self.threshold = patience, threshold
        self.best, self.stale = best, stale

    def improves(self, value: float) -> bool:
        if not math.isfinite(self.best):
            return math.isfinite(value)
        return value < self.best - self.threshold * abs(self.best)

    def update(self, value: float) -> bool:
        """Record a value; returns True when training should stop."""
        if self.improves(value):
            self.best, self.stale = value, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def tau_at(phase: TrainPhase, start_tau: int, batches_done: int) -> int:
    """Linear ramp from ``start_tau`` to ``phase.tau`` over ``ramp_batches``, rounded."""
    if phase.ramp_batches == 0 or batches_done >= phase.ramp_batches:
        return phase.tau
    frac = batches_done / phase.ramp_batches
    return int(round(start_tau + frac * (phase.tau - start_tau)))


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    best_val: float
    best_epoch: int
    aborted: bool = False
    run_dir: Path | None = None


def _solver(phase: TrainPhase) -> SolverConfig:
    return SolverConfig(phase.solver, phase.substeps)


def _validate(model, arrays, dt, solver, beta) -> tuple[dict, dict, int]:
    """Inference-mode loss over full sequences plus latent activity."""
    ro = model.rollout(arrays["states"][:, 0], arrays["controls"], arrays["parameters"], dt, solver,
                       train=False)
    _, comps = loss_fn(model)(model, arrays["states"], arrays["outputs"], ro, beta)
    active = {"x": "", "u": "", "p": ""}
    if isinstance(model, BNodeModel):
        from .surrogate.latent import kl_per_channel
        kx = kl_per_channel(ro.mu_x.data, np.broadcast_to(ro.sigma_x.data, ro.mu_x.shape))
        active["x"] = int((kx.reshape(-1, kx.shape[-1]).mean(0) > 0.1).sum())
        if ro.lat_u is not None:
            ku = ro.lat_u.kl()
            active["u"] = int((ku.reshape(-1, ku.shape[-1]).mean(0) > 0.1).sum())
        if ro.lat_p is not None:
            active["p"] = int((ro.lat_p.kl().mean(0) > 0.1).sum())
    return comps, active, ro.n_rhs


@dataclass
class _State:
    epoch: int = 0
    phase: int = 0
    phase_epoch: int = 0
    phase_batches: int = 0
    phase_start_tau: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    stale: int = 0
    phase_stale: int = 0
    phase_best: float = math.inf
    failures: int = 0
    done: bool = False


def _save_state(run_dir: Path, model, opt: dc.AdamState, st: _State) -> None:
    ck = run_dir / "last"
    save_model(model, ck)
    np.savez(ck / "adam.npz", *opt.m, *opt.v)
    meta = {"state": asdict(st), "adam_step": opt.step}
    (run_dir / "trainer_state.json").write_text(json.dumps(meta, indent=2, default=float))


def _load_state(run_dir: Path, model, opt: dc.AdamState) -> _State:
    meta = json.loads((run_dir / "trainer_state.json").read_text())
    saved = load_model(run_dir / "last")
    model.load_state({k: v.data for k, v in saved.named_parameters().items()})
    with np.load(run_dir / "last" / "adam.npz") as z:
        arrs = [z[f"arr_{i}"] for i in range(len(z.files))]
    n = len(opt.m)
    opt.m = [a.copy() for a in arrs[:n]]
    opt.v = [a.copy() for a in arrs[n:]]
    opt.step = int(meta["adam_step"])
    return _State(**meta["state"])


def train(model, dataset: TrajectoryDataset, cfg: TrainConfig, run_dir: str | Path | None = None,
          resume: bool = False, max_epochs: int | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place; on return it holds the best-validation parameters.

    ``max_epochs`` stops this call early without marking the run finished,
    which together with ``resume=True`` continues a run exactly.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    train_arr = dataset.standardized("train")
    val_arr = dataset.standardized("val")
    if train_arr["states"].shape[0] == 0 or val_arr["states"].shape[0] == 0:
        raise ValueError("training needs non-empty train and val splits")
    if dataset.T <= max(p.tau for p in cfg.phases):
        raise ValueError(f"phase tau must stay below the sequence length T={dataset.T}")
    dt = dataset.dt
    objective = loss_fn(model)
    beta = cfg.beta
    if not isinstance(model, (BNodeModel, LatentOdeBaseline)) and beta:
        log.warning("beta=%s ignored: %s has no latent distribution", beta, type(model).__name__)
        beta = 0.0
    params = model.parameters()
    opt = dc.adam_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)

    st = _State(phase_start_tau=cfg.phases[0].tau)
    history: list[dict] = []
    metrics_path = None
    best_params = {k: v.data.copy() for k, v in model.named_parameters().items()}
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        if resume and (run_dir / "trainer_state.json").exists():
            st = _load_state(run_dir, model, opt)
            with open(metrics_path, newline="") as fh:
                history = [dict(r) for r in csv.DictReader(fh)]
            if (run_dir / "best").exists():
                best_params = {k: v.data.copy() for k, v in load_model(run_dir / "best").named_parameters().items()}
        else:
            with open(metrics_path, "w", newline="") as fh:
                csv.DictWriter(fh, METRIC_FIELDS).writeheader()
            (run_dir / "run.json").write_text(json.dumps(
                {"train": cfg.to_json(), "model": model.descriptor(),
                 "dataset": dataset.config}, indent=2, default=str))

    epochs_this_call = 0
    t_start = time.perf_counter()
    while not st.done:
        if max_epochs is not None and epochs_this_call >= max_epochs:
            break
        phase = cfg.phases[st.phase]
        solver = _solver(phase)
        rng = np.random.default_rng([cfg.seed, st.epoch])
        sums = {"loss": 0.0, "rec": 0.0, "kl": 0.0}
        n_ok = skipped = rhs = 0
        tau = phase.tau
        for _ in range(cfg.batches_per_epoch):
            tau = tau_at(phase, st.phase_start_tau, st.phase_batches)
            w = random_windows(train_arr, tau, cfg.batch_size, rng)
            try:
                with dc.Tape():
                    ro = model.rollout(w.x0, w.u, w.p, dt, solver, train=True, rng=rng)
                    loss, comps = objective(model, w.x, w.y, ro, beta)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("non-finite loss")
                grads = dc.backward(loss, params)
                dc.adam_step(opt, params, grads)
            except (RolloutError, FloatingPointError) as exc:
                skipped += 1
                st.failures += 1
                log.warning("epoch %d: batch skipped (%s)", st.epoch, exc)
                if st.failures >= cfg.max_failures:
                    st.done = True
                    _finish(model, best_params)
                    raise TrainingAborted(
                        f"{st.failures} consecutive failed batches at epoch {st.epoch}") from exc
                continue
            finally:
                st.phase_batches += 1
            st.failures = 0
            n_ok += 1
            rhs += ro.n_rhs
            for k in sums:
                sums[k] += comps[k]

        vcomps, active, vrhs = _validate(model, val_arr, dt, SolverConfig(phase.solver, phase.substeps), beta)
        val = vcomps["loss"]
        row = {
            "epoch": st.epoch, "phase": st.phase, "tau": tau, "solver": phase.solver,
            "train_loss": sums["loss"] / max(n_ok, 1), "train_rec": sums["rec"] / max(n_ok, 1),
            "train_kl": sums["kl"] / max(n_ok, 1), "val_loss": val, "val_rec_x": vcomps["rec_x"],
            "val_rec_y": vcomps["rec_y"], "val_kl": vcomps["kl"], "val_kl_p": vcomps["kl_p"],
            "val_kl_u": vcomps["kl_u"], "val_kl_x": vcomps["kl_x"], "active_x": active["x"],
            "active_u": active["u"], "active_p": active["p"], "rhs_evals": rhs,
            "val_rhs_evals": vrhs, "skipped": skipped,
            "wall_time": round(time.perf_counter() - t_start, 3),
        }
        history.append(row)
        if callback is not None:
            callback(row)

        overall = EarlyStopping(cfg.patience, cfg.rel_threshold, st.best_val, st.stale)
        if overall.improves(val):
            st.best_epoch = st.epoch
            best_params = {k: v.data.copy() for k, v in model.named_parameters().items()}
            if run_dir is not None:
                save_model(model, run_dir / "best", {"epoch": st.epoch, "val_loss": val})
        overall.update(val)
        st.best_val, st.stale = overall.best, overall.stale
        # the phase counter restarts with each phase
        in_phase = EarlyStopping(cfg.patience, cfg.rel_threshold, st.phase_best, st.phase_stale)
        in_phase.update(val)
        st.phase_best, st.phase_stale = in_phase.best, in_phase.stale

        st.epoch += 1
        st.phase_epoch += 1
        epochs_this_call += 1
        last_phase = st.phase == len(cfg.phases) - 1
        ramp_done = st.phase_batches >= phase.ramp_batches
        advance = ramp_done and (
            (phase.stable_epochs is not None and st.phase_stale >= phase.stable_epochs)
            or (phase.break_loss is not None and val <= phase.break_loss)
            or st.phase_epoch >= phase.max_epochs)
        if st.epoch >= cfg.max_epochs or (last_phase and (advance or st.stale >= cfg.patience)):
            st.done = True
        elif advance and not last_phase:
            st.phase += 1
            st.phase_start_tau = tau
            st.phase_epoch = st.phase_batches = st.phase_stale = 0
            st.phase_best = math.inf

        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.DictWriter(fh, METRIC_FIELDS).writerow(row)
            _save_state(run_dir, model, opt, st)

    if st.done:
        _finish(model, best_params)
    return TrainResult(model, history, st.best_val, st.best_epoch, False, run_dir)


def _finish(model, best_params: dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters().items():
        p.data = best_params[k].copy()


def evaluate_model(model, dataset: TrajectoryDataset, split: str = "test",
                   solver: SolverConfig = SolverConfig(), n_draws: int = 32) -> dict:
    """Inference-mode report on physical values for one split.

    Inputs are standardized with the model's own statistics when it carries
    them, so a dataset drawn with a different input family stays comparable.
    """
    if getattr(model, "stats", None) is not None and model.stats is not dataset.stats:
        dataset = replace(dataset, stats=model.stats)
    arrays = dataset.standardized(split)
    if arrays["states"].shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = predict(model, arrays, dataset.dt, solver)
    stats = dataset.stats
    x_true = dataset.states[dataset.indices(split)].astype(np.float64)
    y_true = dataset.outputs[dataset.indices(split)].astype(np.float64)
    x_hat = unstandardize(stats, "states", pred.x)
    y_hat = unstandardize(stats, "outputs", pred.y)
    ex = error_metrics(x_hat, x_true)
    ey = error_metrics(y_hat, y_true)
    report = {
        "split": split, "n_samples": int(x_true.shape[0]), "solver": solver.method,
        "rmse_mean_norm": ex["rmse_mean_norm"], "rmse_var_norm": ex["rmse_var_norm"],
        "max_error": ex["max_error"], "rmse": ex["rmse"],
        "outputs_rmse_mean_norm": ey["rmse_mean_norm"], "outputs_rmse_var_norm": ey["rmse_var_norm"],
        "outputs_max_error": ey["max_error"],
        "rhs_evals": int(pred.n_rhs), "solver_steps": int(pred.n_steps),
        "worst_sample": int(np.argmax(ex["per_sample_rmse_mean_norm"])),
        "worst_sample_rmse_mean_norm": float(np.max(ex["per_sample_rmse_mean_norm"])),
        "mean_sample_rmse_mean_norm": float(np.mean(ex["per_sample_rmse_mean_norm"])),
    }
    if isinstance(model, BNodeModel):
        report["active_dims"] = {g: int((v > 0.1).sum()) for g, v in pred.kl.items()}
        report["kl_per_channel"] = {g: v.tolist() for g, v in pred.kl.items()}
    elif isinstance(model, LatentOdeBaseline):
        ad = count_active_dimensions(model, arrays, dataset.dt, SolverConfig(), n_draws=n_draws)
        report["active_dims"] = {"x": ad.counts["x"], "x0": ad.counts["x0"]}
        report["kl_per_channel"] = {g: v.tolist() for g, v in ad.kl.items()}
    report["_prediction"] = {"x": x_hat, "y": y_hat, "x_true": x_true, "y_true": y_true}
    return report


def sweep_beta(factory: Callable[[int], object], dataset: TrajectoryDataset, betas: Sequence[float],
               cfg: TrainConfig, run_dir: str | Path | None = None,
               eval_solver: SolverConfig = SolverConfig()) -> list[dict]:
    """Independent runs per beta; run ``k`` uses seed ``cfg.seed + k``.

    A failed run is recorded with its error and the sweep continues.
    """
    if not betas:
        raise ValueError("need at least one beta")
    rows = []
    for k, beta in enumerate(betas):
        seed = cfg.seed + k
        sub = Path(run_dir) / f"beta_{beta:g}" if run_dir is not None else None
        row = {"beta": float(beta), "seed": seed}
        try:
            model = factory(seed)
            res = train(model, dataset, replace(cfg, beta=float(beta), seed=seed), sub)
            rep = evaluate_model(res.model, dataset, "test", eval_solver)
            row.update({"rmse_mean_norm": rep["rmse_mean_norm"], "rmse_var_norm": rep["rmse_var_norm"],
                        "max_error": rep["max_error"],
                        "active_x": rep.get("active_dims", {}).get("x", ""),
                        "best_val": res.best_val, "error": ""})
        except Exception as exc:  # noqa: BLE001 - a sweep records and continues
            log.error("beta=%s failed: %s", beta, exc)
            row.update({"rmse_mean_norm": "", "rmse_var_norm": "", "max_error": "", "active_x": "",
                        "best_val": "", "error": f"{type(exc).__name__}: {exc}"})
        rows.append(row)
    return rows
