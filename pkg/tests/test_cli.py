import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest

from bnode import cli
from bnode.dataset import load_dataset

SHORT = ["--set", "sampling.t_stop=0.26"]
TINY = {
    "model": {"hidden": 8, "n_layers": 2, "lat_x": 3, "lat_u": 2},
    "train": {"batch_size": 8, "batches_per_epoch": 2, "max_epochs": 2,
              "phases": [{"solver": "rk4", "tau": 5, "max_epochs": 5}]},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert run("generate-data", "--model", "shf", "--samples", 14, "--seed", 1, *SHORT,
               "--out", root / "ds") == 0
    assert run("train", "--data", root / "ds", "--config", root / "tiny.json", "--out", root / "run") == 0
    return root


def test_generate_full_length(tmp_path, capsys):
    assert run("generate-data", "--model", "shf", "--samples", 3, "--seed", 7, "--out", tmp_path / "d") == 0
    ds = load_dataset(tmp_path / "d")
    assert ds.states.shape == (3, 501, 16)
    assert "N=3" in capsys.readouterr().out
    echo = json.loads((tmp_path / "d" / "config.json").read_text())
    assert echo["command"] == "generate-data" and echo["seed"] == 7 and echo["samples"] == 3


def test_generate_1024_samples(tmp_path):
    assert run("generate-data", "--model", "shf", "--samples", 1024, "--seed", 7, "--out", tmp_path / "d") == 0
    ds = load_dataset(tmp_path / "d")
    assert ds.n_samples == 1024 and ds.T + 1 == 501


def test_koopman_generation(tmp_path):
    assert run("generate-data", "--model", "koopman-analytic", "--samples", 4, "--out", tmp_path / "k") == 0
    ds = load_dataset(tmp_path / "k")
    assert ds.states.shape == (4, 99, 2)
    assert ds.config["system_params"] == {"a": -0.5, "b": -1.0}


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("generate-data", "--samples", 0, "--out", tmp_path / "x")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("train", "--out", tmp_path / "x")
    assert exc.value.code == 1
    assert run("generate-data", "--model", "pendulum", "--out", tmp_path / "x") == 1
    assert run("generate-data", "--set", "novalue", "--out", tmp_path / "x") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("generate-data", "--config", bad, "--out", tmp_path / "x") == 1
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "r") == 1
    assert "no dataset" in capsys.readouterr().err


def test_same_seed_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("generate-data", "--samples", 5, "--seed", 3, *SHORT, "--out", tmp_path / name) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    assert run("generate-data", "--samples", 5, "--seed", 4, *SHORT, "--out", tmp_path / "c") == 0
    assert tree_bytes(tmp_path / "c")["states.bin"] != a["states.bin"]


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BNODE_SEED", "11")
    assert run("generate-data", "--samples", 2, *SHORT, "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "config.json").read_text())["seed"] == 11
    (tmp_path / "s.json").write_text(json.dumps({"seed": 5}))
    assert run("generate-data", "--samples", 2, *SHORT, "--config", tmp_path / "s.json",
               "--out", tmp_path / "f") == 0
    assert json.loads((tmp_path / "f" / "config.json").read_text())["seed"] == 5


def test_run_files_and_report(work):
    run_dir = work / "run"
    for name in ("config.json", "metrics.csv", "report.json", "model/model.json", "best/model.json"):
        assert (run_dir / name).exists(), name
    rep = json.loads((run_dir / "report.json").read_text())
    for key in ("rmse_mean_norm", "rmse_var_norm", "max_error", "active_dims", "rhs_evals"):
        assert key in rep
    assert rep["variant"] == "bnode-const" and rep["epochs"] == 2


def test_beta_precedence(work, tmp_path):
    cfg = dict(TINY, train=dict(TINY["train"], beta=0.5, max_epochs=1))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    base = ["train", "--data", work / "ds", "--config", tmp_path / "c.json"]

    def echoed(out):
        return json.loads((out / "config.json").read_text())["train"]["beta"]

    assert run(*base, "--out", tmp_path / "f") == 0
    assert echoed(tmp_path / "f") == 0.5
    assert run(*base, "--set", "train.beta=0.3", "--out", tmp_path / "s") == 0
    assert echoed(tmp_path / "s") == 0.3
    assert run(*base, "--set", "train.beta=0.3", "--beta", "0.2", "--out", tmp_path / "b") == 0
    assert echoed(tmp_path / "b") == 0.2
    assert json.loads((tmp_path / "b" / "report.json").read_text())["beta"] == 0.2


def test_ssnode_ignores_beta_with_warning(work, tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert run("train", "--data", work / "ds", "--config", work / "tiny.json", "--variant", "ssnode",
                   "--beta", "0.5", "--max-epochs", 1, "--out", tmp_path / "ss") == 0
    assert "ignored" in caplog.text
    rows = read_rows(tmp_path / "ss" / "metrics.csv")
    assert float(rows[0]["val_kl"]) == 0.0


def test_latentode_variant_trains(work, tmp_path):
    assert run("train", "--data", work / "ds", "--config", work / "tiny.json", "--variant", "latentode",
               "--max-epochs", 1, "--out", tmp_path / "lo") == 0
    rep = json.loads((tmp_path / "lo" / "report.json").read_text())
    assert set(rep["active_dims"]) == {"x", "x0"}


def test_unknown_model_setting_is_config_error(work, tmp_path):
    assert run("train", "--data", work / "ds", "--set", "model.widht=3", "--out", tmp_path / "r") == 1
    assert run("train", "--data", work / "ds", "--set", "train.beta=-1", "--out", tmp_path / "r") == 1


def test_evaluate_is_deterministic(work, tmp_path):
    for name in ("e1", "e2"):
        assert run("evaluate", "--run", work / "run", "--data", work / "ds", "--out", tmp_path / name) == 0
    a, b = tree_bytes(tmp_path / "e1"), tree_bytes(tmp_path / "e2")
    assert a == b
    m = json.loads(a["metrics.json"])
    assert m["worst_sample_rmse_mean_norm"] >= m["mean_sample_rmse_mean_norm"]
    rows = read_rows(tmp_path / "e1" / "worst_sample.csv")
    assert len(rows) == 31 and {"T_1_true", "T_1_pred", "time", "sample"} <= set(rows[0])
    assert all(int(r["sample"]) == m["worst_sample"] for r in rows)


def test_evaluate_default_output_stays_in_run(work):
    assert run("evaluate", "--run", work / "run", "--data", work / "ds", "--split", "val") == 0
    assert (work / "run" / "eval_val" / "metrics.json").exists()


def test_evaluate_empty_split(work, tmp_path):
    assert run("generate-data", "--samples", 3, *SHORT, "--set", 'fractions={"train": 1.0}',
               "--out", tmp_path / "d") == 0
    assert run("evaluate", "--run", work / "run", "--data", tmp_path / "d", "--out", tmp_path / "e") == 1


def test_step_input_generalization(work, tmp_path):
    assert run("generate-data", "--samples", 6, "--seed", 2, "--controls", "step", *SHORT,
               "--set", 'fractions={"test": 1.0}', "--out", tmp_path / "step") == 0
    assert run("evaluate", "--run", work / "run", "--data", tmp_path / "step", "--out", tmp_path / "e") == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["n_samples"] == 6 and math.isfinite(m["rmse_mean_norm"])


def test_sweep_beta_table(work, tmp_path):
    assert run("sweep-beta", "--data", work / "ds", "--config", work / "tiny.json", "--betas", "0.01,0.1",
               "--max-epochs", 1, "--seed", 3, "--out", tmp_path / "sw") == 0
    rows = read_rows(tmp_path / "sw" / "sweep.csv")
    assert [float(r["beta"]) for r in rows] == [0.01, 0.1]
    assert [int(r["seed"]) for r in rows] == [3, 4]
    assert all(r["error"] == "" for r in rows)
    with pytest.raises(SystemExit):
        run("sweep-beta", "--data", work / "ds", "--betas", "a,b", "--out", tmp_path / "x")


def test_mask_latents_reports_change(work, tmp_path):
    # a nearly untrained model: keep every channel with positive KL
    assert run("mask-latents", "--run", work / "run", "--data", work / "ds", "--threshold", "0",
               "--out", tmp_path / "m") == 0
    res = json.loads((tmp_path / "m" / "mask.json").read_text())
    assert {"before", "after", "relative_change", "masks"} <= set(res)
    assert (tmp_path / "m" / "model" / "model.json").exists()


def test_mask_latents_finetune(work, tmp_path):
    out = tmp_path / "m"
    assert run("mask-latents", "--run", work / "run", "--data", work / "ds", "--threshold", "0",
               "--finetune-epochs", 2, "--set", 'finetune.phases=[{"solver": "rk4", "tau": 5}]',
               "--set", "finetune.batch_size=8", "--set", "finetune.batches_per_epoch=2", "--out", out) == 0
    res = json.loads((out / "mask.json").read_text())
    assert res["finetune_epochs"] == 2
    rel = (res["finetuned"]["rmse_mean_norm"] - res["before"]["rmse_mean_norm"]) / res["before"]["rmse_mean_norm"]
    assert res["relative_change"] == pytest.approx(rel)
    assert len(read_rows(out / "finetune" / "metrics.csv")) == 2
    assert run("mask-latents", "--run", work / "run", "--data", work / "ds", "--finetune-epochs", -1,
               "--out", tmp_path / "bad") == 1


@pytest.fixture(scope="module")
def koopman(work):
    assert run("generate-data", "--model", "koopman", "--samples", 12, "--out", work / "kds") == 0
    cfg = {"model": {"lat_x": 4, "hidden": 8, "n_layers": 2},
           "train": {"batch_size": 8, "batches_per_epoch": 2, "max_epochs": 1,
                     "phases": [{"solver": "rk4", "tau": 5}]}}
    (work / "k.json").write_text(json.dumps(cfg))
    assert run("train", "--data", work / "kds", "--config", work / "k.json", "--out", work / "krun") == 0
    return work


def test_koopman_eigs_csv(koopman, tmp_path):
    assert run("koopman-eigs", "--run", koopman / "krun", "--data", koopman / "kds",
               "--set", "threshold=0", "--out", tmp_path / "ke") == 0
    rows = read_rows(tmp_path / "ke" / "eigenvalues.csv")
    assert len(rows) == 3
    ref = sorted(float(r["reference_real"]) for r in rows)
    np.testing.assert_allclose(ref, [-1.0, -1.0, -0.5])
    for r in rows:
        learned = complex(float(r["learned_real"]), float(r["learned_imag"]))
        reference = complex(float(r["reference_real"]), float(r["reference_imag"]))
        assert float(r["distance"]) == pytest.approx(abs(learned - reference))


def test_koopman_eigs_rejects_nonlinear_model(work, koopman, tmp_path):
    assert run("koopman-eigs", "--run", work / "run", "--data", koopman / "kds", "--out", tmp_path / "x") == 1


def test_tbr_curve_monotone(work, tmp_path):
    assert run("tbr", "--data", work / "ds", "--orders", "1..16", "--out", tmp_path / "t") == 0
    rows = read_rows(tmp_path / "t" / "tbr.csv")
    errs = [float(r["rmse_mean_norm"]) for r in rows]
    assert [int(r["order"]) for r in rows] == list(range(1, 17))
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert run("tbr", "--data", work / "ds", "--orders", "0..3", "--out", tmp_path / "t2") == 1


def test_dmdc_full_rank_fits_linear_data(work, tmp_path):
    assert run("dmdc", "--data", work / "ds", "--ranks", "4,18", "--out", tmp_path / "d") == 0
    rows = read_rows(tmp_path / "d" / "dmdc.csv")
    assert [int(r["order"]) for r in rows] == [4, 18]
    # float32 storage limits the fit; the full-rank rollout still tracks closely
    assert float(rows[1]["rmse_mean_norm"]) < 1e-3
    eig = read_rows(tmp_path / "d" / "dmdc_eigenvalues.csv")
    assert len(eig) == 2 * 16


def test_runtime_failure_exits_two(work, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--data", work / "ds", "--config", work / "tiny.json", "--out", tmp_path / "r") == 2


def test_outputs_stay_under_out_dir(work, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("tbr", "--data", work / "ds", "--orders", "1,2", "--out", tmp_path / "only") == 0
    assert [p.name for p in tmp_path.iterdir()] == ["only"]
