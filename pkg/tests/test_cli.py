import subprocess
import sys
from pathlib import Path

import pytest

from dimekit.checkpoint import load_members, save_checkpoint
from dimekit.cli import load_run_config, main
from dimekit.datakit import read_extxyz_file
from dimekit.errors import InputError
from dimekit.model import init_params
from helpers import small_cfg

GOLDEN = Path(__file__).parent / "golden"
FAST_TOY = ["--set", "toy.num_steps=3000", "--set", "toy.snapshots_per_trajectory=5"]
SMALL_MODEL = ["--set", "model.hidden_dim=16", "--set", "model.out_emb_dim=16",
               "--set", "model.triplet_dim=8", "--set", "model.num_blocks=1"]
FAST_TRAIN = ["--set", "train.max_steps=6", "--set", "train.batch_size=4",
              "--set", "train.eval_every=3", "--set", "train.warmup_steps=2"]


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy", "--n", "30", "--seed", "5", "--out", str(out)] + FAST_TOY) == 0
    return out


@pytest.fixture(scope="module")
def model_dir(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    argv = ["train", "--train", str(toy_dir / "train.xyz"), "--val", str(toy_dir / "val.xyz"),
            "--seed", "1", "--threads", "1", "--out", str(out)] + SMALL_MODEL + FAST_TRAIN
    assert main(argv) == 0
    return out


def test_gen_toy_writes_splits_and_manifests(toy_dir):
    sizes = [len(read_extxyz_file(toy_dir / f"{s}.xyz")) for s in ("train", "val", "test")]
    assert sizes == [24, 3, 3]
    text = (toy_dir / "train.manifest.json").read_text()
    assert '"record_count": 24' in text and '"reference_energies"' in text


def test_gen_toy_deterministic(tmp_path, toy_dir):
    assert main(["gen-toy", "--n", "30", "--seed", "5", "--out", str(tmp_path)] + FAST_TOY) == 0
    for name in ("train.xyz", "val.xyz", "test.xyz", "train.manifest.json"):
        assert (tmp_path / name).read_bytes() == (toy_dir / name).read_bytes()


def test_train_twice_is_bitwise_identical(toy_dir, model_dir, tmp_path):
    argv = ["train", "--train", str(toy_dir / "train.xyz"), "--val", str(toy_dir / "val.xyz"),
            "--seed", "1", "--threads", "1", "--out", str(tmp_path)] + SMALL_MODEL + FAST_TRAIN
    assert main(argv) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (model_dir / "model.ckpt").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (model_dir / "train_log.csv").read_bytes()
    log = (model_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,lr,train_loss,val_mae_E,val_mae_F" and len(log) == 3


def test_predict_round_trips_atom_counts(toy_dir, model_dir, tmp_path, capsys):
    data = toy_dir / "test.xyz"
    assert main(["predict", "--checkpoint", str(model_dir / "model.ckpt"), "--data", str(data),
                 "--out", str(tmp_path)]) == 0
    stdout = capsys.readouterr().out.splitlines()
    assert stdout[0] == "record,n_atoms,energy,sigma_E"
    src = read_extxyz_file(data)
    got = read_extxyz_file(tmp_path / "predictions.xyz")
    assert [c.num_atoms for c in got] == [c.num_atoms for c in src]
    assert [int(r.split(",")[1]) for r in stdout[1:]] == [c.num_atoms for c in src]
    assert all(c.energy is not None and c.forces.shape == (c.num_atoms, 3) for c in got)
    assert all(r.endswith(",undefined") for r in stdout[1:])


def test_eval_matches_golden_file(tmp_path):
    cfg = small_cfg()
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, cfg, init_params(cfg, 0), {"reference_energies": {"1": -0.5, "8": -75.0}})
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(GOLDEN / "golden.xyz"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval.csv").read_text() == (GOLDEN / "eval.csv").read_text()


def test_ensemble_train_and_calibrate(toy_dir, tmp_path, capsys):
    argv = ["ensemble-train", "--k", "2", "--train", str(toy_dir / "train.xyz"),
            "--val", str(toy_dir / "val.xyz"), "--out", str(tmp_path)] + SMALL_MODEL + FAST_TRAIN
    assert main(argv) == 0
    _, members, meta = load_members(tmp_path / "ensemble.ckpt")
    assert len(members) == 2 and meta["seeds"] == [0, 1]
    assert (tmp_path / "ensemble_timing.csv").read_text().startswith("member,seed,wall_time_s\n")
    capsys.readouterr()
    assert main(["calibrate", "--checkpoint", str(tmp_path / "ensemble.ckpt"),
                 "--data", str(toy_dir / "test.xyz"), "--out", str(tmp_path)]) == 0
    rows = dict(line.split(",", 1) for line in capsys.readouterr().out.splitlines()[1:])
    assert set(rows) == {"rho_dE_sigmaE", "rho_dF_sigmaF", "rho_dF_sigmaE", "cov_identity_max_relative"}
    rel = float(rows["cov_identity_max_relative"].split(",")[0])
    assert rel < 1e-6
    assert (tmp_path / "calibration_samples.csv").read_text().startswith("sample_id,delta_E,sigma_E\n")


def test_calibrate_plain_model_is_input_error(toy_dir, model_dir, tmp_path, capsys):
    code = main(["calibrate", "--checkpoint", str(model_dir / "model.ckpt"),
                 "--data", str(toy_dir / "test.xyz"), "--out", str(tmp_path)])
    assert code == 1 and "MVE head" in capsys.readouterr().err


def test_mve_calibration_reports_missing_force_sigma(toy_dir, tmp_path, capsys):
    argv = ["train", "--train", str(toy_dir / "train.xyz"), "--val", str(toy_dir / "val.xyz"),
            "--set", "model.mve_head=true", "--set", "train.loss_kind=\"nll\"",
            "--out", str(tmp_path)] + SMALL_MODEL + FAST_TRAIN
    assert main(argv) == 0
    capsys.readouterr()
    assert main(["calibrate", "--checkpoint", str(tmp_path / "model.ckpt"),
                 "--data", str(toy_dir / "test.xyz"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "rho_dF_sigmaF,undefined,0" in out


def test_stats(toy_dir, tmp_path, capsys):
    assert main(["stats", "--data", str(toy_dir / "train.xyz"), "--bins", "5", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0] == "bin_low,bin_high,count" and len(lines) == 6
    assert sum(int(r.split(",")[2]) for r in lines[1:]) == 24


def test_bench_small(tmp_path, capsys):
    argv = ["bench", "--min-triplets", "3000", "--out", str(tmp_path)] + SMALL_MODEL
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "bilinear/hadamard time ratio" in out
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("variant,n_triplets") and len(rows) == 3


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["no-such-command"],
    [],
    ["eval", "--checkpoint", "missing.ckpt", "--data", "missing.xyz"],
    ["gen-toy", "--set", "toy.warp_factor=9"],
    ["gen-toy", "--set", "nonsense"],
    ["gen-toy", "--threads", "0"],
])
def test_input_errors_exit_one(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)] if argv and argv[0] != "no-such-command" else argv) == 1
    assert capsys.readouterr().err


def test_unknown_flag_prints_usage(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_run_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"model": {"hidden_dim": 32}, "train": {"max_steps": 5}}')
    rc = load_run_config(str(path), ["train.max_steps=7", "basis.cutoff=4.5"])
    assert rc["model"]["hidden_dim"] == 32 and rc["train"]["max_steps"] == 7 and rc["basis"]["cutoff"] == 4.5
    path.write_text('{"optimizer": {}}')
    with pytest.raises(InputError):
        load_run_config(str(path), [])


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "dimekit", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dimekit ")
    res = subprocess.run([sys.executable, "-m", "dimekit", "stats"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr and res.stdout == ""


def test_internal_error_exits_two(monkeypatch, tmp_path, capsys):
    import dimekit.cli as cli

    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_stats", boom)
    data = tmp_path / "d.xyz"
    data.write_text("1\nenergy=1\nH 0 0 0\n")
    assert main(["stats", "--data", str(data), "--out", str(tmp_path)]) == 2
    assert "internal error: RuntimeError: kaput" in capsys.readouterr().err
