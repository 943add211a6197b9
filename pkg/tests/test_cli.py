import csv

import numpy as np
import pytest

from diffstg.cli import main
from diffstg.config import DEFAULTS, ConfigError, RunConfig, parse_config_text
from diffstg.data import read_oracle_csv

FAST_TRAIN = ["--ugnet.C", "8", "--ugnet.D_embed", "16", "--diffusion.N", "10", "--train.steps_per_epoch", "5",
              "--train.max_epochs", "1", "--train.val_windows", "4", "--train.val_S", "2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def effective_config(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return dict(ln.split(" = ", 1) for ln in lines)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--out", str(root / "data"), "--synth.length", "600"]) == 0
    data = ["--data.signals", str(root / "data" / "signals.csv"),
            "--data.adjacency", str(root / "data" / "adjacency.csv")]
    assert main(["train", "--seed", "1", "--out", str(root / "run")] + data + FAST_TRAIN) == 0
    return root, data


# -- config ---------------------------------------------------------------------------

def test_parse_flat_config():
    cfg = parse_config_text("# comment\ndiffusion.N = 100\nugnet.use_gcn = false\n\ntrain.lr=0.01  # inline\n")
    assert cfg == {"diffusion.N": 100, "ugnet.use_gcn": False, "train.lr": 0.01}


@pytest.mark.parametrize("text,match", [("nope.key = 1", "unknown key"), ("diffusion.N 100", "expected"),
                                        ("diffusion.N = many", "expected int"),
                                        ("ugnet.use_u = maybe", "boolean")])
def test_bad_config_lines(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_precedence(tmp_path):
    (tmp_path / "c.txt").write_text("diffusion.N = 50\nugnet.C = 4\n")
    cfg = RunConfig.build(tmp_path / "c.txt", {"diffusion.N": "100"}, profile="tiny")
    assert cfg["diffusion.N"] == 100          # override beats file
    assert cfg["ugnet.C"] == 4                # file beats profile
    assert cfg["train.steps_per_epoch"] == 400
    assert set(cfg) == set(DEFAULTS)


def test_unknown_profile():
    with pytest.raises(ConfigError, match="profile"):
        RunConfig.build(profile="huge")


# -- synth ----------------------------------------------------------------------------

def test_synth_requires_seed(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 2
    assert "--seed" in capsys.readouterr().err
    assert not (tmp_path / "d" / "signals.csv").exists()


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--seed", "7", "--out", str(tmp_path / name), "--synth.V", "8", "--synth.length", "5000"])
    for f in ("signals.csv", "adjacency.csv", "oracle.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg = effective_config(tmp_path / "a" / "config.txt")
    assert cfg["seed"] == "7" and cfg["synth.length"] == "5000"


def test_synth_without_coupling(tmp_path):
    main(["synth", "--seed", "1", "--out", str(tmp_path), "--synth.lam", "0", "--synth.length", "200"])
    assert "nodes,8" in (tmp_path / "adjacency.csv").read_text()
    _, _, std = read_oracle_csv(tmp_path / "oracle.csv")
    np.testing.assert_allclose(std[0, :, 0], np.sqrt(np.cumsum(0.81 ** np.arange(12))), rtol=1e-8)


def test_unknown_option_rejected(tmp_path, capsys):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path), "--synth.colour", "red"]) == 2
    assert "unknown option" in capsys.readouterr().err


# -- train ----------------------------------------------------------------------------

def test_train_outputs(workspace):
    root, _ = workspace
    assert (root / "run" / "checkpoint" / "manifest.json").is_file()
    log = read_csv(root / "run" / "train_log.csv")
    assert len(log) == 1 and float(log[0]["train_loss"]) > 0
    cfg = effective_config(root / "run" / "config.txt")
    assert cfg["seed"] == "1" and cfg["diffusion.N"] == "10"


def test_train_missing_adjacency_fails_fast(tmp_path, workspace, capsys):
    root, data = workspace
    args = ["train", "--out", str(tmp_path / "r"), "--data.signals", data[1], "--data.adjacency", str(tmp_path / "x")]
    assert main(args) == 2
    assert "data.adjacency" in capsys.readouterr().err
    assert not (tmp_path / "r" / "train_log.csv").exists()


def test_train_override_echoed(tmp_path, workspace):
    root, data = workspace
    (tmp_path / "c.txt").write_text("diffusion.N = 50\ndiffusion.beta_N = 0.3\n")
    args = ["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r"), *data, *FAST_TRAIN,
            "--diffusion.N", "100", "--diffusion.beta_N", "0.2"]
    assert main(args) == 0
    cfg = effective_config(tmp_path / "r" / "config.txt")
    assert cfg["diffusion.N"] == "100" and cfg["diffusion.beta_N"] == "0.2"


# -- evaluate ---------------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2])
def test_evaluate_report(tmp_path, workspace, k):
    root, data = workspace
    out = tmp_path / "ev"
    args = ["evaluate", "--checkpoint", str(root / "run"), "--out", str(out), *data,
            "--data.oracle", str(root / "data" / "oracle.csv"), "--sample.S", "8", "--sample.k", str(k),
            "--sample.mode", "ddim", "--sample.M", "5", "--eval.max_windows", "6", "--eval.windows", "0,3"]
    assert main(args) == 0
    rows = read_csv(out / "report.csv")
    assert {r["method"] for r in rows} == {"diffstg", "persistence", "oracle"}
    ours = [r for r in rows if r["method"] == "diffstg"]
    assert len(ours) == 13 and ours[-1]["horizon"] == "all"
    assert all((r["S"], r["k"], r["M"]) == ("8", str(k), "5") for r in ours)
    summary = ours[-1]
    assert float(summary["crps"]) == pytest.approx(np.mean([float(r["crps"]) for r in ours[:-1]]))
    for w in (0, 3):
        bands = read_csv(out / f"band_window{w}.csv")
        assert len(bands) == 8 * 12
        for b in bands:
            assert float(b["p5"]) <= float(b["p25"]) <= float(b["p75"]) <= float(b["p95"])


def test_evaluate_window_out_of_range(tmp_path, workspace, capsys):
    root, data = workspace
    args = ["evaluate", "--checkpoint", str(root / "run"), "--out", str(tmp_path), *data, "--eval.windows", "5000"]
    assert main(args) == 2
    assert "outside the test split" in capsys.readouterr().err


def test_evaluate_dimension_mismatch(tmp_path, workspace, capsys):
    root, _ = workspace
    main(["synth", "--seed", "2", "--out", str(tmp_path / "d"), "--synth.V", "5", "--synth.length", "300"])
    args = ["evaluate", "--checkpoint", str(root / "run"), "--out", str(tmp_path / "e"),
            "--data.signals", str(tmp_path / "d" / "signals.csv"),
            "--data.adjacency", str(tmp_path / "d" / "adjacency.csv")]
    assert main(args) == 2
    err = capsys.readouterr().err
    assert "V=8" in err and "V=5" in err


# -- bench-sampling -----------------------------------------------------------------------

def test_bench_grid_complete(tmp_path, workspace):
    root, data = workspace
    args = ["bench-sampling", "--checkpoint", str(root / "run"), "--out", str(tmp_path), *data,
            "--bench.M", "2,10", "--bench.k", "1,2", "--bench.S", "4,8", "--bench.repeats", "1"]
    assert main(args) == 0
    rows = read_csv(tmp_path / "timing.csv")
    grid = {(r["M"], r["k"], r["S"]) for r in rows}
    assert grid == {(M, k, S) for M in ("2", "10") for k in ("1", "2") for S in ("4", "8")}
    for r in rows:
        assert int(r["trajectories"]) == -(-int(r["S"]) // int(r["k"]))
        if r["M"] == "10":
            assert float(r["speedup_vs_max_M"]) == 1.0
