import csv

import numpy as np
import pytest

from varcpo.cli import main
from varcpo.config import load_config
from varcpo.plots import PANELS, PlotInputError, band, plot_runs, read_metrics

TINY = """env.name = icylake
algo.name = varcpo
train.batch_steps = 400
train.total_steps = 800
net.hidden = 8,8
critic.epochs = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY + f"train.output_dir = {tmp_path / 'run'}\n")
    return p


def test_train_eval_plot_round(tmp_path, cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--seed", "7", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "iter" in out and "metrics" in out
    rows = list(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))
    assert len(rows) == 2 and all(r["seed"] == "7" for r in rows)
    saved = load_config(tmp_path / "o" / "config.cfg")
    original = load_config(cfg_file)
    assert saved.seed == 7 and saved.output_dir == str(tmp_path / "o")
    original.seed, original.output_dir = saved.seed, saved.output_dir
    assert saved == original

    assert main(["eval", "--checkpoint", str(tmp_path / "o" / "checkpoints" / "final"), "--episodes", "3"]) == 0
    assert "episodes 3" in capsys.readouterr().out

    assert main(["plot", "--inputs", str(tmp_path / "o" / "metrics.csv"), "--out", str(tmp_path / "svg")]) == 0
    assert sorted(p.name for p in (tmp_path / "svg").iterdir()) == sorted(f"{c}.svg" for c, _ in PANELS)


def test_quiet_suppresses_progress_not_results(cfg_file, capsys):
    assert main(["--quiet", "train", "--config", str(cfg_file)]) == 0
    out = capsys.readouterr().out
    assert "iter " not in out and "metrics" in out
    assert main(["train", "--quiet", "--config", str(cfg_file)]) == 0
    assert "iter " not in capsys.readouterr().out


def test_bad_invocations(tmp_path, capsys):
    assert main(["train"]) != 0
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) != 0
    assert main(["train", "--config", "x", "--bogus"]) != 0
    assert main(["eval", "--checkpoint", str(tmp_path), "--episodes", "3"]) != 0
    assert main(["plot", "--inputs", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) != 0
    assert main(["frobnicate"]) != 0


def test_invalid_config_lists_keys(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("solver.delta = -1\nwhat.ever = 3\n")
    assert main(["train", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "solver.delta" in err and "what.ever" in err
    assert not (tmp_path / "runs").exists()


def test_selftest_passes_and_negative_control_fails(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(l.startswith("PASS") for l in lines)
    assert main(["selftest", "--beta-shift", "0.01"]) == 1
    out = capsys.readouterr().out
    assert "FAIL augmented-return identity" in out


def write_csv(path, rows, columns=("env_steps", "reward_return", "cost_return", "cost_p95", "ice_visitation")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return path


def test_plot_band_statistics(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(5, 4, 4))
    paths = [write_csv(tmp_path / f"s{i}.csv", [[1000 * (t + 1), *data[i, t]] for t in range(4)]) for i in range(5)]
    runs = [read_metrics(p) for p in paths]
    mean, std = band(runs, "cost_p95")
    assert np.allclose(mean, data[:, :, 2].mean(axis=0))
    assert np.allclose(std, data[:, :, 2].std(axis=0, ddof=1))
    _, std1 = band(runs[:1], "cost_p95")
    assert np.all(std1 == 0)


def test_plot_is_deterministic_and_validates(tmp_path):
    p = write_csv(tmp_path / "a.csv", [[1000, 1, 2, 3, ""], [2000, 1.5, 2.5, 3.5, ""]])
    plot_runs([p], tmp_path / "one")
    plot_runs([p], tmp_path / "two")
    for name in ("reward_return.svg", "ice_visitation.svg"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    assert (tmp_path / "one" / "reward_return.svg").read_text().startswith("<svg")
    bad = write_csv(tmp_path / "bad.csv", [[1000, 1, 2, 3]], columns=("env_steps", "reward_return", "cost_return", "ice_visitation"))
    with pytest.raises(PlotInputError, match="cost_p95"):
        plot_runs([bad], tmp_path / "x")
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(PlotInputError):
        plot_runs([empty], tmp_path / "x")
    header_only = write_csv(tmp_path / "h.csv", [])
    with pytest.raises(PlotInputError):
        plot_runs([header_only], tmp_path / "x")
    assert main(["plot", "--inputs", str(bad), "--out", str(tmp_path / "y")]) == 1
