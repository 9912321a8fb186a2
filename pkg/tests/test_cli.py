import time
from pathlib import Path

import pytest

from fedkd import cli
from fedkd.bench import read_metrics

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
COMMAND_FOR = {
    "cross_silo": "run",
    "cross_device": "run",
    "heterogeneous": "run",
    "ablation": "ablate",
    "probe_domains": "probe-domains",
    "probe_overlap": "probe-overlap",
    "comm": "comm",
}


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(COMMAND_FOR))
def test_sample_config_runs_under_five_minutes(name, tmp_path, capsys):
    t0 = time.perf_counter()
    code = cli.main([COMMAND_FOR[name], str(CONFIGS / f"{name}.toml"), "--seed", "0", "--out-dir", str(tmp_path), "--quiet"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    assert elapsed < 300, f"{name} took {elapsed:.1f}s"
    rows = read_metrics(tmp_path / "metrics.jsonl")
    assert rows and {r["seed"] for r in rows} == {0}
    assert capsys.readouterr().out.strip()


def _tiny_config(tmp_path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(
        'kind = "cross_silo"\nseeds = [0, 1]\n'
        "[dataset]\nclient_n = 60\nserver_n = 80\ntest_n = 30\n"
        '[federation]\nglobal_rounds = 2\nstrategies = ["fedavg", "fedprox"]\n',
        encoding="utf-8",
    )
    return path


def test_env_var_sets_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDKD_OUT", str(tmp_path / "env-out"))
    assert cli.main(["run", str(_tiny_config(tmp_path)), "--seed", "1", "--quiet"]) == 0
    rows = read_metrics(tmp_path / "env-out" / "metrics.jsonl")
    assert {r["seed"] for r in rows} == {1}


def test_out_dir_flag_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDKD_OUT", str(tmp_path / "env-out"))
    assert cli.main(["run", str(_tiny_config(tmp_path)), "--out-dir", str(tmp_path / "flag"), "--quiet"]) == 0
    assert (tmp_path / "flag" / "metrics.jsonl").exists()
    assert not (tmp_path / "env-out").exists()


def test_strategy_override(tmp_path):
    code = cli.main(["run", str(_tiny_config(tmp_path)), "--strategy", "fedprox", "--seed", "0", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    assert {r["arm"] for r in read_metrics(tmp_path / "metrics.jsonl")} == {"fedprox"}


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.toml"), "--quiet"]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[federation]\nstratgy = []\n", encoding="utf-8")
    assert cli.main(["run", str(bad), "--quiet"]) == 2
    assert "federation.stratgy" in capsys.readouterr().err
    assert cli.main(["run", str(CONFIGS / "comm.toml"), "--quiet", "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["run", str(bad), "--strategy", "fedsgd"])
