import json
import subprocess
import sys

import pytest

from batchrl.cli import main

TINY = {"agent": {"hidden_sizes": [8], "target_update_rate": 20, "learning_rate": 1e-3},
        "eval_episodes": 2, "value_estimate_minibatches": 3}


@pytest.fixture(scope="module")
def chain_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["train-behavioral", "--env", "chain", "--iterations", "400", "--seed", "1",
                 "--out", str(root / "beh")]) == 0
    assert main(["generate", "--env", "chain", "--behavioral", str(root / "beh" / "behavioral.json"),
                 "--transitions", "500", "--seed", "2", "--dataset", str(root / "d.bin")]) == 0
    return root


def _train(root, out, *extra):
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    return main(["train", "--env", "chain", "--algo", "bcq", "--dataset", str(root / "d.bin"),
                 "--seed", "0", "--iterations", "60", "--eval-interval", "20", "--config",
                 str(cfg), "--out", str(out), *extra])


def test_generate_writes_dataset_and_sidecar(chain_data):
    assert (chain_data / "d.bin").read_bytes()[:4] == b"BRLB"
    assert (chain_data / "d.behavioral.json").exists()


def test_train_repeatable(chain_data, tmp_path):
    assert _train(chain_data, tmp_path / "a") == 0
    assert _train(chain_data, tmp_path / "b") == 0
    a = (tmp_path / "a" / "metrics_seed0.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics_seed0.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 4


def test_plot_data_renders_figures(chain_data, tmp_path):
    assert _train(chain_data, tmp_path / "run") == 0
    assert main(["plot-data", str(tmp_path / "run"), "--out", str(tmp_path / "plots")]) == 0
    names = {p.name for p in (tmp_path / "plots").iterdir()}
    assert {"plot_chain_bcq.csv", "returns_chain.png", "values_chain.png"} <= names


def test_suite_command(chain_data, tmp_path):
    cfg = tmp_path / "suite.json"
    cfg.write_text(json.dumps({**TINY, "num_transitions": 400, "behavioral_steps": 300}))
    assert main(["suite", "--env", "chain", "--algo", "dqn,spibb", "--seed", "0",
                 "--iterations", "40", "--eval-interval", "20", "--config", str(cfg),
                 "--out", str(tmp_path / "s")]) == 0
    text = (tmp_path / "s" / "summary.csv").read_text()
    assert "spibb" in text and "oracle" in text


def test_diverged_run_exits_zero(chain_data, tmp_path):
    cfg = tmp_path / "hot.json"
    # no target network and a large step: the run may diverge, which still succeeds
    cfg.write_text(json.dumps({**TINY, "agent": {"hidden_sizes": [8], "target_update_rate": 1,
                                                 "learning_rate": 0.5}}))
    assert main(["train", "--env", "chain", "--algo", "dqn", "--dataset",
                 str(chain_data / "d.bin"), "--iterations", "200", "--eval-interval", "50",
                 "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("argv", [
    ["train", "--env", "no-such-env", "--iterations", "10", "--eval-interval", "5"],
    ["train", "--env", "chain", "--iterations", "10", "--eval-interval", "50"],
    ["train", "--env", "chain", "--algo", "ppo"],
    ["train", "--config", "/no/such/config.json"],
    ["generate", "--env", "chain", "--behavioral", "/no/such/policy.json"],
    ["plot-data", "/no/such/dir"],
])
def test_config_and_io_errors_exit_nonzero(argv, tmp_path, capsys):
    assert main(argv + ([] if argv[0] == "plot-data" else ["--out", str(tmp_path)])) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_json_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"env": "chain", "unknown_key": 1}))
    assert main(["train", "--config", str(bad)]) == 2


def test_truncated_dataset_exit(chain_data, tmp_path):
    raw = (chain_data / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-7])
    assert _train(chain_data, tmp_path / "o", "--dataset", str(tmp_path / "t.bin")) == 2


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "batchrl.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("train-behavioral", "generate", "train", "suite", "plot-data"):
        assert cmd in res.stdout
