"""
End-to-end tests for the command line surface on a small synthetic setup
"""

import os

import pandas as pd
import yaml

from src.main import cli_dispatch
from src.runner import apply_overrides

GRID_POSITIONS = os.path.join(os.path.dirname(__file__), "fixtures", "grid_positions.csv")


def write_config(tmp_path, **sections):
    config = {
        "seed": 3,
        "data": {"positions": None, "trace": None, "excluded": []},
        "synthetic": {"p": 12, "T": 200, "correlation_length": 15.0, "noise_level": 0.2},
        "topology": {"radio_range": 100.0},
        "covariance": {"masked": True},
        "pim": {"q": 2, "delta": 0.001, "t_max": 30},
        "runtime": {"q": 1, "epsilon": 0.5, "epochs": 100},
        "experiments": {"folds": 4, "q_values": [1, 2, 3], "radio_ranges": [100.0],
                        "load_q_values": [1, 3], "t_max": 30},
        "output": {"dir": str(tmp_path / "out")},
        "logging": {"level": "WARNING"},
    }
    for name, values in sections.items():
        config.setdefault(name, {}).update(values)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    return str(path)


class TestCommandLine:
    """Test exit codes and the files each subcommand writes"""

    def test_tree(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["tree", "--config", config]) == 0
        frame = pd.read_csv(tmp_path / "out" / "tree.csv")
        assert len(frame) == 12
        assert (frame["parent"] == -1).sum() == 1

    def test_tree_on_grid_fixture(self, tmp_path):
        """tree --range 6 on the committed 3 x 4 grid"""
        config = write_config(tmp_path, data={"positions": GRID_POSITIONS})
        assert cli_dispatch(["tree", "--config", config, "--range", "6"]) == 0
        frame = pd.read_csv(tmp_path / "out" / "tree.csv").set_index("sensor_id")
        assert frame.loc[12, "parent"] == -1
        assert frame["depth"].max() == 5
        assert frame.loc[1, "depth"] == 5
        assert frame["children"].max() == 2
        assert frame.loc[8, "subtree_size"] == 8
        assert cli_dispatch(["tree", "--config", config, "--range", "4.9"]) == 1

    def test_usage_errors(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["plot", "--config", config]) == 1
        assert cli_dispatch(["tree", "--config", config, "--verbose"]) == 1
        assert cli_dispatch(["tree", "--config", config, "--set", "novalue"]) == 1

    def test_help(self):
        assert cli_dispatch(["--help"]) == 0

    def test_missing_config(self, tmp_path):
        assert cli_dispatch(["tree", "--config", str(tmp_path / "nope.yaml")]) == 1

    def test_q_larger_than_network(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["pim", "--config", config, "--q", "20"]) == 1

    def test_invalid_value(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["pim", "--config", config, "--set", "pim.delta=0"]) == 1

    def test_disconnected_range(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["tree", "--config", config, "--range", "0.5"]) == 1

    def test_xval(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["xval", "--config", config]) == 0
        frame = pd.read_csv(tmp_path / "out" / "fig9_retained_variance.csv")
        assert list(frame.columns) == ["fold", "q", "retained_variance", "upper_bound"]
        assert len(frame) == 4 * 3

    def test_pim_on_full_covariance(self, tmp_path):
        config = write_config(tmp_path, covariance={"masked": False})
        assert cli_dispatch(["pim", "--config", config, "--q", "3"]) == 0
        header = (tmp_path / "out" / "pim_basis.csv").read_text().splitlines()[0]
        assert header == "sensor_id,mean,w_1,w_2,w_3"
        log = pd.read_csv(tmp_path / "out" / "pim_iterations.csv")
        assert sorted(log["component"].unique().tolist()) == [1, 2, 3]

    def test_score(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["score", "--config", config]) == 0
        scores = pd.read_csv(tmp_path / "out" / "scores.csv")
        assert len(scores) == 100
        assert list(scores.columns) == ["epoch", "z_1"]

    def test_cov_and_basis(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["cov", "--config", config]) == 0
        assert cli_dispatch(["basis", "--config", config]) == 0
        assert os.path.exists(tmp_path / "out" / "covariance.csv")
        assert os.path.exists(tmp_path / "out" / "basis.csv")

    def test_training_epochs(self, tmp_path):
        config = write_config(tmp_path, covariance={"train_epochs": 50})
        assert cli_dispatch(["cov", "--config", config]) == 0
        loads = pd.read_csv(tmp_path / "out" / "covariance_loads.csv")
        assert (loads["total"] == 50 * 12).all()
        assert cli_dispatch(["cov", "--config", config, "--set", "covariance.train_epochs=1"]) == 1

    def test_loads_are_reproducible(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["loads", "--config", config, "--output", str(tmp_path / "a")]) == 0
        assert cli_dispatch(["loads", "--config", config, "--output", str(tmp_path / "b")]) == 0
        for name in ("fig10_loads.csv", "fig11_node_loads.csv", "fig15_pim_loads.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_synth(self, tmp_path):
        config = write_config(tmp_path)
        assert cli_dispatch(["synth", "--config", config]) == 0
        trace = pd.read_csv(tmp_path / "out" / "synthetic_trace.csv")
        assert len(trace) == 12 * 200

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        config = write_config(tmp_path)
        monkeypatch.setenv("PCAG_OUTPUT_DIR", str(tmp_path / "env"))
        assert cli_dispatch(["tree", "--config", config]) == 0
        assert os.path.exists(tmp_path / "env" / "tree.csv")


class TestOverrides:
    """Test dotted configuration overrides"""

    def test_values_are_typed(self):
        config = apply_overrides({"pim": {"q": 1}}, {"pim.q": "4", "runtime.epsilon": "null", "seed": 5})
        assert config["pim"]["q"] == 4
        assert config["runtime"]["epsilon"] is None
        assert config["seed"] == 5

    def test_original_untouched(self):
        original = {"pim": {"q": 1}}
        apply_overrides(original, {"pim.q": "2"})
        assert original["pim"]["q"] == 1
