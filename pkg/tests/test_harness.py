import json
import subprocess
import sys

import numpy as np
import pytest

from ecgfed.dpcore import epsilon_for
from ecgfed.harness import config as C
from ecgfed.harness.cli import main
from toys import TOY_CONFIG, tree_bytes

def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    base = tmp_path_factory.mktemp("harness")
    cfg = base / "toy.ini"
    cfg.write_text(TOY_CONFIG.format(root=base / "data"))
    assert main(["render", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(base / "run_a")]) == 0
    return base, cfg


class TestConfig:
    def test_defaults_valid(self):
        cfg = C.resolve()
        assert cfg["federation"]["k_min"] == 3 and cfg["privacy"]["sigma"] == 0.6

    def test_unknown_section_and_key(self):
        with pytest.raises(C.ConfigError, match="unknown section"):
            C.resolve({"optimiser": {}})
        with pytest.raises(C.ConfigError, match="federation.lr"):
            C.resolve({"federation": {"lr": 1}})

    def test_type_errors_name_the_key(self):
        with pytest.raises(C.ConfigError, match="federation.rounds"):
            C.resolve({"federation": {"rounds": "ten"}})
        with pytest.raises(C.ConfigError, match="federation.aggregator"):
            C.resolve({"federation": {"aggregator": "fedsgd"}})

    def test_text_form_round_trip(self):
        cfg = C.resolve({"model": {"channels": [4, 8, 16]}, "privacy": {"dp": True}})
        assert C.resolve(C.parse_text(C.render_text(cfg))) == cfg

    def test_hash_ignores_key_order(self):
        a = C.resolve({"federation": {"rounds": 5, "seed": 1}})
        b = C.resolve({"federation": {"seed": 1, "rounds": 5}})
        assert C.config_hash(a) == C.config_hash(b) != C.config_hash(C.resolve())

    def test_json_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"loss": {"lambda_dice": 0.5}}))
        assert C.load(p)["loss"]["lambda_dice"] == 0.5
        p.write_text("{broken")
        with pytest.raises(C.ConfigError):
            C.load(p)


class TestAccountantCommand:
    def test_epsilon(self, capsys):
        code, out, _ = run_cli(capsys, "accountant", "--sigma", "0.6", "--rounds", "100", "--delta", "1e-5")
        assert code == 0
        assert json.loads(out)["epsilon"] == pytest.approx(218.86432075869026, rel=1e-12)

    def test_target_epsilon(self, capsys):
        code, out, _ = run_cli(capsys, "accountant", "--target-epsilon", "8", "--rounds", "30", "--delta", "1e-5")
        res = json.loads(out)
        assert code == 0 and epsilon_for(res["sigma"], 30, 1e-5) == pytest.approx(8.0, rel=1e-6)

    def test_missing_argument(self, capsys):
        code, out, err = run_cli(capsys, "accountant", "--sigma", "0.6")
        assert code == 2 and out == ""
        assert json.loads(err)["error"] == "ValueError"

    def test_usage_error(self, capsys):
        code, _, err = run_cli(capsys, "frobnicate")
        assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"

    def test_bad_config(self, capsys, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[federation]\nrounds = -1\n")
        code, _, err = run_cli(capsys, "render", "--config", str(p), "--out", str(tmp_path / "d"))
        assert code == 2 and json.loads(err)["error"] == "ConfigError"

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "ecgfed", "accountant", "--sigma", "1", "--rounds", "1",
                              "--delta", "1e-5"], capture_output=True, text=True, check=True)
        assert json.loads(res.stdout)["rounds"] == 1


class TestPipeline:
    def test_render_refuses_then_forces(self, toy, capsys):
        base, cfg = toy
        code, _, err = run_cli(capsys, "render", "--config", str(cfg))
        assert code == 2 and json.loads(err)["error"] == "FileExistsError"

    def test_render_deterministic(self, toy, tmp_path):
        base, cfg = toy
        assert main(["render", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert tree_bytes(tmp_path / "again") == tree_bytes(base / "data")

    def test_train_manifest(self, toy):
        base, _ = toy
        man = json.loads((base / "run_a" / "manifest.json").read_text())
        assert man["method"] == "fedadam" and man["privacy"] is None
        assert man["checkpoints"] == {"1": "ckpt_r001.bin", "2": "ckpt_r002.bin"}
        assert man["final_metrics"]["round"] == 2 and 0 <= man["final_metrics"]["val_dice"] <= 1

    def test_train_deterministic(self, toy, tmp_path):
        base, cfg = toy
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        assert tree_bytes(tmp_path / "run") == tree_bytes(base / "run_a")

    def test_train_with_privacy(self, toy, tmp_path):
        base, cfg = toy
        text = cfg.read_text() + "\n[privacy]\nsecagg = true\ndp = true\n"
        p = tmp_path / "dp.ini"
        p.write_text(text)
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "run")]) == 0
        priv = json.loads((tmp_path / "run" / "manifest.json").read_text())["privacy"]
        assert priv["rounds_applied"] == 2 and priv["epsilon"] == pytest.approx(epsilon_for(0.6, 2, 1e-5))

    def test_eval_table(self, toy, tmp_path, capsys):
        base, cfg = toy
        text = cfg.read_text().replace("aggregator = fedadam", "aggregator = fedavg")
        p = tmp_path / "avg.ini"
        p.write_text(text)
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "run_b")]) == 0
        capsys.readouterr()
        code, out, err = run_cli(capsys, "eval", "--config", str(cfg), "--out", str(tmp_path / "cmp.json"),
                               str(base / "run_a"), str(tmp_path / "run_b"))
        assert code == 0, err
        lines = out.strip().splitlines()
        assert lines[0].startswith("milestone,n_pages") and [ln.split(",")[0] for ln in lines[1:]] == ["R1", "R2"]
        res = json.loads((tmp_path / "cmp.json").read_text())
        assert all(r["ci_lower"] <= r["delta"] <= r["ci_upper"] for r in res["rows"])

    def test_digitize_mask_route(self, toy, tmp_path, capsys):
        base, cfg = toy
        stem = sorted((base / "data" / "C1").rglob("*.mask.pgm"))[0].name[:-len(".mask.pgm")]
        d = next((base / "data" / "C1").rglob(stem + ".pgm")).parent
        out = tmp_path / "leads.csv"
        code, stdout, _ = run_cli(capsys, "digitize", "--config", str(cfg), "--image", str(d / f"{stem}.pgm"),
                                  "--calib", str(d / f"{stem}.meta.json"), "--mask", str(d / f"{stem}.mask.pgm"),
                                  "--out", str(out))
        assert code == 0 and json.loads(stdout)["observed_fraction"] == pytest.approx(0.25, abs=0.01)
        got = np.genfromtxt(out, delimiter=",", skip_header=1)[:, 1:]
        ref = np.genfromtxt(d / f"{stem}.signal.csv", delimiter=",", skip_header=1)[:, 1:]
        obs = np.isfinite(got)
        assert np.sqrt(np.mean((got - ref)[obs] ** 2)) < 0.05


    def test_digitize_needs_source(self, toy, capsys):
        base, cfg = toy
        code, _, err = run_cli(capsys, "digitize", "--image", "nope.pgm", "--calib", "nope.json")
        assert code == 2 and json.loads(err)["error"] == "FileNotFoundError"
