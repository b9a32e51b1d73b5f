import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from besovnet import suites
from besovnet.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, config_hash, main
from besovnet.network_ir import dumps, loads
from besovnet.suites import random_cnn

DETERMINISTIC = ("report.json", "rows.csv", "budget_table.csv")
ZERO_TARGET = {"family": "trig", "params": {"terms": [[0.0, [1.0], 0.0]]}}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def report(out):
    return json.loads((out / "report.json").read_text())


class TestVerify:
    def test_calculus_suite_passes(self, tmp_path):
        out = tmp_path / "run"
        assert main(["verify", "--suite", "calculus", "--out", str(out), "--quiet"]) == EXIT_OK
        rep = report(out)
        assert rep["checks"] and all(c["passed"] for c in rep["checks"])
        with open(out / "rows.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and all(r["passed"] == "True" for r in rows)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["verify", "--suite", "gadgets", "--seed", "5", "--out", str(tmp_path / name),
                         "--quiet"]) == EXIT_OK
        for f in DETERMINISTIC:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_failed_row_names_the_check(self, tmp_path, monkeypatch, capsys):
        row = {"check": "cnn_stack", "instance": 0, "max_dev": 1.0, "tolerance": 1e-9, "passed": False}
        monkeypatch.setattr(suites, "run_suite", lambda name, seed=0, **kw: ([row], 0.0))
        assert main(["verify", "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_FAILED
        assert "FAILED: cnn_stack" in capsys.readouterr().err

    def test_fuzz_command(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"fuzz": {"instances": 5, "inputs": 20}})
        assert main(["calculus-fuzz", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "besovnet", "verify", "--suite", "calculus", "--out",
                               str(tmp_path / "o"), "--quiet"], capture_output=True, text=True)
        assert proc.returncode == EXIT_OK, proc.stderr


class TestConfigErrors:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"manifold": {"kind": "circle", "colour": "red"}})
        assert main(["build", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "schema path" in err and "manifold" in err

    def test_eps_out_of_range(self, tmp_path, capsys):
        assert main(["build", "--eps", "1.5", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "/eps" in capsys.readouterr().err

    def test_not_json(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text("{not json")
        assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_audit_without_network(self, tmp_path):
        assert main(["audit", "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


class TestCoverAndAudit:
    def test_smallest_architecture(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"covering": {"M": 1, "L": 1, "J": 1, "K": 1, "kappa1": 1.0,
                                                              "kappa2": 1.0, "D": 2, "delta": 0.1}})
        out = tmp_path / "o"
        assert main(["cover", "--config", cfg, "--out", str(out), "--quiet"]) == EXIT_OK
        assert report(out)["summary"]["Lambda2"] == 89

    def test_audit_document(self, tmp_path):
        doc = tmp_path / "net.json"
        doc.write_text(dumps(random_cnn(np.random.default_rng(0), 4, 3, 3, 2)))
        assert main(["audit", str(doc), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK

    def test_tampered_envelope_rejected(self, tmp_path, capsys):
        net = random_cnn(np.random.default_rng(1), 4, 3, 3, 2)
        doc = json.loads(dumps(net))
        doc["envelope"]["L"] = 1
        path = tmp_path / "net.json"
        path.write_text(json.dumps(doc))
        assert main(["audit", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG
        assert "declared envelope" in capsys.readouterr().err


class TestBuild:
    def test_zero_target_build_is_reproducible(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"eps": 0.2, "target": ZERO_TARGET, "build": {"n_samples": 2000}})
        for name in ("a", "b"):
            assert main(["build", "--config", cfg, "--out", str(tmp_path / name), "--quiet"]) == EXIT_OK
        for f in DETERMINISTIC + ("network.json",):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        rep = report(tmp_path / "a")
        assert rep["config_hash"] == config_hash(rep["config"])
        assert rep["summary"]["sup_error"] == 0.0
        assert main(["cover", str(tmp_path / "a" / "network.json"), "--out", str(tmp_path / "c"), "--quiet"]) == 0

    @pytest.mark.slow
    def test_circle_build(self, tmp_path):
        out = tmp_path / "o"
        assert main(["build", "--manifold", "circle", "--eps", "0.1", "--out", str(out), "--quiet"]) == EXIT_OK
        rep = report(out)
        assert rep["summary"]["sup_error"] <= 0.1
        net = loads((out / "network.json").read_text())
        assert net.M == rep["summary"]["M"]
        assert main(["audit", str(out / "network.json"), "--out", str(tmp_path / "a"), "--quiet"]) == EXIT_OK
