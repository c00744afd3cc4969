import json
from pathlib import Path

import pytest

from pathvar.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VALID = sorted(p.name for p in CONFIGS.glob("*.json") if p.name != "particles-invalid.json")


def small(name: str, tmp_path: Path, **over) -> Path:
    cfg = json.loads((CONFIGS / name).read_text())
    cfg["grid_N"] = min(cfg.get("grid_N", 32), 32)
    cfg["samples_M"] = min(cfg.get("samples_M", 2000), 2000)
    if cfg.get("drift", {}).get("kind") == "optimize":
        cfg["optimizer"] = {"epochs": 2, "pool": 1000, "batch": 500, "eval_samples": 1000}
    if "prekopa" in cfg:
        cfg["prekopa"]["probe_samples"] = 200
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(cfg: Path, out: Path, *extra) -> int:
    return main(["run", str(cfg), "--output-dir", str(out), *extra])


def csvs(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@pytest.mark.parametrize("name", VALID)
def test_rerun_is_byte_identical(name, tmp_path):
    cfg = small(name, tmp_path)
    codes = [run(cfg, tmp_path / "a"), run(cfg, tmp_path / "b")]
    assert codes[0] == codes[1] and codes[0] in (0, 2)
    first = csvs(tmp_path / "a")
    assert first and first == csvs(tmp_path / "b")
    assert all(b"\r\n" not in v for v in first.values())


def test_threads_do_not_change_outputs(tmp_path):
    cfg = small("girsanov-bridge.json", tmp_path, samples_M=25_000)
    run(cfg, tmp_path / "a", "--threads", "1")
    run(cfg, tmp_path / "b", "--threads", "3")
    assert csvs(tmp_path / "a") == csvs(tmp_path / "b")


def test_seed_override(tmp_path):
    cfg = small("girsanov-bridge.json", tmp_path)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b", "--seed", "99")
    assert csvs(tmp_path / "a") != csvs(tmp_path / "b")


def test_summary_layout(tmp_path):
    cfg = small("compose-bridge.json", tmp_path)
    assert run(cfg, tmp_path / "o") == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert list(summary) == ["experiment", "config", "results", "assertions", "passed", "wall_time"]
    assert summary["passed"] is True


def test_particles_constraint_is_config_error(tmp_path, capsys):
    assert run(CONFIGS / "particles-invalid.json", tmp_path / "o") == 1
    assert "sigma^2 <= 2 gamma" in capsys.readouterr().err


def test_unknown_experiment(tmp_path, capsys):
    cfg = small("compose-bridge.json", tmp_path, experiment="nope")
    assert run(cfg, tmp_path / "o") == 1
    assert "experiment" in capsys.readouterr().err


def test_missing_field(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "duality-linear.json").read_text())
    del cfg["functional"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run(path, tmp_path / "o") == 1
    assert "functional" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert run(tmp_path / "absent.json", tmp_path / "o") == 1


def test_failed_assertion_exit_code(tmp_path):
    cfg = small("duality-linear.json", tmp_path, drift={"kind": "constant", "value": -1.0},
                expect={"lhs": 5.0, "lhs_tol": 0.01})
    assert run(cfg, tmp_path / "o") == 2
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["passed"] is False
