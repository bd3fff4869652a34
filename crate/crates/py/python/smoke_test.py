"""Smoke test for the cace_lab extension module.

Run with `pytest crates/py/python` after `pip install -e crates/py --no-build-isolation`.
"""

import csv
import os
import pathlib

import pytest

import cace_lab

CONFIGS = pathlib.Path(__file__).resolve().parents[3] / "configs"


def test_version():
    assert cace_lab.__version__ == "0.1.0"


def test_stub_effects_are_exact():
    assert cace_lab.stub_gt_cace("color", 0.99, 0.01) == pytest.approx(1.0, abs=1e-9)
    assert cace_lab.stub_gt_cace("orientation", 0.6, 0.4) == 0.0
    with pytest.raises(ValueError):
        cace_lab.stub_gt_cace("shape", 0.5, 0.5)


def test_bars_shapes():
    pixels, classes, concepts = cace_lab.bars(0.9, 0.1, 20, seed=3)
    assert len(pixels) == 20 and len(pixels[0]) == 3 * 16 * 16
    assert set(classes) <= {0, 1} and set(concepts) <= {0, 1}
    with pytest.raises(cace_lab.ConfigError):
        cace_lab.bars(1.5, 0.1, 20)


def test_smoke_experiment(tmp_path, monkeypatch):
    monkeypatch.delenv("CACE_LAB_CACHE", raising=False)
    exp = cace_lab.Experiment(str(CONFIGS / "smoke.toml"), out=str(tmp_path))
    assert exp.name == "smoke" and exp.cells() == ["0.02", "0.05"]

    with pytest.raises(cace_lab.MissingArtifactError):
        exp.estimate()

    rows = exp.run()
    assert {r["estimator"] for r in rows} >= {"gt_cace", "dec_cace", "encdec_cace", "conexp", "tcav"}
    with open(exp.results_csv(), newline="") as f:
        header = next(csv.reader(f))
    assert header[:3] == ["run_id", "dataset", "bias_or_sigma"]

    built, reused = cace_lab.Experiment(str(CONFIGS / "smoke.toml"), out=str(tmp_path)).generate()
    assert built == [] and len(reused) == 3

    reports = exp.diagnose()
    assert [r["test"] for r in reports] == ["positive_effect", "null_effect"]
    assert "diagnostics" in exp.report()


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "x"\nseed = 1\n[dataset]\nfamily = "mnist"\n')
    with pytest.raises(cace_lab.ConfigError):
        cace_lab.Experiment(str(bad), out=str(tmp_path))
    assert issubclass(cace_lab.ConfigError, cace_lab.CaceError)


if __name__ == "__main__":
    raise SystemExit(pytest.main([os.path.abspath(__file__), "-q"]))
