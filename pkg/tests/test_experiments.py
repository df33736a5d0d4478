import json

import numpy as np
import pytest

from cflag.errors import ConfigurationError
from cflag.experiments import (AccuracyMatrix, ExperimentConfig, ReportError, StreamSpec,
                               avg_accuracy, forgetting, read_accuracy_matrix, report,
                               run_experiment, validate)


def test_metric_examples():
    assert avg_accuracy([[0.9]]) == pytest.approx(0.9)
    assert avg_accuracy([[0.95, None], [0.9, 0.7]]) == pytest.approx(0.8)
    m = [[0.9, None, None], [0.85, 0.8, None], [0.7, 0.6, 0.5]]
    assert forgetting(m) == pytest.approx(0.2)
    assert forgetting([[0.8, None], [0.8, 0.9]]) == 0.0
    assert forgetting([[0.5, None], [0.7, 0.9]]) == pytest.approx(-0.2)
    with pytest.raises(ValueError):
        forgetting([[0.9]])
    with pytest.raises(ValueError):
        avg_accuracy([[0.9, None], [0.8, None]])


def _cfg(**kw):
    base = dict(rounds=4, local_steps=2, seed=3, alpha=0.02, beta=0.03,
                stream=StreamSpec(n_per_class=30))
    base.update(kw)
    return ExperimentConfig(**base)


def test_fedtrack_equals_fixed_with_zero_alpha():
    a = run_experiment(_cfg(algorithm="fedtrack"))
    b = run_experiment(_cfg(algorithm="cflag-fixed", alpha=0.0))
    assert a.trace == b.trace


def test_repeat_run_is_identical():
    a = run_experiment(_cfg(algorithm="cflag-adaptive"))
    b = run_experiment(_cfg(algorithm="cflag-adaptive"), threads=4)
    assert a.trace == b.trace and a.summary == b.summary


def test_artifacts_and_report(tmp_path):
    out = tmp_path / "run"
    art = run_experiment(_cfg(), out)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["accuracy_matrix.csv", "config.json", "summary.json", "trace.csv"]
    assert not any(p.name.startswith(".") for p in tmp_path.iterdir())
    m = read_accuracy_matrix(out / "accuracy_matrix.csv")
    assert avg_accuracy(m) == pytest.approx(art.summary["avg_accuracy"], abs=1e-15)
    res = report(out)
    assert res["avg_accuracy"] == art.summary["avg_accuracy"]
    assert len((out / "gamma.dat").read_text().splitlines()) == 8
    summary = json.loads((out / "summary.json").read_text())
    assert summary["transference_total"] + summary["interference_total"] == 8 * 5


def test_report_names_missing_rounds(tmp_path):
    out = tmp_path / "run"
    run_experiment(_cfg(), out)
    lines = (out / "trace.csv").read_text().splitlines()
    (out / "trace.csv").write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ReportError, match="task 1 round 2"):
        report(out)


def test_failed_run_leaves_nothing(tmp_path, monkeypatch):
    import cflag.experiments as ex

    def boom(*a, **k):
        raise RuntimeError("injected")
    monkeypatch.setattr(ex, "task_transition", boom)
    with pytest.raises(RuntimeError):
        run_experiment(_cfg(), tmp_path / "run")
    assert list(tmp_path.iterdir()) == []


def test_config_validation():
    with pytest.raises(ConfigurationError, match="2/\\(L\\(1\\+m\\)\\)"):
        validate(_cfg(alpha=10.0))
    validate(_cfg(algorithm="fine-fl", alpha=10.0))
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"schema_version": 99})
    cfg = ExperimentConfig.from_dict(_cfg().to_dict())
    assert cfg == _cfg()


def test_per_task_rates():
    cfg = _cfg(task_rates={"1": {"beta": 0.01}})
    assert cfg.rates_for(0)["beta"] == 0.03 and cfg.rates_for(1)["beta"] == 0.01
    art = run_experiment(cfg)
    assert {r["beta_t"] for r in art.trace if r["task"] == 1} == {0.01}


def test_accuracy_matrix_container():
    m = AccuracyMatrix(2)
    m.set(0, 0, 0.9)
    with pytest.raises(IndexError):
        m.set(0, 1, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 0, 1.5)
    assert m.rows() == [[0.9, None], [None, None]]
    assert np.isnan(m.a[1, 0])
