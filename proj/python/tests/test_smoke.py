import csv
import json
import math

import pytest

import pvfl

SPEC = {
    "data": {"synthetic": {"days": 10, "centers": [
        {"id": 1, "prosumers": 2, "irradiance_amplitude": 0.8},
        {"id": 2, "prosumers": 2, "irradiance_amplitude": 1.2},
        {"id": 3, "prosumers": 1, "days": 6, "onboard": True},
    ]}},
    "model": {"blocks": 1, "d_emb": 8, "d_k": 8, "d_ff": 8, "window_days": 2,
              "learning_rate": 0.1, "batch_size": 8},
    "rounds": 2,
    "seed": 3,
}


def test_metrics_examples():
    assert pvfl.mae([1, 2], [2, 4]) == pytest.approx(1.5)
    assert pvfl.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    assert pvfl.r2([0, 2], [1, 1]) == pytest.approx(0.0)


def test_lambda_and_weights():
    assert pvfl.compute_lambda([1, 2], [1, 2]) == pytest.approx(1.0)
    assert pvfl.compute_lambda([1, 2], [-1, -2]) == pytest.approx(0.0)
    assert pvfl.aggregation_weights([3, 1]) == [0.75, 0.25]


def test_errors_map_to_python():
    with pytest.raises(pvfl.Error):
        pvfl.mae([1], [1, 2])
    with pytest.raises(pvfl.ConfigError):
        pvfl.run_experiment({**SPEC, "strategy": "ditto"})


def test_run_experiment_in_memory():
    report = pvfl.run_experiment(SPEC)
    assert set(report["strategies"]) == {"pfl", "fedavg", "local"}
    assert report == pvfl.run_experiment(SPEC)
    for section in report["strategies"].values():
        assert len(section["centers"]) == 2


def test_run_trace_onboard(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SPEC))
    out = tmp_path / "run"
    pvfl.run(spec_path, out)
    report = json.loads((out / "report.json").read_text())
    assert report["spec"] == SPEC

    pvfl.trace(spec_path, out, "c1_p0", "2012-07-09", "2012-07-10", tmp_path / "trace.csv", ["pfl"])
    rows = [r for r in csv.reader((tmp_path / "trace.csv").open()) if not r[0].startswith("#")]
    assert rows[0] == ["date", "slot", "y_true", "pred_pfl"]
    assert len(rows) == 1 + 96

    onboard = pvfl.onboard(spec_path, out, 1)
    assert onboard["new_center"] == 3
    assert "r2" in onboard["strategies"]["pfl"]["new_center"]["raw"]
