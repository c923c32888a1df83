import json
import math

import numpy as np
import pytest

from mmtc_sim import amp, harness
from mmtc_sim.config import ConfigError, PowerPolicy, SystemConfig
from mmtc_sim.harness import Algorithm, MetricRow, MetricsReport, Scenario, Variant


def small(figure_id, n_trials=4, points=1):
    sc = harness.preset(figure_id)
    return sc.replace(n_trials=n_trials, seed=7, sweep_values=sc.sweep_values[:points])


def test_preset_configs():
    c = harness.preset("fig2").config
    assert (c.n_devices, c.activity_prob, c.n_antennas) == (200, 0.05, 20)
    c = harness.preset("fig7").config
    assert (c.n_antennas, c.coherence_len) == (50, 500)
    lengths = sorted(dict(v.options)["code_length"] for v in harness.preset("fig12").variants
                     if v.algorithm is Algorithm.COHERENT_REPETITION)
    assert lengths == [11, 15, 19]
    assert harness.preset("FIG6").name == "fig6"
    for fid in harness.FIGURES:
        assert harness.preset(fid).n_trials in (500, 2000, 5000)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown figure"):
        harness.preset("fig99")


def test_scenario_validation():
    v = Variant("a", "amp")
    with pytest.raises(ConfigError):
        Scenario("x", SystemConfig(), "nonsense", (1,), (v,))
    with pytest.raises(ConfigError):
        Scenario("x", SystemConfig(), "pilot_len", (1,), ())
    with pytest.raises(ConfigError):
        Scenario("x", SystemConfig(), "pilot_len", (1,), (v, v))
    with pytest.raises(ConfigError):
        Scenario("x", SystemConfig(), "pilot_len", (1,), (v,), n_trials=0)
    with pytest.raises(ConfigError):
        Variant("b", "amp", {"bogus": 1})
    with pytest.raises(ValueError):
        Variant("c", "quantum")


def test_point_config_coherence_sweep():
    sc = harness.preset("fig12")
    mamp = next(v for v in sc.variants if v.algorithm is Algorithm.MAMP)
    rep = next(v for v in sc.variants if v.algorithm is Algorithm.COHERENT_REPETITION)
    cfg = sc.point_config(25, mamp)
    assert cfg.coherence_len == cfg.pilot_len == 25 and cfg.info_bits == 1
    cfg = sc.point_config(25, rep)
    assert cfg.coherence_len == 25 and cfg.info_bits == 0
    assert sc.point_config(40, Variant("n", "amp", {"power_policy": "npc"})).power_policy is PowerPolicy.NPC


def test_run_metrics_and_determinism():
    sc = small("fig8", points=2)
    a = harness.run(sc)
    b = harness.run(sc)
    assert harness.report_to_csv(a) == harness.report_to_csv(b)
    assert "mamp:message_error_rate" in a.metrics and "amp:miss_rate" in a.metrics
    assert "amp:message_error_rate" not in a.metrics
    values, est, se = a.series("mamp:miss_rate")
    assert list(values) == list(sc.sweep_values) and np.all((est >= 0) & (est <= 1)) and np.all(se >= 0)
    assert all(r.n_trials == 4 for r in a.rows)


def test_parallel_matches_serial():
    sc = small("fig12", n_trials=5)
    serial = harness.report_to_csv(harness.run(sc, parallelism=1))
    assert harness.report_to_csv(harness.run(sc, parallelism=8, chunk=1)) == serial
    assert harness.report_to_csv(harness.run(sc, parallelism=3, chunk=2)) == serial


def test_seed_changes_results():
    sc = small("fig2", n_trials=6)
    assert harness.report_to_csv(harness.run(sc)) != harness.report_to_csv(harness.run(sc.replace(seed=8)))


def test_rate_metric_present():
    rep = harness.run(small("fig7", n_trials=3))
    for label in ("amp", "amp+mmse", "perfect"):
        row = rep.get(f"{label}:rate_bits_per_s_per_hz", 10)
        assert row.estimate > 0
    assert "perfect:miss_rate" not in rep.metrics


def test_trial_errors_count_as_failures(monkeypatch):
    def boom(*args, **kwargs):
        raise amp.AmpDivergenceError("forced")

    monkeypatch.setattr(amp, "amp_detect", boom)
    rep = harness.run(small("fig2", n_trials=3))
    assert rep.get("amp:failure_rate", 5).estimate == 1.0
    assert math.isnan(rep.get("amp:miss_rate", 5).estimate)


def test_invalid_parallelism():
    with pytest.raises(ValueError):
        harness.run(small("fig2"), parallelism=0)


def test_csv_round_trip(tmp_path):
    rep = harness.run(small("fig6", n_trials=3))
    path = harness.export(rep, tmp_path / "r.csv")
    back = harness.read_csv(path)
    assert back.rows == rep.rows
    assert harness.read_csv(path.read_text()).rows == rep.rows


def test_single_row_round_trip():
    row = MetricRow("pilot_len", 10.0, "amp:miss_rate", 0.125, 0.01, 2000)
    text = harness.report_to_csv(MetricsReport([row]))
    assert harness.read_csv(text).rows == [row]


def test_empty_report_is_header_only(tmp_path):
    path = harness.export(MetricsReport(), tmp_path / "e.csv")
    assert path.read_text() == ",".join(harness.CSV_COLUMNS) + "\n"
    assert harness.read_csv(path).rows == []


def test_json_matches_csv(tmp_path):
    rep = harness.run(small("fig3", n_trials=3))
    records = json.loads(harness.export(rep, tmp_path / "r.json", "json").read_text())
    assert len(records) == len(rep.rows)
    for rec, row in zip(records, rep.rows):
        assert rec["metric"] == row.metric and rec["sweep_value"] == row.sweep_value
        assert rec["estimate"] == row.estimate and rec["stderr"] == row.stderr


def test_json_nan_is_null():
    row = MetricRow("pilot_len", 5, "amp:miss_rate", float("nan"), float("nan"), 1)
    rec = json.loads(harness.report_to_json(MetricsReport([row])))[0]
    assert rec["estimate"] is None and rec["stderr"] is None


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        harness.export(MetricsReport(), tmp_path / "x.txt", "xml")
    with pytest.raises(OSError):
        harness.export(MetricsReport(), tmp_path / "missing" / "x.csv")
    with pytest.raises(ValueError, match="header"):
        harness.read_csv("a,b\n1,2\n")


def test_report_get_missing():
    with pytest.raises(KeyError):
        MetricsReport().get("amp:miss_rate", 5)
