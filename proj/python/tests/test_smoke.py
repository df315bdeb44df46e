import math

import pytest

import pmpdp


def test_scenarios_listed():
    s = pmpdp.list_scenarios()
    assert "lq1" in s
    assert len(s) >= 5
    assert s["lq1"]["defaults"]["box"] == 3.0


def test_riccati_lq1():
    r = pmpdp.riccati()
    for t in (0.0, 0.4, 1.0):
        assert r.pi(t) == pytest.approx(1.0, rel=1e-12)
        assert r.P(t) == pytest.approx(-2.0 * (2.0 - t), rel=1e-12)
    assert r.V(0.0, 1.0) == pytest.approx(1.25)
    assert r.feedback(0.3, 0.5) == pytest.approx(-0.5)


def test_riccati_tanh_and_escape():
    r = pmpdp.riccati(m_cost=1.0, gamma=0.0)
    assert r.pi(0.2) == pytest.approx(math.tanh(0.8), rel=1e-8)
    with pytest.raises(pmpdp.FiniteEscape):
        pmpdp.riccati(m_cost=1.0, gamma=-2.0)


def test_config_errors():
    with pytest.raises(pmpdp.ConfigError):
        pmpdp.effective_config({"bogus": 1})
    with pytest.raises(pmpdp.ConfigError, match="line 2"):
        pmpdp.effective_config('{"eta": [1.0,\n ]]}')
    with pytest.raises(pmpdp.ConfigError):
        pmpdp.preset("lq9")
    assert "lq1-quick" in pmpdp.preset_names()


def test_value_field_lq1():
    f = pmpdp.value_field({"name": "lq1", "params": {"steps": 50}}, anchors=241, samples=2000)
    assert f.steps == 50 and f.dim == 1
    assert f.value(f.steps, [0.5]) == pytest.approx(0.25, rel=1e-3)
    assert f.value(0, [1.0]) == pytest.approx(1.25, rel=0.05)
    assert f.stderr(0, [1.0]) > 0.0


def test_run_tiny(tmp_path):
    cfg = {
        "scenario": {"name": "lq1", "params": {"steps": 50}},
        "budget": {"paths": 1000, "anchors": 121, "samples": 500},
        "checks": ["pmp"],
        "sample": {"times": 4, "paths": 8},
        "output": {"trajectory_paths": 2, "value_time_stride": 10},
    }
    code, out, cost, report = pmpdp.run(cfg, str(tmp_path / "run"))
    assert code in (0, 1)
    assert code == (0 if report["passed"] else 1)
    assert cost == pytest.approx(1.25, rel=0.1)
    assert (tmp_path / "run" / "manifest.json").exists()
    assert "pmp" in pmpdp.summary_table(report)
