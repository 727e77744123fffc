import math
from pathlib import Path

import pytest

import lorec

ROOT = Path(__file__).resolve().parents[2]


def smoke_config():
    return lorec.load_config(ROOT / "configs" / "smoke.json")


def test_config_round_trip_and_digest():
    cfg = smoke_config()
    assert lorec.normalize_config(cfg) == cfg
    assert len(lorec.config_digest(cfg)) == 64
    other = dict(cfg, seed=cfg["seed"] + 1)
    assert lorec.config_digest(other) != lorec.config_digest(cfg)


def test_bad_config_raises():
    with pytest.raises(lorec.ConfigError):
        lorec.normalize_config({"bogus": 1})
    with pytest.raises(ValueError):
        lorec.normalize_config({"schedule": {"rounds": 0}})


def test_metric_helpers():
    hr, ndcg = lorec.target_metrics([[1, 2, 3, 9], [1, 2, 3, 4], [5, 6, 7, 8], [9]], [[0], [0], [0], [9]], [9], 50)
    assert hr == pytest.approx(1 / 3)
    assert ndcg == pytest.approx((1 / 3) / math.log2(5))
    assert lorec.consistency(0.4, 0.4) == 1.0
    assert lorec.consistency(0.2, 0.4) == pytest.approx(0.5)
    assert lorec.consistency(0.1, 0.0) is None


def test_weights_start_at_one_and_conserve_xi():
    assert all(w == 1.0 for w in lorec.initial_weights(100, 3.0))
    rounds = [[0.9, 0.1, 0.2, 0.8]] * 3
    xi, w = lorec.compensate_rounds(rounds, 5.0)
    assert sum(xi) == pytest.approx(20.0, abs=1e-12)
    assert w[0] < 1.0 < w[1]
    assert lorec.fraud_delta_closed_form(0.3, 0.9, 0.05) < 0


def test_run_is_deterministic(tmp_path):
    cfg = smoke_config()
    a = lorec.run(cfg, tmp_path / "a")
    b = lorec.run(cfg)
    assert a == b
    assert a["provenance"]["config_digest"] == lorec.config_digest(cfg)
    assert (tmp_path / "a" / "report.json").exists()
    assert len(a["rounds"]) == cfg["schedule"]["rounds"]
