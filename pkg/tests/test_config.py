import json

import pytest

from stdf4d.config import TrainConfig, TrainSchedule, desk_defaults, reference_defaults


def test_reference_constants():
    cfg = reference_defaults()
    w = cfg.weights
    assert (w.lambda_dssim, w.lambda1, w.lambda2, w.lambda_p, w.lambda_s) == (0.2, 0.02, 0.2, 0.1, 1e-4)
    sch = cfg.schedule
    assert (sch.total_iters, sch.pose_opt_end, sch.warmup_iters) == (30000, 7000, 1000)
    assert (sch.densify_interval, sch.densify_end) == (500, 15000)
    fc = cfg.field_config
    assert (fc.spatial_res, fc.scales, fc.channels) == (64, (1, 2), 16)
    assert cfg.lrs.planes == 1.6e-3 and cfg.lrs.planes_final == 1.6e-4


def test_desk_scaling_rule():
    sch = desk_defaults(4000).schedule
    assert (sch.total_iters, sch.warmup_iters, sch.pose_opt_end, sch.densify_interval, sch.densify_end) == (
        4000, 133, 933, 67, 2000)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(total_iters=100, warmup_iters=200, pose_opt_end=300)


def test_json_round_trip(tmp_path):
    cfg = desk_defaults(500).variant(use_field=False, seed=3, cutoff_sigma=None)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    assert json.loads((tmp_path / "c.json").read_text())["seed"] == 3
