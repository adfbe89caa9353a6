import math

import numpy as np
import pytest

from stdf4d.diffcore import zero_grads
from stdf4d.train import (
    Model,
    Phase,
    TrainingDiverged,
    align_test_pose,
    compute_losses,
    phase_at,
    render_canonical,
    render_model_vjp,
    train,
)

from conftest import tiny_config


def test_phase_boundaries():
    cfg = tiny_config(300)  # warm-up 10, pose end 70
    assert phase_at(cfg, 0, True) == Phase(True, False, False)
    assert phase_at(cfg, 10, True) == Phase(False, True, True)
    assert phase_at(cfg, 70, True) == Phase(False, True, False)
    assert phase_at(cfg, 10, False).train_field is False
    assert phase_at(cfg.variant(pose_opt=False), 20, True).train_pose is False


def test_warmup_skips_generated_terms(tiny_dataset):
    cfg = tiny_config()
    model = Model.initialize(tiny_dataset, cfg)
    item = (tiny_dataset.view("input", 0, 1), tiny_dataset.images[("input", 0, 1)])
    gitem = (model.gen_view(1, 1), tiny_dataset.images[("generated", 1, 1)])
    zero_grads(model.store)
    comps = compute_losses(model, cfg, item, gitem, Phase(True, False, False))
    assert comps["gen"] == comps["pose"] == comps["smooth"] == 0.0
    for name in model.field.param_names() + ["cam.q", "cam.t"]:
        assert not model.store.grad(name).any()
    assert comps["total"] == pytest.approx(comps["input"] + comps["tv"])


def test_parameter_freezes_during_training(tiny_dataset):
    # 30 iterations: warm-up 1, pose optimisation ends at 7
    cfg = tiny_config(30)
    model = Model.initialize(tiny_dataset, cfg)
    field0 = {n: model.store.get(n).copy() for n in model.field.param_names()}
    snaps = {}

    def progress(it, comps):
        snaps[it] = (model.store.get("cam.q").copy(), model.store.get("cam.t").copy(),
                     model.store.get("head.mu.w").copy())

    cam0 = (model.store.get("cam.q").copy(), model.store.get("cam.t").copy())
    train(tiny_dataset, cfg, model=model, progress=progress)
    # warm-up step leaves field and poses untouched
    assert np.array_equal(snaps[0][0], cam0[0]) and np.array_equal(snaps[0][1], cam0[1])
    assert np.array_equal(snaps[0][2], field0["head.mu.w"])
    # poses move while active, then stay frozen
    assert not np.array_equal(snaps[6][1], cam0[1])
    assert np.array_equal(snaps[7][1], snaps[29][1]) and np.array_equal(snaps[7][0], snaps[29][0])
    assert not np.array_equal(snaps[29][2], field0["head.mu.w"])


def test_training_deterministic(tiny_dataset, tmp_path):
    cfg = tiny_config(15)
    outs = []
    for k in range(2):
        res = train(tiny_dataset, cfg)
        res.model.save(tmp_path / f"c{k}.json", 15)
        res.write_log(tmp_path / f"l{k}.tsv")
        outs.append(((tmp_path / f"c{k}.json").read_bytes(), (tmp_path / f"l{k}.tsv").read_bytes()))
    assert outs[0] == outs[1]
    other = train(tiny_dataset, cfg.variant(seed=1))
    assert other.log_lines != train(tiny_dataset, cfg).log_lines


def test_loss_log_columns(tiny_dataset, tmp_path):
    res = train(tiny_dataset, tiny_config(5))
    res.write_log(tmp_path / "l.tsv")
    rows = (tmp_path / "l.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:7] == ["iter", "L_input", "L_gen", "L_pose", "L_TV", "L_smooth", "total"]
    assert len(rows) == 6
    for row in rows[1:]:
        vals = [float(v) for v in row.split("\t")[1:7]]
        assert vals[-1] == pytest.approx(sum(vals[:-1]), rel=1e-12)


def test_non_finite_loss_aborts_with_iteration(tiny_dataset):
    import copy

    ds = copy.copy(tiny_dataset)
    ds.images = dict(tiny_dataset.images)
    for key in ds.images:
        if key[0] == "input":
            ds.images[key] = np.full_like(ds.images[key], np.nan)
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(ds, tiny_config(5))


def test_field_absent_when_disabled(tiny_dataset):
    model = Model.initialize(tiny_dataset, tiny_config(use_field=False))
    assert model.field is None and not model.store.names("planes.")


def test_checkpoint_reload_renders_identically(tiny_dataset, tmp_path):
    res = train(tiny_dataset, tiny_config(8))
    res.model.save(tmp_path / "c.json", 8)
    model, header, step = Model.load(tmp_path / "c.json")
    assert step == 8 and model.field is not None
    view = tiny_dataset.view("eval", 1, 2)
    assert np.array_equal(render_canonical(res.model, view).color, render_canonical(model, view).color)
    gv = model.gen_view(2, 1)
    a, _ = render_model_vjp(res.model, gv, 1, 2, use_field=True)
    b, _ = render_model_vjp(model, gv, 1, 2, use_field=True)
    assert np.array_equal(a.color, b.color)


def test_discarded_field_matches_pure_canonical(tiny_dataset):
    cfg = tiny_config()
    with_field = Model.initialize(tiny_dataset, cfg)
    without = Model.initialize(tiny_dataset, cfg, with_field=False)
    view = tiny_dataset.view("input", 1, 0)
    assert np.array_equal(render_canonical(with_field, view).color, render_canonical(without, view).color)
    res = train(tiny_dataset, tiny_config(10), model=with_field)
    stripped = res.model.discard_field()
    assert not stripped.store.names("head.")
    a, _ = render_model_vjp(res.model, view, 0)
    assert np.array_equal(a.color, render_canonical(stripped, view, 0).color)


def test_align_zero_iterations_and_ground_truth(tiny_dataset):
    model = Model.initialize(tiny_dataset, tiny_config())
    view = tiny_dataset.view("eval", 0, 1)
    target = render_canonical(model, view).color
    res = align_test_pose(model, view, target, iters=0)
    assert np.array_equal(res.q, view.q_cam) and np.array_equal(res.t, view.t_cam)
    res = align_test_pose(model, view, target, iters=20)
    assert res.loss == 0.0 and res.initial_loss == 0.0
    assert abs(res.loss - res.initial_loss) < 1e-6


def test_align_recovers_small_perturbation(tiny_dataset):
    from stdf4d.synth import jitter_pose

    model = Model.initialize(tiny_dataset, tiny_config())
    view = tiny_dataset.view("eval", 0, 1)
    target = render_canonical(model, view).color
    q, t = jitter_pose(view.q_cam, view.t_cam, 3.0, 1.0, 0.01, 2.0, np.random.default_rng(0))
    res = align_test_pose(model, view.with_pose(q, t), target, iters=150)
    assert res.loss < 0.5 * res.initial_loss
    assert not math.isnan(res.loss)


def test_generated_view_uses_learned_pose(tiny_dataset):
    model = Model.initialize(tiny_dataset, tiny_config())
    model.store.get("cam.t")[1] += 0.05
    gv = model.gen_view(1, 2)
    assert np.array_equal(gv.t_cam, model.store.get("cam.t")[1])
    assert np.array_equal(gv.t_init, tiny_dataset.cameras["generated"][1].t_init)
    assert gv.s_index == 1 and gv.t_index == 2
    assert render_canonical(model, gv, 2).color.shape == (16, 16, 3)
