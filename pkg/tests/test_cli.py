import json
from dataclasses import asdict

import pytest

from stdf4d.camsel import VisibilityData
from stdf4d.cli import main
from stdf4d.splat import read_pfm, read_ppm

from conftest import TINY_SPEC


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(asdict(TINY_SPEC)))
    assert main(["synth", "--out", str(root / "data"), "--spec", str(spec)]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--iters", "6"]) == 0
    return root


def test_train_outputs(workdir):
    for name in ("config.json", "checkpoint.json", "loss.tsv"):
        assert (workdir / "run" / name).exists()
    assert len((workdir / "run" / "loss.tsv").read_text().splitlines()) == 7


def test_render_ppm_and_pfm(workdir, capsys):
    ck, data = str(workdir / "run" / "checkpoint.json"), str(workdir / "data")
    assert main(["render", "--checkpoint", ck, "--data", data, "--kind", "eval", "--t", "1",
                 "--out", str(workdir / "r.pfm")]) == 0
    assert read_pfm(workdir / "r.pfm").shape == (16, 16, 3)
    assert main(["render", "--checkpoint", ck, "--data", data, "--kind", "generated", "--s", "2",
                 "--out", str(workdir / "r.ppm")]) == 0
    assert read_ppm(workdir / "r.ppm").shape == (16, 16, 3)


def test_eval_writes_report(workdir, capsys):
    out = workdir / "rep.json"
    assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.json"), "--data", str(workdir / "data"),
                 "--split", "input", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["views"]) == TINY_SPEC.n_input_cams * TINY_SPEC.frames
    assert "mean" in capsys.readouterr().out


def test_heatmap_command(workdir):
    out = workdir / "h.ppm"
    assert main(["heatmap", "--checkpoint", str(workdir / "run" / "checkpoint.json"), "--data",
                 str(workdir / "data"), "--t", "1", "--s", "0", "--out", str(out)]) == 0
    assert read_ppm(out).shape == (16, 16, 3)


def test_heatmap_without_field_fails(workdir, capsys):
    run = workdir / "run_nf"
    assert main(["train", "--data", str(workdir / "data"), "--out", str(run), "--iters", "3", "--no-field"]) == 0
    assert main(["heatmap", "--checkpoint", str(run / "checkpoint.json"), "--data", str(workdir / "data"),
                 "--out", str(workdir / "x.ppm")]) == 2
    assert "no distortion field" in capsys.readouterr().err


def test_eval_refuses_tampered_dataset(workdir, capsys, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(workdir / "data", data)
    (data / "scene.json").write_text((data / "scene.json").read_text() + " ")
    assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.json"), "--data", str(data)]) == 2
    assert "refusing" in capsys.readouterr().err


def test_select_cams(tmp_path, capsys):
    vis = VisibilityData.from_sets([{1, 2, 3}, {3, 4, 5}, {5, 6}, {1, 6}], layout=[(0, 0), (1, 0), (2, 0), (0, 1)])
    path = tmp_path / "vis.json"
    path.write_text(json.dumps(vis.to_dict()))
    out = tmp_path / "sel.json"
    assert main(["select-cams", str(path), "--tau", "1.0", "--out", str(out)]) == 0
    sel = json.loads(out.read_text())
    assert sel["selected"] == [0, 1, 2] and sel["coverage"] == 1.0
    assert "coverage" in capsys.readouterr().out


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--ops", "loss_l1,rotation", "--seeds", "2"]) == 0
    text = capsys.readouterr().out
    assert "loss_l1" in text and "FAIL" not in text


def test_train_config_file_and_seed(workdir, tmp_path):
    from stdf4d.config import TrainConfig, desk_defaults

    cfg_path = tmp_path / "cfg.json"
    desk_defaults(4).variant(use_field=False).save(cfg_path)
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "r"), "--config", str(cfg_path),
                 "--seed", "5"]) == 0
    saved = TrainConfig.load(tmp_path / "r" / "config.json")
    assert saved.seed == 5 and saved.use_field is False and saved.schedule.total_iters == 4
