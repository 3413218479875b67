import json

import numpy as np
import pytest

from mpiqe import cli
from mpiqe.config import desk_config, save_config
from mpiqe.metrics import EvalReport


def fast_config(path, **kw):
    base = dict(total_epochs=2, warmup_epochs=1, crops_per_image=2, batch_size=16, val_frac=0.0)
    base.update(kw)
    save_config(desk_config(**base), path)
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--n", "12", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_data_layout(tmp_path, capsys):
    assert cli.main(["gen-data", "--n", "6", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed.endswith("manifest.csv")
    assert len((tmp_path / "a" / "manifest.csv").read_text().splitlines()) == 7
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 6
    cli.main(["gen-data", "--n", "6", "--seed", "3", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "manifest.csv").read_text() == (tmp_path / "b" / "manifest.csv").read_text()
    for a, b in zip(sorted((tmp_path / "a" / "images").iterdir()), sorted((tmp_path / "b" / "images").iterdir())):
        assert a.read_bytes() == b.read_bytes()


def test_usage_errors(tmp_path):
    assert cli.main(["gen-data", "--n", "0", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifest", "m", "--out", "o", "--no-deep-visual-prompts",
                  "--shallow-visual-prompts"])
    assert exc.value.code == 1
    assert cli.main(["train", "--config", str(tmp_path / "none.txt"), "--manifest", "m",
                     "--out", str(tmp_path)]) == 1


def test_data_error_exit(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nock"), "--manifest", "x"]) == 2


def test_numeric_error_exit(tmp_path, data_dir):
    cfg = fast_config(tmp_path / "c.txt", lr=1e30, grad_clip=0.0, total_epochs=3)
    code = cli.main(["train", "--config", cfg, "--manifest", str(data_dir / "manifest.csv"),
                     "--out", str(tmp_path / "o")])
    assert code == 3


def test_flags_map_to_config():
    p = cli.build_parser()
    args = p.parse_args(["train", "--manifest", "m", "--out", "o", "--no-scene-prompts", "--shallow-visual-prompts",
                         "--label-policy", "off", "--plain-l1", "--seed", "7"])
    cfg = cli.config_from_args(args)
    assert (cfg.use_scene_prompts, cfg.visual_prompt_mode, cfg.label_policy, cfg.plain_l1, cfg.seed) == \
        (False, "shallow", "off", True, 7)
    args = p.parse_args(["train", "--manifest", "m", "--out", "o", "--no-deep-visual-prompts",
                         "--no-distortion-prompts"])
    cfg = cli.config_from_args(args)
    assert cfg.visual_prompt_mode == "none" and not cfg.use_distortion_prompts


@pytest.mark.parametrize("flags", [[], ["--no-scene-prompts"], ["--shallow-visual-prompts"]])
def test_train_then_eval(tmp_path, data_dir, flags, capsys):
    cfg = fast_config(tmp_path / "c.txt", total_epochs=3)
    out = tmp_path / "run"
    manifest = str(data_dir / "manifest.csv")
    assert cli.main(["train", "--config", cfg, "--manifest", manifest, "--test-manifest", manifest,
                     "--out", str(out), *flags]) == 0
    log_lines = (out / "train_log.csv").read_text(encoding="utf-8").splitlines()
    assert log_lines[0] == "epoch,lr,L_scene,L_dist,L_score,L_total,val_srcc" and len(log_lines) == 4
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint"), "--manifest", manifest]) == 0
    assert "SRCC" in capsys.readouterr().out
    first = (out / "eval_report.json").read_text()
    report = EvalReport.load(out / "eval_report.json")
    assert len(report.per_repeat) == 1 and np.isfinite(report.median_srcc)
    cli.main(["eval", "--checkpoint", str(out / "checkpoint"), "--manifest", manifest])
    assert (out / "eval_report.json").read_text() == first


def test_eval_perfect_predictions(tmp_path, data_dir, monkeypatch, capsys):
    cfg = fast_config(tmp_path / "c.txt", total_epochs=1)
    manifest = str(data_dir / "manifest.csv")
    cli.main(["train", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "run")])
    monkeypatch.setattr(cli, "predict_dataset", lambda model, ds, seed: ds.normalized_mos())
    report_path = tmp_path / "r.json"
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint"), "--manifest", manifest,
                     "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["median_srcc"] == 1.0 and report["median_plcc"] == pytest.approx(1.0)


def test_protocol_command(tmp_path, data_dir):
    cfg = fast_config(tmp_path / "c.txt", total_epochs=1)
    out = tmp_path / "proto"
    assert cli.main(["protocol", "--config", cfg, "--manifest", str(data_dir / "manifest.csv"),
                     "--repeats", "2", "--out", str(out)]) == 0
    report = json.loads((out / "protocol_report.json").read_text())
    assert len(set(report["seeds"])) == 2
    assert "median_srcc" in report and "median_plcc" in report
    assert cli.main(["protocol", "--manifest", "x", "--repeats", "0", "--out", str(out)]) == 1


def test_sweep_command(tmp_path, data_dir):
    cfg = fast_config(tmp_path / "c.txt", total_epochs=1)
    out = tmp_path / "sweep"
    assert cli.main(["protocol", "--config", cfg, "--manifest", str(data_dir / "manifest.csv"),
                     "--repeats", "1", "--fractions", "0.8,0.4", "--out", str(out)]) == 0
    report = json.loads((out / "sweep_report.json").read_text())
    assert list(report) == ["0.4", "0.8"]
    assert report["0.4"]["per_repeat"][0]["n_train"] == 4
