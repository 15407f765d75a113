import filecmp
import json

import numpy as np
import pytest
import torch
import yaml

from xgan import evalkit
from xgan.cli import main
from xgan.domains import Style, default_schema, load_manifest
from xgan.model import DomainId
from xgan.container import read_container
from xgan.trainer import Mode, TrainConfig, load_checkpoint

from conftest import small_config


def write_config(tmp_path, **extra):
    cfg = {
        "output_dir": str(tmp_path / "run"),
        "model": small_config().to_dict(),
        "train": {"batch_size": 4, "total_steps": 3, "checkpoint_every": 2},
        "data": {"image_size": 16, "n_samples": 100, "seed": 5},
        "teacher": {"widths": [4], "epochs": 1},
        "probes": {"samples": 60, "epochs": 1},
        "ablate": {"seeds": [0]},
    }
    for k, v in extra.items():
        cfg[k].update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["gen-data", "--config", str(cfg), "--no-probes"]) == 0
    assert main(["train-teacher", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg, tmp / "run"


def test_gen_data_split(run):
    _, _, out = run
    for dom in ("D1", "D2"):
        d = out / "data" / dom
        train = d.joinpath("train.txt").read_text().splitlines()
        test = d.joinpath("test.txt").read_text().splitlines()
        assert len(train) == 80 and len(test) == 20 and not set(train) & set(test)
        assert len(d.joinpath("metadata.jsonl").read_text().splitlines()) == 100
        assert len(list((d / "images").glob("*.png"))) == 100


def test_gen_data_is_byte_identical(tmp_path):
    dirs = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / name)
        assert main(["gen-data", "--config", str(cfg), "--no-probes"]) == 0
        dirs.append(tmp_path / name / "run" / "data")
    cmp = filecmp.dircmp(*dirs)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("D1", "D2"):
        c = filecmp.dircmp(dirs[0] / sub / "images", dirs[1] / sub / "images")
        _, mismatch, errors = filecmp.cmpfiles(dirs[0] / sub / "images", dirs[1] / sub / "images",
                                               c.common_files, shallow=False)
        assert not mismatch and not errors


def test_missing_schema_file(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"schema": str(tmp_path / "nope.json")})
    assert main(["gen-data", "--config", str(cfg), "--no-probes"]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_custom_schema_file(tmp_path):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(default_schema().to_dict()))
    cfg = write_config(tmp_path, data={"schema": str(schema), "n_samples": 10})
    assert main(["gen-data", "--config", str(cfg), "--no-probes"]) == 0


def test_config_is_echoed(run):
    _, _, out = run
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["data"]["n_samples"] == 100 and echoed["model"]["embed_dim"] == 16


def test_train_outputs(run):
    _, _, out = run
    assert (out / "teacher.ckpt").exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 3
    assert (out / "checkpoints" / "step_0000002.ckpt").exists()
    state = load_checkpoint(out / "checkpoints" / "latest.ckpt")
    assert state.step == 3


def test_zero_steps_writes_initial_checkpoint(run):
    tmp, cfg, _ = run
    out = tmp / "zero"
    out.mkdir()
    # the manifests live in the original run directory, so point the copy at them
    (out / "data").symlink_to(tmp / "run" / "data")
    (out / "teacher.ckpt").symlink_to(tmp / "run" / "teacher.ckpt")
    assert main(["train", "--config", str(cfg), "--output-dir", str(out), "--steps", "0"]) == 0
    assert load_checkpoint(out / "checkpoints" / "latest.ckpt").step == 0


def test_mode_flag(run):
    tmp, cfg, _ = run
    out = tmp / "rdo"
    out.mkdir()
    (out / "data").symlink_to(tmp / "run" / "data")
    assert main(["train", "--config", str(cfg), "--output-dir", str(out), "--mode", "rec_dann_only",
                 "--steps", "1"]) == 0
    meta, _ = read_container(out / "checkpoints" / "latest.ckpt", kind="train_state")
    tc = TrainConfig.from_dict(meta["train_config"])
    w = tc.effective_weights()
    assert tc.mode is Mode.REC_DANN_ONLY
    assert w.w_sem == 0 and w.w_gan == 0 and w.w_teach == 0


def test_resume_matches_uninterrupted(run):
    tmp, cfg, out = run
    part = tmp / "part"
    part.mkdir()
    (part / "data").symlink_to(tmp / "run" / "data")
    (part / "teacher.ckpt").symlink_to(tmp / "run" / "teacher.ckpt")
    assert main(["train", "--config", str(cfg), "--output-dir", str(part), "--steps", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--output-dir", str(part),
                 "--resume", str(part / "checkpoints" / "latest.ckpt")]) == 0
    a = load_checkpoint(part / "checkpoints" / "latest.ckpt")
    b = load_checkpoint(out / "checkpoints" / "latest.ckpt")
    assert a.step == b.step == 3
    assert all(torch.equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))


def test_translate(run, tmp_path):
    _, cfg, out = run
    ckpt = out / "checkpoints" / "latest.ckpt"
    src = out / "data" / "D1" / "images"
    outs = []
    for name in ("t1", "t2"):
        assert main(["translate", "--config", str(cfg), "--checkpoint", str(ckpt), "--input-dir", str(src),
                     "--direction", "1to2", "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    assert len(list((outs[0] / "images").glob("*.png"))) == 100
    assert (outs[0] / "grid.png").read_bytes() == (outs[1] / "grid.png").read_bytes()
    a = sorted((outs[0] / "images").iterdir())
    assert all(p.read_bytes() == (outs[1] / "images" / p.name).read_bytes() for p in a)


def test_translate_unknown_direction(run, tmp_path, capsys):
    _, cfg, out = run
    code = main(["translate", "--config", str(cfg), "--checkpoint", str(out / "checkpoints" / "latest.ckpt"),
                 "--input-dir", str(out / "data" / "D2" / "images"), "--direction", "3to1",
                 "--out", str(tmp_path / "t")])
    assert code == 2
    assert "1to2" in capsys.readouterr().err


@pytest.fixture(scope="module")
def probes(run):
    tmp, _, _ = run
    paths = {}
    for dom, style in (("D1", Style.A), ("D2", Style.B)):
        p = evalkit.train_probes(default_schema(), style, 16, n_samples=60, seed=1, epochs=1)
        # untrained probes cannot clear the validity gate; this only exercises the plumbing
        p.holdout_accuracy = [1.0] * len(p.names)
        paths[dom] = tmp / f"probes_{dom}.ckpt"
        evalkit.save_probes(p, paths[dom])
    return paths


def test_eval_matches_library_and_appends(run, probes):
    tmp, cfg, out = run
    ckpt = out / "checkpoints" / "latest.ckpt"
    report = tmp / "eval.jsonl"
    argv = ["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--probes-2", str(probes["D2"]),
            "--probes-1", str(probes["D1"]), "--report", str(report)]
    assert main(argv) == 0
    assert main(argv) == 0
    rows = [json.loads(line) for line in report.read_text().splitlines()]
    assert len(rows) == 2 and rows[0]["preservation"] == rows[1]["preservation"]

    model = load_checkpoint(ckpt).model.eval()
    x1, a1 = load_manifest(out / "data" / "D1" / "test.txt", 16)
    direct = evalkit.attribute_preservation(model, evalkit.load_probes(probes["D2"]), torch.from_numpy(x1),
                                            a1, DomainId.D1)
    assert rows[0]["preservation"] == direct
    assert rows[0]["mode"] == "full_xgan"


def test_eval_missing_probes(run, tmp_path, capsys):
    _, cfg, out = run
    code = main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoints" / "latest.ckpt"),
                 "--probes-2", str(tmp_path / "missing.ckpt")])
    assert code == 2
    assert "missing.ckpt" in capsys.readouterr().err


def test_eval_refuses_invalid_probes(run, tmp_path):
    _, cfg, out = run
    p = evalkit.train_probes(default_schema(), Style.B, 16, n_samples=60, seed=1, epochs=1)
    p.holdout_accuracy = [0.5] * len(p.names)
    evalkit.save_probes(p, tmp_path / "weak.ckpt")
    code = main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoints" / "latest.ckpt"),
                 "--probes-2", str(tmp_path / "weak.ckpt")])
    assert code == 2


def test_ablate_unknown_mode(run, capsys):
    _, cfg, _ = run
    assert main(["ablate", "--config", str(cfg), "--modes", "full_xgan,bogus"]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "rec_dann_only" in err


def test_unknown_override_key(run, capsys):
    _, cfg, _ = run
    assert main(["train", "--config", str(cfg), "--train.nonsense", "1"]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_bad_mode_and_bad_value(run, capsys):
    _, cfg, _ = run
    assert main(["train", "--config", str(cfg), "--mode", "bogus"]) == 2
    assert main(["train", "--config", str(cfg), "--model.embed_dim", "0"]) == 2


def test_missing_config(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.yaml")]) == 2


def test_no_command():
    assert main([]) == 2


def test_override_value_parsing(run, tmp_path):
    tmp, cfg, _ = run
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(cfg), "--output-dir", str(out), "--no-probes",
                 "--data.n_samples=10", "--data.image_size", "16"]) == 0
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["data"]["n_samples"] == 10 and echoed["output_dir"] == str(out)
    assert len((out / "data" / "D1" / "train.txt").read_text().splitlines()) == 8


def test_gen_data_writes_probes(tmp_path):
    cfg = write_config(tmp_path, data={"n_samples": 10})
    assert main(["gen-data", "--config", str(cfg)]) == 0
    p = evalkit.load_probes(tmp_path / "run" / "probes_D2.ckpt")
    assert p.style == "StyleB" and len(p.holdout_accuracy) == 6
    assert np.all(np.isfinite(p.holdout_accuracy))
