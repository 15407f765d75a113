import numpy as np
import pytest
import torch

from xgan.domains import (CorpusSpec, Style, build_corpus, default_schema, plausibility_filter, render,
                          sample_attributes)
from xgan.model import DimensionError
from xgan.teacher import (FrozenTeacherError, TeacherConfig, TeacherNet, load_teacher, save_teacher,
                          teacher_embed, train_teacher)
from xgan.trainer import TrainConfig, train

from conftest import images, make_teacher, small_config


@pytest.fixture(scope="module")
def trained():
    schema = default_schema()
    x, attrs = build_corpus(schema, CorpusSpec(2000, Style.A, seed=21, image_size=32))
    cfg = TeacherConfig(image_size=32, widths=(16, 32, 64), embed_dim=128, epochs=20, seed=0)
    teacher, acc = train_teacher(torch.from_numpy(x), attrs, schema.n_options, cfg)
    return schema, teacher, acc


def test_default_config_width():
    cfg = TeacherConfig()
    assert cfg.embed_dim == 1024 and cfg.image_size == 64
    net = TeacherNet(cfg, [2, 3]).freeze()
    assert net.embed_dim == 1024
    assert teacher_embed(net, torch.zeros(4, 3, 64, 64)).shape == (4, 1024)


def test_heldout_accuracy(trained):
    _, _, acc = trained
    assert len(acc) == 6
    assert np.mean(acc) >= 0.95, acc


def test_returned_frozen(trained):
    _, teacher, _ = trained
    assert teacher.frozen and not teacher.training
    assert not any(p.requires_grad for p in teacher.parameters())
    with pytest.raises(FrozenTeacherError):
        teacher.requires_grad_(True)
    with pytest.raises(FrozenTeacherError):
        teacher.load_state_dict(teacher.state_dict())


def test_tampering_is_detected():
    net = make_teacher(small_config())
    net.verify_frozen()
    with torch.no_grad():
        net.project.weight[0, 0] += 1.0
    with pytest.raises(FrozenTeacherError, match="project.weight"):
        net.verify_frozen()


def test_embed_deterministic(trained):
    schema, teacher, _ = trained
    x = torch.from_numpy(build_corpus(schema, CorpusSpec(4, seed=3))[0])
    a, b = teacher_embed(teacher, x), teacher_embed(teacher, x)
    assert a.shape == (4, 128)
    assert torch.equal(a, b)


def test_embed_size_mismatch(trained):
    _, teacher, _ = trained
    with pytest.raises(DimensionError):
        teacher_embed(teacher, torch.zeros(2, 3, 16, 16))
    with pytest.raises(DimensionError):
        teacher_embed(teacher, torch.zeros(3, 32, 32))


def test_single_attribute_is_linearly_separable(trained):
    # renders that differ only in glasses; a least-squares probe on embeddings must beat chance
    schema, teacher, _ = trained
    rng = np.random.default_rng(0)
    j = schema.index("glasses")
    xs, ys = [], []
    while len(xs) < 400:
        a = list(sample_attributes(schema, rng))
        if not plausibility_filter(schema, a):
            continue
        for v in (0, 1):
            a[j] = v
            xs.append(render(schema, a, Style.A, 32))
            ys.append(v)
    emb = teacher_embed(teacher, torch.from_numpy(np.concatenate(xs))).double()
    y = torch.tensor(ys, dtype=torch.float64) * 2 - 1
    feats = torch.cat([emb, torch.ones(len(emb), 1, dtype=emb.dtype)], 1)
    fit, hold = slice(0, 300), slice(300, None)
    w = torch.linalg.lstsq(feats[fit], y[fit, None], driver="gelsd").solution
    acc = float(((feats[hold] @ w).squeeze(1).sign() == y[hold]).double().mean())
    assert acc > 0.75


def test_length_mismatch():
    schema = default_schema()
    x = torch.zeros(5, 3, 32, 32)
    with pytest.raises(ValueError, match="mismatch"):
        train_teacher(x, [(0,) * 6] * 4, schema.n_options, TeacherConfig(image_size=32, epochs=1))


def test_save_load_round_trip(trained, tmp_path):
    schema, teacher, _ = trained
    save_teacher(teacher, tmp_path / "t.ckpt")
    loaded = load_teacher(tmp_path / "t.ckpt")
    assert loaded.frozen
    x = torch.from_numpy(build_corpus(schema, CorpusSpec(3, seed=5))[0])
    assert torch.equal(teacher_embed(teacher, x), teacher_embed(loaded, x))


def test_frozen_through_xgan_training():
    cfg = small_config()
    teacher = make_teacher(cfg)
    before = [p.detach().clone() for p in teacher.parameters()]
    tc = TrainConfig(total_steps=30, batch_size=4, seed=0)
    assert tc.weights.w_teach > 0
    train(tc, images(16, cfg, 1), images(16, cfg, 2), cfg, teacher=teacher)
    assert all(torch.equal(a, p) for a, p in zip(before, teacher.parameters()))
