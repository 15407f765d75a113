import copy
import dataclasses
import struct

import pytest
import torch

from xgan.container import CheckpointError, read_container
from xgan.model import ConfigError, DomainId
from xgan.objectives import LossWeights, NonFiniteLossError, total_loss
from xgan.trainer import (CheckpointSink, DomainSampler, JsonlSink, TrainConfig, discriminator_step,
                          generator_step, init_state, load_checkpoint, save_checkpoint, train)

from conftest import images, make_teacher, small_config

D1, D2 = DomainId.D1, DomainId.D2


def snapshot(params):
    return [p.detach().clone() for p in params]


def unchanged(before, params):
    return all(torch.equal(a, b) for a, b in zip(before, params))


def corpora(cfg, n=24, dtype=torch.float32):
    return images(n, cfg, 1, dtype), images(n, cfg, 2, dtype)


def strip(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


@pytest.fixture
def setup():
    cfg = small_config()
    teacher = make_teacher(cfg)
    x1, x2 = corpora(cfg)
    return cfg, teacher, x1, x2


def test_mode_presets():
    w = TrainConfig(mode="rec_dann_only").effective_weights()
    assert (w.w_sem, w.w_gan, w.w_teach) == (0, 0, 0) and w.w_dann > 0
    assert TrainConfig(mode="no_sem").effective_weights().w_sem == 0
    assert TrainConfig(mode="no_gan").effective_weights().w_gan == 0
    assert not TrainConfig(mode="no_teacher").effective_weights().teach_enabled
    w = TrainConfig(mode="dtn_frozen_encoder").effective_weights()
    assert w.w_dann == 0 and w.w_teach == 0
    assert TrainConfig(mode="dtn_finetuned_encoder").encoder_terms() == {"sem"}


def test_unknown_mode_lists_valid_modes():
    with pytest.raises(ConfigError, match="full_xgan"):
        TrainConfig(mode="mystery")


def test_config_roundtrip():
    cfg = TrainConfig(mode="no_gan", weights=LossWeights(w_sem=2.0), learning_rate=3e-4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_rec_dann_only_leaves_disc_and_teacher_untouched(setup):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(mode="rec_dann_only", learning_rate=1e-3)
    st = init_state(cfg, tc, teacher)
    disc, teach = snapshot(st.model.discriminator_parameters()), snapshot(teacher.parameters())
    st, _ = generator_step(st, x1[:8], x2[:8], tc, teacher)
    st, d = discriminator_step(st, x1[:8], x2[:8], tc)
    assert d is None
    assert unchanged(disc, st.model.discriminator_parameters())
    assert unchanged(teach, teacher.parameters())


def test_zero_learning_rate_keeps_params(setup):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(learning_rate=0.0)
    st = init_state(cfg, tc, teacher)
    before = snapshot(st.model.parameters())
    st, report = generator_step(st, x1[:8], x2[:8], tc, teacher)
    discriminator_step(st, x1[:8], x2[:8], tc)
    assert unchanged(before, st.model.parameters())
    assert report.as_floats()["total"] > 0


def test_generator_step_matches_adam_formula(setup):
    cfg, _, x1, x2 = setup
    teacher = make_teacher(cfg, dtype=torch.float64)
    x1, x2 = x1.double()[:6], x2.double()[:6]
    tc = TrainConfig(learning_rate=1e-3)
    st = init_state(cfg, tc, teacher, dtype=torch.float64)
    with torch.no_grad():  # a live classifier head so every generator parameter gets a gradient
        st.model.c_dann.body.out.fc.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
    ref = copy.deepcopy(st.model)
    report = total_loss(ref, teacher, x1, x2, tc.effective_weights(), tc.loss_cfg)
    params = list(ref.generator_parameters())
    grads = torch.autograd.grad(report.total, params, allow_unused=True)
    b1, b2, eps, lr = tc.adam_beta1, tc.adam_beta2, tc.adam_epsilon, tc.learning_rate
    expected = []
    for p, g in zip(params, grads):
        if g is None:
            expected.append(p.detach().clone())
            continue
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1), v / (1 - b2)
        expected.append(p.detach() - lr * m_hat / (v_hat.sqrt() + eps))
    before = snapshot(st.model.generator_parameters())
    st, _ = generator_step(st, x1, x2, tc, teacher)
    for p0, p, e in zip(before, st.model.generator_parameters(), expected):
        delta, want = p.detach() - p0, e - p0
        scale = want.abs().max()
        if scale == 0:
            assert torch.equal(delta, want)
        else:
            assert float((delta - want).abs().max() / scale) < 1e-6


def test_discriminator_step_isolation(setup):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(learning_rate=1e-3)
    st = init_state(cfg, tc, teacher)
    gen = snapshot(st.model.generator_parameters())
    disc = snapshot(st.model.discriminator_parameters())
    st, value = discriminator_step(st, x1[:8], x2[:8], tc)
    assert isinstance(value, float)
    assert unchanged(gen, st.model.generator_parameters())
    assert not unchanged(disc, st.model.discriminator_parameters())


def test_generator_step_isolation(setup):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(learning_rate=1e-3)
    st = init_state(cfg, tc, teacher)
    disc = snapshot(st.model.discriminator_parameters())
    st, _ = generator_step(st, x1[:8], x2[:8], tc, teacher)
    assert unchanged(disc, st.model.discriminator_parameters())
    assert all(p.grad is None for p in st.model.discriminator_parameters())


def test_disc_loss_decreases_against_frozen_generator():
    cfg = small_config()
    tc = TrainConfig(learning_rate=1e-3, mode="no_teacher")
    st = init_state(cfg, tc)
    x1 = images(16, cfg, 3)
    x2 = torch.full((16, 3, 16, 16), 0.8) + 0.05 * images(16, cfg, 4)
    gen = snapshot(st.model.generator_parameters())
    values = [discriminator_step(st, x1, x2, tc)[1] for _ in range(50)]
    assert values[-1] < 0.5 * values[0]
    assert unchanged(gen, st.model.generator_parameters())


def test_nonfinite_loss_aborts_with_term_name(setup):
    cfg, teacher, x1, x2 = setup
    bad = x1.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="rec_1"):
        train(TrainConfig(total_steps=3, batch_size=24), bad, x2, cfg, teacher)


def test_empty_corpus_rejected(setup):
    cfg, teacher, x1, _ = setup
    with pytest.raises(ValueError):
        train(TrainConfig(total_steps=1), x1, x1[:0], cfg, teacher)


def test_teacher_required(setup):
    cfg, _, x1, x2 = setup
    with pytest.raises(ConfigError):
        train(TrainConfig(total_steps=1), x1, x2, cfg, None)
    with pytest.raises(ConfigError):
        init_state(cfg, TrainConfig(mode="dtn_frozen_encoder"), None)


def test_zero_steps_returns_initial_state(setup):
    cfg, teacher, x1, x2 = setup
    records = []
    st = train(TrainConfig(total_steps=0), x1, x2, cfg, teacher, metrics_sink=records.append)
    assert st.step == 0 and records == []


def test_determinism_and_record_fields(setup):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(total_steps=200, batch_size=4, learning_rate=1e-3)
    a, b = [], []
    train(tc, x1, x2, cfg, teacher, metrics_sink=a.append)
    train(tc, x1, x2, cfg, teacher, metrics_sink=b.append)
    assert len(a) == 200 and strip(a) == strip(b)
    assert {"step", "rec_1", "rec_2", "dann", "sem_1to2", "sem_2to1", "gan_gen", "gan_disc", "teach", "tv",
            "total", "disc_step", "wall_time"} <= set(a[0])


def test_shared_parameters_stay_single_instance(setup):
    cfg, teacher, x1, x2 = setup
    st = train(TrainConfig(total_steps=100, batch_size=4, learning_rate=1e-3), x1, x2, cfg, teacher)
    m = st.model
    _, s1 = m.encoder_path(D1)
    _, s2 = m.encoder_path(D2)
    assert s1 is s2
    for a, b in zip(s1.parameters(), s2.parameters()):
        assert a.data_ptr() == b.data_ptr() and torch.equal(a, b)
    h1, _ = m.decoder_path(D1)
    h2, _ = m.decoder_path(D2)
    assert h1 is h2
    # the same memory is what both domains read
    with torch.no_grad():
        for p in m.enc_private.parameters():
            p.zero_()
    x = images(3, cfg, 9)
    assert torch.equal(m.encode(x, D1), m.encode(x, D2))


def test_checkpoint_resume_is_bit_exact(setup, tmp_path):
    cfg, teacher, x1, x2 = setup
    full_cfg = TrainConfig(total_steps=12, batch_size=5, learning_rate=1e-3)
    full_records = []
    full = train(full_cfg, x1, x2, cfg, teacher, metrics_sink=full_records.append)

    first = train(dataclasses.replace(full_cfg, total_steps=7), x1, x2, cfg, teacher)
    save_checkpoint(first, tmp_path / "mid.ckpt", train_cfg=full_cfg)
    resumed = load_checkpoint(tmp_path / "mid.ckpt", cfg, full_cfg, teacher=teacher)
    assert resumed.step == 7
    rest = []
    resumed = train(full_cfg, x1, x2, cfg, teacher, metrics_sink=rest.append, state=resumed)
    assert strip(rest) == strip(full_records[7:])
    for (n, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(a, b), n


def test_checkpoint_roundtrip_identity(setup, tmp_path):
    cfg, teacher, x1, x2 = setup
    st = train(TrainConfig(total_steps=3, batch_size=4), x1, x2, cfg, teacher)
    save_checkpoint(st, tmp_path / "a.ckpt", train_cfg=TrainConfig())
    back = load_checkpoint(tmp_path / "a.ckpt", teacher=teacher)
    for (n, a), (_, b) in zip(st.model.named_parameters(), back.model.named_parameters()):
        assert torch.equal(a, b)
    for opt_a, opt_b in ((st.gen_opt, back.gen_opt), (st.disc_opt, back.disc_opt)):
        for pa, pb in zip(opt_a.param_groups[0]["params"], opt_b.param_groups[0]["params"]):
            sa, sb = opt_a.state[pa], opt_b.state[pb]
            assert torch.equal(sa["exp_avg"], sb["exp_avg"]) and torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])
            assert float(sa["step"]) == float(sb["step"])
    assert [s.state() for s in st.samplers] == [s.state() for s in back.samplers]


def test_checkpoint_size_formula(setup, tmp_path):
    cfg, teacher, x1, x2 = setup
    st = train(TrainConfig(total_steps=2, batch_size=4), x1, x2, cfg, teacher)
    path = tmp_path / "s.ckpt"
    header_len = save_checkpoint(st, path, train_cfg=TrainConfig())
    n_params = sum(p.numel() for p in st.model.parameters())
    assert path.stat().st_size == 20 + header_len + 4 * (n_params + 2 * n_params)


def test_checkpoint_config_mismatch(setup, tmp_path):
    cfg, teacher, x1, x2 = setup
    st = init_state(cfg, TrainConfig(), teacher)
    save_checkpoint(st, tmp_path / "c.ckpt", train_cfg=TrainConfig())
    with pytest.raises(CheckpointError, match="embed_dim"):
        load_checkpoint(tmp_path / "c.ckpt", small_config(embed_dim=12), teacher=teacher)


def test_corrupt_checkpoints(setup, tmp_path):
    cfg, teacher, _, _ = setup
    st = init_state(cfg, TrainConfig(), teacher)
    path = tmp_path / "c.ckpt"
    save_checkpoint(st, path, train_cfg=TrainConfig())
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    (tmp_path / "version.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    for name, msg in (("magic", "magic"), ("version", "version"), ("short", "truncated")):
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(tmp_path / f"{name}.ckpt", teacher=teacher)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    meta, tensors = read_container(path)
    assert "enc_shared.fc1.fc.weight" in tensors and meta["step"] == 0


def test_sinks(setup, tmp_path):
    cfg, teacher, x1, x2 = setup
    tc = TrainConfig(total_steps=4, batch_size=4, checkpoint_every=2, metrics_every=2)
    train(tc, x1, x2, cfg, teacher, metrics_sink=JsonlSink(tmp_path / "m.jsonl"),
          checkpoint_sink=CheckpointSink(tmp_path / "ck", tc))
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == \
        ["latest.ckpt", "step_0000002.ckpt", "step_0000004.ckpt"]


def test_sampler_cycles_with_fresh_permutations():
    s = DomainSampler(5, seed=0, stream=0)
    first = s.next(5)
    second = s.next(5)
    assert sorted(first) == sorted(second) == list(range(5))
    t = DomainSampler(5, seed=0, stream=0)
    t.set_state([5, 1, 2])
    s2 = DomainSampler(5, seed=0, stream=0)
    s2.next(7)
    assert list(t.next(4)) == list(s2.next(4))


def test_dtn_frozen_encoder_aliases_teacher(setup):
    cfg, teacher, x1, x2 = setup
    st = train(TrainConfig(total_steps=5, batch_size=4, mode="dtn_frozen_encoder", learning_rate=1e-3),
               x1, x2, cfg, teacher)
    assert st.model.encoder_override is teacher
    before = snapshot(teacher.parameters())
    st = train(TrainConfig(total_steps=10, batch_size=4, mode="dtn_frozen_encoder", learning_rate=1e-3),
               x1, x2, cfg, teacher, state=st)
    assert unchanged(before, teacher.parameters())
    assert torch.equal(st.model.encode(x1[:2], D1), st.model.encode(x1[:2], D2))
    assert torch.equal(st.model.encode(x1[:2], D1), teacher.embed(x1[:2]))


def test_dtn_finetuned_encoder_moves_only_under_sem(setup):
    cfg, teacher, x1, x2 = setup
    frozen = snapshot(teacher.parameters())
    base = TrainConfig(total_steps=5, batch_size=4, mode="dtn_finetuned_encoder", learning_rate=1e-3)
    st = train(base, x1, x2, cfg, teacher)
    enc = st.model.encoder_override
    assert enc is not teacher and not unchanged(frozen, enc.parameters())
    assert unchanged(frozen, teacher.parameters())
    no_sem = dataclasses.replace(base, weights=LossWeights(w_sem=0.0))
    st = train(no_sem, x1, x2, cfg, teacher)
    assert unchanged(frozen, st.model.encoder_override.parameters())
