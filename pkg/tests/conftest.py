import pytest
import torch

from xgan.model import ModelConfig, build_model, init_parameters
from xgan.teacher import TeacherConfig, TeacherNet

_CRITERIA = pytest.StashKey[dict]()


def micro_config(**kw) -> ModelConfig:
    """8x8, 2-channel model with a few thousand parameters."""
    base = dict(image_size=8, channels=2, embed_dim=6, encoder_widths=(2, 3), decoder_widths=(3, 2),
                discriminator_widths=(2, 2), classifier_widths=(4,), shared_encoder_blocks=3,
                shared_decoder_blocks=2)
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw) -> ModelConfig:
    """16x16 RGB model for fast training-loop tests."""
    base = dict(image_size=16, channels=3, embed_dim=16, encoder_widths=(4, 8), decoder_widths=(8, 4),
                discriminator_widths=(4, 4), classifier_widths=(8,), shared_encoder_blocks=3,
                shared_decoder_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


def make_teacher(cfg: ModelConfig, seed=0, dtype=torch.float32, n_options=(2, 3)) -> TeacherNet:
    tcfg = TeacherConfig(image_size=cfg.image_size, channels=cfg.channels, widths=(2,),
                         embed_dim=cfg.embed_dim, epochs=1)
    net = TeacherNet(tcfg, n_options)
    init_parameters(net, torch.Generator().manual_seed(seed), std=0.3)
    return net.to(dtype).freeze()


def images(n, cfg, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, cfg.channels, cfg.image_size, cfg.image_size, generator=g, dtype=dtype) * 2 - 1)


@pytest.fixture
def micro():
    cfg = micro_config()
    model = build_model(cfg, seed=3, dtype=torch.float64)
    # a zero final classifier layer would hide the encoder-side dann gradient
    with torch.no_grad():
        g = torch.Generator().manual_seed(9)
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.2)
    return cfg, model


# -- acceptance reporting --------------------------------------------------------

@pytest.fixture
def criterion(request):
    """Record the verdict of one acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
