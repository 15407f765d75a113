"""Dual autoencoder with a partially shared encoder tail and decoder head.

Each domain owns an encoder ``e_k`` and a decoder ``d_k``.  The last few
encoder blocks and the first few decoder blocks are single modules used by
both domain paths, so an update made through one path is visible through the
other.  A binary domain classifier sits on the embedding and a single
discriminator judges images of domain 2.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAK = 0.2
INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid model, loss or training configuration."""


class DimensionError(ValueError):
    """An input tensor does not have the shape the network expects."""


class DomainId(str, enum.Enum):
    D1 = "D1"
    D2 = "D2"

    @property
    def other(self) -> "DomainId":
        return DomainId.D2 if self is DomainId.D1 else DomainId.D1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    embed_dim: int = 1024
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    decoder_widths: Tuple[int, ...] = (512, 256, 128, 64)
    discriminator_widths: Tuple[int, ...] = (16, 32, 32, 32)
    classifier_widths: Tuple[int, ...] = (256,)
    # counted over conv1..convK, fc1, fc2
    shared_encoder_blocks: int = 4
    # counted over deconv1..deconv(K+1)
    shared_decoder_blocks: int = 2
    instance_norm: bool = False
    # adds disc_2to1 for the optional domain-2 to domain-1 GAN term
    dual_discriminators: bool = False

    def __post_init__(self):
        for name in ("encoder_widths", "decoder_widths", "discriminator_widths", "classifier_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        self.validate()

    @property
    def n_encoder_blocks(self) -> int:
        return len(self.encoder_widths) + 2

    @property
    def n_decoder_blocks(self) -> int:
        return len(self.decoder_widths) + 1

    @property
    def bottom_size(self) -> int:
        return self.image_size // 2 ** len(self.encoder_widths)

    def validate(self) -> None:
        for name in ("image_size", "channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("encoder_widths", "decoder_widths", "discriminator_widths"):
            widths = getattr(self, name)
            if not widths:
                raise ConfigError(f"{name} must be non-empty")
            if any(w < 1 for w in widths):
                raise ConfigError(f"{name} contains a non-positive width: {widths}")
        if any(w < 1 for w in self.classifier_widths):
            raise ConfigError(f"classifier_widths contains a non-positive width: {self.classifier_widths}")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ConfigError(
                "decoder_widths must have as many entries as encoder_widths "
                f"({len(self.decoder_widths)} != {len(self.encoder_widths)})"
            )
        for name, n in (("encoder_widths", len(self.encoder_widths)),
                        ("discriminator_widths", len(self.discriminator_widths))):
            if self.image_size % 2 ** n:
                raise ConfigError(f"image_size {self.image_size} is not divisible by 2**len({name})")
        if not 0 <= self.shared_encoder_blocks <= self.n_encoder_blocks:
            raise ConfigError(
                f"shared_encoder_blocks={self.shared_encoder_blocks} exceeds the "
                f"{self.n_encoder_blocks} encoder blocks"
            )
        if not 0 <= self.shared_decoder_blocks <= self.n_decoder_blocks:
            raise ConfigError(
                f"shared_decoder_blocks={self.shared_decoder_blocks} exceeds the "
                f"{self.n_decoder_blocks} decoder blocks"
            )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- building blocks ---------------------------------------------------------

class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, norm: bool):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return F.leaky_relu(x, LEAK)


class FCBlock(nn.Module):
    def __init__(self, d_in: int, d_out: int, act: bool):
        super().__init__()
        self.fc = nn.Linear(d_in, d_out)
        self.act = act

    def forward(self, x):
        x = self.fc(x.flatten(1))
        return F.leaky_relu(x, LEAK) if self.act else x


class DeconvBlock(nn.Module):
    """Transposed conv followed by ReLU, or tanh for the output block.

    With ``kernel == stride == 1`` input spatial size and no padding, the
    first decoder block is a fully connected expansion of the embedding.
    """

    def __init__(self, c_in: int, c_out: int, *, kernel=4, stride=2, padding=1,
                 final=False, norm=False):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(c_in, c_out, kernel, stride=stride, padding=padding)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm and not final else None
        self.final = final

    def forward(self, x):
        x = self.deconv(x)
        if self.final:
            return torch.tanh(x)
        if self.norm is not None:
            x = self.norm(x)
        return F.relu(x)


def _encoder_blocks(cfg: ModelConfig) -> List[Tuple[str, nn.Module]]:
    blocks = []
    c_in = cfg.channels
    for i, w in enumerate(cfg.encoder_widths):
        blocks.append((f"conv{i + 1}", ConvBlock(c_in, w, cfg.instance_norm)))
        c_in = w
    flat = c_in * cfg.bottom_size ** 2
    blocks.append(("fc1", FCBlock(flat, cfg.embed_dim, act=True)))
    blocks.append(("fc2", FCBlock(cfg.embed_dim, cfg.embed_dim, act=False)))
    return blocks


def _decoder_blocks(cfg: ModelConfig) -> List[Tuple[str, nn.Module]]:
    s = cfg.bottom_size
    widths = cfg.decoder_widths
    blocks = [("deconv1", DeconvBlock(cfg.embed_dim, widths[0], kernel=s, stride=1, padding=0,
                                      norm=cfg.instance_norm))]
    for i in range(1, len(widths)):
        blocks.append((f"deconv{i + 1}", DeconvBlock(widths[i - 1], widths[i], norm=cfg.instance_norm)))
    blocks.append((f"deconv{len(widths) + 1}", DeconvBlock(widths[-1], cfg.channels, final=True)))
    return blocks


class Stage(nn.Module):
    """Named blocks applied in order."""

    def __init__(self, blocks: Sequence[Tuple[str, nn.Module]]):
        super().__init__()
        self.names = [n for n, _ in blocks]
        for n, b in blocks:
            self.add_module(n, b)

    def forward(self, x, trace: Optional[List] = None):
        for n in self.names:
            x = getattr(self, n)(x)
            if trace is not None:
                trace.append((n, tuple(x.shape[1:])))
        return x


class Discriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        c_in = cfg.channels
        for i, w in enumerate(cfg.discriminator_widths):
            blocks.append((f"conv{i + 1}", ConvBlock(c_in, w, cfg.instance_norm)))
            c_in = w
        s = cfg.image_size // 2 ** len(cfg.discriminator_widths)
        blocks.append(("fc1", FCBlock(c_in * s * s, 1, act=False)))
        self.body = Stage(blocks)

    def forward(self, x, trace=None):
        return self.body(x, trace).squeeze(1)


class DomainClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        d_in = cfg.embed_dim
        for i, w in enumerate(cfg.classifier_widths):
            blocks.append((f"fc{i + 1}", FCBlock(d_in, w, act=True)))
            d_in = w
        blocks.append(("out", FCBlock(d_in, 1, act=False)))
        self.body = Stage(blocks)

    def forward(self, z):
        return self.body(z).squeeze(1)


# -- the model ---------------------------------------------------------------

class XGAN(nn.Module):
    """Parameters and forward maps of the dual adversarial autoencoder.

    Forward methods never mutate parameters.  ``*_logits`` variants return
    pre-sigmoid scores; the losses consume those.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc = _encoder_blocks(config)
        dec = _decoder_blocks(config)
        n_priv = len(enc) - config.shared_encoder_blocks
        k_shared = config.shared_decoder_blocks

        def private_encoder():
            return Stage(_encoder_blocks(config)[:n_priv])

        def private_decoder():
            return Stage(_decoder_blocks(config)[k_shared:])

        self.enc_private = nn.ModuleDict({d.value: private_encoder() for d in DomainId})
        self.enc_shared = Stage(enc[n_priv:])
        self.dec_shared = Stage(dec[:k_shared])
        self.dec_private = nn.ModuleDict({d.value: private_decoder() for d in DomainId})
        self.c_dann = DomainClassifier(config)
        self.disc_1to2 = Discriminator(config)
        self.disc_2to1 = Discriminator(config) if config.dual_discriminators else None
        # replacement encoder for both domains, used by the DTN baselines
        self.dtn_encoder: Optional[nn.Module] = None
        self._frozen_encoder: Optional[nn.Module] = None

    def use_external_encoder(self, encoder: nn.Module, trainable: bool) -> None:
        """Route ``encode`` for both domains through ``encoder``.

        A trainable encoder is registered (optimised and checkpointed with the
        model); a frozen one is only referenced.
        """
        if trainable:
            self.dtn_encoder = encoder
            self._frozen_encoder = None
        else:
            self.dtn_encoder = None
            object.__setattr__(self, "_frozen_encoder", encoder)

    @property
    def encoder_override(self) -> Optional[nn.Module]:
        return self.dtn_encoder if self.dtn_encoder is not None else self._frozen_encoder

    # parameter groups ------------------------------------------------------

    def encoder_parameters(self):
        yield from self.enc_private.parameters()
        yield from self.enc_shared.parameters()
        if self.dtn_encoder is not None:
            yield from self.dtn_encoder.parameters()

    def decoder_parameters(self):
        yield from self.dec_shared.parameters()
        yield from self.dec_private.parameters()

    def discriminator_parameters(self):
        yield from self.disc_1to2.parameters()
        if self.disc_2to1 is not None:
            yield from self.disc_2to1.parameters()

    def generator_parameters(self):
        """Everything updated in the generator phase: encoders, decoders, c_dann."""
        yield from self.encoder_parameters()
        yield from self.decoder_parameters()
        yield from self.c_dann.parameters()

    def encoder_path(self, dom: DomainId) -> Tuple[Stage, Stage]:
        return self.enc_private[DomainId(dom).value], self.enc_shared

    def decoder_path(self, dom: DomainId) -> Tuple[Stage, Stage]:
        return self.dec_shared, self.dec_private[DomainId(dom).value]

    # checks ----------------------------------------------------------------

    def _check_image(self, x: torch.Tensor, what: str):
        c = self.config
        expected = (c.channels, c.image_size, c.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected or x.shape[0] < 1:
            raise DimensionError(f"{what}: expected N x {expected[0]} x {expected[1]} x {expected[2]}, "
                                 f"got {tuple(x.shape)}")

    def _check_embedding(self, z: torch.Tensor, what: str):
        if z.dim() != 2 or z.shape[1] != self.config.embed_dim or z.shape[0] < 1:
            raise DimensionError(f"{what}: expected N x {self.config.embed_dim}, got {tuple(z.shape)}")

    # forward maps ----------------------------------------------------------

    def encode(self, x: torch.Tensor, dom: DomainId, trace=None) -> torch.Tensor:
        self._check_image(x, "encode")
        if self.encoder_override is not None:
            return self.encoder_override(x)
        private, shared = self.encoder_path(dom)
        return shared(private(x, trace), trace)

    def decode(self, z: torch.Tensor, dom: DomainId, trace=None) -> torch.Tensor:
        self._check_embedding(z, "decode")
        shared, private = self.decoder_path(dom)
        h = z[:, :, None, None]
        return private(shared(h, trace), trace)

    def translate(self, x: torch.Tensor, source: DomainId) -> torch.Tensor:
        source = DomainId(source)
        return self.decode(self.encode(x, source), source.other)

    def discriminate_logits(self, x: torch.Tensor, trace=None) -> torch.Tensor:
        self._check_image(x, "discriminate")
        return self.disc_1to2(x, trace)

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        """Probability that each image is a real domain-2 sample."""
        return torch.sigmoid(self.discriminate_logits(x))

    def classify_domain_logits(self, z: torch.Tensor) -> torch.Tensor:
        self._check_embedding(z, "classify_domain")
        return self.c_dann(z)

    def classify_domain(self, z: torch.Tensor) -> torch.Tensor:
        """Probability that each embedding comes from domain 2."""
        return torch.sigmoid(self.classify_domain_logits(z))

    def activation_shapes(self) -> Dict[str, List[Tuple[str, Tuple[int, ...]]]]:
        """Per-block output shapes (C, H, W) or (F,) for one dummy sample."""
        c = self.config
        p = next(self.parameters())
        x = torch.zeros(1, c.channels, c.image_size, c.image_size, dtype=p.dtype)
        out = {"encoder": [], "decoder": [], "discriminator": []}
        with torch.no_grad():
            private, shared = self.encoder_path(DomainId.D1)
            z = shared(private(x, out["encoder"]), out["encoder"])
            self.decode(z, DomainId.D2, out["decoder"])
            self.disc_1to2(x, out["discriminator"])
        out["discriminator"][-1] = ("fc1", (1,))
        return out


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars instantiated by :func:`build_model`."""

    def conv(ci, co, k=4):
        return ci * co * k * k + co

    def lin(di, do):
        return di * do + do

    def norm(co):
        return 2 * co if cfg.instance_norm else 0

    enc = []
    c_in = cfg.channels
    for w in cfg.encoder_widths:
        enc.append(conv(c_in, w) + norm(w))
        c_in = w
    enc.append(lin(c_in * cfg.bottom_size ** 2, cfg.embed_dim))
    enc.append(lin(cfg.embed_dim, cfg.embed_dim))

    dw = cfg.decoder_widths
    dec = [conv(cfg.embed_dim, dw[0], cfg.bottom_size) + norm(dw[0])]
    for a, b in zip(dw[:-1], dw[1:]):
        dec.append(conv(a, b) + norm(b))
    dec.append(conv(dw[-1], cfg.channels))

    n_priv_enc = len(enc) - cfg.shared_encoder_blocks
    k = cfg.shared_decoder_blocks
    total = 2 * sum(enc[:n_priv_enc]) + sum(enc[n_priv_enc:])
    total += sum(dec[:k]) + 2 * sum(dec[k:])

    d_in = cfg.embed_dim
    for w in cfg.classifier_widths:
        total += lin(d_in, w)
        d_in = w
    total += lin(d_in, 1)

    disc = 0
    c_in = cfg.channels
    for w in cfg.discriminator_widths:
        disc += conv(c_in, w) + norm(w)
        c_in = w
    s = cfg.image_size // 2 ** len(cfg.discriminator_widths)
    disc += lin(c_in * s * s, 1)
    return total + disc * (2 if cfg.dual_discriminators else 1)


def init_parameters(model: nn.Module, generator: torch.Generator, std: float = INIT_STD) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".norm." in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("weight"):
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
            else:
                p.zero_()


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> XGAN:
    """Instantiate and deterministically initialize an :class:`XGAN`."""
    config.validate()
    model = XGAN(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    init_parameters(model, gen)
    with torch.no_grad():
        model.c_dann.body.out.fc.weight.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
