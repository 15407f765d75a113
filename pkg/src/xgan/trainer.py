"""Alternating generator / discriminator optimisation with Adam.

One iteration is a joint update of both encoders, both decoders and the
domain classifier (gradient reversal makes the classifier ascend while the
encoders descend in the same backward pass), followed by an update of the
discriminator against the freshly updated generator.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import container
from .container import CheckpointError
from .model import ConfigError, DomainId, ModelConfig, XGAN, build_model
from .objectives import (ALL_TERMS, LossConfig, LossWeights, NonFiniteLossError,
                         check_finite, discriminator_gan_loss, total_loss)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FULL_XGAN = "full_xgan"
    REC_DANN_ONLY = "rec_dann_only"
    NO_TEACHER = "no_teacher"
    NO_SEM = "no_sem"
    NO_GAN = "no_gan"
    DTN_FROZEN_ENCODER = "dtn_frozen_encoder"
    DTN_FINETUNED_ENCODER = "dtn_finetuned_encoder"


DTN_MODES = (Mode.DTN_FROZEN_ENCODER, Mode.DTN_FINETUNED_ENCODER)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    total_steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 0
    metrics_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    mode: Mode = Mode.FULL_XGAN

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.loss_cfg, dict):
            self.loss_cfg = LossConfig(**self.loss_cfg)
        try:
            self.mode = Mode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode '{self.mode}'; valid modes: "
                              f"{', '.join(m.value for m in Mode)}") from None
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")

    def effective_weights(self) -> LossWeights:
        """Loss weights after applying the mode preset."""
        w = dataclasses.replace(self.weights)
        m = self.mode
        if m is Mode.REC_DANN_ONLY:
            w.w_sem = w.w_gan = w.w_teach = 0.0
        elif m is Mode.NO_TEACHER:
            w.w_teach = 0.0
            w.teach_enabled = False
        elif m is Mode.NO_SEM:
            w.w_sem = 0.0
        elif m is Mode.NO_GAN:
            w.w_gan = 0.0
        elif m in DTN_MODES:
            # the shared encoder is the teacher itself
            w.w_dann = 0.0
            w.w_teach = 0.0
            w.teach_enabled = False
        return w

    def encoder_terms(self):
        if self.mode is Mode.DTN_FINETUNED_ENCODER:
            return frozenset({"sem"})
        return ALL_TERMS

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        d["loss_cfg"] = {k: v.value for k, v in d["loss_cfg"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class DomainSampler:
    """Cycles through a corpus in per-epoch permutations.

    The permutation of epoch ``k`` is a pure function of ``(seed, stream, k)``,
    so the sampler state is just ``(epoch, position)``.
    """

    def __init__(self, n: int, seed: int, stream: int):
        if n < 1:
            raise ValueError("cannot sample from an empty corpus")
        self.n, self.seed, self.stream = n, seed, stream
        self.epoch, self.pos = 0, 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch):
        return np.random.default_rng([self.seed, self.stream, epoch]).permutation(self.n)

    def next(self, batch_size: int) -> np.ndarray:
        out = []
        while len(out) < batch_size:
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self._perm = self._permutation(self.epoch)
            take = min(batch_size - len(out), self.n - self.pos)
            out.extend(self._perm[self.pos:self.pos + take])
            self.pos += take
        return np.asarray(out)

    def state(self):
        return [self.n, self.epoch, self.pos]

    def set_state(self, s):
        self.n, self.epoch, self.pos = (int(v) for v in s)
        self._perm = self._permutation(self.epoch)


@dataclass
class TrainState:
    step: int
    model: XGAN
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    samplers: Optional[List[DomainSampler]] = None
    dtn_teacher: Optional[object] = None

    @property
    def params(self) -> XGAN:
        return self.model

    def named_parameters(self) -> Dict[str, torch.nn.Parameter]:
        return dict(self.model.named_parameters())


def _make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(list(params), lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon,
                            foreach=False)


def _check_teacher(cfg: TrainConfig, teacher) -> None:
    weights = cfg.effective_weights()
    if weights.teach_enabled and weights.w_teach > 0 and teacher is None:
        raise ConfigError("w_teach > 0 requires a teacher (set teach_enabled=false or w_teach=0)")


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, teacher=None,
               corpus_sizes=None, dtype=torch.float32, require_teacher: bool = True) -> TrainState:
    """Build the model, attach a DTN encoder if the mode asks for one, and make the optimisers.

    ``require_teacher=False`` skips the L_teach check (inspection and inference only).
    """
    if require_teacher:
        _check_teacher(cfg, teacher)
    if teacher is not None and teacher.embed_dim != model_cfg.embed_dim:
        raise ConfigError(f"teacher embedding width {teacher.embed_dim} != model embed_dim "
                          f"{model_cfg.embed_dim}")
    model = build_model(model_cfg, cfg.seed, dtype=dtype)
    if cfg.mode in DTN_MODES:
        if teacher is None:
            raise ConfigError(f"mode {cfg.mode.value} requires a teacher network")
        if cfg.mode is Mode.DTN_FROZEN_ENCODER:
            model.use_external_encoder(teacher, trainable=False)
        else:
            model.use_external_encoder(teacher.thawed_copy(), trainable=True)
    gen_opt = _make_optimizer(model.generator_parameters(), cfg)
    disc_opt = _make_optimizer(model.discriminator_parameters(), cfg)
    samplers = None
    if corpus_sizes is not None:
        samplers = [DomainSampler(n, cfg.seed, k) for k, n in enumerate(corpus_sizes)]
    return TrainState(step=0, model=model, gen_opt=gen_opt, disc_opt=disc_opt,
                      samplers=samplers, dtn_teacher=teacher if cfg.mode in DTN_MODES else None)


# -- the two phases ----------------------------------------------------------

def generator_step(state: TrainState, batch1: torch.Tensor, batch2: torch.Tensor,
                   cfg: TrainConfig, teacher=None):
    """One Adam update of encoders, decoders and ``c_dann``; returns ``(state, report)``."""
    model = state.model
    weights = cfg.effective_weights()
    report = total_loss(model, teacher if weights.teach_enabled else None, batch1, batch2,
                        weights, cfg.loss_cfg, encoder_terms=cfg.encoder_terms())
    check_finite(report)
    state.gen_opt.zero_grad(set_to_none=True)
    report.total.backward()
    state.gen_opt.step()
    # the discriminator never steps here but the backward may have filled its grads
    for p in model.discriminator_parameters():
        p.grad = None
    for t in (teacher, state.dtn_teacher):
        if t is not None and hasattr(t, "verify_frozen"):
            t.verify_frozen()
    state.step += 1
    return state, report


def discriminator_step(state: TrainState, batch1: torch.Tensor, batch2: torch.Tensor,
                       cfg: TrainConfig):
    """One Adam update of the discriminator(s) against the current generator.

    Skipped when the GAN weight is zero; then ``(state, None)`` is returned.
    """
    weights = cfg.effective_weights()
    if weights.w_gan == 0:
        return state, None
    model = state.model
    with torch.no_grad():
        z1 = model.encode(batch1, DomainId.D1)
        fake = model.decode(z1, DomainId.D2)
    loss = discriminator_gan_loss(model.discriminate_logits(batch2), model.discriminate_logits(fake))
    if weights.gan_2to1_enabled:
        with torch.no_grad():
            fake21 = model.translate(batch2, DomainId.D2)
        loss = loss + discriminator_gan_loss(model.disc_2to1(batch1), model.disc_2to1(fake21))
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss term 'gan_disc' = {value}")
    state.disc_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.disc_opt.step()
    return state, value


# -- checkpoints -------------------------------------------------------------

def _adam_tensors(opt: torch.optim.Adam, names: Dict[int, str], prefix: str):
    out = {}
    steps = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"{prefix}.exp_avg.{n}"] = st["exp_avg"]
            out[f"{prefix}.exp_avg_sq.{n}"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
    return out, steps


def _restore_adam(opt: torch.optim.Adam, names: Dict[int, str], prefix: str, tensors, steps, source):
    for group in opt.param_groups:
        for p in group["params"]:
            n = names[id(p)]
            if n not in steps:
                opt.state.pop(p, None)
                continue
            st = {"step": torch.tensor(steps[n])}
            for key in ("exp_avg", "exp_avg_sq"):
                t = tensors.get(f"{prefix}.{key}.{n}")
                if t is None:
                    raise CheckpointError(f"{source}: missing optimizer moment '{prefix}.{key}.{n}'")
                if t.shape != p.shape:
                    raise CheckpointError(f"{source}: shape mismatch for moment '{prefix}.{key}.{n}'")
                st[key] = t.clone()
            opt.state[p] = st


def save_checkpoint(state: TrainState, path, model_cfg: ModelConfig = None,
                    train_cfg: TrainConfig = None) -> int:
    """Write params, Adam moments, step and sampler positions; returns the header length."""
    model = state.model
    names = {id(p): n for n, p in model.named_parameters()}
    tensors = dict(model.named_parameters())
    g, g_steps = _adam_tensors(state.gen_opt, names, "adam_gen")
    d, d_steps = _adam_tensors(state.disc_opt, names, "adam_disc")
    tensors.update(g)
    tensors.update(d)
    meta = {
        "step": state.step,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "adam_steps": {"gen": g_steps, "disc": d_steps},
        "samplers": [s.state() for s in state.samplers] if state.samplers else None,
    }
    return container.write_container(path, "train_state", meta, tensors)


def load_checkpoint(path, model_cfg: ModelConfig = None, train_cfg: TrainConfig = None,
                    teacher=None) -> TrainState:
    """Rebuild a :class:`TrainState` from ``path``.

    If ``model_cfg`` is given it must equal the stored model configuration.
    """
    meta, tensors = container.read_container(path, kind="train_state")
    stored = ModelConfig.from_dict(meta["model_config"])
    if model_cfg is not None and stored != model_cfg:
        diff = [k for k, v in model_cfg.to_dict().items() if meta["model_config"].get(k) != v]
        raise CheckpointError(f"{path}: checkpoint model config differs from the active config "
                              f"in {diff}")
    if train_cfg is None:
        if meta.get("train_config") is None:
            raise CheckpointError(f"{path}: no train config stored and none given")
        train_cfg = TrainConfig.from_dict(meta["train_config"])
    dtype = next(v for k, v in tensors.items() if not k.startswith("adam_")).dtype
    # L_teach only matters when stepping; train() re-checks before the first step
    state = init_state(stored, train_cfg, teacher=teacher, dtype=dtype, require_teacher=False)
    model = state.model
    params = dict(model.named_parameters())
    extra = [k for k in tensors if not k.startswith("adam_") and k not in params]
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter '{extra[0]}'")
    container.load_into(model, tensors, source=str(path))
    names = {id(p): n for n, p in model.named_parameters()}
    _restore_adam(state.gen_opt, names, "adam_gen", tensors, meta["adam_steps"]["gen"], path)
    _restore_adam(state.disc_opt, names, "adam_disc", tensors, meta["adam_steps"]["disc"], path)
    state.step = int(meta["step"])
    if meta.get("samplers"):
        state.samplers = [DomainSampler(1, train_cfg.seed, k) for k in range(len(meta["samplers"]))]
        for s, st in zip(state.samplers, meta["samplers"]):
            s.set_state(st)
    return state


# -- sinks -------------------------------------------------------------------

class JsonlSink:
    """Appends one JSON object per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")


class CheckpointSink:
    def __init__(self, directory, train_cfg: TrainConfig = None):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.train_cfg = train_cfg

    def __call__(self, state: TrainState):
        path = self.dir / f"step_{state.step:07d}.ckpt"
        save_checkpoint(state, path, train_cfg=self.train_cfg)
        save_checkpoint(state, self.dir / "latest.ckpt", train_cfg=self.train_cfg)
        return path


# -- the loop ----------------------------------------------------------------

def train(cfg: TrainConfig, corpus1: torch.Tensor, corpus2: torch.Tensor,
          model_cfg: ModelConfig, teacher=None,
          metrics_sink: Callable[[dict], None] = None,
          checkpoint_sink: Callable[[TrainState], None] = None,
          state: TrainState = None) -> TrainState:
    """Run ``cfg.total_steps`` alternating iterations (continuing from ``state`` if given).

    Corpora are unpaired and cycled independently.  Metric records carry
    the step, every loss component, the discriminator-phase loss and the
    wall time.
    """
    if len(corpus1) == 0 or len(corpus2) == 0:
        raise ValueError("training corpora must be non-empty")
    _check_teacher(cfg, teacher)
    if state is None:
        state = init_state(model_cfg, cfg, teacher=teacher,
                           corpus_sizes=(len(corpus1), len(corpus2)), dtype=corpus1.dtype)
    elif state.samplers is None:
        state.samplers = [DomainSampler(n, cfg.seed, k)
                          for k, n in enumerate((len(corpus1), len(corpus2)))]
    for s, c in zip(state.samplers, (corpus1, corpus2)):
        if s.n != len(c):
            raise ValueError(f"sampler was built for a corpus of {s.n} samples, got {len(c)}")
    start = time.time()
    while state.step < cfg.total_steps:
        b1 = corpus1[torch.from_numpy(state.samplers[0].next(cfg.batch_size))]
        b2 = corpus2[torch.from_numpy(state.samplers[1].next(cfg.batch_size))]
        try:
            state, report = generator_step(state, b1, b2, cfg, teacher)
            state, disc_loss = discriminator_step(state, b1, b2, cfg)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(f"training aborted at step {state.step + 1}: {e}") from e
        if metrics_sink is not None and cfg.metrics_every and state.step % cfg.metrics_every == 0:
            rec = {"step": state.step, **report.as_floats(), "disc_step": disc_loss,
                   "wall_time": time.time() - start}
            metrics_sink(rec)
        if checkpoint_sink is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            checkpoint_sink(state)
    return state
