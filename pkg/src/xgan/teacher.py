"""Frozen teacher embedding for the distillation term.

The teacher is a small convolutional encoder trained to predict the
ground-truth attributes of domain-1 renders.  Its linear projection to the
model's embedding width is the representation distilled into ``e1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .model import ConvBlock, DimensionError, init_parameters

log = logging.getLogger(__name__)


class FrozenTeacherError(RuntimeError):
    """Attempt to update a frozen teacher."""


@dataclass
class TeacherConfig:
    image_size: int = 64
    channels: int = 3
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    embed_dim: int = 1024
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.2
    seed: int = 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["widths"] = list(self.widths)
        return d


class TeacherNet(nn.Module):
    def __init__(self, cfg: TeacherConfig, n_options: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        self.n_options = list(n_options)
        blocks = []
        c_in = cfg.channels
        for w in cfg.widths:
            blocks.append(ConvBlock(c_in, w, norm=False))
            c_in = w
        self.features = nn.Sequential(*blocks)
        s = cfg.image_size // 2 ** len(cfg.widths)
        self.project = nn.Linear(c_in * s * s, cfg.embed_dim)
        self.heads = nn.ModuleList(nn.Linear(cfg.embed_dim, k) for k in self.n_options)
        self.frozen = False

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise DimensionError(f"teacher expects N x {c.channels} x {c.image_size} x {c.image_size}, "
                                 f"got {tuple(x.shape)}")
        p = self.project.weight
        return self.project(self.features(x.to(p.dtype)).flatten(1))

    forward = embed

    def logits(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = F.leaky_relu(self.embed(x), 0.2)
        return [head(h) for head in self.heads]

    def freeze(self) -> "TeacherNet":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self._snapshot = [p.detach().clone() for p in self.parameters()]
        self.eval()
        return self

    def verify_frozen(self) -> None:
        """Raise if a frozen teacher's weights moved since :meth:`freeze`."""
        if not self.frozen:
            return
        for (name, p), ref in zip(self.named_parameters(), self._snapshot):
            if p.requires_grad or not torch.equal(p.detach(), ref.to(p.dtype)):
                raise FrozenTeacherError(f"frozen teacher parameter {name} was modified")

    def load_state_dict(self, state_dict, strict: bool = True, **kw):
        if self.frozen:
            raise FrozenTeacherError("teacher is frozen; load weights before freezing")
        return super().load_state_dict(state_dict, strict, **kw)

    def requires_grad_(self, requires_grad: bool = True):
        if self.frozen and requires_grad:
            raise FrozenTeacherError("teacher is frozen; its parameters cannot be made trainable")
        return super().requires_grad_(requires_grad)

    def thawed_copy(self) -> "TeacherNet":
        """An unfrozen, independently stored copy (used by the finetuned DTN baseline)."""
        clone = TeacherNet(self.cfg, self.n_options)
        clone.load_state_dict(self.state_dict())
        return clone.to(self.project.weight.dtype)


def teacher_embed(teacher: TeacherNet, x: torch.Tensor) -> torch.Tensor:
    """Deterministic N x E teacher embedding (no graph)."""
    with torch.no_grad():
        return teacher.embed(x)


def attribute_accuracy(logits: Sequence[torch.Tensor], labels: torch.Tensor) -> List[float]:
    return [float((lg.argmax(1) == labels[:, j]).float().mean()) for j, lg in enumerate(logits)]


def train_teacher(corpus: torch.Tensor, labels, n_options: Sequence[int],
                  cfg: TeacherConfig = None) -> Tuple[TeacherNet, List[float]]:
    """Fit an attribute classifier on labelled domain-1 images and freeze it.

    Returns the frozen teacher and its per-attribute held-out accuracy.
    """
    net, acc = fit_attribute_net(corpus, labels, n_options, cfg or TeacherConfig())
    log.info("teacher held-out attribute accuracy %s", [round(a, 4) for a in acc])
    return net.freeze(), acc


def fit_attribute_net(corpus: torch.Tensor, labels, n_options: Sequence[int], cfg: TeacherConfig,
                      augment: Optional[Callable] = None) -> Tuple[TeacherNet, List[float]]:
    """Supervised multi-attribute fit with an internal held-out split (not frozen)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.dim() != 2 or labels.shape[0] != corpus.shape[0]:
        raise ValueError(f"label/corpus length mismatch: {tuple(labels.shape)} labels "
                         f"for {corpus.shape[0]} images")
    if labels.shape[1] != len(n_options):
        raise ValueError(f"labels have {labels.shape[1]} attributes, schema has {len(n_options)}")

    gen = torch.Generator().manual_seed(cfg.seed)
    net = TeacherNet(cfg, n_options)
    init_parameters(net, gen)
    n = corpus.shape[0]
    perm = torch.randperm(n, generator=gen)
    n_hold = max(1, int(round(n * cfg.holdout_fraction)))
    hold, fit = perm[:n_hold], perm[n_hold:]

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    n_batches = -(-len(fit) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs * n_batches)
    net.train()
    for epoch in range(cfg.epochs):
        order = fit[torch.randperm(len(fit), generator=gen)]
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = corpus[idx]
            if augment is not None:
                xb = augment(xb, gen)
            out = net.logits(xb)
            loss = sum(F.cross_entropy(lg, labels[idx, j]) for j, lg in enumerate(out))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    net.eval()
    with torch.no_grad():
        acc = attribute_accuracy(net.logits(corpus[hold]), labels[hold])
    return net, acc


def save_teacher(teacher: TeacherNet, path) -> None:
    meta = {"config": teacher.cfg.to_dict(), "n_options": teacher.n_options}
    container.write_container(path, "teacher", meta, dict(teacher.state_dict()))


def load_teacher(path) -> TeacherNet:
    meta, tensors = container.read_container(path, kind="teacher")
    cfg_d = dict(meta["config"])
    cfg_d["widths"] = tuple(cfg_d["widths"])
    net = TeacherNet(TeacherConfig(**cfg_d), meta["n_options"])
    dtype = next(iter(tensors.values())).dtype
    net.to(dtype)
    container.load_into(net, tensors, source=str(path))
    return net.freeze()
