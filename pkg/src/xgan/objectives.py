"""Loss terms of the XGAN objective and a finite-difference gradient oracle.

All losses take the :class:`~xgan.model.XGAN` module as their parameter
container and return 0-dim tensors that keep the autograd graph, so the
trainer can backpropagate the weighted sum directly.  Batch reduction is
always the mean; vector distances are taken over the flattened sample.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .model import ConfigError, DimensionError, DomainId, XGAN

PROB_CLAMP = 1e-7


class NonFiniteLossError(FloatingPointError):
    """A loss evaluated to NaN or infinity."""


class Distance(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"


class GanForm(str, enum.Enum):
    MINIMAX = "minimax"
    NON_SATURATING = "non_saturating"


@dataclass
class LossWeights:
    w_dann: float = 0.3
    w_sem: float = 1.0
    w_gan: float = 0.1
    w_teach: float = 0.1
    gan_2to1_enabled: bool = False
    teach_enabled: bool = True
    tv_weight: float = 0.0

    def __post_init__(self):
        for name in ("w_dann", "w_sem", "w_gan", "w_teach", "tv_weight"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossConfig:
    sem_distance: Distance = Distance.L2
    teach_distance: Distance = Distance.L2
    gan_generator_form: GanForm = GanForm.NON_SATURATING

    def __post_init__(self):
        try:
            self.sem_distance = Distance(self.sem_distance)
            self.teach_distance = Distance(self.teach_distance)
            self.gan_generator_form = GanForm(self.gan_generator_form)
        except ValueError as e:
            raise ConfigError(str(e)) from None


@dataclass
class LossReport:
    """Unweighted loss components plus the weighted generator-side total.

    Fields are 0-dim tensors; ``total`` keeps its graph.
    """

    rec_1: torch.Tensor
    rec_2: torch.Tensor
    dann: torch.Tensor
    sem_1to2: torch.Tensor
    sem_2to1: torch.Tensor
    gan_gen: torch.Tensor
    gan_disc: torch.Tensor
    teach: torch.Tensor
    tv: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in dataclasses.fields(self)}

    def weighted_total(self, w: LossWeights) -> float:
        """Recombine ``total`` from the components; used to audit the report."""
        d = self.as_floats()
        return (d["rec_1"] + d["rec_2"] + w.w_dann * d["dann"]
                + w.w_sem * (d["sem_1to2"] + d["sem_2to1"])
                + w.w_gan * d["gan_gen"] + w.w_teach * d["teach"] + w.tv_weight * d["tv"])


# -- helpers -----------------------------------------------------------------

def per_sample_distance(a: torch.Tensor, b: torch.Tensor, kind: Distance = Distance.L2) -> torch.Tensor:
    diff = (a - b).flatten(1)
    if Distance(kind) is Distance.L1:
        return diff.abs().sum(1)
    return diff.pow(2).sum(1).sqrt()


class GradReverse(torch.autograd.Function):
    """Identity in the forward pass; multiplies the gradient by ``-scale``."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    return GradReverse.apply(x, scale)


def _frozen_call(module, *args):
    """Run ``module`` with its parameters detached so no gradient reaches them."""
    params = {k: v.detach() for k, v in module.named_parameters()}
    return functional_call(module, params, args)


# -- loss terms --------------------------------------------------------------

def reconstruction_loss(model: XGAN, x: torch.Tensor, dom: DomainId,
                        z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean per-sample L2 norm of ``x - d(e(x))``."""
    if z is None:
        z = model.encode(x, dom)
    return per_sample_distance(x, model.decode(z, dom)).mean()


def dann_loss(model: XGAN, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of ``c_dann`` on both domains' embeddings.

    The embeddings pass through a gradient reversal layer: ``c_dann``
    receives the descent gradient of this loss, anything upstream of the
    embeddings receives its negation.
    """
    if z1.shape[0] < 1 or z2.shape[0] < 1:
        raise DimensionError("dann_loss needs non-empty embedding batches")
    l1 = model.classify_domain_logits(grad_reverse(z1))
    l2 = model.classify_domain_logits(grad_reverse(z2))
    return (F.binary_cross_entropy_with_logits(l1, torch.zeros_like(l1))
            + F.binary_cross_entropy_with_logits(l2, torch.ones_like(l2)))


def semantic_consistency_loss(model: XGAN, x1: torch.Tensor, x2: torch.Tensor,
                              distance: Distance = Distance.L2,
                              z1: Optional[torch.Tensor] = None,
                              z2: Optional[torch.Tensor] = None):
    """Return ``(sem_1to2, sem_2to1)``; the full loss is their sum.

    ``sem_1to2`` is the mean distance between ``e1(x)`` and
    ``e2(d2(e1(x)))``.  Gradients flow through both encoders and decoders.
    """
    sem_12, sem_21, _ = _semantic_parts(model, x1, x2, distance, z1, z2)
    return sem_12, sem_21


def _semantic_parts(model, x1, x2, distance, z1=None, z2=None):
    if z1 is None:
        z1 = model.encode(x1, DomainId.D1)
    if z2 is None:
        z2 = model.encode(x2, DomainId.D2)
    t12 = model.decode(z1, DomainId.D2)
    back_1 = model.encode(t12, DomainId.D2)
    back_2 = model.encode(model.decode(z2, DomainId.D1), DomainId.D1)
    return (per_sample_distance(z1, back_1, distance).mean(),
            per_sample_distance(z2, back_2, distance).mean(), t12)


def generator_gan_loss(disc_logits_fake: torch.Tensor, form: GanForm = GanForm.NON_SATURATING):
    if GanForm(form) is GanForm.MINIMAX:
        # E[log(1 - D(g(x)))]
        return -F.softplus(disc_logits_fake).mean()
    # -E[log D(g(x))]
    return F.softplus(-disc_logits_fake).mean()


def discriminator_gan_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))]."""
    return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()


def minimax_value(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    """The GAN value E[log D(real)] + E[log(1 - D(fake))] from probabilities."""
    p_real = p_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    p_fake = p_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return torch.log(p_real).mean() + torch.log1p(-p_fake).mean()


def gan_losses(model: XGAN, x1: torch.Tensor, x2: torch.Tensor,
               form: GanForm = GanForm.NON_SATURATING,
               fake: Optional[torch.Tensor] = None):
    """Return ``(gen_loss, disc_loss)`` for the domain-1 to domain-2 path.

    ``gen_loss`` carries no gradient to the discriminator and ``disc_loss``
    none to the generator.
    """
    if fake is None:
        fake = model.translate(x1, DomainId.D1)
    model._check_image(x2, "gan_losses real batch")
    gen = generator_gan_loss(_frozen_call(model.disc_1to2, fake), form)
    disc = discriminator_gan_loss(model.discriminate_logits(x2),
                                  model.discriminate_logits(fake.detach()))
    return gen, disc


def gan_losses_2to1(model: XGAN, x1: torch.Tensor, x2: torch.Tensor,
                    form: GanForm = GanForm.NON_SATURATING,
                    fake: Optional[torch.Tensor] = None):
    """Mirror of :func:`gan_losses` for the optional ``disc_2to1``."""
    if model.disc_2to1 is None:
        raise ConfigError("gan_2to1_enabled requires a model built with dual_discriminators=True")
    if fake is None:
        fake = model.translate(x2, DomainId.D2)
    gen = generator_gan_loss(_frozen_call(model.disc_2to1, fake), form)
    disc = discriminator_gan_loss(model.disc_2to1(x1), model.disc_2to1(fake.detach()))
    return gen, disc


def teacher_loss(model: XGAN, teacher, x: torch.Tensor,
                 distance: Distance = Distance.L2,
                 domains=DomainId.D1,
                 z1: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean distance between the frozen teacher embedding and ``e1(x)``."""
    if not isinstance(domains, (str, DomainId)):
        domains = set(DomainId(d) for d in domains)
        if len(domains) > 1:
            raise ConfigError("the teacher loss should not be used for both domains simultaneously")
        (domains,) = domains
    if DomainId(domains) is not DomainId.D1:
        raise ConfigError("the teacher loss applies to domain D1 only")
    with torch.no_grad():
        t = teacher.embed(x)
    if t.shape[1] != model.config.embed_dim:
        raise DimensionError(f"teacher width {t.shape[1]} != embed_dim {model.config.embed_dim}")
    if z1 is None:
        z1 = model.encode(x, DomainId.D1)
    return per_sample_distance(t.to(z1.dtype), z1, distance).mean()


def total_variation_loss(x: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all horizontally and vertically adjacent pixel pairs."""
    if x.dim() != 4:
        raise DimensionError(f"total_variation_loss expects N x C x H x W, got {tuple(x.shape)}")
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs()
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs()
    n = dh.numel() + dv.numel()
    if n == 0:
        return x.new_zeros(())
    return (dh.sum() + dv.sum()) / n


# -- the full objective ------------------------------------------------------

ALL_TERMS = frozenset({"rec", "dann", "sem", "gan", "teach", "tv"})


def total_loss(model: XGAN, teacher, x1: torch.Tensor, x2: torch.Tensor,
               weights: LossWeights, cfg: LossConfig = None,
               encoder_terms: Iterable[str] = ALL_TERMS) -> LossReport:
    """Evaluate every term and the weighted generator-side objective.

    Terms with zero weight are evaluated without a graph, only for the
    report.  ``encoder_terms`` names the terms allowed to send gradient into
    the encoders (the DTN baselines restrict it); other terms see detached
    embeddings.
    """
    cfg = cfg or LossConfig()
    encoder_terms = set(encoder_terms)
    if weights.teach_enabled and weights.w_teach > 0 and teacher is None:
        raise ConfigError("teach_enabled with w_teach > 0 requires a teacher")

    z1 = model.encode(x1, DomainId.D1)
    z2 = model.encode(x2, DomainId.D2)

    def emb(term):
        if term in encoder_terms:
            return z1, z2
        return z1.detach(), z2.detach()

    def maybe_graph(active):
        return torch.enable_grad() if active and torch.is_grad_enabled() else torch.no_grad()

    e1, e2 = emb("rec")
    rec_1 = reconstruction_loss(model, x1, DomainId.D1, z=e1)
    rec_2 = reconstruction_loss(model, x2, DomainId.D2, z=e2)
    total = rec_1 + rec_2

    with maybe_graph(weights.w_dann > 0):
        e1, e2 = emb("dann")
        dann = dann_loss(model, e1, e2)
    if weights.w_dann > 0:
        total = total + weights.w_dann * dann

    with maybe_graph(weights.w_sem > 0):
        e1, e2 = emb("sem")
        sem_12, sem_21, t12 = _semantic_parts(model, x1, x2, cfg.sem_distance, z1=e1, z2=e2)
    if weights.w_sem > 0:
        total = total + weights.w_sem * (sem_12 + sem_21)

    need_fake = weights.w_gan > 0 or weights.tv_weight > 0
    # the sem term's translation is reusable when it was built the same way
    reuse = ((weights.w_sem > 0) == need_fake
             and ("sem" in encoder_terms) == ("gan" in encoder_terms))
    with maybe_graph(need_fake):
        e1, _ = emb("gan")
        fake = t12 if reuse else model.decode(e1, DomainId.D2)
        gan_gen, gan_disc = gan_losses(model, x1, x2, cfg.gan_generator_form, fake=fake)
        if weights.gan_2to1_enabled:
            _, e2 = emb("gan")
            g21, d21 = gan_losses_2to1(model, x1, x2, cfg.gan_generator_form,
                                       fake=model.decode(e2, DomainId.D1))
            gan_gen = gan_gen + g21
            gan_disc = gan_disc + d21
    if weights.w_gan > 0:
        total = total + weights.w_gan * gan_gen

    zero = x1.new_zeros(())
    teach = zero
    if weights.teach_enabled and teacher is not None:
        with maybe_graph(weights.w_teach > 0):
            e1, _ = emb("teach")
            teach = teacher_loss(model, teacher, x1, cfg.teach_distance, z1=e1)
        if weights.w_teach > 0:
            total = total + weights.w_teach * teach

    with maybe_graph(weights.tv_weight > 0):
        tv = total_variation_loss(fake)
    if weights.tv_weight > 0:
        total = total + weights.tv_weight * tv

    return LossReport(rec_1=rec_1, rec_2=rec_2, dann=dann, sem_1to2=sem_12, sem_2to1=sem_21,
                      gan_gen=gan_gen, gan_disc=gan_disc, teach=teach, tv=tv, total=total)


def check_finite(report: LossReport) -> None:
    for name, value in report.as_floats().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term '{name}' = {value}")


# -- finite differences ------------------------------------------------------

def finite_difference_gradient(loss_fn: Callable[[], torch.Tensor],
                               params: Sequence[torch.Tensor],
                               epsilon: float = 1e-4) -> List[torch.Tensor]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. each entry of ``params``.

    Parameters are perturbed in place and restored.  Intended for float64
    micro-models; cost is two loss evaluations per scalar.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                fp = float(loss_fn())
                flat[i] = orig - epsilon
                fm = float(loss_fn())
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteLossError(f"non-finite loss while differencing parameter entry {i}")
                gflat[i] = (fp - fm) / (2 * epsilon)
            grads.append(g)
    return grads
