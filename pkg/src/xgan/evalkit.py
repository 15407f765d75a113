"""Quantitative evaluation of a trained model on the synthetic benchmark.

Attribute preservation is measured with frozen probe classifiers trained on
clean renders of the target style: an image is translated, the probe reads
its attributes, and the reading is scored against the source sample's
ground truth.  Domain confusion, embedding consistency and reconstruction
error are read directly off the model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import container, domains
from .model import ConfigError, DomainId, ModelConfig, XGAN
from .objectives import (Distance, LossWeights, reconstruction_loss, semantic_consistency_loss,
                         total_variation_loss)
from .teacher import TeacherConfig, TeacherNet, fit_attribute_net, train_teacher
from .trainer import JsonlSink, Mode, TrainConfig, train

log = logging.getLogger(__name__)

PROBE_GATE = 0.95
EVAL_BATCH = 256


class ProbeValidityError(RuntimeError):
    """Probe held-out accuracy is too low for its readings to be trusted."""


# -- probes ------------------------------------------------------------------

def _probe_augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random blur and noise so probes read attributes off imperfect generations."""
    n = x.shape[0]
    k = torch.tensor([1.0, 2.0, 1.0], dtype=x.dtype)
    k = (k[:, None] * k[None, :]) / 16.0
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"),
                       k.expand(x.shape[1], 1, 3, 3), groups=x.shape[1])
    mix = torch.rand(n, 1, 1, 1, generator=gen, dtype=x.dtype)
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * 0.1 * torch.rand(n, 1, 1, 1, generator=gen)
    return (x * (1 - mix) + blurred * mix + noise).clamp(-1, 1)


@dataclass
class ProbeClassifier:
    """Frozen per-attribute classifiers for one style."""

    net: TeacherNet
    style: str
    names: List[str]
    holdout_accuracy: List[float]

    def predict(self, x: torch.Tensor) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(x), EVAL_BATCH):
                logits = self.net.logits(x[i:i + EVAL_BATCH])
                out.append(torch.stack([lg.argmax(1) for lg in logits], 1))
        return torch.cat(out).numpy()

    def check_valid(self, gate: float = PROBE_GATE) -> None:
        bad = {n: a for n, a in zip(self.names, self.holdout_accuracy) if a < gate}
        if bad:
            raise ProbeValidityError(f"probe ({self.style}) held-out accuracy below {gate:.0%}: {bad}")


def train_probes(schema: domains.AttributeSchema, style, image_size: int, n_samples: int = 5000,
                 seed: int = 12345, epochs: int = 30, augment: bool = True) -> ProbeClassifier:
    """Train probes on a fresh, uniformly sampled, clean corpus of ``style``."""
    spec = domains.CorpusSpec(n_samples, style, seed, None, image_size)
    images, attrs = domains.build_corpus(schema, spec)
    cfg = TeacherConfig(image_size=image_size, widths=(16, 32, 64), embed_dim=128,
                        epochs=epochs, seed=seed)
    net, acc = fit_attribute_net(torch.from_numpy(images), attrs, schema.n_options, cfg,
                                 augment=_probe_augment if augment else None)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    probe = ProbeClassifier(net, domains.Style(style).value, schema.names, acc)
    log.info("probe %s held-out accuracy %s", probe.style, [round(a, 4) for a in acc])
    return probe


def save_probes(probe: ProbeClassifier, path) -> None:
    meta = {"config": probe.net.cfg.to_dict(), "n_options": probe.net.n_options, "style": probe.style,
            "names": probe.names, "holdout_accuracy": probe.holdout_accuracy}
    container.write_container(path, "probe", meta, dict(probe.net.state_dict()))


def load_probes(path) -> ProbeClassifier:
    meta, tensors = container.read_container(path, kind="probe")
    cfg_d = dict(meta["config"])
    cfg_d["widths"] = tuple(cfg_d["widths"])
    net = TeacherNet(TeacherConfig(**cfg_d), meta["n_options"])
    container.load_into(net, tensors, source=str(path))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return ProbeClassifier(net, meta["style"], list(meta["names"]), list(meta["holdout_accuracy"]))


def probe_accuracy(probe: ProbeClassifier, images: torch.Tensor, attrs) -> List[float]:
    pred = probe.predict(images)
    truth = np.asarray(attrs)
    return list((pred == truth).mean(0))


# -- metrics -----------------------------------------------------------------

def _batched(fn, x: torch.Tensor):
    with torch.no_grad():
        return torch.cat([fn(x[i:i + EVAL_BATCH]) for i in range(0, len(x), EVAL_BATCH)])


def translate_all(model: XGAN, x: torch.Tensor, source: DomainId) -> torch.Tensor:
    return _batched(lambda b: model.translate(b, source), x)


def chance_rates(attrs, n_options: Sequence[int]) -> List[float]:
    """Majority-class frequency per attribute: the best any constant translator can score."""
    a = np.asarray(attrs)
    return [float(np.bincount(a[:, j], minlength=k).max() / len(a)) for j, k in enumerate(n_options)]


def attribute_preservation(translator, probes: ProbeClassifier, test_images: torch.Tensor,
                           test_attrs, source: DomainId = DomainId.D1) -> Dict[str, float]:
    """Per-attribute accuracy of ``probes`` on translated test images, plus ``macro``.

    ``translator`` is a model (translated from ``source``) or any callable
    mapping an image batch to an image batch.
    """
    probes.check_valid()
    truth = np.asarray(test_attrs)
    if truth.shape[1] != len(probes.names):
        raise ConfigError(f"probes cover {len(probes.names)} attributes, labels have {truth.shape[1]}")
    if isinstance(translator, XGAN):
        out = translate_all(translator, test_images, source)
    else:
        out = _batched(translator, test_images)
    pred = probes.predict(out)
    rates = {n: float((pred[:, j] == truth[:, j]).mean()) for j, n in enumerate(probes.names)}
    rates["macro"] = float(np.mean([rates[n] for n in probes.names]))
    return rates


def domain_confusion(model: XGAN, test_1: torch.Tensor, test_2: torch.Tensor) -> float:
    """Held-out accuracy of ``c_dann``; predicts D2 iff probability > 0.5."""
    p1 = _batched(lambda b: model.classify_domain(model.encode(b, DomainId.D1)), test_1)
    p2 = _batched(lambda b: model.classify_domain(model.encode(b, DomainId.D2)), test_2)
    correct = (p1 <= 0.5).sum() + (p2 > 0.5).sum()
    return float(correct) / (len(p1) + len(p2))


def embedding_consistency(model: XGAN, test_1: torch.Tensor, test_2: torch.Tensor,
                          distance: Distance = Distance.L2) -> Dict[str, float]:
    """Semantic-consistency distances on held-out data, without gradients."""
    with torch.no_grad():
        s12, s21 = semantic_consistency_loss(model, test_1, test_2, distance)
    return {"1to2": float(s12), "2to1": float(s21)}


def reconstruction_error(model: XGAN, x: torch.Tensor, dom: DomainId) -> float:
    with torch.no_grad():
        return float(reconstruction_loss(model, x, dom))


def translation_tv(model: XGAN, x: torch.Tensor, source: DomainId = DomainId.D1) -> float:
    with torch.no_grad():
        return float(total_variation_loss(translate_all(model, x, source)))


# -- sample grids ------------------------------------------------------------

def sample_grid(model: XGAN, inputs: torch.Tensor, source: DomainId, path,
                pairs_per_row: int = 4, max_rows: int = 16) -> Path:
    """Write a PNG grid of (input, translation) pairs read row-wise.

    Empty trailing cells are white.  The image is ``tile * 2 * pairs_per_row``
    pixels wide and ``tile * rows`` high.
    """
    n = len(inputs)
    if not 1 <= n <= pairs_per_row * max_rows:
        raise ValueError(f"grid holds 1..{pairs_per_row * max_rows} inputs, got {n}")
    outputs = translate_all(model, inputs, source)
    tile = inputs.shape[-1]
    rows = math.ceil(n / pairs_per_row)
    canvas = np.full((rows * tile, 2 * pairs_per_row * tile, 3), 255, dtype=np.uint8)
    a = domains.to_uint8(inputs.detach().cpu().numpy())
    b = domains.to_uint8(outputs.cpu().numpy())
    for i in range(n):
        r, c = divmod(i, pairs_per_row)
        y, x = r * tile, 2 * c * tile
        canvas[y:y + tile, x:x + tile] = a[i]
        canvas[y:y + tile, x + tile:x + 2 * tile] = b[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, "RGB").save(path, format="PNG", optimize=False)
    return path


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    seed: int
    preservation: Dict[str, float]
    chance: Dict[str, float]
    domain_confusion_accuracy: float
    mean_embedding_distance: Dict[str, float]
    mean_reconstruction_error: Dict[str, float]
    translation_tv: float
    config_fingerprint: str
    preservation_2to1: Optional[Dict[str, float]] = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def append_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(report.to_dict()) + "\n")


def evaluate(model: XGAN, data: "BenchmarkData", mode: str, seed: int, fp: str,
             probes_2: ProbeClassifier, probes_1: Optional[ProbeClassifier] = None) -> EvalReport:
    model.eval()
    t1, t2 = data.test_1, data.test_2
    chance = dict(zip(data.schema.names, chance_rates(data.test_attrs_1, data.schema.n_options)))
    chance["macro"] = float(np.mean(list(chance.values())))
    pres = attribute_preservation(model, probes_2, t1, data.test_attrs_1, DomainId.D1)
    pres_21 = None
    if probes_1 is not None:
        pres_21 = attribute_preservation(model, probes_1, t2, data.test_attrs_2, DomainId.D2)
    return EvalReport(
        mode=mode, seed=seed, preservation=pres, chance=chance,
        domain_confusion_accuracy=domain_confusion(model, t1, t2),
        mean_embedding_distance=embedding_consistency(model, t1, t2),
        mean_reconstruction_error={"D1": reconstruction_error(model, t1, DomainId.D1),
                                   "D2": reconstruction_error(model, t2, DomainId.D2)},
        translation_tv=translation_tv(model, t1),
        config_fingerprint=fp, preservation_2to1=pres_21,
    )


# -- the synthetic benchmark -------------------------------------------------

def benchmark_model_config() -> ModelConfig:
    """Reduced-width 32x32 model that fits the single-core desk budget."""
    return ModelConfig(image_size=32, embed_dim=256, encoder_widths=(16, 32, 64, 128),
                       decoder_widths=(128, 64, 32, 16), classifier_widths=(256,))


def benchmark_train_config() -> TrainConfig:
    # lr and weights tuned on the benchmark; the small model learns too slowly at 1e-4
    return TrainConfig(total_steps=5000, learning_rate=1e-3,
                       weights=LossWeights(w_gan=0.02, w_teach=0.01))


@dataclass
class BenchmarkConfig:
    n_samples: int = 2000
    image_size: int = 32
    data_seed: int = 0
    seeds: Sequence[int] = (0, 1, 2)
    model: ModelConfig = field(default_factory=benchmark_model_config)
    train: TrainConfig = field(default_factory=benchmark_train_config)
    teacher_widths: Sequence[int] = (16, 32, 64)
    teacher_epochs: int = 20
    probe_samples: int = 5000
    probe_seed: int = 12345
    probe_epochs: int = 30
    high_dann_factor: float = 10.0

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "image_size": self.image_size,
                "data_seed": self.data_seed, "seeds": list(self.seeds),
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "teacher_widths": list(self.teacher_widths), "teacher_epochs": self.teacher_epochs,
                "probe_samples": self.probe_samples, "probe_seed": self.probe_seed,
                "probe_epochs": self.probe_epochs, "high_dann_factor": self.high_dann_factor}


@dataclass
class BenchmarkData:
    schema: domains.AttributeSchema
    train_1: torch.Tensor
    train_2: torch.Tensor
    test_1: torch.Tensor
    test_2: torch.Tensor
    train_attrs_1: list
    test_attrs_1: list
    test_attrs_2: list


def build_benchmark_data(cfg: BenchmarkConfig, schema: domains.AttributeSchema = None) -> BenchmarkData:
    schema = schema or domains.default_schema()
    spec_1, spec_2 = domains.default_domain_specs(cfg.n_samples, cfg.data_seed, cfg.image_size, schema)
    x1, a1 = domains.build_corpus(schema, spec_1)
    x2, a2 = domains.build_corpus(schema, spec_2)
    tr1, te1 = domains.train_test_split(len(x1), cfg.data_seed + 1)
    tr2, te2 = domains.train_test_split(len(x2), cfg.data_seed + 2)
    x1, x2 = torch.from_numpy(x1), torch.from_numpy(x2)
    return BenchmarkData(schema, x1[tr1], x2[tr2], x1[te1], x2[te2],
                         [a1[i] for i in tr1], [a1[i] for i in te1], [a2[i] for i in te2])


ABLATION_MODES = ("full_xgan", "no_sem", "rec_dann_only", "no_gan", "no_teacher",
                  "dtn_frozen_encoder", "dtn_finetuned_encoder", "high_dann")


def mode_train_config(base: TrainConfig, mode: str, seed: int, high_dann_factor: float = 10.0) -> TrainConfig:
    """Training config for an ablation row; ``high_dann`` is rec+dann with the dann weight scaled."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown mode '{mode}'; valid modes: {', '.join(ABLATION_MODES)}")
    cfg = dataclasses.replace(base, seed=seed, weights=dataclasses.replace(base.weights))
    if mode == "high_dann":
        cfg.mode = Mode.REC_DANN_ONLY
        cfg.weights.w_dann *= high_dann_factor
    else:
        cfg.mode = Mode(mode)
    return cfg


class Benchmark:
    """Corpora, teacher and probes shared by every run of the synthetic benchmark."""

    def __init__(self, cfg: BenchmarkConfig = None, schema: domains.AttributeSchema = None):
        self.cfg = cfg or BenchmarkConfig()
        self.data = build_benchmark_data(self.cfg, schema)
        schema = self.data.schema
        tcfg = TeacherConfig(image_size=self.cfg.image_size, widths=self.cfg.teacher_widths,
                             embed_dim=self.cfg.model.embed_dim, epochs=self.cfg.teacher_epochs,
                             seed=self.cfg.data_seed)
        self.teacher, self.teacher_accuracy = train_teacher(
            self.data.train_1, self.data.train_attrs_1, schema.n_options, tcfg)
        self.probes_2 = train_probes(schema, domains.Style.B, self.cfg.image_size,
                                     self.cfg.probe_samples, self.cfg.probe_seed,
                                     self.cfg.probe_epochs)
        self.probes_1 = train_probes(schema, domains.Style.A, self.cfg.image_size,
                                     self.cfg.probe_samples, self.cfg.probe_seed + 1,
                                     self.cfg.probe_epochs)

    def run(self, mode: str, seed: int, metrics_sink=None) -> tuple:
        """Train one ablation row and evaluate it; returns ``(report, state)``."""
        tcfg = mode_train_config(self.cfg.train, mode, seed, self.cfg.high_dann_factor)
        t0 = time.time()
        state = train(tcfg, self.data.train_1, self.data.train_2, self.cfg.model,
                      teacher=self.teacher, metrics_sink=metrics_sink)
        fp = fingerprint({"bench": self.cfg.to_dict(), "mode": mode, "seed": seed})
        report = evaluate(state.model, self.data, mode, seed, fp, self.probes_2, self.probes_1)
        report.wall_time = time.time() - t0
        return report, state


def ablation_suite(bench: Benchmark, modes: Sequence[str], seeds: Sequence[int] = None,
                   results_path=None, metrics_dir=None) -> List[EvalReport]:
    """Train and evaluate every (mode, seed); a failing mode is logged and skipped."""
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown mode '{m}'; valid modes: {', '.join(ABLATION_MODES)}")
    seeds = bench.cfg.seeds if seeds is None else seeds
    reports = []
    for mode in modes:
        for seed in seeds:
            sink = None
            if metrics_dir is not None:
                sink = JsonlSink(Path(metrics_dir) / f"{mode}_seed{seed}.jsonl")
            try:
                report, _ = bench.run(mode, seed, metrics_sink=sink)
            except Exception as e:  # keep going with the remaining modes
                log.error("mode %s seed %s failed: %s", mode, seed, e)
                continue
            reports.append(report)
            if results_path is not None:
                append_report(report, results_path)
            log.info("%s seed %d: %s", mode, seed, summarize(report))
    return reports


def summarize(r: EvalReport) -> dict:
    return {"macro": round(r.preservation["macro"], 4), "chance": round(r.chance["macro"], 4),
            "confusion": round(r.domain_confusion_accuracy, 4),
            "sem": round(sum(r.mean_embedding_distance.values()), 4),
            "rec": {k: round(v, 3) for k, v in r.mean_reconstruction_error.items()},
            "tv": round(r.translation_tv, 4)}


def median_by_mode(reports: Sequence[EvalReport]) -> Dict[str, dict]:
    rows = {}
    for mode in dict.fromkeys(r.mode for r in reports):
        rs = [r for r in reports if r.mode == mode]
        rows[mode] = {
            "n": len(rs),
            "macro": float(np.median([r.preservation["macro"] for r in rs])),
            "chance": float(np.median([r.chance["macro"] for r in rs])),
            "confusion": float(np.median([r.domain_confusion_accuracy for r in rs])),
            "sem": float(np.median([sum(r.mean_embedding_distance.values()) for r in rs])),
            "rec_D1": float(np.median([r.mean_reconstruction_error["D1"] for r in rs])),
            "rec_D2": float(np.median([r.mean_reconstruction_error["D2"] for r in rs])),
            "tv": float(np.median([r.translation_tv for r in rs])),
        }
    return rows


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text aligned comparison table of per-mode medians."""
    rows = median_by_mode(reports)
    cols = ["n", "macro", "chance", "confusion", "sem", "rec_D1", "rec_D2", "tv"]
    header = ["mode"] + cols
    body = [[m] + [str(v[c]) if c == "n" else f"{v[c]:.4f}" for c in cols] for m, v in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])
