"""Command-line entry point: ``xgan <command> [--config FILE] [--section.key VALUE ...]``.

Commands: gen-data, train-teacher, train, translate, eval, ablate.  Every
command reads one YAML config (defaults below) and accepts dotted-path
overrides; unknown keys are rejected.  The resolved config is written to
``output_dir/config.yaml`` so any run can be repeated from it.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml
from PIL import Image

from . import domains, evalkit
from .container import CheckpointError, read_container
from .model import ConfigError, DomainId, ModelConfig
from .objectives import NonFiniteLossError
from .teacher import TeacherConfig, load_teacher, save_teacher, train_teacher
from .trainer import CheckpointSink, JsonlSink, TrainConfig, load_checkpoint, train

log = logging.getLogger("xgan")


class UsageError(Exception):
    """Bad command line or config; exits with status 2."""


def default_config() -> dict:
    return {
        "output_dir": "runs/xgan",
        "model": evalkit.benchmark_model_config().to_dict(),
        "train": evalkit.benchmark_train_config().to_dict(),
        "data": {
            "image_size": 32,
            "n_samples": 2000,
            "seed": 0,
            "schema": None,     # path to a schema JSON; the default schema when null
            "d1_dir": None,     # image directory instead of the synthetic D1 corpus
            "d2_dir": None,
        },
        "teacher": {"path": None, "widths": [16, 32, 64], "epochs": 20, "seed": 0},
        "probes": {"samples": 5000, "epochs": 30, "seed": 12345},
        "ablate": {"modes": list(evalkit.ABLATION_MODES), "seeds": [0, 1, 2], "high_dann_factor": 10.0},
    }


# -- config handling ---------------------------------------------------------

def _merge(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        key = f"{path}{k}"
        if k not in base:
            raise UsageError(f"unknown config key '{key}'")
        if isinstance(base[k], dict) and k != "bias":
            if not isinstance(v, dict):
                raise UsageError(f"config key '{key}' must be a mapping")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def _set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key '{dotted}'")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise UsageError(f"unknown config key '{dotted}'")
    node[parts[-1]] = yaml.safe_load(raw)


def parse_overrides(extra) -> list:
    """``['--train.learning_rate', '1e-3', '--a.b=2']`` -> ``[(key, raw), ...]``."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument '{tok}'")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"option '{tok}' needs a value")
            key, raw = tok[2:], extra[i + 1]
            i += 2
        out.append((key, raw))
    return out


def load_config(path, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise UsageError(f"cannot parse config {p}: {e}") from e
        if not isinstance(user, dict):
            raise UsageError(f"config {p} must be a mapping")
        _merge(cfg, user)
    for key, raw in overrides:
        _set_dotted(cfg, key, raw)
    # validate eagerly so bad values fail before any work
    ModelConfig.from_dict(cfg["model"]).validate()
    TrainConfig.from_dict(cfg["train"])
    return cfg


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: dict, command: str) -> Path:
    out = _output_dir(cfg)
    path = out / "config.yaml"
    with open(path, "w") as f:
        f.write(f"# resolved config of the last '{command}' run\n")
        yaml.safe_dump(cfg, f, sort_keys=False)
    return path


def _schema(cfg: dict) -> domains.AttributeSchema:
    path = cfg["data"]["schema"]
    if path is None:
        return domains.default_schema()
    p = Path(path)
    if not p.exists():
        raise UsageError(f"schema file not found: {p}")
    return domains.AttributeSchema.from_dict(json.loads(p.read_text()))


def _data_dir(cfg: dict, dom: str) -> Path:
    return Path(cfg["output_dir"]) / "data" / dom


def _manifest(cfg: dict, dom: str, split: str) -> Path:
    p = _data_dir(cfg, dom) / f"{split}.txt"
    if not p.exists():
        raise UsageError(f"manifest not found: {p} (run gen-data first)")
    return p


def _load_split(cfg: dict, dom: str, split: str):
    images, attrs = domains.load_manifest(_manifest(cfg, dom, split), cfg["data"]["image_size"])
    return torch.from_numpy(images), attrs


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: dict, args) -> int:
    schema = _schema(cfg)
    d = cfg["data"]
    spec_1, spec_2 = domains.default_domain_specs(d["n_samples"], d["seed"], d["image_size"], schema)
    for dom, spec, src in (("D1", spec_1, d["d1_dir"]), ("D2", spec_2, d["d2_dir"])):
        out = _data_dir(cfg, dom)
        if src is None:
            images, attrs = domains.build_corpus(schema, spec)
            domains.export_corpus(images, attrs, schema, out, split_seed=d["seed"])
            log.info("%s: %d synthetic %s samples in %s", dom, len(images), spec.style.value, out)
        else:
            _split_directory(Path(src), out, d["seed"])
    if not args.no_probes:
        for dom, style in (("D1", domains.Style.A), ("D2", domains.Style.B)):
            p = cfg["probes"]
            seed = p["seed"] + (0 if dom == "D2" else 1)
            probe = evalkit.train_probes(schema, style, d["image_size"], p["samples"], seed, p["epochs"])
            evalkit.save_probes(probe, Path(cfg["output_dir"]) / f"probes_{dom}.ckpt")
    return 0


def _split_directory(src: Path, out: Path, seed: int) -> None:
    if not src.is_dir():
        raise UsageError(f"image directory not found: {src}")
    files = sorted(p.resolve() for p in src.iterdir() if p.suffix.lower() in domains.RASTER_SUFFIXES)
    if not files:
        raise domains.EmptyCorpusError(f"no images found in {src}")
    out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = domains.train_test_split(len(files), seed)
    for name, idx in (("train", train_idx), ("test", test_idx)):
        with open(out / f"{name}.txt", "w") as f:
            f.writelines(f"{files[i]}\n" for i in idx)
    log.info("%s: split %d images into %d train / %d test", src, len(files), len(train_idx), len(test_idx))


def cmd_train_teacher(cfg: dict, args) -> int:
    images, attrs = _load_split(cfg, "D1", "train")
    if attrs is None:
        raise UsageError("teacher training needs attribute labels (metadata.jsonl) for D1")
    schema = _schema(cfg)
    t = cfg["teacher"]
    tcfg = TeacherConfig(image_size=cfg["data"]["image_size"], widths=tuple(t["widths"]),
                         embed_dim=cfg["model"]["embed_dim"], epochs=t["epochs"], seed=t["seed"])
    teacher, acc = train_teacher(images, attrs, schema.n_options, tcfg)
    path = Path(t["path"] or Path(cfg["output_dir"]) / "teacher.ckpt")
    save_teacher(teacher, path)
    print(json.dumps({"teacher": str(path), "holdout_accuracy": dict(zip(schema.names, acc))}))
    return 0


def _maybe_teacher(cfg: dict, explicit=None):
    path = explicit or cfg["teacher"]["path"] or Path(cfg["output_dir"]) / "teacher.ckpt"
    path = Path(path)
    if path.exists():
        return load_teacher(path)
    if explicit or cfg["teacher"]["path"]:
        raise UsageError(f"teacher checkpoint not found: {path}")
    return None


def cmd_train(cfg: dict, args) -> int:
    model_cfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    x1, _ = _load_split(cfg, "D1", "train")
    x2, _ = _load_split(cfg, "D2", "train")
    teacher = _maybe_teacher(cfg)
    out = Path(cfg["output_dir"])
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, model_cfg, tcfg, teacher=teacher)
        log.info("resuming from %s at step %d", args.resume, state.step)
    ckpt = CheckpointSink(out / "checkpoints", tcfg)
    state = train(tcfg, x1, x2, model_cfg, teacher=teacher,
                  metrics_sink=JsonlSink(out / "metrics.jsonl"), checkpoint_sink=ckpt, state=state)
    ckpt(state)
    print(json.dumps({"step": state.step, "checkpoint": str(out / "checkpoints" / "latest.ckpt")}))
    return 0


def cmd_translate(cfg: dict, args) -> int:
    if args.direction not in ("1to2", "2to1"):
        raise UsageError(f"unknown direction '{args.direction}'; valid: 1to2, 2to1")
    state = load_checkpoint(args.checkpoint, teacher=_maybe_teacher(cfg, args.teacher))
    model = state.model.eval()
    size = model.config.image_size
    src = Path(args.input_dir)
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in domains.RASTER_SUFFIXES)
    images, loaded = domains.load_images(files, size)
    x = torch.from_numpy(images).to(next(model.parameters()).dtype)
    source = DomainId.D1 if args.direction == "1to2" else DomainId.D2
    outputs = evalkit.translate_all(model, x, source)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for p, img in zip(loaded, domains.to_uint8(outputs.numpy())):
        Image.fromarray(img, "RGB").save(out / "images" / f"{p.stem}.png", format="PNG", optimize=False)
    evalkit.sample_grid(model, x[:64], source, out / "grid.png")
    print(json.dumps({"translated": len(loaded), "out": str(out)}))
    return 0


def cmd_eval(cfg: dict, args) -> int:
    for p in (args.probes_2, args.probes_1):
        if p is not None and not Path(p).exists():
            raise UsageError(f"probe file not found: {p}")
    probes_2 = evalkit.load_probes(args.probes_2)
    probes_1 = evalkit.load_probes(args.probes_1) if args.probes_1 else None
    state = load_checkpoint(args.checkpoint, teacher=_maybe_teacher(cfg, args.teacher))
    size = state.model.config.image_size
    t1 = Path(args.test_1) if args.test_1 else _manifest(cfg, "D1", "test")
    t2 = Path(args.test_2) if args.test_2 else _manifest(cfg, "D2", "test")
    x1, a1 = domains.load_manifest(t1, size)
    x2, a2 = domains.load_manifest(t2, size)
    if a1 is None:
        raise UsageError(f"{t1}: attribute labels (metadata.jsonl) are required for evaluation")
    schema = _schema(cfg)
    data = evalkit.BenchmarkData(schema, None, None, torch.from_numpy(x1), torch.from_numpy(x2),
                                 None, a1, a2)
    if a2 is None:
        probes_1 = None
    meta = json.loads(json.dumps(cfg, default=str))
    report = evalkit.evaluate(state.model, data, str(state_mode(args.checkpoint)), cfg["train"]["seed"],
                              evalkit.fingerprint({"config": meta, "checkpoint": str(args.checkpoint)}),
                              probes_2, probes_1)
    path = Path(args.report or Path(cfg["output_dir"]) / "eval.jsonl")
    evalkit.append_report(report, path)
    print(json.dumps(report.to_dict()))
    return 0


def state_mode(checkpoint) -> str:
    meta, _ = read_container(checkpoint, kind="train_state")
    return (meta.get("train_config") or {}).get("mode", "unknown")


def cmd_ablate(cfg: dict, args) -> int:
    a = cfg["ablate"]
    modes = args.modes.split(",") if args.modes else list(a["modes"])
    bad = [m for m in modes if m not in evalkit.ABLATION_MODES]
    if bad:
        raise UsageError(f"unknown mode '{bad[0]}'; valid modes: {', '.join(evalkit.ABLATION_MODES)}")
    d = cfg["data"]
    bcfg = evalkit.BenchmarkConfig(
        n_samples=d["n_samples"], image_size=d["image_size"], data_seed=d["seed"], seeds=tuple(a["seeds"]),
        model=ModelConfig.from_dict(cfg["model"]), train=TrainConfig.from_dict(cfg["train"]),
        teacher_widths=tuple(cfg["teacher"]["widths"]), teacher_epochs=cfg["teacher"]["epochs"],
        probe_samples=cfg["probes"]["samples"], probe_seed=cfg["probes"]["seed"],
        probe_epochs=cfg["probes"]["epochs"],
        high_dann_factor=a["high_dann_factor"])
    out = _output_dir(cfg)
    bench = evalkit.Benchmark(bcfg, _schema(cfg))
    reports = evalkit.ablation_suite(bench, modes, results_path=out / "ablation.jsonl",
                                     metrics_dir=out / "ablation_metrics")
    if not reports:
        raise RuntimeError("every ablation run failed")
    table = evalkit.format_table(reports)
    (out / "ablation_table.txt").write_text(table + "\n")
    print(table)
    return 0


# -- entry point -------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xgan", description="XGAN semantic style transfer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--output-dir", dest="output_dir_flag")

    g = sub.add_parser("gen-data", parents=[common], help="render corpora, manifests and probes")
    g.add_argument("--no-probes", action="store_true", help="skip training the probe classifiers")
    sub.add_parser("train-teacher", parents=[common], help="fit the frozen teacher on D1")
    t = sub.add_parser("train", parents=[common], help="train XGAN")
    t.add_argument("--mode")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    tr = sub.add_parser("translate", parents=[common], help="translate a directory of images")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input-dir", required=True)
    tr.add_argument("--direction", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--teacher")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--probes-2", required=True, help="probes trained on D2-style renders")
    e.add_argument("--probes-1", help="probes for the 2to1 direction")
    e.add_argument("--test-1")
    e.add_argument("--test-2")
    e.add_argument("--report")
    e.add_argument("--teacher")
    ab = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    ab.add_argument("--modes", help="comma-separated list")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = parse_overrides(extra)
        if args.output_dir_flag:
            overrides.append(("output_dir", json.dumps(args.output_dir_flag)))
        for flag, key in (("mode", "train.mode"), ("steps", "train.total_steps"), ("seed", "train.seed")):
            val = getattr(args, flag, None)
            if val is not None:
                overrides.append((key, str(val)))
        cfg = load_config(args.config, overrides)
        echo_config(cfg, args.command)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, domains.SchemaError, CheckpointError, domains.EmptyCorpusError,
            evalkit.ProbeValidityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
