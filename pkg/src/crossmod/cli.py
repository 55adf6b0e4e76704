"""Command-line front end: ``crossmod <subcommand> ...``.

Every subcommand reads an optional JSON config whose sections mirror the
library dataclasses; any field can be overridden with ``--<section>-<field>``.
Each output file carries a provenance block (tool version, effective config
hash, input hashes), and nothing is written outside ``--out``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. Errors go to stderr as one line of JSON.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, CrossmodError, DataError
from .forge import ForgeConfig, emit_jsonl, forge_corpus, read_jsonl, summarize
from .ingest import load_manifest, read_pgm, save_pgm
from .metrics import RouteMetricsReport, SsimParams, evaluate_route
from .prompts import load_pools
from .scoring import read_predictions, score_answers
from .synergy.ablation import SCHEDULES, forge_split, evaluate_schedule, k_sensitivity, run_ablation, seed_context
from .synergy.ablation import toy_forge_config
from .synergy.model import ModelShape, SynergyModel
from .synergy.store import SliceStore
from .synergy.toycorpus import ToyCorpusConfig, gen_toy_corpus, write_toy_corpus
from .synergy.train import CURVE_BLOCK, TrainConfig, synthesize, train_stage1, train_stage2

TOOL = "crossmod"
SEED_ENV = "SYNERMED_SEED"
# published full-scale optimum of the CTS window sweep; context for ksweep, never asserted
K_REFERENCE = {"k_window": 5, "ssim_x100": 74.91, "scale": "full", "asserted": False}


def _forge_defaults() -> dict:
    return toy_forge_config().to_dict()


SECTIONS = {
    "toy": (ToyCorpusConfig, lambda: ToyCorpusConfig().to_dict()),
    "forge": (ForgeConfig, _forge_defaults),
    "ssim": (SsimParams, lambda: {f.name: f.default for f in fields(SsimParams)}),
    "train": (TrainConfig, lambda: TrainConfig().to_dict()),
    "model": (ModelShape, lambda: {f.name: f.default for f in fields(ModelShape)}),
}
USES = {
    "forge": ("forge",),
    "score": (),
    "eval": ("ssim",),
    "toygen": ("toy",),
    "train": ("forge", "train", "model"),
    "sample": ("train",),
    "ablate": ("forge", "train", "model"),
    "ksweep": ("forge", "train", "model"),
}


# ---------------------------------------------------------------- config


def _check_type(section: str, name: str, default: Any, value: Any) -> None:
    where = f"{section}.{name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {json.dumps(value)}")


def _seed_default() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for section, body in doc.items():
        if section == "seed":
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        allowed = {f.name for f in fields(SECTIONS[section][0])}
        extra = set(body) - allowed
        if extra:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    return doc


def effective_config(doc: dict, overrides: dict, top_seed: int | None, sections: Sequence[str]) -> dict:
    """Defaults < config file < flags, per section.

    A section's ``seed`` falls back, in order, to its own flag, ``--seed``,
    the section's config value, the top-level config ``seed``, then the
    ``SYNERMED_SEED`` environment variable.
    """
    if "seed" in doc:
        _check_type("config", "seed", 0, doc["seed"])
    out = {}
    for section in sections:
        defaults = SECTIONS[section][1]()
        values = dict(defaults)
        values.update(doc.get(section, {}))
        flags = overrides.get(section, {})
        values.update(flags)
        if "seed" in values:
            if "seed" in flags:
                pass
            elif top_seed is not None:
                values["seed"] = top_seed
            elif "seed" not in doc.get(section, {}):
                values["seed"] = doc["seed"] if "seed" in doc else _seed_default()
        for name, value in values.items():
            _check_type(section, name, defaults[name], value)
        out[section] = values
    return out


def build(section: str, values: dict):
    """Instantiate a section's dataclass; validation failures become config errors."""
    cls = SECTIONS[section][0]
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (DataError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


# ---------------------------------------------------------------- hashing and output


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"
    path.write_text(text, encoding="utf-8")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return h.hexdigest()


def corpus_digest(manifest_path: Path) -> str:
    """SHA-256 over the manifest bytes and every slice file, in manifest order."""
    manifest = load_manifest(manifest_path)
    h = hashlib.sha256(Path(manifest_path).read_bytes())
    root = Path(manifest.root)
    for vol in manifest.volumes:
        for rel in vol.slice_paths:
            h.update(rel.encode())
            h.update(bytes.fromhex(file_sha256(root / rel)))
    return h.hexdigest()


def checkpoint_digest(directory: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in Path(directory).iterdir() if p.is_file()):
        h.update(path.name.encode())
        h.update(bytes.fromhex(file_sha256(path)))
    return h.hexdigest()


def provenance(config: dict, inputs: dict) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "config_hash": config_hash(config),
        "config": config,
        "inputs": dict(sorted(inputs.items())),
    }


def stamp_line(prov: dict) -> str:
    """Short single-line form for formats that only allow comments."""
    inputs = " ".join(f"{k}={v[:16]}" for k, v in prov["inputs"].items())
    return f"{TOOL} {prov['version']} config={prov['config_hash'][:16]} {inputs}".strip()


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _flag_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p: argparse.ArgumentParser, sections: Sequence[str]) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="seed for every section that has one")
    for section in sections:
        group = p.add_argument_group(f"{section} overrides (JSON values)")
        for f in fields(SECTIONS[section][0]):
            group.add_argument(
                f"--{section}-{f.name.replace('_', '-')}",
                dest=f"cfg__{section}__{f.name}",
                type=_flag_value,
                metavar="V",
            )


def _overrides(args) -> dict:
    out: dict = {}
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, section, name = key.split("__", 2)
            out.setdefault(section, {})[name] = value
    return out


def _int_list(text: str, what: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not out:
        raise ConfigError(f"{what} is empty")
    return out


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description="Paired cross-modality synthesis toolkit.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forge", help="build CTS/MI/TIA instance files from a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pools", help="route description pools JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p, USES["forge"])

    p = sub.add_parser("score", help="score predicted answer letters")
    p.add_argument("--instances", required=True, nargs="+", help="instance JSONL file(s)")
    p.add_argument("--predictions", required=True, help="JSONL of {instance_id, answer}")
    p.add_argument("--out", required=True, help="report JSON file")

    p = sub.add_parser("eval", help="SSIM/PSNR/MAE between prediction and reference slices")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", help="group by route; prediction paths are <pair_id>/<k>.pgm")
    p.add_argument("--out", required=True)
    _add_config_flags(p, USES["eval"])

    p = sub.add_parser("toygen", help="generate the synthetic paired corpus")
    p.add_argument("--out", required=True)
    _add_config_flags(p, USES["toygen"])

    p = sub.add_parser("train", help="train stage I, stage II or both")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--corpus", required=True, help="corpus directory holding manifest.json")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p, USES["train"])

    p = sub.add_parser("sample", help="synthesise target slices from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", help="source PGM (single-slice mode)")
    p.add_argument("--route", help="route id (single-slice mode)")
    p.add_argument("--corpus", help="corpus directory (pair mode)")
    p.add_argument("--pair", help="pair id (pair mode)")
    p.add_argument("--out", required=True, help="PGM file, or a directory in pair mode")
    _add_config_flags(p, USES["sample"])

    p = sub.add_parser("ablate", help="run the training-schedule ablation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--schedules", default=",".join(SCHEDULES))
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p, USES["ablate"])

    p = sub.add_parser("ksweep", help="sweep the CTS window size K")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", default="2,5,10")
    p.add_argument("--out", required=True)
    _add_config_flags(p, USES["ksweep"])
    return parser


def _config(args) -> dict:
    doc = read_config(getattr(args, "config", None))
    return effective_config(doc, _overrides(args), getattr(args, "seed", None), USES[args.command])


def _jobs(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return args.jobs


def _manifest_path(corpus) -> Path:
    path = Path(corpus)
    return path / "manifest.json" if path.is_dir() else path


def _load_store(corpus, jobs: int = 1) -> tuple[SliceStore, str]:
    path = _manifest_path(corpus)
    store = SliceStore.from_manifest(load_manifest(path), jobs=jobs)
    return store, corpus_digest(path)


# ---------------------------------------------------------------- subcommands


def cmd_forge(args) -> dict:
    config = _config(args)
    cfg = build("forge", config["forge"])
    manifest = load_manifest(args.manifest)
    inputs = {"manifest": file_sha256(args.manifest)}
    pools = None
    if args.pools:
        pools = load_pools(args.pools)
        inputs["pools"] = file_sha256(args.pools)
    out = Path(args.out)
    instances = forge_corpus(manifest, cfg, pools, jobs=_jobs(args))
    files = {}
    for task, items in sorted(instances.items()):
        path = out / f"{task.lower()}.jsonl"
        emit_jsonl(items, path)
        files[path.name] = file_sha256(path)
    summary = summarize(instances)
    write_json(out / "forge_summary.json", {**summary, "files": files, "provenance": provenance(config, inputs)})
    return {"instances": summary["tasks"]}


def cmd_score(args) -> dict:
    instances = [inst for path in args.instances for inst in read_jsonl(path)]
    report = score_answers(instances, read_predictions(args.predictions))
    inputs = {f"instances_{i}": file_sha256(p) for i, p in enumerate(args.instances)}
    inputs["predictions"] = file_sha256(args.predictions)
    doc = {**report.to_dict(), "provenance": provenance({}, inputs)}
    write_json(Path(args.out), doc)
    return {"average_accuracy": report.average}


def _pgm_files(directory: Path) -> list[str]:
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(p.relative_to(directory).as_posix() for p in directory.rglob("*.pgm"))


def _route_of(rel: str, pairs: dict) -> tuple[str, Path]:
    """Route and reference path for a prediction stored as ``<pair_id>/<k>.pgm``."""
    parts = rel.split("/")
    if len(parts) != 2 or parts[0] not in pairs:
        raise DataError(f"prediction {rel!r} is not <pair_id>/<k>.pgm for a manifest pair")
    pair = pairs[parts[0]]
    try:
        k = int(Path(parts[1]).stem)
    except ValueError:
        raise DataError(f"prediction {rel!r}: slice index is not an integer") from None
    if not 0 <= k < pair.n_slices:
        raise DataError(f"prediction {rel!r}: slice {k} outside pair {pair.pair_id!r}")
    return pair.route.route_id, Path(pair.tgt.slice_paths[k])


def cmd_eval(args) -> dict:
    config = _config(args)
    p = build("ssim", config["ssim"])
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = _pgm_files(pred_dir)
    if not pred_files:
        raise DataError(f"no .pgm files under {pred_dir}")
    groups: dict[str, list[tuple[str, Path]]] = {}
    inputs = {}
    if args.manifest:
        manifest = load_manifest(args.manifest)
        inputs["manifest"] = file_sha256(args.manifest)
        pairs = {pair.pair_id: pair for pair in manifest.pairs}
        for rel in pred_files:
            route, ref = _route_of(rel, pairs)
            groups.setdefault(route, []).append((rel, ref))
    else:
        gt_files = set(_pgm_files(gt_dir))
        missing = [r for r in pred_files if r not in gt_files]
        if missing:
            raise DataError(f"{len(missing)} predictions have no reference, first {missing[0]!r}")
        groups["all"] = [(rel, Path(rel)) for rel in pred_files]
    h_pred, h_gt = hashlib.sha256(), hashlib.sha256()
    reports: list[RouteMetricsReport] = []
    for route in sorted(groups):
        preds, gts = [], []
        for rel, ref in groups[route]:
            h_pred.update(rel.encode() + bytes.fromhex(file_sha256(pred_dir / rel)))
            h_gt.update(ref.as_posix().encode() + bytes.fromhex(file_sha256(gt_dir / ref)))
            preds.append(read_pgm(pred_dir / rel))
            gts.append(read_pgm(gt_dir / ref))
        reports.append(evaluate_route(preds, gts, p, route_id=route))
    inputs.update(pred=h_pred.hexdigest(), gt=h_gt.hexdigest())
    prov = provenance(config, inputs)
    out = Path(args.out)
    write_json(out / "metrics.json", {"routes": [r.to_dict() for r in reports], "provenance": prov})
    buf = io.StringIO()
    buf.write(f"# {stamp_line(prov)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RouteMetricsReport.CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    write_text(out / "metrics.csv", buf.getvalue())
    return {r.route_id: r.ssim.mean for r in reports}


def cmd_toygen(args) -> dict:
    config = _config(args)
    cfg = build("toy", config["toy"])
    prov = provenance(config, {})
    corpus = gen_toy_corpus(cfg)
    path = write_toy_corpus(corpus, Path(args.out), provenance=prov, comment=stamp_line(prov))
    return {"manifest": str(path), "volumes": len(corpus.volumes)}


def _curve_rows(stage: str, unit: str, values: Sequence[float], scale: int = 1) -> list[list]:
    return [[stage, unit, (i + 1) * scale, f"{v:.10g}"] for i, v in enumerate(values)]


def cmd_train(args) -> dict:
    config = _config(args)
    forge_cfg = build("forge", config["forge"])
    cfg = build("train", config["train"])
    shape = build("model", config["model"])
    jobs = _jobs(args)
    store, digest = _load_store(args.corpus, jobs)
    inputs = {"corpus": digest}
    ctx = seed_context(store, cfg.seed, cfg, shape)
    model = ctx.init.copy()
    if args.init:
        init_dir = _checkpoint_dir(args.init)
        model = SynergyModel.load(init_dir)
        if model.shape != shape:
            raise ConfigError("--init checkpoint shape differs from the model config")
        inputs["init"] = checkpoint_digest(init_dir)
        ctx.inputs = (store.raw_inputs() - model.input_mean) / model.input_scale
    prov = provenance(config, inputs)
    out = Path(args.out)
    rows: list[list] = []
    summary: dict = {"stage": args.stage, "train_patients": len(ctx.train_patients), "heldout_patients": len(ctx.heldout_patients)}
    heldout = forge_split(store, ctx.heldout_patients, forge_cfg)
    if args.stage in ("1", "both"):
        train = forge_split(store, ctx.train_patients, forge_cfg)
        result = train_stage1(model, train, ctx.inputs, cfg, heldout)
        model.save(out / "stage1", provenance=prov)
        rows += _curve_rows("stage1", "epoch", result.epoch_loss)
        summary["stage1"] = {
            "train_accuracy": result.train_accuracy,
            "heldout_accuracy": result.heldout_accuracy,
            "final_loss": result.epoch_loss[-1] if result.epoch_loss else math.nan,
        }
    if args.stage in ("2", "both"):
        rows_ = ctx.train_rows
        res2 = train_stage2(
            model, ctx.inputs[rows_[:, 0]], store.latents()[rows_[:, 1]], rows_[:, 2], cfg
        )
        model.save(out / "stage2", provenance=prov)
        rows += _curve_rows("stage2", "step", res2.loss_curve, CURVE_BLOCK)
        evaluation = evaluate_schedule(store, ctx, model, cfg)
        summary["stage2"] = {"heldout": evaluation["overall"], "routes": evaluation["routes"], "fm_loss": evaluation["fm_loss"]}
    buf = io.StringIO()
    buf.write(f"# {stamp_line(prov)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stage", "unit", "index", "loss"))
    w.writerows(rows)
    write_text(out / "curves.csv", buf.getvalue())
    write_json(out / "train_summary.json", {**summary, "provenance": prov})
    return {k: v for k, v in summary.items() if k in ("stage1", "stage2")}


def _checkpoint_dir(path) -> Path:
    """A model directory, or a ``train`` output holding ``stage2``/``stage1``."""
    path = Path(path)
    if (path / "model.json").is_file():
        return path
    for name in ("stage2", "stage1"):
        if (path / name / "model.json").is_file():
            return path / name
    raise DataError(f"no checkpoint under {path}")


def cmd_sample(args) -> dict:
    config = _config(args)
    cfg = build("train", config["train"])
    ckpt = _checkpoint_dir(args.ckpt)
    model = SynergyModel.load(ckpt)
    inputs = {"ckpt": checkpoint_digest(ckpt)}
    if args.src and args.route:
        if args.corpus or args.pair:
            raise ConfigError("use either --src/--route or --corpus/--pair")
        inputs["src"] = file_sha256(args.src)
        prov = provenance(config, {**inputs, "route": hashlib.sha256(args.route.encode()).hexdigest()})
        img = synthesize(model, read_pgm(args.src), args.route, cfg.seed, cfg.sample_steps, cfg.t_end)
        save_pgm(Path(args.out), img, comment=stamp_line(prov))
        return {"out": args.out}
    if not (args.corpus and args.pair) or args.src or args.route:
        raise ConfigError("sample needs --src and --route, or --corpus and --pair")
    path = _manifest_path(args.corpus)
    manifest = load_manifest(path)
    pairs = {p.pair_id: p for p in manifest.pairs}
    if args.pair not in pairs:
        raise DataError(f"unknown pair {args.pair!r}")
    pair = pairs[args.pair]
    inputs["corpus"] = corpus_digest(path)
    prov = provenance(config, inputs)
    root = Path(manifest.root)
    out = Path(args.out) / pair.pair_id
    for k, rel in enumerate(pair.src.slice_paths):
        img = synthesize(model, read_pgm(root / rel), pair.route.route_id, cfg.seed, cfg.sample_steps, cfg.t_end)
        save_pgm(out / f"{k:03d}.pgm", img, comment=stamp_line(prov))
    return {"out": str(out), "slices": pair.n_slices}


def cmd_ablate(args) -> dict:
    config = _config(args)
    forge_cfg = build("forge", config["forge"])
    cfg = build("train", config["train"])
    shape = build("model", config["model"])
    seeds = _int_list(args.seeds, "--seeds")
    schedules = [s.strip() for s in args.schedules.split(",") if s.strip()]
    jobs = _jobs(args)
    store, digest = _load_store(args.corpus, jobs)
    config = {**config, "ablate": {"seeds": seeds, "schedules": schedules}}
    prov = provenance(config, {"corpus": digest})
    report = run_ablation(store, schedules, seeds, forge_cfg, cfg, shape, jobs=jobs)
    out = Path(args.out)
    doc = report.to_dict()
    doc["config"] = config
    write_json(out / "report.json", {**doc, "provenance": prov})
    write_text(out / "report.csv", f"# {stamp_line(prov)}\n" + report.to_csv())
    return report.checks()


def cmd_ksweep(args) -> dict:
    config = _config(args)
    forge_cfg = build("forge", config["forge"])
    cfg = build("train", config["train"])
    shape = build("model", config["model"])
    ks = _int_list(args.k, "--k")
    store, digest = _load_store(args.corpus)
    config = {**config, "ksweep": {"k": ks}}
    prov = provenance(config, {"corpus": digest})
    rows = k_sensitivity(store, ks, forge_cfg, cfg, cfg.seed, shape)
    out = Path(args.out)
    write_json(out / "ksweep.json", {"rows": rows, "reference": K_REFERENCE, "provenance": prov})
    buf = io.StringIO()
    buf.write(f"# {stamp_line(prov)}\n")
    w = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] if isinstance(r[h], int) else f"{r[h]:.4f}" for h in header])
    write_text(out / "ksweep.csv", buf.getvalue())
    return {"rows": len(rows)}


COMMANDS = {
    "forge": cmd_forge,
    "score": cmd_score,
    "eval": cmd_eval,
    "toygen": cmd_toygen,
    "train": cmd_train,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "ksweep": cmd_ksweep,
}


def _error_line(exc: Exception, code: int) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("pointer", "step"):
        value = getattr(exc, attr, None)
        if value not in (None, ""):
            doc[attr] = value
    return json.dumps(doc, sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = make_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except CrossmodError as exc:
        print(_error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_line(exc, DataError.exit_code), file=sys.stderr)
        return DataError.exit_code
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
