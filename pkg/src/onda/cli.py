"""Command-line workflow: gen-data, pretrain, run, grid, pareto, inspect.

Exit codes: 0 success, 1 user error (bad config, missing file, failed
stage), 2 internal error. Progress goes to stderr; results go to files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, PipelineConfig, apply_overrides, grid_configs, pipeline_config,
                     read_yaml, synth_config)
from .datasim import DatasetError, dataset_digest, generate, load_dataset, save_dataset
from .evaluation import (NoCompressionError, PARETO_COLUMNS, ParetoPoint, compression_at_iso_performance,
                         pareto_front, write_csv)
from .model import CheckpointError, SpecError, load_checkpoint, mac_count, param_count, save_checkpoint
from .pipeline import PipelineReport, StageError, run_grid, run_pipeline, stage_pretrain
from .pruning import PruningError

log = logging.getLogger("onda")

USER_ERRORS = (ConfigError, DatasetError, CheckpointError, SpecError, PruningError, StageError,
               FileNotFoundError, FileExistsError)

DATASET_FILE = "dataset.onda"


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Output:
    """Write-once output directory that records every file in manifest.json."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists():
            raise FileExistsError(f"{p} already exists; outputs are write-once, choose a fresh --out")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=1, sort_keys=True, default=_plain) + "\n")

    def manifest(self, command: str, config: dict, seeds, inputs: dict[str, Path] | None = None) -> Path:
        m = {
            "command": command, "version": __version__, "config": config, "seeds": seeds,
            "inputs": {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in (inputs or {}).items()},
            "files": {str(p.relative_to(self.root)): _sha256(p) for p in self.files},
        }
        p = self.root / "manifest.json"
        if p.exists():
            raise FileExistsError(f"{p} already exists; outputs are write-once, choose a fresh --out")
        p.write_text(json.dumps(m, indent=1, sort_keys=True, default=_plain) + "\n")
        return p


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _config_dict(args) -> dict:
    d = read_yaml(args.config) if args.config else {}
    return apply_overrides(d, args.set)


def _split(d: dict) -> tuple[dict, dict, dict | None]:
    """(pipeline keys, synth section, grid section)."""
    d = dict(d)
    synth = d.pop("synth", None) or {}
    grid = d.pop("grid", None)
    return d, synth, grid


def _pipeline_cfg(d: dict, seed: int | None) -> PipelineConfig:
    cfg = pipeline_config(d)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _load_data(args, cfg_data: str | None, synth: dict):
    """Dataset from --data, else the config's data path, else generated from the synth section."""
    path = args.data or cfg_data
    if path:
        log.info("loading dataset %s", path)
        return load_dataset(path), Path(path)
    log.info("no dataset path given; generating from the synth section")
    return generate(synth_config(synth)), None


def _echo(cfg: PipelineConfig, synth: dict, src) -> dict:
    """Config echo; the synth section is included when the data were generated in-process."""
    d = cfg.to_dict()
    if src is None:
        d["synth"] = synth_config(synth).to_dict()
    return d


def _seeds(run, synth: dict, src) -> dict:
    """Seeds for the manifest; the data seed is recorded when the data were generated here."""
    out = {"run": run}
    if src is None:
        out["synth"] = synth_config(synth).seed
    return out


def _report_files(out: Output, name: str, report: PipelineReport):
    out.write_text(f"{name}.json", report.to_json() + "\n")
    out.write_json(f"{name}.timings.json", report.timings)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    d, synth, _ = _split(_config_dict(args))
    if args.seed is not None:
        synth = {**synth, "seed": args.seed}
    scfg = synth_config(synth).validate()
    pre, subjects = generate(scfg)
    out = Output(args.out)
    save_dataset(out.path(DATASET_FILE), pre, subjects, scfg)
    out.write_json("dataset_summary.json", {
        "digest": dataset_digest(pre, subjects), "pretrain_samples": len(pre),
        "pretrain_classes": pre.n_classes, "subjects": len(subjects),
        "feature_shape": list(scfg.feature_shape)})
    out.manifest("gen-data", {"synth": scfg.to_dict()}, {"synth": scfg.seed})
    log.info("wrote %s", out.root / DATASET_FILE)
    return 0


def cmd_pretrain(args) -> int:
    d, synth, _ = _split(_config_dict(args))
    cfg = _pipeline_cfg({**d, "variant": "Baseline", "online_ratio": None}, args.seed)
    (pre, _), src = _load_data(args, cfg.data, synth)
    model, rec = stage_pretrain(cfg, pre)
    out = Output(args.out)
    save_checkpoint(model, out.path("pretrained.ckpt"))
    out.write_json("pretrain_report.json", {"config": cfg.to_dict(), "seed": cfg.seed, "stage": rec,
                                            "model_digest": model.digest()})
    out.manifest("pretrain", _echo(cfg, synth, src), _seeds(cfg.seed, synth, src), {"data": src} if src else None)
    return 0


def cmd_run(args) -> int:
    d, synth, _ = _split(_config_dict(args))
    cfg = _pipeline_cfg(d, args.seed)
    data, src = _load_data(args, cfg.data, synth)
    log.info("running %s", cfg.run_id())
    report = run_pipeline(cfg, data)
    out = Output(args.out)
    _report_files(out, "report", report)
    out.manifest("run", _echo(cfg, synth, src), _seeds(cfg.seed, synth, src), {"data": src} if src else None)
    log.info("accuracy %.4f (zero-shot %.4f), %s params",
             report.payload["accuracy"], report.payload["accuracy_before"], report.payload["final_params"])
    return 0


def grid_rows(reports: list[PipelineReport]) -> list[dict]:
    rows = []
    for r in reports:
        p = r.payload
        c = p["config"]
        rows.append({"run_id": p["run_id"], "variant": p["variant"], "arch": c["arch"],
                     "offline_ratio": c["offline_ratio"], "online_ratio": c["online_ratio"],
                     "seed": p["seed"], "size": p.get("final_params"), "macs": p.get("final_macs"),
                     "accuracy": p.get("accuracy"), "far_h": p.get("target_far_h"),
                     "pareto": "", "error": p.get("error") or ""})
    return rows


def cmd_grid(args) -> int:
    d, synth, grid = _split(_config_dict(args))
    if args.seeds:
        grid = {**(grid or {}), "seeds": [int(s) for s in args.seeds.split(",")]}
    cfgs = grid_configs({**d, "grid": grid})
    data, src = _load_data(args, d.get("data"), synth)
    log.info("grid of %d runs on %d worker(s)", len(cfgs), args.workers)
    progress = lambda i, n, c: log.info("[%d/%d] %s", i + 1, n, c.run_id())
    reports = run_grid(cfgs, data, workers=args.workers, progress=progress)
    out = Output(args.out)
    for r in reports:
        _report_files(out, f"reports/{r.run_id}", r)
    out.write_text("results.csv", write_csv(grid_rows(reports), PARETO_COLUMNS + ("error",)))
    failed = [r.run_id for r in reports if r.payload.get("error")]
    for rid in failed:
        log.warning("run %s failed: %s", rid, next(r for r in reports if r.run_id == rid).payload["error"])
    echo = {"base": d, "grid": grid, "synth": None if src else synth_config(synth).to_dict()}
    out.manifest("grid", echo, _seeds(sorted({c.seed for c in cfgs}), synth, src), {"data": src} if src else None)
    return 0


def pareto_summary(reports: list[dict]) -> tuple[list[dict], dict]:
    """Seed-averaged points per configuration, per-arch fronts and iso-performance compression."""
    groups = defaultdict(list)
    for p in reports:
        if p.get("error") or p.get("accuracy") is None:
            continue
        c = p["config"]
        groups[(c["arch"], p["variant"], c["offline_ratio"], c["online_ratio"])].append(p)
    rows = []
    for (arch, variant, off, on), ps in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        rows.append({"run_id": "_".join(sorted({q["run_id"].rsplit("_s", 1)[0] for q in ps})),
                     "variant": variant, "arch": arch, "offline_ratio": off, "online_ratio": on,
                     "seed": ";".join(str(q["seed"]) for q in sorted(ps, key=lambda q: q["seed"])),
                     "size": float(np.mean([q["final_params"] for q in ps])),
                     "macs": float(np.mean([q["final_macs"] for q in ps])),
                     "accuracy": float(np.mean([q["accuracy"] for q in ps])),
                     "far_h": ps[0]["target_far_h"], "pareto": False})
    summary = {}
    for arch in sorted({r["arch"] for r in rows}):
        mine = [r for r in rows if r["arch"] == arch]
        pts = [ParetoPoint(r["size"], r["accuracy"], r["run_id"]) for r in mine]
        front = pareto_front(pts)
        on_front = {p.provenance for p in front}
        for r in mine:
            r["pareto"] = r["run_id"] in on_front
        entry = {"front": [r["run_id"] for r in mine if r["pareto"]]}
        base = [r for r in mine if r["variant"] == "Baseline"]
        if base:
            b = ParetoPoint(base[0]["size"], base[0]["accuracy"], base[0]["run_id"])
            entry["baseline"] = {"size": b.model_size, "accuracy": b.accuracy}
            try:
                entry["iso_compression"] = compression_at_iso_performance(front, b)
            except NoCompressionError as e:
                entry["iso_compression"] = None
                entry["note"] = str(e)
        summary[arch] = entry
    return rows, summary


def cmd_pareto(args) -> int:
    src = Path(args.reports)
    files = sorted(p for p in src.rglob("*.json") if not p.name.endswith(".timings.json")
                   and p.name != "manifest.json")
    reports = []
    for f in files:
        try:
            p = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{f} is not valid JSON: {e}") from None
        if isinstance(p, dict) and "run_id" in p and "variant" in p:
            reports.append(p)
    if not reports:
        raise ConfigError(f"no pipeline reports found under {src}")
    rows, summary = pareto_summary(reports)
    out = Output(args.out)
    out.write_text("pareto.csv", write_csv(rows))
    out.write_json("summary.json", summary)
    out.manifest("pareto", {"reports": str(src)}, {"run": sorted({p["seed"] for p in reports})})
    return 0


def describe(path: Path) -> str:
    raw = path.read_bytes()
    if raw.startswith(b"ONDACKPT"):
        m = load_checkpoint(path)
        lines = [f"checkpoint {path}", f"arch {m.spec.family}, embedding dim {m.embedding_dim}, "
                 f"input {list(m.spec.input_shape)}", f"params {param_count(m)}, MACs {mac_count(m)}",
                 f"digest {m.digest()}"]
        for i, blk in enumerate(m.spec.blocks):
            width = f" out={blk.out_channels}" if blk.out_channels else ""
            lines.append(f"  L{i} {blk.kind}{width} k={blk.kernel[0]}x{blk.kernel[1]} s={blk.stride}"
                         + (f" group={blk.group_id}" if blk.group_id else ""))
        return "\n".join(lines)
    if raw.startswith(b"ONDADATA"):
        from .datasim import read_header
        h = read_header(path)
        return f"dataset {path}\nseed {h['seed']}, subjects {h['n_subjects']}\n" + "\n".join(
            f"  {a['name']} {a['shape']}" for a in h["arrays"])
    try:
        d = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ConfigError(f"{path} is not a checkpoint, dataset, plan or report") from None
    if isinstance(d, dict) and "removals" in d:
        return (f"plan ({d['criterion']}) target {d['target_ratio']} achieved {d['achieved_ratio']:.4f}\n"
                f"removed {len(d['removals'])} channels\n"
                f"model {d['model_digest']} scores {d['scores_digest']} data {d['data_digest'] or '(none)'}")
    if isinstance(d, dict) and "run_id" in d:
        if d.get("error"):
            return f"report {d['run_id']}: FAILED {d['error']}"
        lines = [f"report {d['run_id']}", "stages " + " -> ".join(d["stage_order"]),
                 f"params {d['pretrained_params']} -> {d['final_params']}",
                 f"accuracy@FAR{d['target_far_h']} {d['accuracy']:.4f} (zero-shot {d['accuracy_before']:.4f})"]
        for s in d["subjects"]:
            plans = [st for st in s["stages"] if "plan" in st]
            lines.append(f"  subject {s['subject']}: acc {s['accuracy']:.3f} params {s['params']}"
                         + "".join(f" [{st['stage']} {st['plan']['criterion']} ratio {st['achieved_ratio']:.3f}"
                                   f" data {st['data_digest'] or '(none)'}]" for st in plans))
        return "\n".join(lines)
    raise ConfigError(f"{path} is JSON but not a plan or report")


def cmd_inspect(args) -> int:
    print(describe(Path(args.path)))
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="onda", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more progress on stderr")
    ap.add_argument("-q", "--quiet", action="store_true", help="errors only")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. finetune.lr=0.01 (repeatable)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", help="dataset file written by gen-data")

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"), data=False)
    common(sub.add_parser("pretrain", help="B1 only: write a pretrained checkpoint"))
    common(sub.add_parser("run", help="run one pipeline variant"))
    g = sub.add_parser("grid", help="run the configured experiment lattice")
    common(g)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seeds", help="comma-separated seeds, overrides grid.seeds")
    p = sub.add_parser("pareto", help="Pareto front and iso-performance compression from reports")
    p.add_argument("reports", help="directory containing report JSON files")
    p.add_argument("--out", required=True)
    i = sub.add_parser("inspect", help="describe a checkpoint, dataset, plan or report")
    i.add_argument("path")
    return ap


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "run": cmd_run, "grid": cmd_grid,
            "pareto": cmd_pareto, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as e:
        print(f"onda {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        log.exception("internal error")
        print(f"onda {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
