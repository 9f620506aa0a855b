"""Command line entry point: synth | train | generate | evaluate | probe.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .dataset import (DatasetError, SynthSpec, example_from_row, export_manifest, images_to_tensor, load_manifest,
                      read_manifest_rows, synthesize_dataset)
from .experiments import evaluate_checkpoint
from .generator import generate_batch
from .knowledge import KnowledgeError, RegionTag, load_knowledge
from .metrics.probe import linear_probe
from .metrics.report import evaluate_reports
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("s4m")


class UsageError(Exception):
    pass


# -- config handling ---------------------------------------------------------------

def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are read as JSON when possible."""
    out = json.loads(json.dumps(config))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override inside non-table key {part!r}")
        node[parts[-1]] = parse_value(raw)
    return out


def run_dir(root: Path, config: dict) -> Path:
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:8]
    path = root / f"{time.strftime('%Y%m%d-%H%M%S')}-{digest}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def resolve_manifest(arg: str | None) -> Path:
    if arg is None:
        data_dir = os.environ.get("S4M_DATA_DIR")
        if not data_dir:
            raise UsageError("no manifest given and S4M_DATA_DIR is not set")
        arg = data_dir
    path = Path(arg)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return path


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.spec:
        try:
            spec = SynthSpec.from_dict(read_config_file(args.spec))
        except (DatasetError, ValueError, TypeError) as exc:
            raise UsageError(f"bad synth spec: {exc}") from None
    dataset = synthesize_dataset(spec, seed=args.seed)
    manifest = export_manifest(dataset, args.out)
    counts = {s: len(dataset.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(dataset)} examples to {manifest} {counts}")
    return 0


def cmd_train(args) -> int:
    raw = apply_overrides(read_config_file(args.config), args.override)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = TrainConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    dataset = load_manifest(resolve_manifest(args.data), filter_length=args.filter_length)
    out = run_dir(Path(args.out_root), config.to_dict())
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    ckpt = train(config, dataset, load_knowledge(), log_path=out / "train.jsonl")
    save_checkpoint(ckpt, out / "model.s4m")
    if dataset.val:
        report = evaluate_checkpoint(ckpt, dataset.val)
        report.metadata.update(split="val", ablation=config.ablation, seed=config.seed)
        (out / "val_report.json").write_text(report.to_json())
        print(report.to_table())
    print(f"run directory: {out}")
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = resolve_manifest(args.manifest)
    root = manifest.parent
    size = ckpt.model.config.image_size
    try:
        default_tag = RegionTag.parse(args.tag).value if args.tag else None
    except KnowledgeError as exc:
        raise UsageError(str(exc)) from None
    failures = 0
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for lineno, row in read_manifest_rows(manifest):
            if args.split and row.get("split", "train") != args.split:
                continue
            rid = str(row.get("id", f"row{lineno}"))
            try:
                ex = example_from_row(row, root, lineno, size, default_tag=default_tag)
                hyp = _generate_one(ckpt, ex, args)
                record = {"id": ex.id, "tag": ex.tag.value, "hypothesis": hyp, "reference": ex.report}
            except (DatasetError, KnowledgeError) as exc:
                failures += 1
                record = {"id": rid, "error": str(exc)}
                logger.error("%s: %s", rid, exc)
            out.write(json.dumps(record) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if failures:
        print(f"{failures} example(s) failed", file=sys.stderr)
        return 1
    return 0


def _generate_one(ckpt, ex, args) -> str:
    images = images_to_tensor(ex.images[None])
    return generate_batch(ckpt.model, ckpt.vocab, images, [ex.tag], args.max_len, args.beam,
                          args.length_penalty)[0]


def cmd_evaluate(args) -> int:
    manifest = resolve_manifest(args.manifest)
    refs = {}
    for lineno, row in read_manifest_rows(manifest):
        refs[str(row.get("id", f"row{lineno}"))] = row
    hyps, references, tags = [], [], []
    for lineno, line in enumerate(Path(args.hypotheses).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "error" in rec:
            logger.warning("skipping failed example %s", rec.get("id"))
            continue
        if rec["id"] not in refs:
            raise DatasetError(f"{args.hypotheses}:{lineno}: id {rec['id']!r} not in {manifest}")
        row = refs[rec["id"]]
        hyps.append(rec["hypothesis"])
        references.append([row["report"]])
        tags.append(RegionTag.parse(row.get("tag", rec.get("tag"))))
    if not hyps:
        raise DatasetError("no hypotheses to evaluate")
    report = evaluate_reports(hyps, references, tags, {"hypotheses": str(args.hypotheses), "n": len(hyps)})
    table = report.to_table()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(report.to_json())
        (out / "eval.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_manifest(resolve_manifest(args.manifest), image_size=ckpt.model.config.image_size)
    if not dataset.finding_names:
        raise DatasetError("manifest has no labels to probe")
    result = linear_probe(ckpt.model, dataset, epochs=args.epochs, seed=args.seed)
    print(result.to_table())
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s4m", description="Multi-region radiology report generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset (manifest + PNGs)")
    s.add_argument("--spec", help="JSON/TOML synthesis spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config", help="JSON/TOML file with TrainConfig fields")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--data", help="manifest or dataset dir (default: $S4M_DATA_DIR)")
    t.add_argument("--out-root", default="runs")
    t.add_argument("--seed", type=int)
    t.add_argument("--filter-length", action="store_true", help="drop reports outside 30-60 tokens")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="write JSONL hypotheses for a manifest")
    g.add_argument("checkpoint")
    g.add_argument("manifest", nargs="?")
    g.add_argument("--tag", help="region tag for rows that have none")
    g.add_argument("--beam", type=int, default=1)
    g.add_argument("--length-penalty", type=float, default=0.0)
    g.add_argument("--max-len", type=int)
    g.add_argument("--split", choices=("train", "val", "test"))
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score hypotheses against manifest reports")
    e.add_argument("hypotheses")
    e.add_argument("manifest", nargs="?")
    e.add_argument("--out", help="directory for eval.json and eval.txt")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("probe", help="linear-probe AUC of the frozen image encoder")
    pr.add_argument("checkpoint")
    pr.add_argument("manifest", nargs="?")
    pr.add_argument("--epochs", type=int, default=300)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "beam", 1) < 1:
        parser.error("--beam must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"s4m: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, KnowledgeError, CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"s4m: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
