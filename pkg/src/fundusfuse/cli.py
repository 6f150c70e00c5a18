"""Command-line entry point: ``fundusfuse {synth,train,eval,ablate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    NEGATIVE_NOTE,
    SPLITS,
    StructuredStats,
    fit_structured_stats,
    label_order,
    load_manifest,
    load_templates,
    patient_split,
)
from .dataset import ExamDataset
from .errors import CheckpointError, ConfigError, DataError, FundusFuseError, IncompatibleConfig
from .evaluation import (
    evaluate_classification,
    evaluate_retrieval,
    run_ablation,
    write_ablation,
    write_report,
    zero_shot_transfer,
)
from .model import parameter_report
from .tokenizer import Tokenizer
from .training import enabled_modalities, fit, read_history, restore_model, write_history

LOGGER = logging.getLogger("fundusfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass
class PreparedData:
    cfg: RunConfig
    tokenizer: Tokenizer
    templates: dict
    labels: list
    stats: StructuredStats
    datasets: dict  # split name -> ExamDataset
    split: dict

    def meta(self) -> dict:
        return {
            "stats": self.stats.to_dict(),
            "vocab": self.tokenizer.vocab,
            "labels": self.labels,
            "templates": self.templates,
            "split": self.split,
        }


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is not set")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def prepare(cfg: RunConfig) -> PreparedData:
    """Load manifest and templates, split by patient, fit statistics on train, build datasets."""
    manifest = _require(cfg.paths.manifest, "manifest")
    templates = load_templates(_require(cfg.paths.templates, "template table"))
    records = load_manifest(manifest)
    labels = label_order(records)
    if cfg.paths.vocab:
        tokenizer = Tokenizer.load(cfg.paths.vocab, cfg.encoder.max_tokens)
    else:
        tokenizer = Tokenizer.build(list(templates.values()) + [NEGATIVE_NOTE], cfg.encoder.max_tokens)
    cfg.encoder.vocab_size = len(tokenizer)
    ratios = (cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio)
    split = patient_split(records, ratios, cfg.train.seed)
    parts = {s: split.select(records, s) for s in SPLITS}
    stats = fit_structured_stats(parts["train"])
    side = cfg.encoder.image_side
    datasets = {s: ExamDataset(parts[s], stats, tokenizer, templates, side, labels) for s in SPLITS}
    return PreparedData(cfg, tokenizer, templates, labels, stats, datasets, split.assignment)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "manifest", None):
        cfg.paths.manifest = str(Path(args.manifest).resolve())
    if getattr(args, "out", None):
        cfg.paths.out = str(Path(args.out).resolve())
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if not cfg.paths.out:
        raise ConfigError("no output directory (set paths.out or pass --out)")
    Path(cfg.paths.out).mkdir(parents=True, exist_ok=True)
    return cfg


def cmd_synth(args) -> int:
    from .synth import write_dataset

    manifest = write_dataset(args.out, args.n_patients, args.seed, args.image_side, args.exams_per_patient)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = prepare(cfg)
    out = Path(cfg.paths.out)
    cfg.save(out / "resolved_config.txt")
    data.tokenizer.save(out / "vocab.txt")
    result = fit(cfg, data.datasets["train"], data.datasets["val"], meta=data.meta())
    save_checkpoint(out / "checkpoint.bin", result.checkpoint)
    write_history(out / "history.csv", result.history)
    (out / "parameters.json").write_text(json.dumps(parameter_report(result.model), indent=2))
    print(f"trained {len(result.history)} epochs; best epoch {result.checkpoint.epoch} "
          f"val {result.checkpoint.best_val_loss:.4f}; outputs in {out}")
    return EXIT_OK


def _restore(ckpt):
    meta = ckpt.meta
    tokenizer = Tokenizer(meta["vocab"], ckpt.config.encoder.max_tokens)
    stats = StructuredStats.from_dict(meta["stats"])
    return restore_model(ckpt), tokenizer, stats, meta


def cmd_eval(args) -> int:
    expected = RunConfig.load(args.config) if args.config else None
    ckpt = load_checkpoint(args.checkpoint, expected)
    cfg = ckpt.config
    model, tokenizer, stats, meta = _restore(ckpt)
    out = Path(args.out or cfg.paths.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    protocol = args.protocol or cfg.eval.protocol
    mods = enabled_modalities(cfg.train)
    manifest = args.manifest or cfg.paths.manifest
    if not manifest:
        raise ConfigError("no manifest given")
    records = load_manifest(manifest)
    if args.zero_shot:
        retrieval = zero_shot_transfer(model, records, stats, tokenizer, meta["templates"], meta["labels"],
                                       protocol, mods)
        dataset = ExamDataset(records, stats, tokenizer, meta["templates"], cfg.encoder.image_side, meta["labels"])
    else:
        split = args.split or cfg.eval.split
        if split != "all":
            assignment = meta.get("split", {})
            records = [r for r in records if assignment.get(r.patient_id) == split]
        dataset = ExamDataset(records, stats, tokenizer, meta["templates"], cfg.encoder.image_side, meta["labels"])
        retrieval = None
        if {"image", "text"} <= set(mods):
            retrieval = evaluate_retrieval(model, dataset, protocol, mods, cfg.eval.image_to_text)
    classification = evaluate_classification(model, dataset, mods)
    if retrieval is not None:
        write_report(out / "retrieval.json", retrieval)
        print(json.dumps(retrieval.to_dict()))
    write_report(out / "classification.json", classification)
    print(f"SDRG {classification.sdrg_accuracy:.2f}%  ICDR {classification.icdr_accuracy:.2f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    data = prepare(cfg)
    out = Path(cfg.paths.out)
    cfg.save(out / "resolved_config.txt")
    d = data.datasets
    eval_split = cfg.eval.split if cfg.eval.split in SPLITS else "test"
    rows = run_ablation(cfg, args.axis, d["train"], d["val"], d[eval_split], cfg.eval.repeats, cfg.eval.protocol)
    write_ablation(rows, out / f"ablation_{args.axis}.csv", out / f"ablation_{args.axis}.json")
    for r in rows:
        r1 = "-" if r.r_at_1 is None else f"{r.r_at_1:.2f}"
        print(f"{r.configuration:20s} R@1 {r1:>7s}  SDRG {r.sdrg}  ICDR {r.icdr}  {r.error}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_confusion, plot_history, plot_retrieval

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.history:
        written += plot_history(read_history(args.history), out)
    for path in args.report or []:
        report = json.loads(Path(path).read_text())
        if "recall_at" in report:
            written.append(plot_retrieval(report, out))
        elif "confusion_sdrg" in report:
            written += plot_confusion(report, out)
        else:
            raise DataError(f"unrecognised report file {path}")
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundusfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-patients", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--exams-per-patient", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and grading reports for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--config", help="verify the checkpoint against this config")
    p.add_argument("--out")
    p.add_argument("--protocol", choices=("paired", "isolated"))
    p.add_argument("--split", choices=SPLITS + ("all",))
    p.add_argument("--zero-shot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="modality or loss ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=("modality", "loss"), required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="figures from history and report files")
    p.add_argument("--history")
    p.add_argument("--report", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IncompatibleConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FundusFuseError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
