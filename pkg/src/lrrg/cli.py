"""Command-line entry point: gen-data, train, eval, generate, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ABLATIONS, RunConfig
from .gradcheck import run_gradchecks
from .metrics import append_csv
from .synth import generate_corpus, load_corpus, save_corpus, select_split
from .train import EVAL_FIELDS, evaluate, train

log = logging.getLogger("lrrg")

SUMMARY_FIELDS = ("ablation", "split", "n_seeds", "ce_f1_micro", "ce_f1_micro_std", "ce_f1_macro",
                  "progression_f1_micro", "progression_f1_micro_std", "bleu1", "bleu4", "rougeL")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "precision", None):
        changes["precision"] = args.precision
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "data", None):
        changes["train_dir"] = str(Path(args.data) / "train")
        changes["test_dir"] = str(Path(args.data) / "test")
    cfg = cfg.replace(**changes)
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = Path(args.out or "data")
    train_c = generate_corpus(cfg.seed, args.train_patients or cfg.n_train_patients, cfg.visits_per_patient,
                              cfg.prior_fraction)
    test_c = generate_corpus(cfg.seed + 100_000, args.test_patients or cfg.n_test_patients,
                             cfg.visits_per_patient, cfg.prior_fraction)
    save_corpus(train_c, root / "train")
    save_corpus(test_c, root / "test")
    print(f"wrote {len(train_c)} train ({train_c.n_with_prior} with prior) and "
          f"{len(test_c)} test ({test_c.n_with_prior} with prior) records under {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    records = load_corpus(cfg.train_dir).records
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    result = train(cfg, records, out)
    last = result.epochs[-1] if result.epochs else {}
    print(json.dumps({"checkpoint": str(out / "checkpoint.npz"), **last}))
    return 0


def _eval_records(args, model_cfg: RunConfig):
    data = Path(args.data) / "test" if args.data else Path(model_cfg.test_dir)
    return select_split(load_corpus(data).records, args.split)


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint, args.precision)
    records = _eval_records(args, model.cfg)
    out = Path(args.out or Path(args.checkpoint).parent)
    record = evaluate(model, records, out, split=args.split)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint, args.precision)
    records = _eval_records(args, model.cfg)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    rows = model.generate(records, beam_width=args.beam)
    (out / "generated.txt").write_text("".join(r[1] + "\n" for r in rows), encoding="utf-8")
    meta = [{"study_id": r[0].study_id, "terminated_by": r[2].terminated_by, "n_tokens": len(r[2].tokens)}
            for r in rows]
    (out / "generated.jsonl").write_text("".join(json.dumps(m) + "\n" for m in meta), encoding="utf-8")
    print(f"wrote {len(rows)} reports to {out / 'generated.txt'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed or 0)
    worst = max(r["max_rel_error"] for r in results.values())
    for name, r in results.items():
        print(f"{name:16s} max_rel_error={r['max_rel_error']:.3e} worst={r['worst_leaf']} ({r['seconds']}s)")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return 0 if worst < 1e-4 else 1


def run_ablation(cfg: RunConfig, ablations, seeds, train_records, test_records, splits, out_dir) -> list[dict]:
    """Train every (ablation, seed) pair, evaluate on each split, return per-run rows."""
    out = Path(out_dir)
    rows = []
    for name in ablations:
        for seed in seeds:
            run_cfg = cfg.with_ablation(name).replace(seed=seed)
            run_dir = out / name / f"seed{seed}"
            log.info("training %s seed %d", name, seed)
            result = train(run_cfg, train_records, run_dir)
            for split in splits:
                rec = evaluate(result.model, select_split(test_records, split), run_dir, split=split)
                rows.append(rec)
                append_csv(out / "runs.csv", rec, EVAL_FIELDS)
    return rows


def summarise(rows: list[dict]) -> list[dict]:
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["ablation"], r["split"]), []).append(r)
    table = []
    for (name, split), rs in groups.items():
        f1 = np.array([r["ce_f1_micro"] for r in rs])
        pf1 = np.array([r["progression_f1_micro"] for r in rs])
        table.append({
            "ablation": name, "split": split, "n_seeds": len(rs),
            "ce_f1_micro": float(f1.mean()), "ce_f1_micro_std": float(f1.std()),
            "ce_f1_macro": float(np.mean([r["ce_f1_macro"] for r in rs])),
            "progression_f1_micro": float(pf1.mean()), "progression_f1_micro_std": float(pf1.std()),
            "bleu1": float(np.mean([r["bleu1"] for r in rs])), "bleu4": float(np.mean([r["bleu4"] for r in rs])),
            "rougeL": float(np.mean([r["rougeL"] for r in rs])),
        })
    return table


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ablations = args.ablations.split(",") if args.ablations else ["none", "no-msf", "no-dam", "no-fam", "no-df"]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    splits = args.split.split(",")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").unlink(missing_ok=True)
    rows = run_ablation(cfg, ablations, seeds, load_corpus(cfg.train_dir).records,
                        load_corpus(cfg.test_dir).records, splits, out)
    table = summarise(rows)
    (out / "summary.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    (out / "summary.csv").unlink(missing_ok=True)
    for row in table:
        append_csv(out / "summary.csv", row, SUMMARY_FIELDS)
    for row in table:
        print(f"{row['ablation']:9s} {row['split']:14s} micro-F1 {row['ce_f1_micro']:.4f} "
              f"progression-F1 {row['progression_f1_micro']:.4f} BLEU-4 {row['bleu4']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrrg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--precision", choices=("f32", "f64"))
        if data:
            p.add_argument("--data", help="corpus root holding train/ and test/")

    p = sub.add_parser("gen-data", help="write a synthetic train/test corpus")
    common(p, data=False)
    p.add_argument("--train-patients", type=int)
    p.add_argument("--test-patients", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on a test split"),
                                 ("generate", cmd_generate, "write generated reports")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--out")
        p.add_argument("--data")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--split", default="all", help="all | no-prior | with-prior | fraction=<f>")
        if name == "generate":
            p.add_argument("--beam", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of every block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the full model and ablations")
    common(p)
    p.add_argument("--ablations", help=f"comma list from {','.join(ABLATIONS)}")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="all", help="comma list of splits")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:
        print(f"lrrg {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
