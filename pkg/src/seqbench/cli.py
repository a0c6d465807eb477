"""``seqbench`` command line: gen, label, split, train, hpo, bench, report.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Logs go to stderr; results only go to the files named on the command line.

Train config files are flat ``key = value`` lines (``#`` starts a comment):

    embed_dim = 32
    hidden_size = 64
    optimizer = Adam
    lr = 0.01
    weight_decay = 0
    eps = 1e-8
    max_epochs = 100
    batch_size = 128
    patience = 5
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ehr
from .evaluation import make_report, select_best, table1_fixture
from .hpo import StudyData, Trial, read_ledger, run_study
from .models import ARCHITECTURES, ModelSpec, SequenceModel, canonical_arch, save_checkpoint
from .numerics import Rng
from .optim import OptimizerConfig, TrainConfig, evaluate_auroc, train_model, write_history_csv

log = logging.getLogger("seqbench")

CONFIG_KEYS = {
    "embed_dim": int, "hidden_size": int, "num_layers": int, "qrnn_filter_width": int,
    "optimizer": str, "lr": float, "weight_decay": float, "eps": float, "momentum": float,
    "clip_norm": float, "max_epochs": int, "batch_size": int, "patience": int, "seed": int,
}


class UsageError(Exception):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()})


def _setup_logging(kind: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if kind == "json" else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("seqbench")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = CONFIG_KEYS[key](value)
    return out


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _load_splits(prefix: str) -> StudyData:
    parts = {}
    vocab_size = None
    for name in ("train", "valid", "test"):
        records, vocab = ehr.load(_require(f"{prefix}.{name}.jsonl"))
        parts[name] = records
        vocab_size = max(vocab_size or 0, len(vocab))
    return StudyData(parts["train"], parts["valid"], parts["test"], vocab_size)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise UsageError(f"bad --ratios {text!r}; expected like 7:1:2") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise UsageError(f"bad --ratios {text!r}; expected like 7:1:2")
    total = sum(parts)
    return tuple(p / total for p in parts)


def _train_kwargs(args) -> dict:
    kw = {}
    if getattr(args, "max_epochs", None):
        kw["max_epochs"] = args.max_epochs
    if getattr(args, "patience", None):
        kw["patience"] = args.patience
    return kw


def _arch_list(text: str) -> list[str]:
    if text.strip().lower() == "all":
        return list(ARCHITECTURES)
    try:
        return [canonical_arch(a.strip()) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    spec = ehr.spec_for_task(args.task, n_patients=args.patients, prevalence=args.prevalence,
                             vocab_size=args.vocab, seed=args.seed)
    records, vocab = ehr.generate_cohort(spec)
    ehr.persist(records, vocab, args.out)
    log.info("wrote %d patients (%d cases) to %s", len(records), sum(r.label for r in records), args.out)


def cmd_label(args) -> None:
    encounters = ehr.load_encounters(_require(args.input))
    labels = ehr.build_readmission_labels(encounters)
    with open(args.out, "w", encoding="utf-8") as fh:
        for lab in labels:
            status = "excluded" if lab.excluded else ("case" if lab.label == 1 else "control")
            fh.write(json.dumps({"id": lab.patient_id, "label": lab.label, "status": status,
                                 "index": lab.index, "gap_days": lab.gap_days}, sort_keys=True) + "\n")
    if args.records:
        records, vocab = ehr.readmission_records(encounters)
        ehr.persist(records, vocab, args.records)
    kept = sum(not lab.excluded for lab in labels)
    log.info("labeled %d of %d patients", kept, len(labels))


def cmd_split(args) -> None:
    records, vocab = ehr.load(_require(args.input))
    parts = ehr.split_cohort(records, _parse_ratios(args.ratios), seed=args.seed)
    for name, part in zip(("train", "valid", "test"), parts):
        ehr.persist(part, vocab, f"{args.out_prefix}.{name}.jsonl")
    log.info("split %d records into %s", len(records), "/".join(str(len(p)) for p in parts))


def cmd_train(args) -> None:
    cfg = read_config(args.config)
    train, vocab = ehr.load(_require(args.train))
    valid, _ = ehr.load(_require(args.valid))
    test = ehr.load(_require(args.test))[0] if args.test else None
    spec = ModelSpec(canonical_arch(args.arch), vocab_size=len(vocab),
                     embed_dim=cfg.get("embed_dim", 32), hidden_size=cfg.get("hidden_size", 32),
                     num_layers=cfg.get("num_layers"), qrnn_filter_width=cfg.get("qrnn_filter_width", 2))
    seed = cfg.get("seed", args.seed)
    opt_cfg = OptimizerConfig(cfg.get("optimizer", "Adam"), lr=cfg.get("lr"), weight_decay=cfg.get("weight_decay", 0.0),
                              eps=cfg.get("eps"), momentum=cfg.get("momentum", 0.0), clip_norm=cfg.get("clip_norm"))
    train_cfg = TrainConfig(max_epochs=cfg.get("max_epochs", 100), batch_size=cfg.get("batch_size", 128),
                            patience=cfg.get("patience", 5), seed=Rng(seed).child_seed("train"))
    model = SequenceModel(spec)
    result = train_model(model, model.init_params(Rng(seed).child_seed("init")), train, valid, opt_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", spec, result.params)
    write_history_csv(result.history, out / "history.csv")
    test_auc = evaluate_auroc(model, result.params, test) if test else None
    trial = Trial(0, [], {"embed_dim": spec.embed_dim, "hidden_size": spec.hidden_size, "lr": opt_cfg.lr,
                          "weight_decay": opt_cfg.weight_decay, "eps": opt_cfg.eps},
                  result.best_valid_auroc, test_auc, seed, arch=spec.architecture, family=opt_cfg.family)
    (out / "ledger.jsonl").write_text(json.dumps(trial.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    log.info("%s best valid AUROC %.4f at epoch %d", spec.architecture, result.best_valid_auroc, result.best_epoch)


def cmd_hpo(args) -> None:
    data = _load_splits(args.data_prefix)
    families = args.families.split(",") if args.families else None
    run_study(canonical_arch(args.arch), data, budget=args.budget, root_seed=args.seed, families=families,
              ledger_path=args.out, workers=args.workers, train_cfg=_train_kwargs(args))


def cmd_bench(args) -> None:
    archs = _arch_list(args.archs)
    data = _load_splits(args.data_prefix)
    out = Path(args.out)
    families = args.families.split(",") if args.families else None
    ledgers = {}
    for arch in archs:
        ledger_path = out.with_name(f"{out.stem}.{arch}.ledger.jsonl")
        ledgers[arch] = run_study(arch, data, budget=args.budget, root_seed=args.seed, families=families,
                                  ledger_path=ledger_path, workers=args.workers, train_cfg=_train_kwargs(args))
    selected = select_best(ledgers)
    make_report({args.task: selected}).write(out)
    log.info("wrote report for %d architectures to %s", len(archs), out)


def cmd_report(args) -> None:
    results: dict[str, dict] = {}
    if args.table1:
        results = table1_fixture()
    for task, paths in (("HF", args.hf or []), ("Readm", args.readm or [])):
        ledgers: dict[str, list] = {}
        for p in paths:
            for t in read_ledger(_require(p)):
                ledgers.setdefault(t.arch or Path(p).stem, []).append(t)
        if ledgers:
            results.setdefault(task, {}).update(select_best(ledgers))
    make_report(results).write(args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log", choices=("text", "json"), default="text")

    parser = argparse.ArgumentParser(prog="seqbench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--task", choices=("hf", "readm"), default="hf")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--prevalence", type=float, default=None)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", parents=[common], help="apply readmission rules to an encounters file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--records", help="also write the labeled patients as a cohort file")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("split", parents=[common], help="stratified train/valid/test split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ratios", default="7:1:2")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train one model from a config file")
    p.add_argument("--arch", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("hpo", "Bayesian search for one architecture"),
                           ("bench", "search several architectures and write a report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "hpo":
            p.add_argument("--arch", required=True)
        else:
            p.add_argument("--archs", required=True, help="comma-separated names or 'all'")
            p.add_argument("--task", choices=("HF", "Readm", "hf", "readm"), default="HF")
        p.add_argument("--budget", type=int, required=True)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--data-prefix", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--families", help="comma-separated optimizer families (default: all seven)")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        p.set_defaults(func=cmd_hpo if name == "hpo" else cmd_bench)

    p = sub.add_parser("report", parents=[common], help="render a report CSV from trial ledgers")
    p.add_argument("--hf", nargs="*", help="ledgers for the HF column")
    p.add_argument("--readm", nargs="*", help="ledgers for the Readm column")
    p.add_argument("--table1", action="store_true", help="start from the published benchmark values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log)
    if getattr(args, "budget", 1) < 1 or getattr(args, "workers", 1) < 1:
        print("seqbench: error: --budget and --workers must be positive", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"seqbench: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"seqbench: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"seqbench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
