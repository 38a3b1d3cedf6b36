"""Command-line entry point: ``rendezvous <command> [options]``.

Exit codes: 0 success, 1 check or run failure, 2 usage or configuration
error, 3 missing file, 4 malformed input file. Errors are written to stderr as
one JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, DivergenceError, FormatError, RendezvousError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def _run_config(args):
    from .train import RunConfig

    base = _load_json(args.config) if args.config else {}
    for key in ("variant", "epochs", "lr", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return RunConfig.from_dict(base)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg):
    from .synthetic import generate_dataset, load_dataset

    if getattr(args, "data", None):
        if not Path(args.data, "index.json").exists():
            raise FileNotFoundError(f"no dataset index in {args.data}")
        return load_dataset(args.data)
    return generate_dataset(cfg.data, cfg.seed)


def cmd_gen(args) -> int:
    from .synthetic import SyntheticConfig, generate_dataset, save_dataset

    d = _load_json(args.config) if args.config else {}
    d = d.get("data", d)
    for key in ("n_videos", "frames_per_video"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    ds = generate_dataset(SyntheticConfig.from_dict(d), args.seed)
    save_dataset(ds, _out_dir(args.out))
    print(json.dumps({"out": str(args.out), "frames": {s: len(ds.split(s)) for s in ("train", "val", "test")},
                      "classes": ds.vocab.C}))
    return EXIT_OK


def _write_report(report, out: Path, stem: str) -> None:
    from .train import top_table_csv

    (out / f"{stem}.json").write_text(report.to_json())
    for fam in ("i", "v", "t", "iv", "it", "ivt"):
        (out / f"{stem}_ap_{fam}.csv").write_text(report.class_table_csv(fam))
    (out / f"{stem}_top10.csv").write_text(top_table_csv(report, 10))


def cmd_train(args) -> int:
    from .train import evaluate_model, train

    cfg = _run_config(args)
    ds = _dataset(args, cfg)
    out = _out_dir(args.out)
    result = train(cfg, ds, log_path=out / "loss_log.csv", checkpoint_path=out / "checkpoint.json")
    report = evaluate_model(result.model, ds, "test")
    _write_report(report, out, "report")
    print(json.dumps({"variant": cfg.variant, "epochs": cfg.epochs, "mean_ap": report.mean_ap}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate, read_records
    from .train import evaluate_run
    from .vocab import data_path, load_vocabulary

    if bool(args.checkpoint) == bool(args.records):
        raise UsageError("give exactly one of --checkpoint or --records")
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(args.checkpoint)
        ds = None
        if args.data:
            from .synthetic import load_dataset
            ds = load_dataset(args.data)
        report = evaluate_run(args.checkpoint, args.split, ds)
    else:
        vocab = load_vocabulary(args.vocab or data_path("cholect50.csv"))
        report = evaluate(read_records(args.records), vocab)
    if args.out:
        _write_report(report, _out_dir(args.out), f"report_{args.split}" if args.checkpoint else "report")
    print(json.dumps({"mean_ap": report.mean_ap, "topn": report.topn}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .encoder import ModelConfig
    from .gradsuite import run_suite

    if not args.tiny:
        raise UsageError("the gradient suite runs on the tiny configuration; pass --tiny")
    report = run_suite(seeds=args.seeds, cfg=ModelConfig.tiny(), end_to_end_seeds=args.end_to_end_seeds)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_vocab_check(args) -> int:
    from .vocab import (CHOLECT50_INSTRUMENTS, cholect50_report, consistency_check, counts_from_table,
                        data_path, load_vocabulary, read_count_table)

    if not args.vocab and not args.counts:
        report = cholect50_report()
    else:
        vocab_path = args.vocab or data_path("cholect50.csv")
        vocab, counts = load_vocabulary(vocab_path, with_counts=True)
        if args.counts:
            counts = counts_from_table(vocab, read_count_table(args.counts))
        if counts is None:
            raise FormatError("the vocabulary has no count column; pass --counts")
        bundled = set(vocab.instruments) == set(CHOLECT50_INSTRUMENTS)
        tables = {}
        for key, flag, name in (("component_counts", args.components, "cholect50_components.csv"),
                                ("iv_counts", args.iv, "cholect50_iv.csv"),
                                ("it_counts", args.it, "cholect50_it.csv")):
            path = flag or (data_path(name) if bundled else None)
            tables[key] = read_count_table(path) if path else None
        report = consistency_check(vocab, counts, expected_total=args.total, **tables)
    print(report.to_json())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_ablate(args) -> int:
    from .train import evaluate_model, train

    args.variant = "rdv" if args.heads == "mixed" else "rdv-self-only"
    cfg = _run_config(args)
    ds = _dataset(args, cfg)
    out = _out_dir(args.out)
    result = train(cfg, ds, log_path=out / f"loss_log_{args.heads}.csv")
    report = evaluate_model(result.model, ds, "test")
    _write_report(report, out, f"report_{args.heads}")
    print(json.dumps({"heads": args.heads, "mean_ap_ivt": report.mean_ap["ivt"]}))
    return EXIT_OK


def cmd_study(args) -> int:
    from .study import run_study

    def progress(msg):
        print(msg, file=sys.stderr, flush=True)

    result = run_study(epochs=args.epochs, seed=args.seed, progress=progress)
    if args.out:
        out = _out_dir(args.out)
        (out / "study.json").write_text(result.to_json())
        for v, rep in result.reports.items():
            (out / f"report_{v}.json").write_text(rep.to_json())
    print(result.table())
    for name, ok in result.ordering_holds().items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(result.ordering_holds().values()) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rendezvous", description="Surgical action-triplet recognition at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp, variant=True):
        sp.add_argument("--config", help="JSON run configuration")
        if variant:
            sp.add_argument("--variant", help="naive-cnn | mtl | cagam-tripnet | rdv-self-only | rdv")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="dataset directory written by 'gen' (default: regenerate)")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON synthetic (or run) configuration")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-videos", dest="n_videos", type=int)
    g.add_argument("--frames-per-video", dest="frames_per_video", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model variant and evaluate it on the test split")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    e.add_argument("--checkpoint")
    e.add_argument("--records", help="JSON lines or CSV prediction records")
    e.add_argument("--vocab", help="vocabulary CSV for --records (default: CholecT50)")
    e.add_argument("--data", help="dataset directory for --checkpoint")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--tiny", action="store_true", help="tiny configuration (H=W=2, C=4, L=2)")
    gc.add_argument("--seeds", type=int, default=100)
    gc.add_argument("--end-to-end-seeds", dest="end_to_end_seeds", type=int, default=10)
    gc.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("vocab-check", help="verify triplet counts against component and pair tables")
    v.add_argument("--vocab", help="vocabulary CSV (default: bundled CholecT50)")
    v.add_argument("--counts", help="per-triplet count table (triplet,...,count)")
    v.add_argument("--components", help="component,name,count table")
    v.add_argument("--iv", help="instrument,verb,count table")
    v.add_argument("--it", help="instrument,target,count table")
    v.add_argument("--total", type=int, help="expected grand total")
    v.set_defaults(func=cmd_vocab_check)

    a = sub.add_parser("ablate", help="train rdv with mixed or self-only decoder heads")
    a.add_argument("--heads", required=True, choices=("mixed", "self-only"))
    run_flags(a, variant=False)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("study", help="train every variant on one dataset and compare")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_study)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-file", str(exc))
    except FormatError as exc:
        return _fail(EXIT_FORMAT, "format", str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_FAIL, "divergence", str(exc))
    except RendezvousError as exc:
        return _fail(EXIT_FAIL, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
