"""``hetmoe`` command line: gen-data, train, eval, bench, ablate, dump-embeddings.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Every output file is a pure function of (config, inputs, seed); timings and
progress go to standard error only.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as C
from .datagen import DatasetFormatError, dump_embeddings, ensure_parent, generate, read_jsonl, write_jsonl
from .experts import ConfigError
from .fusion import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import BenchSettings, qps_bench
from .trainer import TrainingError, evaluate, prepare, split_indices, train

log = logging.getLogger("hetmoe")

ABLATION_ROUTINGS = ("rule", "pseudo", "soft", "hard", "serial-hard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="engine config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. router.k=1 (repeatable)")
    p.add_argument("--out", metavar="PATH", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (JSON lines)")
    _common(p)

    p = sub.add_parser("train", help="train router, projections and head")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--metrics", metavar="PATH", help="per-epoch metrics CSV (default: <out>.metrics.csv)")

    p = sub.add_parser("eval", help="overall and per-nation test AUC")
    _common(p)
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")

    p = sub.add_parser("bench", help="throughput of the three-stage pipeline")
    _common(p)
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")

    p = sub.add_parser("ablate", help="fusion x routing grid: test AUC and virtual QPS")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")

    p = sub.add_parser("dump-embeddings", help="write fused representations as CSV")
    _common(p)
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    return parser


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return ensure_parent(args.out)


def _read(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return read_jsonl(path)


def _model(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return load_checkpoint(path)


def cmd_gen_data(cfg: dict, args) -> None:
    out = _require_out(args)
    samples = generate(C.dataset_spec(cfg))
    write_jsonl(samples, out)
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train(cfg: dict, args) -> None:
    out = _require_out(args)
    samples = _read(args.data)
    reg = C.registry(cfg)
    result = train(samples, C.training_config(cfg), reg, C.model_settings(cfg))
    save_checkpoint(result.model, out)
    metrics = ensure_parent(args.metrics or f"{out}.metrics.csv")
    metrics.write_text(result.metrics_csv(), encoding="utf-8")
    log.info("saved model to %s, metrics to %s", out, metrics)


def _eval_rows(model, samples, cfg) -> list[tuple[str, float, int]]:
    reg = C.registry(cfg)
    data = prepare(samples, reg, model.settings)
    test = data.take(split_indices(data)["test"])
    nations = list(model.settings.nations)
    res = evaluate(model, test, nations)
    counts = {c: int((test.nation_idx == i).sum()) for i, c in enumerate(nations)}
    return [(c, res[c], counts[c]) for c in nations] + [("overall", res["overall"], len(test))]


def cmd_eval(cfg: dict, args) -> None:
    model = _model(args.model)
    rows = _eval_rows(model, _read(args.data), cfg)
    text = "nation,auc,n\n" + "".join(f"{c},{a!r},{n}\n" for c, a, n in rows)
    if args.out:
        ensure_parent(args.out).write_text(text, encoding="utf-8")
    print(f"{'nation':<8}{'AUC':>10}{'n':>8}")
    for c, a, n in rows:
        print(f"{c:<8}{a:>10.4f}{n:>8}")


def cmd_bench(cfg: dict, args) -> None:
    model = _model(args.model)
    samples = _read(args.data)
    report = qps_bench([s.request for s in samples], model, C.registry(cfg), C.bench_settings(cfg))
    if args.out:
        ensure_parent(args.out).write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_table())


def cmd_ablate(cfg: dict, args) -> None:
    out_dir = Path(args.out or "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _read(args.data)
    reg = C.registry(cfg)
    tcfg = C.training_config(cfg)
    requests = [s.request for s in samples]
    rows = []
    for fusion in ("weighted", "concat"):
        trained = {}
        data = None
        for routing in ABLATION_ROUTINGS:
            strategy = "hard" if routing == "serial-hard" else routing
            mode = "serial" if routing == "serial-hard" else "parallel"
            if strategy not in trained:
                settings = C.model_settings(cfg, strategy=strategy, fusion=fusion)
                if data is None:
                    data = prepare(samples, reg, settings)
                log.info("training %s/%s", fusion, strategy)
                trained[strategy] = train(samples, tcfg, reg, settings, prepared=data).model
            model = trained[strategy]
            test = data.take(split_indices(data)["test"])
            auc_value = evaluate(model, test, list(model.settings.nations))["overall"]
            bench = BenchSettings(**{**C.bench_settings(cfg, mode).__dict__, "clock": "virtual"})
            report = qps_bench(requests, model, reg, bench)
            rows.append((fusion, routing, auc_value, report.qps))
    with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fusion", "routing", "test_auc", "virtual_qps"])
        for fusion, routing, a, q in rows:
            w.writerow([fusion, routing, repr(a), repr(q)])
    print(f"{'fusion':<10}{'routing':<13}{'AUC':>8}{'QPS':>12}")
    for fusion, routing, a, q in rows:
        print(f"{fusion:<10}{routing:<13}{a:>8.4f}{q:>12.1f}")


def cmd_dump_embeddings(cfg: dict, args) -> None:
    out = _require_out(args)
    model = _model(args.model)
    width = dump_embeddings(_read(args.data), model, C.registry(cfg), out)
    log.info("wrote %d-wide embeddings to %s", width, out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.print_default_config:
            sys.stdout.write(C.dumps(C.default_config()))
            return 0
        if args.command is None:
            raise UsageError("hetmoe: a subcommand is required (see --help)")
        cfg = C.load_config(args.config, args.overrides, args.seed)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DatasetFormatError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
