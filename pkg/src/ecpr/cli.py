"""Command-line entry point: ``ecpr <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 failed check.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .cascade_sim import ConfigError, generate_world, read_dataset, simulate, write_dataset
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .experiments import CLAIMS, DEFAULT_SEEDS, GRADCHECK_TOL, Runner, gradcheck, reproduce
from .models import HEAD_SELECTORS, MODEL_KINDS
from .numerics import TrainingError
from .train import evaluate, load_checkpoint, make_model, report_rows, train_loop, write_report

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3
SIM_CONFIG = "sim.cfg"


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _overrides(pairs: list[str]) -> str:
    """``--set key=value`` flags as config-file text."""
    for p in pairs:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
    return "\n".join(pairs)


def _data_config(data_dir: Path) -> ExperimentConfig:
    path = data_dir / SIM_CONFIG
    if not path.exists():
        raise UsageError(f"{data_dir} has no {SIM_CONFIG}; run 'simulate' first")
    return load_config(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = parse_config(_overrides(args.set), load_config(args.config)).with_(seed=args.seed).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(args.seed, cfg.cascade())
    write_dataset(out / "train.tsv", sim.train, cfg.n_fields)
    write_dataset(out / "eval.tsv", sim.eval, cfg.n_fields)
    (out / SIM_CONFIG).write_text(dump_config(cfg), encoding="utf-8", newline="\n")
    print(f"wrote {len(sim.train)} train and {len(sim.eval)} eval records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    base = _data_config(data_dir)
    if args.config:
        base = load_config(args.config, base)
    cfg = parse_config(_overrides(args.set), base).with_(model=args.model)
    if args.domain:
        cfg = cfg.with_(domain=args.domain)
    cfg = cfg.validate()
    ckpt = train_loop(cfg, read_dataset(data_dir / "train.tsv"), args.out)
    losses = " ".join(f"{x:.6f}" for x in ckpt.epoch_losses)
    print(f"trained {cfg.model} on {cfg.domain}; epoch losses {losses}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    sim_cfg = _data_config(data_dir)
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config.with_(eval_ks=args.k or ckpt.config.eval_ks, head=args.head or ckpt.config.head).validate()
    world = generate_world(sim_cfg.seed, sim_cfg.cascade())
    model = make_model(cfg)
    rep = evaluate(model, ckpt.params, read_dataset(data_dir / "eval.tsv"), world, cfg)
    write_report(args.report, report_rows(cfg.model, cfg.head, rep), {cfg.model: rep.to_json()})
    print(f"{cfg.model} head {cfg.head}: auc {rep.auc:.4f} gauc {rep.gauc:.4f} bias_gap {rep.bias_gap:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = MODEL_KINDS if args.model == "all" else (args.model,)
    worst = 0.0
    for kind in kinds:
        err = gradcheck(kind, args.seed)
        worst = max(worst, err)
        print(f"{kind}: max relative error {err:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_CHECK


def cmd_report(args) -> int:
    """Pivot one or more report files into a metric-by-model table."""
    table: dict[tuple[str, str], dict[str, str]] = {}
    columns: list[str] = []
    for path in args.reports:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                col = "/".join(row[c] for c in row if c not in ("metric", "k", "value"))
                if col not in columns:
                    columns.append(col)
                table.setdefault((row["metric"], row["k"]), {})[col] = row["value"]
    lines = ["\t".join(["metric", "k", *columns])]
    for (metric, k), vals in table.items():
        lines.append("\t".join([metric, k, *(vals.get(c, "") for c in columns)]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    base = parse_config(_overrides(args.set), load_config(args.config)).validate()
    result = reproduce(args.claim, Runner(base), args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / f"{args.claim}.tsv")
    for check in result.checks:
        print(check.line())
    return EXIT_OK if result.passed else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecpr", description="Entire-chain cross-domain pre-ranking models on a simulated cascade.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_set(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    s = sub.add_parser("simulate", help="generate train/eval datasets")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    with_set(s)

    s = sub.add_parser("train", help="train one model on a simulated dataset")
    s.add_argument("--model", required=True, choices=MODEL_KINDS)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--domain", choices=("entire_chain", "exposure_only"))
    s.add_argument("--config")
    with_set(s)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--head", choices=HEAD_SELECTORS)
    s.add_argument("--k", type=_int_list)
    s.add_argument("--report", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--model", required=True, choices=(*MODEL_KINDS, "all"))
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("report", help="pivot report files side by side")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out")

    s = sub.add_parser("reproduce", help="run a canned experiment and check its directions")
    s.add_argument("--claim", required=True, choices=CLAIMS)
    s.add_argument("--seeds", type=_int_list, default=DEFAULT_SEEDS)
    s.add_argument("--out", default="reproduce")
    s.add_argument("--config")
    with_set(s)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "reproduce": cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"ecpr {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"ecpr {args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
