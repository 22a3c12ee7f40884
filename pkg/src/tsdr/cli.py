"""Command-line entry point: ``tsdr {synth,train,eval,sweep,verify,report}``.

Relative output paths resolve under ``$TSDR_OUTPUT_ROOT`` (default: the
working directory). Every command writes ``manifest.json`` into its output
directory before computing anything; ``--manifest PATH`` replays a run from
that file alone.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config_file, resolve_config
from .data import ParseError
from .models import load_checkpoint, save_checkpoint
from .synth import GENERATOR_VERSION, generate_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "TSDR_OUTPUT_ROOT"

log = logging.getLogger("tsdr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- manifests --------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(value: str) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
    return p


class Manifest:
    def __init__(self, out: Path, subcommand: str, args: dict, resolved: dict | None, seed, inputs: dict):
        self.path = out / "manifest.json"
        self.doc = {
            "subcommand": subcommand,
            "args": args,
            "resolved_config": resolved,
            "code_version": {"tsdr": __version__, "generator": GENERATOR_VERSION},
            "seed": seed,
            "inputs": inputs,
            "outputs": [],
            "started": _now(),
            "finished": None,
        }

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, outputs) -> None:
        self.doc["outputs"] = sorted(str(Path(o).relative_to(self.path.parent)) for o in outputs)
        self.doc["finished"] = _now()
        self.write()


def _flat_resolved(rc) -> dict:
    out = {"profile": rc.profile}
    out.update(asdict(rc.synth))
    out.update(asdict(rc.train))
    return out


def _kv(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, extra: dict | None = None):
    """File values, then --set pairs, then dedicated flags."""
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = _kv(getattr(args, "set", None))
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return resolve_config(file_values, overrides)


def _args_for_manifest(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "manifest", "config", "set")}
    return d


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    gammas = args.gamma if args.gamma else [None]
    out = _out_dir(args.out)
    for g in gammas:
        rc = _resolve(args, {"gamma": g, "seed": args.seed, "profile": args.profile})
        target = out if len(gammas) == 1 else out / f"gamma_{rc.synth.gamma:g}"
        sub = argparse.Namespace(**{**vars(args), "gamma": None if g is None else [g]})
        man = Manifest(target, "synth", _args_for_manifest(sub), _flat_resolved(rc), rc.synth.seed, {})
        man.write()
        result = generate_dataset(rc.synth)
        paths = write_dataset(result, target)
        man.finish(paths.values())
        print(f"wrote {target} ({result.stats()['n_observed']} observed of {result.stats()['n_events']})")
    return EXIT_OK


def _train_extra(args) -> dict:
    extra = {"seed": args.seed, "profile": args.profile, "lam": args.lam, "max_epochs": args.epochs}
    if args.no_joint:
        extra["joint_learning"] = "false"
    if args.ts_on:
        extra["ts_target"] = args.ts_on
        if args.ts_on == "none":
            extra["lam"] = 0
    return extra


def cmd_train(args) -> int:
    from .pipeline import load_dataset, run_hash, train_model

    rc = _resolve(args, _train_extra(args))
    out = _out_dir(args.out)
    man = Manifest(out, "train", _args_for_manifest(args), _flat_resolved(rc), rc.train.seed, {"data": str(args.data)})
    man.write()
    data = load_dataset(args.data, rc.train)
    bundle, history = train_model(args.mode, data, rc.train)
    ckpt = out / "checkpoint.json"
    hist = out / "history.jsonl"
    save_checkpoint(ckpt, bundle, run_hash(args.mode, rc.train, data.fingerprint))
    with open(hist, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(
            json.dumps(
                {
                    "summary": True,
                    "best_epoch": history.best_epoch,
                    "best_metric": history.best_metric,
                    "stop_reason": history.stop_reason,
                    **history.final,
                },
                sort_keys=True,
            )
            + "\n"
        )
    man.finish([ckpt, hist])
    print(f"trained {args.mode}: best epoch {history.best_epoch}, stop {history.stop_reason}")
    return EXIT_OK


def _load_checked(path, data_fingerprint: str | None = None):
    from .pipeline import run_hash
    from .training import TrainConfig

    bundle, stored = load_checkpoint(path)
    meta = bundle.meta
    try:
        expected = run_hash(meta["mode"], TrainConfig(**meta["train"]), meta["data"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: checkpoint metadata incomplete ({exc})") from None
    if expected != stored:
        raise ParseError(f"{path}: config hash mismatch (stored {stored}, recomputed {expected})")
    if data_fingerprint is not None and data_fingerprint != meta["data"]:
        raise ParseError(f"{path}: checkpoint was trained on different data")
    return bundle


def cmd_eval(args) -> int:
    from .pipeline import evaluate_model, load_dataset, write_runs_csv
    from .training import TrainConfig

    out = _out_dir(args.out)
    man = Manifest(out, "eval", _args_for_manifest(args), None, None, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    man.write()
    bundle, _ = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig(**bundle.meta["train"])
    data = load_dataset(args.data, tcfg)
    bundle = _load_checked(args.checkpoint, data.fingerprint)
    regimes = ["observed", "counterfactual"] if args.regime == "both" else [args.regime]
    seqs = data.test if args.split == "test" else data.train + data.val + data.test
    if "counterfactual" in regimes and not all(s.has_grid for s in seqs):
        raise ValueError("counterfactual regime requested but the dataset has no counterfactual grid")
    run_id = f"{bundle.meta['mode']}_s{tcfg.seed}"
    rows, report = evaluate_model(bundle, seqs, regimes, run_id, data.gamma, tcfg.lam, tcfg.seed)
    metrics = out / "metrics.csv"
    write_runs_csv(metrics, rows)
    outputs = [metrics]
    if report is not None:
        rr = out / "risk_report.json"
        rr.write_text(report.to_json() + "\n", encoding="utf-8")
        outputs.append(rr)
    man.finish(outputs)
    for r in rows:
        print(f"{r['regime']}: auc={r['auc']:.4f} acc={r['acc']:.4f} rmse={r['rmse']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import evaluate_model, prepare_result, run_hash, summarize, train_model, write_runs_csv, write_summary_csv

    out = _out_dir(args.out)
    base = _resolve(args, {"profile": args.profile, "max_epochs": args.epochs})
    man = Manifest(out, "sweep", _args_for_manifest(args), _flat_resolved(base), None, {})
    man.write()
    rows, outputs, naive_cache = [], [], {}
    for value in args.values:
        for seed in args.seeds:
            gamma = value if args.axis == "gamma" else base.synth.gamma
            lam = value if args.axis == "lambda" else base.train.lam
            synth = base.synth.replace(gamma=gamma, seed=seed)
            tcfg = base.train.replace(seed=seed, lam=lam)
            if lam == 0 and tcfg.ts_target != "none":
                tcfg = tcfg.replace(ts_target="imputation")
            data = prepare_result(generate_dataset(synth), tcfg)
            for mode in args.modes:
                key = (gamma, seed)
                if mode == "naive" and key in naive_cache:
                    bundle = naive_cache[key]
                else:
                    bundle, history = train_model(mode, data, tcfg)
                    run_dir = out / "runs" / f"{mode}_g{gamma:g}_l{lam:g}_s{seed}"
                    run_dir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(run_dir / "checkpoint.json", bundle, run_hash(mode, tcfg, data.fingerprint))
                    outputs.append(run_dir / "checkpoint.json")
                    if mode == "naive":
                        naive_cache[key] = bundle
                run_id = f"{mode}_g{gamma:g}_l{lam:g}_s{seed}"
                r, _ = evaluate_model(bundle, data.test, ["observed", "counterfactual"], run_id, gamma, lam, seed)
                rows.extend(r)
                log.info("finished %s", run_id)
    runs = out / "runs.csv"
    summary = out / "summary.csv"
    write_runs_csv(runs, rows)
    write_summary_csv(summary, summarize(rows, args.axis))
    man.finish([runs, summary, *outputs])
    print(f"wrote {runs} ({len(rows)} rows) and {summary}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import theory as th

    only = args.only or list(th.CHECK_NAMES)
    out = _out_dir(args.out) if args.out else None
    man = None
    if out is not None:
        man = Manifest(out, "verify", _args_for_manifest(args), None, args.seed, {})
        man.write()
    world = th.SyntheticWorld.random(args.world_size, args.seed)
    if args.inject_misspecified:
        world = th.misspecified_world(world)
    results = []
    for name in only:
        if name == "enumeration":
            results.append(th.verify_enumeration(seed=args.seed))
        elif name == "unbiasedness":
            arms = ("given",) if args.inject_misspecified else ("propensity", "imputation")
            results.extend(th.verify_unbiasedness(world, args.trials, args.seed, arms))
        elif name == "negative-control":
            results.append(th.verify_power(world, args.trials, args.seed))
        elif name == "bias-bound":
            results.append(th.verify_bias_bound(args.worlds, args.seed))
        elif name == "path-length":
            results.extend(th.verify_path_length(n=args.worlds, seed=args.seed))
        elif name == "naive-bias":
            results.extend(th.verify_naive_bias(seed=args.seed, train_overrides={"max_epochs": args.epochs}))
    report = [r.to_dict() for r in results]
    for r in report:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']}: statistic={r['statistic']} threshold={r['threshold']}")
    if out is not None:
        path = out / "verify_report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        man.finish([path])
    return EXIT_OK if all(r["pass"] for r in report) else EXIT_VERIFY


def cmd_report(args) -> int:
    from .pipeline import read_runs_csv, summarize, write_summary_csv

    out = _out_dir(args.out)
    man = Manifest(out, "report", _args_for_manifest(args), None, None, {"runs": str(args.runs)})
    man.write()
    path = out / "summary.csv"
    write_summary_csv(path, summarize(read_runs_csv(args.runs), args.axis))
    man.finish([path])
    print(f"wrote {path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(p, out_default: str | None):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--profile", choices=["desk", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--manifest", help="replay the run recorded in this manifest")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tsdr", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate simulated datasets")
    _common(p, "synth")
    p.add_argument("--gamma", type=float, nargs="+", help="one dataset per MNAR level")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a naive or TSDR model")
    _common(p, "train")
    p.add_argument("--data", required=False, help="dataset directory")
    p.add_argument("--mode", choices=["naive", "tsdr"], default="tsdr")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-joint", action="store_true", help="pre-train and freeze the auxiliary models")
    p.add_argument("--ts-on", choices=["imputation", "backbone", "none"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--data", required=False)
    p.add_argument("--regime", choices=["observed", "counterfactual", "both"], default="both")
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.add_argument("--out", default="eval")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep gamma or lambda over seeds")
    _common(p, "sweep")
    p.add_argument("--axis", choices=["gamma", "lambda"], required=False)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", default=[42])
    p.add_argument("--modes", nargs="+", choices=["naive", "tsdr"], default=["naive", "tsdr"])
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)

    from .theory import CHECK_NAMES

    p = sub.add_parser("verify", help="run the estimator and bound checks")
    p.add_argument("--only", nargs="+", choices=CHECK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--worlds", type=int, default=1000)
    p.add_argument("--world-size", type=int, default=200)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--inject-misspecified", action="store_true", help="negative control: feed a mis-specified world")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="aggregate a runs CSV into mean/std rows")
    p.add_argument("--runs", required=False)
    p.add_argument("--axis", choices=["gamma", "lambda"], default="gamma")
    p.add_argument("--out", default="report")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_report)
    return ap


REQUIRED = {
    "train": ("data",),
    "eval": ("checkpoint", "data"),
    "sweep": ("axis", "values"),
    "report": ("runs",),
}


def _replay(args, parser) -> argparse.Namespace:
    """Rebuild the namespace from a manifest; an explicit --out still wins."""
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    if doc.get("subcommand") != args.command:
        raise UsageError(f"manifest is for {doc.get('subcommand')!r}, not {args.command!r}")
    defaults = vars(parser.parse_args([args.command]))
    explicit_out = args.out if args.out != defaults.get("out") else None
    merged = {**defaults, **doc["args"]}
    merged["manifest"] = None
    merged["func"] = args.func
    merged["config"] = None
    if doc.get("resolved_config") is not None:
        merged["set"] = [f"{k}={v}" for k, v in doc["resolved_config"].items()]
    if explicit_out is not None:
        merged["out"] = explicit_out
    return argparse.Namespace(**merged)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "manifest", None):
            args = _replay(args, parser)
        for name in REQUIRED.get(args.command, ()):
            if getattr(args, name, None) in (None, []):
                raise UsageError(f"tsdr {args.command}: --{name} is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tsdr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"tsdr {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
