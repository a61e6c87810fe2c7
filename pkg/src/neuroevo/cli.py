"""Command-line entry point: ``neuroevo <command> [options]``.

Every command resolves its configuration as defaults < ``--config`` JSON <
explicit flags, writes the resolved result next to its outputs, and derives
all randomness from the single ``seed`` in that configuration.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from ._random import derive_seed
from .data import PhantomParams, crossfold, gen_dataset, load_dataset, save_dataset
from .dropout import McEnsembleConfig, SgdConfig, mc_report, sgd_train, write_sgd_curve_csv
from .ensemble import (
    DEFAULT_THRESHOLD,
    DirectorySink,
    EnsembleMember,
    dump_report,
    MemberDir,
    read_member,
    report_document,
    uq_report,
    write_member,
)
from .es import CURVE_FIELDS, EsConfig, NetworkProblem, read_curve_csv, train_es, write_curve_csv
from .nn import DUAL, SINGLE, BatchForward, NetworkSpec
from .probe import LinearProbeProblem, ProbeSpec, make_probe_data

log = logging.getLogger("neuroevo")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 3  # generation/epoch budget spent without reaching full training accuracy

POOL_A = "pool_a.opr1"
POOL_B = "pool_b.opr1"


class CliError(Exception):
    pass


# -- config resolution -----------------------------------------------------------


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _resolve(cls, file_section, overrides):
    """Dataclass from defaults, then the config-file section, then non-None flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_section) - names
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    values = dict(file_section)
    values.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return cls(**values)


def _pick(args, cfg, key, default):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")


def _data_paths(args, cfg):
    data = _pick(args, cfg, "data", "data")
    pool_a = _pick(args, cfg, "pool_a", None) or os.path.join(data, POOL_A)
    pool_b = _pick(args, cfg, "pool_b", None) or os.path.join(data, POOL_B)
    return os.path.abspath(pool_a), os.path.abspath(pool_b)


def _fold_sets(pool_a, pool_b, fold):
    return crossfold(load_dataset(pool_a), load_dataset(pool_b), fold)


def _network_spec(args, cfg, dropout_rate=0.0):
    d = dict(cfg.get("network", {}))
    if getattr(args, "architecture", None) is not None:
        d["architecture"] = args.architecture
    d["dropout_rate"] = dropout_rate
    return NetworkSpec.from_dict({**NetworkSpec().to_dict(), **d})


# -- gen-data ----------------------------------------------------------------------


PHANTOM_FLAGS = ("noise_sigma", "artifact_probability", "lesion_contrast")


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    overrides = {k: getattr(args, k) for k in PHANTOM_FLAGS}
    overrides["seed"] = args.seed
    params = _resolve(PhantomParams, cfg.get("phantom", {}), overrides)
    counts = {
        "n_tumor": _pick(args, cfg, "n_tumor", 18),
        "n_normal": _pick(args, cfg, "n_normal", 18),
        "n_test_tumor": _pick(args, cfg, "n_test_tumor", 15),
        "n_test_normal": _pick(args, cfg, "n_test_normal", 15),
    }
    out = args.out or cfg.get("out") or "data"
    _prepare_out(out)
    pool_a = gen_dataset(params, counts["n_tumor"], counts["n_normal"])
    start = max(counts["n_tumor"], counts["n_normal"])
    pool_b = gen_dataset(params, counts["n_test_tumor"], counts["n_test_normal"], start_index=start)
    resolved = {"command": "gen-data", "phantom": params.to_dict(), **counts}
    _write_json(os.path.join(out, "gen_config.json"), resolved)
    for name, d in ((POOL_A, pool_a), (POOL_B, pool_b)):
        path = os.path.join(out, name)
        try:
            digest = save_dataset(d, path)
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}") from None
        print(f"{digest}  {path}  ({len(d)} samples)")
    return EXIT_OK


# -- train-es ---------------------------------------------------------------------------


ES_FLAGS = ("alpha", "mu", "population_pairs", "n_epochs", "r_max", "n_conv", "seed")


def _es_problem(args, cfg, task):
    if task == "probe":
        seed = _pick(args, cfg, "seed", 0)
        train = make_probe_data(derive_seed(seed, "probe-train"))
        val = make_probe_data(derive_seed(seed, "probe-val"))
        return LinearProbeProblem(train, val), ProbeSpec(), None, {}
    fold = _pick(args, cfg, "fold", 1)
    pool_a, pool_b = _data_paths(args, cfg)
    train, test = _fold_sets(pool_a, pool_b, fold)
    spec = _network_spec(args, cfg)
    data = {"pool_a": pool_a, "pool_b": pool_b, "fold": fold}
    return NetworkProblem(spec, train.samples, test.samples), spec, test, data


def cmd_train_es(args):
    cfg = _load_config(args.config)
    es = _resolve(EsConfig, cfg.get("es", {}), {k: getattr(args, k) for k in ES_FLAGS})
    if args.threads is not None:
        es.threads = args.threads
    task = _pick(args, cfg, "task", "phantom")
    threshold = _pick(args, cfg, "threshold", DEFAULT_THRESHOLD)
    keep_last = _pick(args, cfg, "keep_last", None)
    problem, spec, test, data = _es_problem(args, cfg, task)
    out = args.out or cfg.get("out") or "run"
    _prepare_out(out)

    es_dict = es.to_dict()
    del es_dict["threads"]  # execution detail; results do not depend on it
    resolved = {"command": "train-es", "task": task, "es": es_dict, "threshold": threshold,
                "keep_last": keep_last, **data}
    if task != "probe":
        resolved["network"] = spec.to_dict()
    _write_json(os.path.join(out, "config.json"), resolved)

    sink = DirectorySink(os.path.join(out, "members"), spec, problem.r_max, keep_last=keep_last)
    every = max(1, args.log_every)

    def progress(row, s, w):
        if row["generation"] % every == 0:
            log.info("gen %d  train best %d mean %.2f  val best %d  saved %d",
                     row["generation"], row["train_best"], row["train_mean"], row["val_best"], s.n_saved)

    result = train_es(es, problem, sink=sink, progress=progress)
    write_curve_csv(result.curve, os.path.join(out, "curve.csv"))
    log.info("%d generations, %d members saved (%d kept)", result.generations, sink.n_saved, len(sink))

    if test is not None and len(sink):
        records, summary = uq_report(sink, spec, test, threshold)
        dump_report(report_document(records, summary, "ensemble", threshold, len(sink)),
                    os.path.join(out, "report.json"))
    if not result.converged:
        print(f"budget of {es.n_epochs} generations exhausted below r_max={problem.r_max}")
        return EXIT_BUDGET
    print(f"reached r_max={problem.r_max} at generation {result.first_converged}; {len(sink)} members in {out}/members")
    return EXIT_OK


# -- uq-report ----------------------------------------------------------------------------


def _test_set(args, cfg):
    if getattr(args, "test", None):
        return load_dataset(args.test)
    pool_a, pool_b = _data_paths(args, cfg)
    return _fold_sets(pool_a, pool_b, _pick(args, cfg, "fold", 1))[1]


def cmd_uq_report(args):
    cfg = _load_config(args.config)
    threshold = _pick(args, cfg, "threshold", DEFAULT_THRESHOLD)
    mode = _pick(args, cfg, "mode", "vote")
    members = MemberDir(args.members)
    spec = members.spec
    if not len(members):
        raise CliError(f"{args.members}: no DNEW members to report on")
    records, summary = uq_report(members, spec, _test_set(args, cfg), threshold, mode)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.members)), "report.json")
    dump_report(report_document(records, summary, "ensemble", threshold, len(members)), out)
    _print_summary(summary, out)
    return EXIT_OK


def _print_summary(summary, path):
    for label in ("tumor", "normal"):
        cells = "  ".join(f"{k}={v} ({summary.percentages[label][k]}%)" for k, v in summary.counts[label].items())
        print(f"{label:6s} {cells}")
    print(f"report written to {path}")


# -- train-sgd / mc-report ---------------------------------------------------------------------


SGD_FLAGS = {"lr": "learning_rate", "epochs": "epochs", "dropout": "dropout_rate", "seed": "seed"}


def cmd_train_sgd(args):
    cfg = _load_config(args.config)
    overrides = {name: getattr(args, flag) for flag, name in SGD_FLAGS.items()}
    if args.stop_at_full_accuracy:
        overrides["stop_at_full_accuracy"] = True
    sgd = _resolve(SgdConfig, cfg.get("sgd", {}), overrides)
    fold = _pick(args, cfg, "fold", 1)
    pool_a, pool_b = _data_paths(args, cfg)
    train, test = _fold_sets(pool_a, pool_b, fold)
    spec = _network_spec(args, cfg, dropout_rate=sgd.dropout_rate)
    out = args.out or cfg.get("out") or "run_sgd"
    _prepare_out(out)
    _write_json(os.path.join(out, "config.json"), {
        "command": "train-sgd", "sgd": sgd.to_dict(), "network": spec.to_dict(),
        "pool_a": pool_a, "pool_b": pool_b, "fold": fold,
    })
    every = max(1, args.log_every)

    def progress(row):
        if row["epoch"] % every == 0:
            log.info("epoch %d  loss %.4f  train acc %.3f", row["epoch"], row["mean_loss"], row["train_accuracy"])

    result = sgd_train(sgd, spec, train, progress=progress)
    write_sgd_curve_csv(result.curve, os.path.join(out, "curve.csv"))
    hits = []
    for d in (train, test):
        pred = BatchForward.from_samples(spec, d.samples).predict(result.weights)
        hits.append(int((pred == d.labels).sum()))
    member = EnsembleMember(result.weights, len(result.curve), hits[0], hits[1])
    write_member(os.path.join(out, "weights.dnew"), member, spec)
    _write_json(os.path.join(out, "spec.json"), spec.to_dict())
    print(f"{len(result.curve)} epochs, train {hits[0]}/{len(train)}, test {hits[1]}/{len(test)}")
    return EXIT_OK if hits[0] == len(train) else EXIT_BUDGET


def cmd_mc_report(args):
    cfg = _load_config(args.config)
    with open(os.path.join(args.run, "spec.json")) as f:
        spec = NetworkSpec.from_dict(json.load(f))
    member = read_member(os.path.join(args.run, "weights.dnew"), spec)
    run_cfg = _load_config(os.path.join(args.run, "config.json"))
    mc = _resolve(McEnsembleConfig, cfg.get("mc", {}), {"n_passes": args.n_passes})
    seed = _pick(args, cfg, "seed", 0)
    threshold = _pick(args, cfg, "threshold", DEFAULT_THRESHOLD)
    if args.test:
        test = load_dataset(args.test)
    else:
        test = _fold_sets(run_cfg["pool_a"], run_cfg["pool_b"], run_cfg["fold"])[1]
    records, summary = mc_report(member.weights, spec, test, mc, derive_seed(seed, "mc-report"), threshold)
    out = args.out or os.path.join(args.run, "mc_report.json")
    dump_report(report_document(records, summary, "mc_dropout", threshold, mc.n_passes), out)
    _print_summary(summary, out)
    return EXIT_OK


# -- export-curves ------------------------------------------------------------------------------


def average_curves(curves):
    """Per-generation mean of each column over the runs that reached that generation."""
    length = max((len(c) for c in curves), default=0)
    rows = []
    for t in range(length):
        present = [c[t] for c in curves if t < len(c)]
        row = {"generation": t, "n_runs": len(present)}
        for key in CURVE_FIELDS[1:]:
            row[key] = float(np.mean([r[key] for r in present]))
        rows.append(row)
    return rows


def cmd_export_curves(args):
    curves = []
    for run in args.runs:
        path = run if run.endswith(".csv") else os.path.join(run, "curve.csv")
        curves.append(read_curve_csv(path))
    rows = average_curves(curves)
    header = ("generation", "n_runs") + CURVE_FIELDS[1:]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(target, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["generation"], row["n_runs"]] + [repr(row[k]) for k in CURVE_FIELDS[1:]])
    finally:
        if args.out:
            target.close()
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="neuroevo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if data:
            p.add_argument("--data", help=f"directory holding {POOL_A} and {POOL_B}")
            p.add_argument("--pool-a")
            p.add_argument("--pool-b")
            p.add_argument("--fold", type=int, choices=(1, 2))

    p = sub.add_parser("gen-data", help="write the two phantom pools as OPR1 files")
    common(p, data=False)
    p.add_argument("--n-tumor", type=int)
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-test-tumor", type=int)
    p.add_argument("--n-test-normal", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--artifact-probability", type=float)
    p.add_argument("--lesion-contrast", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-es", help="evolve the CNN and harvest the ensemble")
    common(p)
    p.add_argument("--task", choices=("phantom", "probe"))
    p.add_argument("--architecture", choices=(DUAL, SINGLE))
    p.add_argument("--alpha", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--pop-pairs", dest="population_pairs", type=int)
    p.add_argument("--n-epochs", type=int, help="generation budget")
    p.add_argument("--r-max", type=int)
    p.add_argument("--n-conv", type=int, help="stop after this many generations at r_max (0 disables)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--keep-last", type=int, help="keep only the newest N members on disk")
    p.add_argument("--threads", type=int, help="parallel evaluations; results do not depend on it")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_es)

    p = sub.add_parser("uq-report", help="ensemble UQ report from saved members")
    p.add_argument("--members", required=True)
    p.add_argument("--test", help="OPR1 test file (default: test pool of --fold)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--mode", choices=("vote", "mean_prob"))
    common(p)
    p.set_defaults(func=cmd_uq_report)

    p = sub.add_parser("train-sgd", help="gradient-descent baseline with dropout")
    common(p)
    p.add_argument("--architecture", choices=(DUAL, SINGLE))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--stop-at-full-accuracy", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train_sgd)

    p = sub.add_parser("mc-report", help="MC-dropout UQ report from a train-sgd run")
    p.add_argument("--run", required=True)
    p.add_argument("--test")
    p.add_argument("--n-passes", type=int)
    p.add_argument("--threshold", type=float)
    common(p, data=False)
    p.set_defaults(func=cmd_mc_report)

    p = sub.add_parser("export-curves", help="average curve.csv files of several runs")
    p.add_argument("runs", nargs="+", help="run directories or curve CSV files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError) as exc:
        print(f"neuroevo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
