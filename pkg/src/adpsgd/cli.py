"""Command-line driver: ``adpsgd {analyze-mixing,train,stragglers,verify}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import chronos, config, engine, mixing, verify
from .errors import ConfigError, InvalidOrderError, OutOfRegimeError, StalenessOverflowError
from .objectives import build_objective

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

FILES_HELP = """\
output files (floats carry 17 significant digits):
  analyze-mixing  mixing.csv          kind,L,k,measured,bound,log10_measured,log10_bound
                  mixing_summary.txt  lambda_hat and spectral gap per L
  train           run.csv             epoch,heldout_loss,lr
                  consensus.csv       k,distance
                  summary.txt         final loss, status, divergence epoch, iterations
  stragglers      slowdown.csv        strategy,factor,baseline_s,straggler_s,ratio
                  runs/<strategy>_x<factor>.csv (coupled mode)
                                      epoch,heldout_loss,lr,wallclock_s
  verify          verify.txt          one PASS/FAIL line per check
every command also writes config.ini, the fully resolved configuration.

exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 training divergence (partial outputs are still written).
"""


def _f(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _resolve(args, experiment: str) -> config.RunConfig:
    cfg = config.load(args.config) if getattr(args, "config", None) else config.RunConfig()
    cfg.set("run", "experiment", experiment)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "learners", None) is not None:
        if experiment == "analyze-mixing":
            cfg.set("mixing", "learners", args.learners)
        elif len(args.learners) == 1:
            cfg.set("engine", "L", args.learners[0])
        else:
            raise ConfigError(f"{experiment} takes a single value for --learners")
    if getattr(args, "k_max", None) is not None:
        cfg.set("mixing", "k_max", args.k_max)
    if getattr(args, "trials", None) is not None:
        cfg.set("mixing", "trials", args.trials)
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_analyze_mixing(cfg: config.RunConfig, out: Path) -> int:
    m = cfg["mixing"]
    rows, summary = [], ["L,lambda_hat,spectral_gap,closed_form"]
    for L in m["learners"]:
        rep = mixing.second_eigenvalue_magnitude(mixing.build_fixed_ring(L))
        summary.append(f"{L},{_f(rep.lambda_hat)},{_f(rep.spectral_gap)},{_f(mixing.fm_lambda_closed_form(L))}")
        for p in mixing.verify_consensus_decay(mixing.FIXED, L, m["k_max"]):
            rows.append(["fixed", L, p.k, _f(p.measured), _f(p.bound), _f(p.log10_measured), _f(p.log10_bound)])
        if L < 6:
            summary.append(f"# L={L}: random-ring rows omitted, the expectation bound needs L >= 6")
            continue
        # one stream per L, so results do not depend on which other orders were requested
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(20, L)))
        for p in mixing.verify_consensus_decay(mixing.RANDOM, L, m["k_max"], m["trials"], rng):
            rows.append(["random", L, p.k, _f(p.measured), _f(p.bound), _f(p.log10_measured), _f(p.log10_bound)])
    _write_csv(out / "mixing.csv", ["kind", "L", "k", "measured", "bound", "log10_measured", "log10_bound"], rows)
    (out / "mixing_summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    return EXIT_OK


def _run_rows(rec: engine.RunRecord, with_clock: bool = False):
    rows = []
    for i, (e, h, lr) in enumerate(zip(rec.epoch, rec.heldout_loss, rec.epoch_lr)):
        row = [e, _f(h), _f(lr)]
        if with_clock:
            row.append(_f(rec.epoch_wallclock[i]) if i < len(rec.epoch_wallclock) else "")
        rows.append(row)
    return rows


def training_status(rec: engine.RunRecord, objective, tol: float) -> tuple[str, float | None]:
    """CONVERGED, NOT_CONVERGED or DIVERGED, plus the distance to the optimum when known."""
    if rec.diverged:
        return "DIVERGED", None
    if objective.optimum is not None:
        dist = float(np.linalg.norm(rec.final_model - objective.optimum))
        return ("CONVERGED" if dist <= tol else "NOT_CONVERGED"), dist
    return ("CONVERGED" if rec.final_heldout_loss() < rec.initial_heldout_loss else "NOT_CONVERGED"), None


def cmd_train(cfg: config.RunConfig, out: Path) -> int:
    objective, _ = build_objective(cfg.objective_spec())
    rec = engine.run_training(cfg.strategy_config(), objective)
    _write_csv(out / "run.csv", ["epoch", "heldout_loss", "lr"], _run_rows(rec))
    _write_csv(out / "consensus.csv", ["k", "distance"], [[k, _f(d)] for k, d in zip(rec.iteration, rec.consensus)])
    status, dist = training_status(rec, objective, cfg["run"]["tol"])
    lines = [
        f"strategy: {rec.strategy}",
        f"status: {status}",
        f"epochs_completed: {len(rec.epoch)}",
        f"iterations: {rec.iterations}",
        f"iterations_per_epoch: {rec.iterations_per_epoch}",
        f"initial_heldout_loss: {_f(rec.initial_heldout_loss)}",
        f"final_heldout_loss: {_f(rec.final_heldout_loss())}",
        f"diverged: {str(rec.diverged).lower()}",
        f"divergence_epoch: {rec.divergence_epoch if rec.diverged else ''}",
    ]
    if dist is not None:
        lines.append(f"distance_to_optimum: {_f(dist)}")
        lines.append(f"tol: {_f(cfg['run']['tol'])}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_DIVERGED if rec.diverged else EXIT_OK


def cmd_stragglers(cfg: config.RunConfig, out: Path) -> int:
    c = cfg["chronos"]
    profile = cfg.cluster_profile()
    L = cfg["engine"]["L"]
    rows = []
    for s in c["strategies"]:
        for r in chronos.slowdown_experiment(s, L, c["factors"], profile, c["iterations_per_learner"], c["straggler_id"]):
            rows.append([s, _f(r.factor), _f(r.baseline_epoch_time), _f(r.straggler_epoch_time), _f(r.ratio)])
    _write_csv(out / "slowdown.csv", ["strategy", "factor", "baseline_s", "straggler_s", "ratio"], rows)
    if not c["coupled"]:
        return EXIT_OK
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    objective, _ = build_objective(cfg.objective_spec())
    diverged = False
    for s in c["strategies"]:
        for factor in sorted({1.0, *c["factors"]}):
            p = profile if factor == 1.0 else profile.with_straggler(c["straggler_id"], factor)
            rec, _ = chronos.coupled_run(s, p, cfg.strategy_config(s), objective)
            diverged |= rec.diverged
            _write_csv(runs / f"{s}_x{factor:g}.csv", ["epoch", "heldout_loss", "lr", "wallclock_s"], _run_rows(rec, True))
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_verify(cfg: config.RunConfig, out: Path) -> int:
    results = verify.run_all(cfg.seed)
    text = "\n".join(r.line() for r in results) + "\n"
    (out / "verify.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAILED


COMMANDS = {
    "analyze-mixing": cmd_analyze_mixing,
    "train": cmd_train,
    "stragglers": cmd_stragglers,
    "verify": cmd_verify,
}


def _learner_list(s: str) -> tuple:
    try:
        vals = tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {s!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty learner list")
    return vals


def _seed(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adpsgd",
        description="Decentralized SGD mixing analysis, toy training and straggler simulation.",
        epilog=FILES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (("analyze-mixing", False), ("train", True), ("stragglers", True), ("verify", False)):
        p = sub.add_parser(name, epilog=FILES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=needs_config, help="INI run configuration")
        p.add_argument("--out", default=f"out-{name}", help="output directory (created if missing)")
        p.add_argument("--seed", type=_seed, help="overrides [run] seed")
        if name != "verify":
            p.add_argument("--learners", type=_learner_list, help="comma-separated learner counts")
        if name == "analyze-mixing":
            p.add_argument("--k-max", type=int, help="largest product length k")
            p.add_argument("--trials", type=int, help="random-ring trials per L")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args, args.command)
        out = _out_dir(args)
        config.write_resolved(cfg, out)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, InvalidOrderError, OutOfRegimeError, StalenessOverflowError) as exc:
        print(f"adpsgd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"adpsgd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
