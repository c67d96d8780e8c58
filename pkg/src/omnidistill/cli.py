"""Command-line entry point: ``omnidistill <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import theory
from .binio import FormatError, IntegrityError
from .buffer import build_buffer, load_buffer, save_buffer
from .datagen import generate_splits, read_dataset, write_dataset
from .distill import distill, load_synthetic, save_synthetic
from .evaluation import evaluate_protocol, random_coreset_eval
from .objectives import LossConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

METHOD_ALIASES = {
    "hopa": "hopa",
    "3pair": "3pair",
    "tbind": "tbind",
    "vbind": "vbind",
    "rank2": "rank2",
    "ablate-LM": "no_LM",
    "ablate-wBCE": "no_wBCE",
    "ablate-mining": "no_mining",
}
SUITES = ("lemma1", "spectrum", "theorem1", "gradients", "all")

log = logging.getLogger("omnidistill")


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_list(text: str):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="overrides the config and OMNIDISTILL_SEED")
    common.add_argument("--out", help="parent directory for run directories (config key out_dir)")
    common.add_argument("--run-dir", help="exact output directory; must not already hold files")

    p = Parser(prog="omnidistill", description="Omnimodal dataset distillation on generated data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    sub.add_parser("gen-data", parents=[common], help="generate train/test datasets")

    b = sub.add_parser("buffer", parents=[common], help="train expert trajectories")
    b.add_argument("--data", required=True, help="directory holding train.omds")
    b.add_argument("--objective", default="hopa", choices=sorted(set(METHOD_ALIASES.values()) - {"no_mining"}))
    b.add_argument("--num-experts", type=int)

    d = sub.add_parser("distill", parents=[common], help="learn a synthetic set")
    d.add_argument("--data", required=True)
    d.add_argument("--buffer", required=True, help="buffer file")
    d.add_argument("--method", default="hopa", choices=list(METHOD_ALIASES))

    e = sub.add_parser("eval", parents=[common], help="train students from scratch and report R@K")
    e.add_argument("--data", required=True, help="directory holding test.omds (and train.omds for baselines)")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--artifact", help="synthetic set file")
    src.add_argument("--baseline", choices=["random"])
    e.add_argument("--n", type=int, help="coreset size for --baseline random")
    e.add_argument("--seeds", type=_seed_list, help="comma-separated evaluation seeds")

    v = sub.add_parser("verify", parents=[common], help="numerical checks of the theory")
    v.add_argument("--suite", default="all", choices=SUITES)
    return p


# -- run directory and logging ----------------------------------------------------------


def make_run_dir(cfg: C.RunConfig, command: str, explicit=None) -> Path:
    if explicit:
        path = Path(explicit)
        if path.exists() and any(path.iterdir()):
            raise UsageError(f"run directory {path} is not empty; refusing to overwrite")
        path.mkdir(parents=True, exist_ok=True)
        return path
    stem = f"{time.strftime('%Y%m%d-%H%M%S')}-{command}-{cfg.digest()}"
    parent = Path(cfg.out_dir)
    parent.mkdir(parents=True, exist_ok=True)
    path, i = parent / stem, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path, i = parent / f"{stem}.{i}", i + 1


def _setup_logging(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger("omnidistill")
    root.handlers[:] = [handler, console]
    root.setLevel(logging.INFO)
    root.propagate = False
    return handler


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dataset(data_dir, split):
    path = Path(data_dir) / f"{split}.omds"
    if not path.exists():
        raise UsageError(f"missing dataset file {path}")
    return read_dataset(path, split)


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(args, cfg, run_dir):
    train, test = generate_splits(cfg.generator(), cfg.n_test)
    write_dataset(train, run_dir / "train.omds")
    write_dataset(test, run_dir / "test.omds")
    log.info("train digest %s (N=%d)", train.digest(), train.N)
    log.info("test digest %s (N=%d)", test.digest(), test.N)
    print(f"train {train.digest()}\ntest {test.digest()}")


def cmd_buffer(args, cfg, run_dir):
    train = _dataset(args.data, "train")
    bcfg = cfg.buffer(args.objective)
    buf = build_buffer(train, bcfg)
    save_buffer(buf, run_dir / "buffer.omtb")
    log.info("buffer: %d trajectories x %d epochs, objective %s", len(buf), bcfg.epochs, bcfg.objective)
    print(f"buffer {len(buf)} trajectories")


def cmd_distill(args, cfg, run_dir):
    train = _dataset(args.data, "train")
    buf = load_buffer(args.buffer, train.names)
    dcfg = cfg.distill(METHOD_ALIASES[args.method])
    syn, logbook = distill(train, buf, dcfg)
    save_synthetic(syn, run_dir / "synthetic.omss")
    _write(run_dir / "distill_log.csv", logbook.to_csv())
    losses = logbook.losses()
    log.info("method %s: matching loss %.4f -> %.4f, eta %.6f, skipped %d", args.method, losses[0], losses[-1], syn.eta, logbook.skipped)
    print(f"synthetic set n={syn.n} eta={syn.eta:.6g}")


def cmd_eval(args, cfg, run_dir):
    test = _dataset(args.data, "test")
    ecfg = cfg.evaluation()
    seeds = args.seeds or cfg.seeds
    if args.baseline:
        if args.n is None:
            raise UsageError("--baseline random needs --n")
        report = random_coreset_eval(_dataset(args.data, "train"), test, args.n, ecfg, seeds, subset_seed=cfg.seed)
        label = f"random coreset n={args.n}"
    else:
        report = evaluate_protocol(load_synthetic(args.artifact, test.names), test, ecfg, seeds)
        label = "synthetic set"
    _write(run_dir / "report.csv", report.to_csv())
    log.info("%s: avg R@1 %.1f +- %.1f over seeds %s", label, report.avg_mean[1], report.avg_std[1], ",".join(map(str, seeds)))
    print(report.to_csv(), end="")


def _verify_spectrum(cfg, run_dir, failures):
    rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for i in range(100):
        z = theory.random_unit_batch(rng, n=1)[0]
        chk = theory.spectral_correctness(z, rng)
        rows.append((i, repr(chk.duality), repr(chk.trace_error), chk.eckart_young_violations))
        if chk.duality > 1e-8 or chk.trace_error > 1e-8 or chk.eckart_young_violations:
            failures.append(f"spectrum instance {i}")
    _write(run_dir / "spectrum.csv", _csv(("instance", "duality", "trace_error", "eckart_young_violations"), rows))
    sel = theory.selectivity_suite(100, cfg.seed, LossConfig(cfg.tau, cfg.tau_prime))
    names = list(sel.tails)
    rows = [[i] + [repr(sel.tails[k][i]) for k in names] + [repr(sel.lm_formula_error[i])] for i in range(100)]
    _write(run_dir / "selectivity.csv", _csv(["instance"] + [f"tail_{k}" for k in names] + ["lm_formula_error"], rows))
    principal = sel.count_below("principal", 1e-8)
    infonce = sel.count_above("infonce", 1e-6)
    formula = int(np.sum(sel.lm_formula_error <= 1e-10))
    log.info("spectral correctness: %d/100 instances pass", 100 - sum(f.startswith("spectrum") for f in failures))
    log.info("principal-mode tail <= 1e-8: %d/100", principal)
    log.info("L_M projections match (p - e1)/(N tau): %d/100", formula)
    log.info("L_M tail <= 1e-8: %d/100 (tail weights are softmax masses, min %.3g)", sel.count_below("L_M", 1e-8), sel.tails["L_M"].min())
    log.info("InfoNCE tail > 1e-6: %d/100", infonce)
    for ok, what in ((principal == 100, "principal tail"), (formula == 100, "L_M projection formula"), (infonce >= 95, "InfoNCE spread")):
        if not ok:
            failures.append(f"selectivity: {what}")


def _verify_gradients(cfg, run_dir, failures):
    res = theory.gradient_suite(100, cfg.seed)
    rows = [(name, i, repr(e)) for name, errs in res.items() for i, e in enumerate(errs)]
    for name, errs in res.items():
        worst = int(np.argmax(errs))
        log.info("gradient %s: max rel error %.2e", name, errs[worst])
        if errs[worst] > 1e-5:
            failures.append(f"gradient {name} instance {worst}")
    for t in (1, 2):
        chk = theory.metagradient_check(cfg.seed, t)
        rows += [(f"meta_t{t}", f"{g}{list(idx)}", repr(e)) for (g, idx), e in zip(chk.coords, chk.errors)]
        log.info("meta-gradient t=%d: %d coords, max rel error %.2e", t, len(chk.coords), chk.max_error)
        if chk.max_error > 1e-4:
            failures.append(f"meta-gradient t={t}")
    _write(run_dir / "gradients.csv", _csv(("check", "instance", "rel_error"), rows))


def _verify_trials(cfg, run_dir, failures, full: bool):
    results = []
    for t in range(cfg.trials):
        tc = theory.TrialConfig.random(cfg.seed + t)
        if full:
            r = theory.run_trial(tc)
        else:
            rep = theory.lemma1_trial(tc)[0]
            r = theory.TrialResult(tc.seed, tc.n, tc.eta, rep.L, float("nan"), rep.bound, rep.gap, rep.satisfied,
                                   float("nan"), float("nan"), float("nan"), 0.0, True, True)  # fmt: skip
        results.append(r)
        if not r.satisfied:
            failures.append(f"lemma1 trial {r.trial}")
        if full and not r.theorem_ok:
            failures.append(f"theorem1 trial {r.trial}")
        if full and not r.mismatch_ok:
            failures.append(f"mismatch model trial {r.trial}")
    _write(run_dir / "verification.csv", theory.trials_csv(results))
    log.info("lemma1: %d/%d satisfied", sum(r.satisfied for r in results), len(results))
    if full:
        log.info("theorem1: %d/%d with U_A <= U_B", sum(r.theorem_ok for r in results), len(results))
        log.info("mismatch model: %d/%d trials hold at every step", sum(r.mismatch_ok for r in results), len(results))


def cmd_verify(args, cfg, run_dir):
    failures = []
    suites = ("spectrum", "gradients", "theorem1") if args.suite == "all" else (args.suite,)
    for suite in suites:
        if suite == "spectrum":
            _verify_spectrum(cfg, run_dir, failures)
        elif suite == "gradients":
            _verify_gradients(cfg, run_dir, failures)
        else:
            _verify_trials(cfg, run_dir, failures, full=suite == "theorem1")
    if failures:
        raise VerificationFailed("; ".join(failures))
    print(f"verify {args.suite}: pass")


COMMANDS = {"gen-data": cmd_gen_data, "buffer": cmd_buffer, "distill": cmd_distill, "eval": cmd_eval, "verify": cmd_verify}


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    if args.out:
        out["out_dir"] = args.out
    if getattr(args, "num_experts", None) is not None:
        out["num_experts"] = str(args.num_experts)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.resolve(args.config, _overrides(args), args.seed)
        run_dir = make_run_dir(cfg, args.command, args.run_dir)
    except (C.ConfigError, UsageError, OSError) as exc:
        print(f"omnidistill: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = _setup_logging(run_dir)
    _write(run_dir / "config.resolved", cfg.dumps())
    print(f"run directory: {run_dir}", file=sys.stderr)
    log.info("command %s", args.command)
    try:
        COMMANDS[args.command](args, cfg, run_dir)
        return EXIT_OK
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except VerificationFailed as exc:
        log.error("verification failed: %s", exc)
        return EXIT_VERIFY
    except (FormatError, IntegrityError, ValueError, RuntimeError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    finally:
        handler.close()
        logging.getLogger("omnidistill").handlers[:] = []


if __name__ == "__main__":
    sys.exit(main())
