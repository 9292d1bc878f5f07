"""Command-line entry point: ``fedmac {run,gen-data,gradcheck,sweep,eval}``.

Exit codes: 0 success, 1 runtime failure (including a failed gradient check),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from ._runtime import tune_allocator
from .config import ExperimentConfig, config_from_dict, load_config, with_overrides
from .datagen import apply_missing, derive_seed, make_missing_matrix, save_dataset, save_mask, synth_generate
from .errors import ConfigError, FedMACError
from .experiment import run_experiment, setup, sweep, sweep_csv
from .federation import METHODS, evaluate
from .gradcheck import TinyProblem, check_objective
from .params import load_params

log = logging.getLogger("fedmac")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage already; keep messages on stderr."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="experiment seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="client worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    return with_overrides(cfg, seed=args.seed, output=args.out, threads=args.threads)


def parse_axis(text: str) -> List[Tuple[float, float]]:
    """``"1.0/0.1,0.8/0.5"`` -> [(1.0, 0.1), (0.8, 0.5)]."""
    settings = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            p_m, p_s = (float(v) for v in item.split("/"))
        except ValueError:
            raise _UsageError(f"bad missing-statistics entry {item!r}; expected p_m/p_s") from None
        if not (0 <= p_m <= 1 and 0 <= p_s <= 1):
            raise _UsageError(f"missing statistics out of [0, 1]: {item!r}")
        settings.append((p_m, p_s))
    if not settings:
        raise _UsageError("empty missing-statistics axis")
    return settings


def cmd_run(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg)
    print(f"final accuracy {res.final_accuracy:.4f} after {cfg.federation.T} rounds")
    print(f"wrote {res.metrics_csv}, {res.metrics_jsonl}, {res.checkpoint}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    data = synth_generate(args.N, args.C, args.M, args.d_in, args.noise_std, derive_seed(seed, 1))
    if args.missing:
        ((p_m, p_s),) = parse_axis(args.missing)
        psi = make_missing_matrix(len(data), args.M, p_m, p_s, derive_seed(seed, 2))
        data = apply_missing(data, psi)
        save_mask(psi, out / "mask.fmm")
        print(f"wrote {out / 'mask.fmm'} ({int((~psi.bits.all(axis=1)).sum())} affected samples)")
    save_dataset(data, out / "dataset.fmd")
    print(f"wrote {out / 'dataset.fmd'} (N={len(data)} M={args.M} C={args.C} d_in={args.d_in})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    problem = TinyProblem()
    if args.config:
        cfg = load_config(args.config)
        problem = TinyProblem(
            method=cfg.method.name,
            num_modalities=cfg.data.M,
            d_in=cfg.data.d_in,
            d_h=cfg.model.d_h,
            num_classes=cfg.data.C,
            batch_size=cfg.federation.B,
            lam=cfg.lam,
            tau=cfg.method.tau,
            norm_mode=cfg.method.norm_mode,
            p_m=cfg.missing.client.p_m,
            p_s=cfg.missing.client.p_s,
        )
    overrides = {"method": args.method, "lam": args.lam, "tau": args.tau, "seed": args.seed}
    problem = replace(problem, **{k: v for k, v in overrides.items() if v is not None})
    if problem.method not in METHODS:
        raise _UsageError(f"unknown method {problem.method!r}")
    started = time.perf_counter()
    report = check_objective(problem, epsilon=args.epsilon, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(
        f"{verdict} method={problem.method} params={len(report.max_rel_error)} "
        f"max_rel_err={report.worst:.3e} tolerance={args.tolerance:g} epsilon={args.epsilon:g} "
        f"({time.perf_counter() - started:.1f}s)"
    )
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    settings = parse_axis(args.axis)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise _UsageError(f"unknown or empty method list {args.methods!r}")
    cfg = _load(args)
    rows = sweep(cfg, settings, methods)
    out = Path(cfg.run.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(sweep_csv(rows))
    for r in rows:
        print(f"{r['method']:<20s} p_m={r['p_m']:.2f} p_s={r['p_s']:.2f} acc={r['final_accuracy']:.4f}")
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    s = setup(cfg)
    params = load_params(args.checkpoint)
    model_cfg = cfg.model_config(s.test_set.num_modalities, s.test_set.d_in, s.test_set.num_classes)
    acc, nll = evaluate(params, s.test_set, model_cfg, cfg.method_config(), cfg.federation.eval_batch_size or None)
    print(f"accuracy {acc:.4f} loss {nll:.4f} on {len(s.test_set)} test samples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="fedmac", description="Federated multi-modal learning with missing modalities.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="run one federated experiment")
    p.add_argument("config", nargs="?", help="INI config file (defaults apply when omitted)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset (and mask)")
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--C", type=int, default=5)
    p.add_argument("--M", type=int, default=12)
    p.add_argument("--d-in", dest="d_in", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--missing", default=None, help="p_m/p_s, e.g. 1.0/0.5")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the training loss")
    p.add_argument("config", nargs="?", help="optional INI config describing the model")
    p.add_argument("--method", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common], help="final accuracy over missing statistics x methods")
    p.add_argument("config", nargs="?")
    p.add_argument("--axis", required=True, help="comma list of p_m/p_s pairs")
    p.add_argument("--methods", default="fedmac,fedma,zero_impute")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the run's test set")
    p.add_argument("config", nargs="?")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except (ConfigError, _UsageError) as exc:
        print(f"fedmac: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FedMACError, ValueError, ArithmeticError, OSError) as exc:
        print(f"fedmac: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
