"""Command-line entry point.

Subcommands cover the full pipeline (``run``), its two stages individually
(``train-score``, ``train-ll``), the Monte Carlo tooling (``mc-reference``,
``convolution-bench``), flow-ODE sampling (``sample``), and checkpoint
evaluation (``eval``). Configuration comes from a JSON file (--config) with
flag overrides; exit status is 0 on success, 1 on usage/config errors, 2 on
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import diffnet, metrics_io, sde_problems as sp, training as tr
from . import distributions as dist
from . import objectives as obj

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--seed", type=int, help="override the seed list with one seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--method", choices=[tr.SM, tr.SSM, tr.SCORE_PINN, tr.DIRECT_LL])
    p.add_argument("--dim", type=int, help="problem dimension")
    p.add_argument("--trace", choices=["exact", "hutchinson"])
    p.add_argument("--problem", choices=sorted(metrics_io.PROBLEM_FACTORIES),
                   help="benchmark SDE")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorefp",
        description="Score-based solver for high-dimensional Fokker-Planck "
                    "log-likelihoods")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
            ("train-score", "fit the score model (stage 1)"),
            ("train-ll", "fit the LL model against a frozen score (stage 2)"),
            ("run", "full two-stage pipeline with error report"),
            ("mc-reference", "Monte Carlo marginal-LL reference values"),
            ("convolution-bench", "closed-form convolution benchmarks"),
            ("sample", "transport initial samples through the flow ODE"),
            ("eval", "evaluate a saved LL checkpoint on a fresh test set")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name == "convolution-bench":
            p.add_argument("--kind", choices=["gaussian", "lognormal", "cauchy"],
                           default="gaussian")
            p.add_argument("--samples", type=int, default=1_000_000)
        if name == "mc-reference":
            p.add_argument("--samples", type=int, default=1_000_000)
            p.add_argument("--time", type=float, default=None)
            p.add_argument("--points", type=int, default=100)
        if name == "sample":
            p.add_argument("--particles", type=int, default=10_000)
            p.add_argument("--steps", type=int, default=100)
        if name in ("train-ll", "eval"):
            p.add_argument("--checkpoint", help="score (train-ll) or LL (eval) "
                                                "checkpoint path")
    return parser


def _experiment_config(args) -> metrics_io.ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    config = metrics_io.ExperimentConfig.from_json(data)
    train = config.train
    if args.seed is not None:
        train = tr.TrainConfig(**{**_train_kwargs(train), "seeds": (args.seed,)})
    if args.trace is not None:
        train = tr.TrainConfig(**{**_train_kwargs(train), "trace_mode": args.trace})
    if args.epochs is not None:
        train = tr.TrainConfig(**{**_train_kwargs(train), "epochs": args.epochs})
    updates = {"train": train}
    if args.method is not None:
        updates["method"] = args.method
    if args.dim is not None:
        updates["d"] = args.dim
    if args.problem is not None:
        updates["problem"] = args.problem
    if args.out is not None:
        updates["out"] = args.out
    from dataclasses import replace
    return replace(config, **updates)


def _train_kwargs(cfg: tr.TrainConfig) -> dict:
    from dataclasses import asdict
    d = asdict(cfg)
    d["weights"] = obj.LossWeights(**d["weights"])
    d["seeds"] = tuple(d["seeds"])
    return d


def _cmd_run(args) -> int:
    config = _experiment_config(args)
    reports = metrics_io.run_experiment(config)
    for r in reports:
        print(f"{r.method} d={r.d} seed={r.seed}: ll_l2={r.ll_l2:.3e} "
              f"ll_linf={r.ll_linf:.3e} pdf_l2={r.pdf_l2:.3e} "
              f"pdf_linf={r.pdf_linf:.3e}")
    return EXIT_OK


def _cmd_train_score(args) -> int:
    config = _experiment_config(args)
    problem = metrics_io.make_problem(config)
    seed = config.train.seeds[0]
    model, log = tr.train_score(problem, _stage_config(config), np.random.default_rng(seed))
    if args.out:
        diffnet.save_checkpoint(model.net, args.out)
    print(f"trained {config.method} score on {config.problem} d={config.d}: "
          f"final loss {log.loss[-1]:.4e}" if log.loss else "initialized model")
    return EXIT_OK


def _stage_config(config: metrics_io.ExperimentConfig) -> tr.TrainConfig:
    from dataclasses import replace
    return replace(config.train, method=config.method)


def _cmd_train_ll(args) -> int:
    config = _experiment_config(args)
    problem = metrics_io.make_problem(config)
    seed = config.train.seeds[0]
    if args.checkpoint:
        net = diffnet.load_checkpoint(args.checkpoint)
        frozen = obj.ScoreModel(net=net, problem=problem,
                                mode=config.train.constraint_mode)
    else:
        frozen = sp.exact_score_jax(problem)
        print("no --checkpoint given; using the analytic score")
    model, log = tr.train_ll(problem, _stage_config(config), frozen,
                             np.random.default_rng(seed))
    if args.out:
        diffnet.save_checkpoint(model.net, args.out)
    if log.loss:
        print(f"trained LL model: final loss {log.loss[-1]:.4e}")
    return EXIT_OK


def _cmd_mc_reference(args) -> int:
    from . import mc_reference as mc
    config = _experiment_config(args)
    problem = metrics_io.make_problem(config)
    if problem.transition is None:
        print(f"problem {problem.tag!r} exposes no transition density",
              file=sys.stderr)
        return EXIT_CONFIG
    seed = config.train.seeds[0]
    rng = np.random.default_rng(seed)
    t = args.time if args.time is not None else problem.T
    x = dist.sample(problem.p0, args.points, rng)
    x = sp.euler_maruyama(problem, x, t, 100, rng)
    estimates, ses = [], []
    for xi in x:
        est = mc.mc_marginal_ll(problem, xi, t, args.samples, rng)
        estimates.append(est.estimate)
        ses.append(est.se)
    if args.out:
        mc.save_reference(args.out, x, np.full(len(x), t), np.asarray(estimates),
                          np.asarray(ses), args.samples, seed)
    print(f"{len(x)} reference LLs at t={t} (M={args.samples}); "
          f"mean se {np.nanmean(ses):.2e}")
    return EXIT_OK


def _cmd_convolution_bench(args) -> int:
    from . import mc_reference as mc
    seed = args.seed if args.seed is not None else 0
    d = args.dim if args.dim is not None else 10
    report = mc.convolution_experiment(args.kind, d, args.samples,
                                       np.random.default_rng(seed))
    print(f"{args.kind} d={d} M={args.samples}: ll_l2={report.ll_l2:.3e} "
          f"ll_linf={report.ll_linf:.3e} pdf_l2={report.pdf_l2:.3e} "
          f"pdf_linf={report.pdf_linf:.3e}")
    if args.out:
        metrics_io.emit_results([report], args.out, "csv")
    return EXIT_OK


def _cmd_sample(args) -> int:
    config = _experiment_config(args)
    problem = metrics_io.make_problem(config)
    seed = config.train.seeds[0]
    rng = np.random.default_rng(seed)
    x0 = dist.sample(problem.p0, args.particles, rng)
    score = sp.exact_score_batch(problem)
    if score is None:
        print(f"problem {problem.tag!r} has no analytic score", file=sys.stderr)
        return EXIT_CONFIG
    x_t = sp.flow_ode_sample(problem, score, x0, args.steps)
    if args.out:
        np.save(args.out, x_t)
    print(f"transported {args.particles} particles to t={problem.T} "
          f"({args.steps} steps); endpoint mean norm "
          f"{np.mean(np.linalg.norm(x_t, axis=1)):.3f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _experiment_config(args)
    problem = metrics_io.make_problem(config)
    if not args.checkpoint:
        print("eval requires --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    net = diffnet.load_checkpoint(args.checkpoint)
    model = obj.LLModel(net=net, problem=problem,
                        mode=config.train.constraint_mode)
    rng = np.random.default_rng(config.problem_seed + 7919)
    x, t = metrics_io.make_test_set(problem, config.test_size,
                                    config.n_test_times, rng)
    exact = metrics_io.reference_ll(problem, x, t, rng=rng)
    ll_l2, ll_linf, pdf_l2, pdf_linf = metrics_io.evaluate_ll(model, x, t, exact)
    print(f"ll_l2={ll_l2:.3e} ll_linf={ll_linf:.3e} "
          f"pdf_l2={pdf_l2:.3e} pdf_linf={pdf_linf:.3e}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "train-score": _cmd_train_score,
    "train-ll": _cmd_train_ll,
    "mc-reference": _cmd_mc_reference,
    "convolution-bench": _cmd_convolution_bench,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, NotImplementedError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
