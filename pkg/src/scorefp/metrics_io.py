"""Error metrics, experiment orchestration, and result emission.

Relative L2/L-inf errors on the log-likelihood, and PDF errors computed after
shifting both LL vectors by the maximum exact LL so the dominant exponentials
never underflow. The orchestrator runs the two training stages per seed,
evaluates on a fixed test set, and writes CSV (canonical) plus a JSON mirror.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import distributions as dist
from . import objectives as obj
from . import sde_problems as sp
from . import training as tr

CSV_COLUMNS = ("method", "d", "seed", "ll_l2", "ll_linf", "pdf_l2", "pdf_linf",
               "rate", "epochs")


def relative_errors(pred, exact) -> tuple[float, float]:
    """(‖pred−exact‖₂/‖exact‖₂, max|pred−exact|/max|exact|)."""
    pred = np.asarray(pred, float)
    exact = np.asarray(exact, float)
    if pred.shape != exact.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and exact must be equal-length nonempty vectors")
    denom2 = np.linalg.norm(exact)
    denom_inf = np.max(np.abs(exact))
    if denom2 == 0.0 or denom_inf == 0.0:
        raise ValueError("exact vector is identically zero")
    l2 = float(np.linalg.norm(pred - exact) / denom2)
    linf = float(np.max(np.abs(pred - exact)) / denom_inf)
    return l2, linf


def pdf_errors_from_ll(pred_ll, exact_ll) -> tuple[float, float]:
    """PDF relative errors computed from LLs, both normalized by the maximum
    exact LL. Exactly invariant to a common constant shift of both inputs."""
    pred_ll = np.asarray(pred_ll, float)
    exact_ll = np.asarray(exact_ll, float)
    if pred_ll.shape != exact_ll.shape or pred_ll.ndim != 1 or pred_ll.size == 0:
        raise ValueError("pred and exact must be equal-length nonempty vectors")
    c = np.max(exact_ll)
    return relative_errors(np.exp(pred_ll - c), np.exp(exact_ll - c))


@dataclass(frozen=True)
class ErrorReport:
    method: str
    d: int
    seed: int | str
    ll_l2: float
    ll_linf: float
    pdf_l2: float
    pdf_linf: float
    rate: float          # seconds per epoch
    epochs: int

    def __post_init__(self):
        for name in ("ll_l2", "ll_linf", "pdf_l2", "pdf_linf"):
            v = getattr(self, name)
            if np.isfinite(v) and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


def mean_report(reports: list[ErrorReport]) -> ErrorReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    return ErrorReport(
        method=reports[0].method, d=reports[0].d, seed="mean",
        ll_l2=float(np.mean([r.ll_l2 for r in reports])),
        ll_linf=float(np.mean([r.ll_linf for r in reports])),
        pdf_l2=float(np.mean([r.pdf_l2 for r in reports])),
        pdf_linf=float(np.mean([r.pdf_linf for r in reports])),
        rate=float(np.mean([r.rate for r in reports])),
        epochs=reports[0].epochs)


PROBLEM_FACTORIES = {
    "ou": sp.make_ou,
    "varying": sp.make_varying_eigenspace,
    "gbm": sp.make_gbm,
    "ou-cauchy": lambda d, seed: sp.make_ou_nongaussian(d, dist.CAUCHY, seed),
    "ou-laplace": lambda d, seed: sp.make_ou_nongaussian(d, dist.LAPLACE, seed),
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "ou"
    d: int = 10
    problem_seed: int = 0
    method: str = tr.SM
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    test_size: int = 10_000
    n_test_times: int = 5
    out: str | None = None
    score_mode: str = "train"     # "train" | "exact" (skip stage 1)

    def __post_init__(self):
        if self.problem not in PROBLEM_FACTORIES:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.score_mode not in ("train", "exact"):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")
        if self.test_size < 1 or self.n_test_times < 1:
            raise ValueError("test_size and n_test_times must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"]["weights"] = asdict(self.train.weights)
        return d

    @staticmethod
    def from_json(data: dict) -> "ExperimentConfig":
        data = dict(data)
        train = dict(data.get("train", {}))
        weights = obj.LossWeights(**train.pop("weights", {}))
        if "seeds" in train:
            train["seeds"] = tuple(train["seeds"])
        data["train"] = tr.TrainConfig(weights=weights, **train)
        return ExperimentConfig(**data)


def make_problem(config: ExperimentConfig) -> sp.SdeProblem:
    return PROBLEM_FACTORIES[config.problem](config.d, seed=config.problem_seed)


def make_test_set(problem: sp.SdeProblem, n_points: int, n_times: int,
                  rng: np.random.Generator, em_steps: int = 100):
    """Test points from the marginal (or Euler-Maruyama when no marginal is
    available) at `n_times` evenly spaced times in (0, T], n_points/n_times
    points each."""
    per_time = n_points // n_times
    times = problem.T * (np.arange(1, n_times + 1) / n_times)
    xs, ts = [], []
    for t in times:
        if problem.marginal is not None:
            x = dist.sample(problem.marginal(t), per_time, rng)
        else:
            x0 = dist.sample(problem.p0, per_time, rng)
            x = sp.euler_maruyama(problem, x0, t, em_steps, rng)
        xs.append(x)
        ts.append(np.full(per_time, t))
    return np.concatenate(xs), np.concatenate(ts)


def _ll_predict_fn(model: obj.LLModel):
    apply = obj.ll_apply(model)
    batched = jax.jit(jax.vmap(apply, in_axes=(None, 0, 0)))

    def predict(x, t):
        return np.asarray(batched(model.net.params, jnp.asarray(x), jnp.asarray(t)))

    return predict


def evaluate_ll(model: obj.LLModel, x: np.ndarray, t: np.ndarray,
                exact_ll: np.ndarray) -> tuple[float, float, float, float]:
    pred = _ll_predict_fn(model)(x, t)
    ll_l2, ll_linf = relative_errors(pred, exact_ll)
    pdf_l2, pdf_linf = pdf_errors_from_ll(pred, exact_ll)
    return ll_l2, ll_linf, pdf_l2, pdf_linf


def reference_ll(problem: sp.SdeProblem, x: np.ndarray, t: np.ndarray,
                 mc_samples: int = 1_000_000,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Exact LL when the marginal is analytic, otherwise a Monte Carlo
    reference via the transition kernel."""
    if problem.marginal is not None:
        return np.array([problem.exact_ll(x[i], t[i]) for i in range(len(x))])
    from . import mc_reference as mc
    if problem.transition is None:
        raise NotImplementedError(
            f"problem {problem.tag!r} has neither marginal nor transition")
    if rng is None:
        rng = np.random.default_rng(0)
    return np.array([mc.mc_marginal_ll(problem, x[i], t[i], mc_samples, rng).estimate
                     for i in range(len(x))])


def run_experiment(config: ExperimentConfig) -> list[ErrorReport]:
    """Full two-stage pipeline over config.train.seeds; returns per-seed rows
    plus the mean row and, when config.out is set, writes CSV + JSON."""
    problem = make_problem(config)
    test_rng = np.random.default_rng(config.problem_seed + 7919)
    x_test, t_test = make_test_set(problem, config.test_size,
                                   config.n_test_times, test_rng)
    exact = reference_ll(problem, x_test, t_test, rng=test_rng)
    reports = []
    for seed in config.train.seeds:
        rng = np.random.default_rng(seed)
        cfg = replace(config.train, method=config.method)
        rate = 0.0
        if config.method == tr.DIRECT_LL:
            model, log = tr.train_direct_ll(problem, cfg, rng)
            rate = log.seconds_per_epoch
        else:
            if config.score_mode == "exact":
                frozen = sp.exact_score_jax(problem)
            else:
                score_model, slog = tr.train_score(problem, cfg, rng)
                frozen = score_model
                rate = slog.seconds_per_epoch
            model, log = tr.train_ll(problem, cfg, frozen, rng)
            rate += log.seconds_per_epoch if np.isfinite(log.seconds_per_epoch) else 0.0
        ll_l2, ll_linf, pdf_l2, pdf_linf = evaluate_ll(model, x_test, t_test, exact)
        reports.append(ErrorReport(config.method, config.d, seed, ll_l2, ll_linf,
                                   pdf_l2, pdf_linf, rate, cfg.epochs))
    reports.append(mean_report(reports))
    if config.out:
        emit_results(reports, config.out, "csv")
        emit_results(reports, os.path.splitext(config.out)[0] + ".json", "json")
    return reports


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_results(reports: list[ErrorReport], path: str, format: str = "csv") -> None:
    """Write reports with the canonical column order; mean row has seed='mean'."""
    if format == "csv":
        import io
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([getattr(r, c) for c in CSV_COLUMNS])
        _atomic_write(path, buf.getvalue())
    elif format == "json":
        rows = [{c: getattr(r, c) for c in CSV_COLUMNS} for r in reports]
        _atomic_write(path, json.dumps(rows, indent=2) + "\n")
    else:
        raise ValueError(f"unknown format {format!r}")


def parse_results(path: str) -> list[ErrorReport]:
    """Inverse of emit_results for CSV files."""
    reports = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            seed = row["seed"]
            reports.append(ErrorReport(
                method=row["method"], d=int(row["d"]),
                seed=seed if seed == "mean" else int(seed),
                ll_l2=float(row["ll_l2"]), ll_linf=float(row["ll_linf"]),
                pdf_l2=float(row["pdf_l2"]), pdf_linf=float(row["pdf_linf"]),
                rate=float(row["rate"]), epochs=int(row["epochs"])))
    return reports
