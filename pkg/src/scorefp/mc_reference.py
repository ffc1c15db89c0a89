"""Overflow-free Monte Carlo reference values for LL/PDF.

Log-density terms are shifted by their maximum before exponentiating
("normalize and sum"), so the mean of exponentials is computed exactly in
log space. Also hosts the three convolution benchmarks that document where
the vanilla estimator breaks down: short-tailed Gaussian (accurate at low d,
PDF collapse at d=50), and the long-tailed LogNormal and Cauchy cases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import distributions as dist
from .metrics_io import ErrorReport, pdf_errors_from_ll, relative_errors
from .sde_problems import SdeProblem

# exp underflows to 0 around -745; terms this far below the max contribute
# nothing to the float64 sum
UNDERFLOW_NATS = 700.0

GAUSSIAN = "gaussian"
LOG_NORMAL = "lognormal"
CAUCHY = "cauchy"
CONVOLUTION_KINDS = (GAUSSIAN, LOG_NORMAL, CAUCHY)


@dataclass(frozen=True)
class LogSumEstimate:
    estimate: float          # log((1/M) sum exp(q_m))
    M: int
    q_max: float             # largest log-term
    frac_within: float       # fraction of terms within UNDERFLOW_NATS of q_max
    se: float                # delta-method standard error of the estimate
    degenerate: bool = False  # all terms were -inf


def _finalize(s1: float, s2: float, n_within: int, M: int,
              q_max: float) -> LogSumEstimate:
    if not np.isfinite(q_max):
        return LogSumEstimate(estimate=-np.inf, M=M, q_max=q_max,
                              frac_within=0.0, se=np.nan, degenerate=True)
    mean_w = s1 / M
    estimate = q_max + np.log(mean_w)
    if M > 1:
        var_w = max(s2 / M - mean_w**2, 0.0) * M / (M - 1)
        se = float(np.sqrt(var_w / M) / mean_w)
    else:
        se = np.nan
    return LogSumEstimate(estimate=float(estimate), M=M, q_max=float(q_max),
                          frac_within=n_within / M, se=se)


def ll_normalize_and_sum(log_terms) -> LogSumEstimate:
    """Exact log-mean-exp of the given log-terms, max-normalized so the
    shifted exponentials are all <= 1."""
    q = np.asarray(log_terms, float).ravel()
    if q.size == 0:
        raise ValueError("need at least one log-term")
    if np.any(np.isnan(q)) or np.any(q == np.inf):
        raise ValueError("log-terms must be finite or -inf")
    q_max = np.max(q)
    if not np.isfinite(q_max):
        return _finalize(0.0, 0.0, 0, q.size, q_max)
    w = np.exp(q - q_max)
    n_within = int(np.count_nonzero(q >= q_max - UNDERFLOW_NATS))
    return _finalize(float(np.sum(w)), float(np.sum(w**2)), n_within,
                     q.size, q_max)


def mc_marginal_ll(problem: SdeProblem, x, t: float, M: int,
                   rng: np.random.Generator,
                   chunk: int = 100_000) -> LogSumEstimate:
    """Estimate log p_t(x) = log E_{x0~p0}[p_{0t}(x|x0)] over M initial draws;
    sampling and log-density evaluation run in chunks."""
    if problem.transition is None:
        raise NotImplementedError(
            f"problem {problem.tag!r} exposes no transition density")
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, float)
    terms = np.empty(M)
    done = 0
    while done < M:
        n = min(chunk, M - done)
        x0 = dist.sample(problem.p0, n, rng)
        xs = np.broadcast_to(x, (n, problem.d))
        terms[done:done + n] = problem.transition.log_pdf(xs, x0, float(t))
        done += n
    return ll_normalize_and_sum(terms)


# --- convolution benchmarks ----------------------------------------------
#
# Each case checks a closed-form identity: the sum of two unit Gaussians is
# N(0, 2I); the product of LogNormal(0, 0.1I) and LogNormal(0, I) is
# LogNormal(0, 1.1I); the sum of two isotropic Cauchy C(1) draws is C(2).
# The estimator averages the second factor's density over M draws of the
# first, with max-normalized summation per test point.

def _gaussian_case(d):
    result = dist.gaussian_density(np.zeros(d), dist.isotropic_spec(d, 2.0))
    sampler = dist.unit_gaussian(d)
    const = -0.5 * d * np.log(2 * np.pi)

    def log_terms(x_test, y):
        # ||x - y||^2 expanded through a matmul: (n_test, chunk)
        sq = (np.sum(x_test**2, axis=1)[:, None]
              - 2.0 * x_test @ y.T + np.sum(y**2, axis=1)[None, :])
        return const - 0.5 * sq

    return sampler, result, log_terms


def _lognormal_case(d):
    result = dist.log_normal_density(np.zeros(d), dist.isotropic_spec(d, 1.1))
    sampler = dist.log_normal_density(np.zeros(d), dist.isotropic_spec(d, 0.1))
    const = -0.5 * d * np.log(2 * np.pi)

    def log_terms(x_test, y):
        lx, ly = np.log(x_test), np.log(y)
        diff_sq = (np.sum(lx**2, axis=1)[:, None]
                   - 2.0 * lx @ ly.T + np.sum(ly**2, axis=1)[None, :])
        jac = -(np.sum(lx, axis=1)[:, None] - np.sum(ly, axis=1)[None, :])
        return const + jac - 0.5 * diff_sq

    return sampler, result, log_terms


def _cauchy_case(d):
    result = dist.cauchy_density(d, 2.0)
    sampler = dist.cauchy_density(d, 1.0)
    const = float(gammaln((1 + d) / 2) - gammaln(0.5) - 0.5 * d * np.log(np.pi))

    def log_terms(x_test, y):
        sq = (np.sum(x_test**2, axis=1)[:, None]
              - 2.0 * x_test @ y.T + np.sum(y**2, axis=1)[None, :])
        return const - 0.5 * (d + 1) * np.log1p(sq)

    return sampler, result, log_terms


_CASES = {GAUSSIAN: _gaussian_case, LOG_NORMAL: _lognormal_case,
          CAUCHY: _cauchy_case}


def convolution_ll_estimates(kind: str, d: int, M: int,
                             rng: np.random.Generator, n_test: int = 100,
                             chunk: int = 50_000):
    """(test points, estimated LL, exact LL, per-point standard errors)."""
    if kind not in _CASES:
        raise ValueError(f"unknown convolution kind {kind!r}")
    sampler, result, log_terms = _CASES[kind](d)
    x_test = dist.sample(result, n_test, rng)
    exact = np.array([dist.log_pdf(result, xi) for xi in x_test])
    # streaming max-normalized accumulation per test point
    q_max = np.full(n_test, -np.inf)
    s1 = np.zeros(n_test)
    s2 = np.zeros(n_test)
    n_within = np.zeros(n_test, dtype=np.int64)
    done = 0
    while done < M:
        n = min(chunk, M - done)
        y = dist.sample(sampler, n, rng)
        q = log_terms(x_test, y)
        cmax = np.maximum(q_max, np.max(q, axis=1))
        scale = np.exp(q_max - cmax)           # rescale prior sums to new max
        w = np.exp(q - cmax[:, None])
        s1 = s1 * scale + np.sum(w, axis=1)
        s2 = s2 * scale**2 + np.sum(w**2, axis=1)
        n_within += np.count_nonzero(q >= (cmax - UNDERFLOW_NATS)[:, None], axis=1)
        q_max = cmax
        done += n
    estimates = np.array([
        _finalize(s1[i], s2[i], int(n_within[i]), M, q_max[i]).estimate
        for i in range(n_test)])
    ses = np.array([
        _finalize(s1[i], s2[i], int(n_within[i]), M, q_max[i]).se
        for i in range(n_test)])
    return x_test, estimates, np.asarray(exact), ses


def convolution_experiment(kind: str, d: int, M: int,
                           rng: np.random.Generator,
                           n_test: int = 100) -> ErrorReport:
    """Run one convolution benchmark and report LL/PDF relative errors
    against the closed-form result distribution."""
    _, estimates, exact, _ = convolution_ll_estimates(kind, d, M, rng, n_test)
    ll_l2, ll_linf = relative_errors(estimates, exact)
    pdf_l2, pdf_linf = pdf_errors_from_ll(estimates, exact)
    return ErrorReport(method=f"mc-{kind}", d=d, seed=0, ll_l2=ll_l2,
                       ll_linf=ll_linf, pdf_l2=pdf_l2, pdf_linf=pdf_linf,
                       rate=float("nan"), epochs=0)


# --- reference files ------------------------------------------------------

def save_reference(path: str, x: np.ndarray, t, estimates: np.ndarray,
                   ses: np.ndarray, M: int, seed: int) -> None:
    """Cache MC reference LLs with provenance (seed, M, standard errors)."""
    payload = {
        "x": np.asarray(x).tolist(),
        "t": np.asarray(t, float).tolist(),
        "ll": np.asarray(estimates).tolist(),
        "se": np.asarray(ses).tolist(),
        "M": int(M),
        "seed": int(seed),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_reference(path: str):
    with open(path) as fh:
        payload = json.load(fh)
    return (np.asarray(payload["x"]), np.asarray(payload["t"]),
            np.asarray(payload["ll"]), np.asarray(payload["se"]),
            payload["M"], payload["seed"])
