"""Benchmark SDEs: coefficients, analytic marginals/transitions, and samplers.

Each problem carries the drift f, diffusion G, the derived probability-flow
coefficients A = f - 0.5 div(G G^T) and div(A), an initial density, and (where
tractable) the analytic marginal and transition kernel. The coefficient
callables are written in jax.numpy so the objectives module can differentiate
through them; they take a single point x (d,) and scalar t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import distributions as dist
from .distributions import CovarianceSpec, Density

jax.config.update("jax_enable_x64", True)


@dataclass(frozen=True, eq=False)
class Transition:
    """Analytic kernel p_{0t}(x | x0): sampler, log-density, and score in x.

    All three are batched: x and x0 are (n, d) and t is a scalar or an (n,)
    array of per-row times.
    """

    sample: Callable[[np.ndarray, "float | np.ndarray", np.random.Generator], np.ndarray]
    log_pdf: Callable[[np.ndarray, np.ndarray, "float | np.ndarray"], np.ndarray]
    score: Callable[[np.ndarray, np.ndarray, "float | np.ndarray"], np.ndarray]


@dataclass(frozen=True, eq=False)
class SdeProblem:
    tag: str
    d: int
    T: float
    f: Callable          # (x, t) -> (d,)
    G: Callable          # (x, t) -> (d, d)
    A: Callable          # (x, t) -> (d,)
    div_A: Callable      # (x, t) -> scalar
    p0: Density
    sigma_spec: Optional[CovarianceSpec] = None
    marginal: Optional[Callable[[float], Density]] = None
    transition: Optional[Transition] = None
    # batched drift/noise application for path simulation, numpy-friendly
    f_batch: Callable = None
    g_apply_batch: Callable = None  # (x (n,d), t, xi (n,d)) -> G(x,t) @ xi rowwise
    seed: int = 0

    def exact_score(self, x: np.ndarray, t: float) -> np.ndarray:
        """Analytic marginal score, if the marginal is known."""
        if self.marginal is None:
            raise ValueError(f"problem {self.tag!r} has no analytic marginal")
        return dist.score(self.marginal(t), x)

    def exact_ll(self, x: np.ndarray, t: float):
        if self.marginal is None:
            raise ValueError(f"problem {self.tag!r} has no analytic marginal")
        m = self.marginal(t)
        x = np.asarray(x, float)
        if x.ndim == 1:
            return dist.log_pdf(m, x)
        return np.array([dist.log_pdf(m, xi) for xi in x])


@dataclass
class ResidualBatch:
    """Times in [0, T] paired with points x_k ~ p_{t_k}."""

    t: np.ndarray        # (n,)
    x: np.ndarray        # (n, d)
    x0: np.ndarray | None = None   # start points when drawn via a transition
    via_em: bool = False

    def __len__(self) -> int:
        return len(self.t)


def _tcol(t):
    """Scalar t passes through; a per-row (n,) t becomes a column for broadcasting."""
    return np.asarray(t, float).reshape(-1, 1) if np.ndim(t) else float(t)


def _gaussian_marginal_factory(sigma_t_fn):
    def marginal(t: float) -> Density:
        sig = sigma_t_fn(t)
        vals, vecs = np.linalg.eigh(sig)
        spec = CovarianceSpec(d=sig.shape[0], q=vecs.T, eigenvalues=vals,
                              sigma=sig,
                              sqrt_sigma=vecs @ np.diag(np.sqrt(vals)) @ vecs.T)
        return dist.gaussian_density(np.zeros(sig.shape[0]), spec)
    return marginal


def _ou_transition(spec: CovarianceSpec) -> Transition:
    sigma = spec.sigma
    sigma_inv = np.linalg.inv(sigma)
    log_det = float(np.linalg.slogdet(sigma)[1])
    sqrt_sigma = spec.sqrt_sigma
    d = spec.d

    def _scales(t):
        t = np.asarray(t, float).reshape(-1, 1) if np.ndim(t) else float(t)
        return np.exp(-t / 2.0), -np.expm1(-t)    # mean scale, 1 - e^{-t}

    def sample_fn(x0, t, rng):
        x0 = np.atleast_2d(x0)
        m, c = _scales(t)
        z = rng.standard_normal(x0.shape)
        return m * x0 + np.sqrt(c) * z @ sqrt_sigma.T

    def log_pdf_fn(x, x0, t):
        x, x0 = np.atleast_2d(x), np.atleast_2d(x0)
        m, c = _scales(t)
        z = x - m * x0
        quad = np.einsum("ni,ij,nj->n", z, sigma_inv, z) / np.ravel(c)
        return -0.5 * (d * math.log(2 * math.pi) + d * np.log(np.ravel(c))
                       + log_det + quad)

    def score_fn(x, x0, t):
        x, x0 = np.atleast_2d(x), np.atleast_2d(x0)
        m, c = _scales(t)
        return -((x - m * x0) @ sigma_inv.T) / c

    return Transition(sample=sample_fn, log_pdf=log_pdf_fn, score=score_fn)


def make_ou(d: int, seed: int, T: float = 1.0,
            p0: Density | None = None, tag: str = "ou") -> SdeProblem:
    """dx = -x/2 dt + Sigma^{1/2} dw_t, p0 = N(0, I) unless overridden.

    Marginal (Gaussian p0 only): N(0, e^{-t} I + (1 - e^{-t}) Sigma).
    Transition: N(e^{-t/2} x0, (1 - e^{-t}) Sigma).
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    spec = dist.make_covariance(d, rng)
    sqrt_sigma_j = jnp.asarray(spec.sqrt_sigma)
    sigma = spec.sigma

    def f(x, t):
        return -0.5 * x

    def G(x, t):
        return sqrt_sigma_j

    def A(x, t):
        return -0.5 * x     # G constant in x, so A = f

    def div_A(x, t):
        return -0.5 * d

    gaussian_init = p0 is None
    if gaussian_init:
        p0 = dist.unit_gaussian(d)

    def sigma_t(t):
        return math.exp(-t) * np.eye(d) - math.expm1(-t) * sigma

    marginal = _gaussian_marginal_factory(sigma_t) if gaussian_init else None

    def f_batch(x, t):
        return -0.5 * x

    sqrt_sigma_T = spec.sqrt_sigma.T

    def g_apply_batch(x, t, xi):
        return xi @ sqrt_sigma_T

    return SdeProblem(
        tag=tag, d=d, T=T, f=f, G=G, A=A, div_A=div_A, p0=p0,
        sigma_spec=spec, marginal=marginal, transition=_ou_transition(spec),
        f_batch=f_batch, g_apply_batch=g_apply_batch, seed=seed,
    )


def make_ou_nongaussian(d: int, family: str, seed: int, T: float = 1.0) -> SdeProblem:
    """OU dynamics with a heavy-tailed initial density (cauchy or laplace)."""
    if family == dist.CAUCHY:
        p0 = dist.cauchy_density(d)
    elif family == dist.LAPLACE:
        p0 = dist.laplace_density(d)
    else:
        raise ValueError(f"unsupported family {family!r} (cauchy or laplace)")
    return make_ou(d, seed, T=T, p0=p0, tag=f"ou_{family}")


def make_varying_eigenspace(d: int, seed: int, T: float = 1.0) -> SdeProblem:
    """dx = (B + t I) dw_t with B = Q Gamma; the covariance eigenspace rotates.

    Marginal: N(0, (1 + t^3/3) I + t B B^T + (t^2/2)(B + B^T)). No transition
    kernel is exposed: the conditional score needs a fresh d x d inverse per
    sampled t, which rules out vanilla score matching here.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    spec = dist.make_covariance(d, rng)
    b = spec.q @ np.diag(spec.eigenvalues)
    # the eigenspace only varies when B is neither orthogonal nor symmetric
    assert not np.allclose(b @ b.T, np.eye(d)), "generated B is orthogonal"
    assert not np.allclose(b, b.T), "generated B is symmetric"
    b_j = jnp.asarray(b)
    eye_j = jnp.eye(d)

    def f(x, t):
        return jnp.zeros(d)

    def G(x, t):
        return b_j + t * eye_j

    def A(x, t):
        return jnp.zeros(d)    # G independent of x

    def div_A(x, t):
        return 0.0

    bbt = b @ b.T
    b_sym = b + b.T

    def sigma_t(t):
        return (1.0 + t**3 / 3.0) * np.eye(d) + t * bbt + 0.5 * t**2 * b_sym

    def f_batch(x, t):
        return np.zeros_like(x)

    def g_apply_batch(x, t, xi):
        return xi @ b.T + _tcol(t) * xi

    return SdeProblem(
        tag="varying_eigenspace", d=d, T=T, f=f, G=G, A=A, div_A=div_A,
        p0=dist.unit_gaussian(d), sigma_spec=spec,
        marginal=_gaussian_marginal_factory(sigma_t), transition=None,
        f_batch=f_batch, g_apply_batch=g_apply_batch, seed=seed,
    )


def make_gbm(d: int, seed: int, T: float = 0.3) -> SdeProblem:
    """dx = 0.5 e^{-t} x dt + e^{-t/2} diag(x) dw_t, p0 = LogNormal(0, Sigma).

    Marginal: LogNormal(0, Sigma + (1 - e^{-t}) I). In log space the transition
    is exact: log x_t | log x_0 ~ N(log x_0, (1 - e^{-t}) I).
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    spec = dist.make_covariance(d, rng)

    def f(x, t):
        return 0.5 * jnp.exp(-t) * x

    def G(x, t):
        return jnp.exp(-t / 2.0) * jnp.diag(x)

    def A(x, t):
        # f - 0.5 div(G G^T) with (G G^T)_{ij} = e^{-t} x_i^2 delta_ij
        return -0.5 * jnp.exp(-t) * x

    def div_A(x, t):
        return -0.5 * d * jnp.exp(-t)

    def sigma_t_np(t):
        return spec.sigma - math.expm1(-t) * np.eye(d)

    def marginal(t: float) -> Density:
        sig = sigma_t_np(t)
        vals, vecs = np.linalg.eigh(sig)
        cs = CovarianceSpec(d=d, q=vecs.T, eigenvalues=vals, sigma=sig,
                            sqrt_sigma=vecs @ np.diag(np.sqrt(vals)) @ vecs.T)
        return dist.log_normal_density(np.zeros(d), cs)

    def t_var(t):
        t = np.asarray(t, float).reshape(-1, 1) if np.ndim(t) else float(t)
        return -np.expm1(-t)

    def sample_fn(x0, t, rng_):
        x0 = np.atleast_2d(x0)
        z = rng_.standard_normal(x0.shape)
        return x0 * np.exp(np.sqrt(t_var(t)) * z)

    def log_pdf_fn(x, x0, t):
        x, x0 = np.atleast_2d(x), np.atleast_2d(x0)
        c = np.ravel(t_var(t))
        z = np.log(x) - np.log(x0)
        return (-0.5 * d * np.log(2 * math.pi * c)
                - 0.5 * np.sum(z**2, axis=1) / c - np.sum(np.log(x), axis=1))

    def score_fn(x, x0, t):
        x, x0 = np.atleast_2d(x), np.atleast_2d(x0)
        c = t_var(t)
        return (-1.0 - (np.log(x) - np.log(x0)) / c) / x

    def f_batch(x, t):
        return 0.5 * np.exp(-_tcol(t)) * x

    def g_apply_batch(x, t, xi):
        return np.exp(-_tcol(t) / 2.0) * x * xi

    return SdeProblem(
        tag="gbm", d=d, T=T, f=f, G=G, A=A, div_A=div_A,
        p0=dist.log_normal_density(np.zeros(d), spec), sigma_spec=spec,
        marginal=marginal,
        transition=Transition(sample=sample_fn, log_pdf=log_pdf_fn, score=score_fn),
        f_batch=f_batch, g_apply_batch=g_apply_batch, seed=seed,
    )


def exact_score_jax(problem: SdeProblem):
    """Jax-traceable (x, t) -> analytic marginal score, or None.

    Used by the residual-identity tests and the exact-score shortcut mode.
    """
    d = problem.d
    if problem.tag == "ou":
        sigma = jnp.asarray(problem.sigma_spec.sigma)
        eye = jnp.eye(d)

        def s(x, t):
            sig_t = jnp.exp(-t) * eye - jnp.expm1(-t) * sigma
            return -jnp.linalg.solve(sig_t, x)

        return s
    if problem.tag == "varying_eigenspace":
        b = jnp.asarray(problem.sigma_spec.q @ np.diag(problem.sigma_spec.eigenvalues))
        eye = jnp.eye(d)
        bbt = b @ b.T
        b_sym = b + b.T

        def s(x, t):
            sig_t = (1.0 + t**3 / 3.0) * eye + t * bbt + 0.5 * t**2 * b_sym
            return -jnp.linalg.solve(sig_t, x)

        return s
    if problem.tag == "gbm":
        sigma = jnp.asarray(problem.sigma_spec.sigma)
        eye = jnp.eye(d)

        def s(x, t):
            sig_t = sigma - jnp.expm1(-t) * eye
            return -1.0 / x - jnp.linalg.solve(sig_t, jnp.log(x)) / x

        return s
    return None


def exact_ll_jax(problem: SdeProblem):
    """Jax-traceable (x, t) -> analytic marginal log-likelihood, or None."""
    d = problem.d
    log_2pi = math.log(2 * math.pi)
    if problem.tag in ("ou", "varying_eigenspace"):
        eye = jnp.eye(d)
        if problem.tag == "ou":
            sigma = jnp.asarray(problem.sigma_spec.sigma)

            def sig_t_fn(t):
                return jnp.exp(-t) * eye - jnp.expm1(-t) * sigma
        else:
            b = jnp.asarray(problem.sigma_spec.q @ np.diag(problem.sigma_spec.eigenvalues))
            bbt = b @ b.T
            b_sym = b + b.T

            def sig_t_fn(t):
                return (1.0 + t**3 / 3.0) * eye + t * bbt + 0.5 * t**2 * b_sym

        def q(x, t):
            sig_t = sig_t_fn(t)
            _, logdet = jnp.linalg.slogdet(sig_t)
            return (-0.5 * d * log_2pi - 0.5 * logdet
                    - 0.5 * x @ jnp.linalg.solve(sig_t, x))

        return q
    if problem.tag == "gbm":
        sigma = jnp.asarray(problem.sigma_spec.sigma)
        eye = jnp.eye(d)

        def q(x, t):
            sig_t = sigma - jnp.expm1(-t) * eye
            _, logdet = jnp.linalg.slogdet(sig_t)
            lx = jnp.log(x)
            return (-0.5 * d * log_2pi - 0.5 * logdet
                    - 0.5 * lx @ jnp.linalg.solve(sig_t, lx) - jnp.sum(lx))

        return q
    return None


GBM_CLAMP_EPS = 1e-12


def euler_maruyama(problem: SdeProblem, x0: np.ndarray, t_target: float,
                   steps: int, rng: np.random.Generator) -> np.ndarray:
    """x_{k+1} = x_k + f dt + G sqrt(dt) xi, xi ~ N(0, I). Returns (n, d).

    For support-constrained problems (gbm), paths that cross zero are clamped
    to GBM_CLAMP_EPS; log-space simulation via the transition kernel is the
    production path there.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 < t_target <= problem.T + 1e-12):
        raise ValueError(f"t_target must lie in (0, T], got {t_target}")
    x = np.array(np.atleast_2d(x0), dtype=float)
    dt = t_target / steps
    sqrt_dt = math.sqrt(dt)
    positive_support = problem.p0.family == dist.LOG_NORMAL
    n_clamped = 0
    for k in range(steps):
        t_k = k * dt
        xi = rng.standard_normal(x.shape)
        x = x + problem.f_batch(x, t_k) * dt + sqrt_dt * problem.g_apply_batch(x, t_k, xi)
        if positive_support:
            bad = x <= 0.0
            n_clamped += int(bad.sum())
            np.clip(x, GBM_CLAMP_EPS, None, out=x)
    if n_clamped:
        import warnings
        warnings.warn(f"clamped {n_clamped} coordinates at the support boundary")
    return x


def sample_residual_batch(problem: SdeProblem, n: int, rng: np.random.Generator,
                          em_steps: int = 100) -> ResidualBatch:
    """t_k ~ Unif[0, T]; x_k from the analytic transition when available,
    Euler-Maruyama (em_steps over [0, t_k]) otherwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t = rng.uniform(0.0, problem.T, size=n)
    x0 = dist.sample(problem.p0, n, rng)
    if problem.transition is not None:
        x = problem.transition.sample(x0, t, rng)
        return ResidualBatch(t=t, x=x, x0=x0, via_em=False)
    # no tractable kernel: EM with em_steps per path; every path takes its own
    # step size t_i / em_steps so all paths advance in lockstep
    x = x0.copy()
    h = t / em_steps
    sqrt_h = np.sqrt(h)[:, None]
    h_col = h[:, None]
    for k in range(em_steps):
        t_k = k * h
        xi = rng.standard_normal(x.shape)
        x = (x + problem.f_batch(x, t_k) * h_col
             + sqrt_h * problem.g_apply_batch(x, t_k, xi))
    return ResidualBatch(t=t, x=x, x0=x0, via_em=True)


def exact_score_batch(problem: SdeProblem):
    """Batched (x (n,d), scalar t) -> (n,d) analytic score, for the flow ODE."""
    s = exact_score_jax(problem)
    if s is None:
        return None
    batched = jax.jit(jax.vmap(s, in_axes=(0, None)))
    return lambda x, t: np.asarray(batched(jnp.asarray(x), jnp.asarray(float(t))))


def flow_ode_sample(problem: SdeProblem, score_fn, x0: np.ndarray,
                    steps: int) -> np.ndarray:
    """Integrate dx = (A(x,t) - 0.5 G G^T s_t(x)) dt from 0 to T with RK4.

    score_fn maps a batch (n, d) and scalar t to scores (n, d); deterministic
    given x0.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(np.atleast_2d(x0), dtype=float)
    dt = problem.T / steps
    a_batch = _batched_A(problem)

    def rhs(xc, t):
        s = np.asarray(score_fn(xc, t))
        ggt_s = problem.g_apply_batch(xc, t, _gt_apply(problem, xc, t, s))
        return a_batch(xc, t) - 0.5 * ggt_s

    for k in range(steps):
        t = k * dt
        k1 = rhs(x, t)
        k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(x + dt * k3, t + dt)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at RK4 step {k + 1}")
    return x


def _batched_A(problem: SdeProblem):
    if problem.tag.startswith("ou"):
        return lambda x, t: -0.5 * x
    if problem.tag == "varying_eigenspace":
        return lambda x, t: np.zeros_like(x)
    if problem.tag == "gbm":
        return lambda x, t: -0.5 * math.exp(-t) * x
    a = jax.jit(jax.vmap(problem.A, in_axes=(0, None)))
    return lambda x, t: np.asarray(a(jnp.asarray(x), t))


def _gt_apply(problem: SdeProblem, x, t, v):
    """Rowwise G(x,t)^T v for the built-in problems (G symmetric or diagonal
    except varying_eigenspace)."""
    if problem.tag.startswith("ou"):
        return v @ problem.sigma_spec.sqrt_sigma    # symmetric
    if problem.tag == "varying_eigenspace":
        b = problem.sigma_spec.q @ np.diag(problem.sigma_spec.eigenvalues)
        return v @ (b + t * np.eye(problem.d))      # (B + tI)^T applied rowwise
    if problem.tag == "gbm":
        return math.exp(-t / 2.0) * x * v
    gt = jax.jit(jax.vmap(lambda xi, vi: problem.G(xi, t).T @ vi))
    return np.asarray(gt(jnp.asarray(x), jnp.asarray(v)))
