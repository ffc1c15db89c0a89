"""Training objectives: the LL-ODE operator, score-PDE residual, score-matching
and sliced score-matching losses, the LL-ODE loss, and the direct-LL HJB
baseline residual.

Conventions: per-point quantities are written as pure jax functions of a
parameter pytree and vmapped over batches; the public loss functions return
floats and share those vmapped kernels with the training loop. Hutchinson
probes are drawn by the caller (numpy RNG) and held fixed inside one residual
evaluation so the differentiated quantity is well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from . import distributions as dist
from .diffnet import DiffNet, apply_fn, rademacher
from .sde_problems import ResidualBatch, SdeProblem

jax.config.update("jax_enable_x64", True)

HARD = "hard"
PLAIN = "plain"


@dataclass(frozen=True)
class LossWeights:
    """lambda_initial / lambda_residual for Eq.-style composite losses;
    sm_time_exponent is the p in the SM weight lambda(t) = t^p."""

    lambda_initial: float = 0.0
    lambda_residual: float = 1.0
    sm_time_exponent: float = 0.5

    def __post_init__(self):
        if self.lambda_initial < 0 or self.lambda_residual < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_initial == 0 and self.lambda_residual == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Score network s_t(x; theta). Hard-constraint mode multiplies the net by
    t and adds the exact initial score, so s_0 holds for any theta."""

    net: DiffNet
    problem: SdeProblem
    mode: str = HARD

    def __post_init__(self):
        if self.mode not in (HARD, PLAIN):
            raise ValueError(f"unknown wrapper mode {self.mode!r}")
        if self.net.out_dim != self.problem.d:
            raise ValueError("score net output dim must equal problem dimension")
        if self.net.in_dim != self.problem.d + 1:
            raise ValueError("score net input dim must be d + 1")


@dataclass(frozen=True, eq=False)
class LLModel:
    """Scalar log-likelihood network q_t(x; phi); hard mode pins q_0 = log p_0."""

    net: DiffNet
    problem: SdeProblem
    mode: str = HARD

    def __post_init__(self):
        if self.mode not in (HARD, PLAIN):
            raise ValueError(f"unknown wrapper mode {self.mode!r}")
        if self.net.out_dim != 1:
            raise ValueError("LL net output dim must be 1")
        if self.net.in_dim != self.problem.d + 1:
            raise ValueError("LL net input dim must be d + 1")


def score_apply(model: ScoreModel):
    """(params, x, t) -> s_t(x) for this model's wrapper mode."""
    net = apply_fn(model.net)
    if model.mode == PLAIN:
        return net
    s0 = dist.jax_score_fn(model.problem.p0)

    def apply(params, x, t):
        return net(params, x, t) * t + s0(x)

    return apply


def ll_apply(model: LLModel):
    """(params, x, t) -> scalar q_t(x)."""
    net = apply_fn(model.net)
    if model.mode == PLAIN:
        return lambda params, x, t: net(params, x, t)[0]
    q0 = dist.jax_log_pdf_fn(model.problem.p0)

    def apply(params, x, t):
        return net(params, x, t)[0] * t + q0(x)

    return apply


def _as_score_fn(score, params=None):
    """Normalize a ScoreModel or a bare (x, t) callable to a jax callable."""
    if isinstance(score, ScoreModel):
        apply = score_apply(score)
        p = score.net.params if params is None else params
        return lambda x, t: apply(p, x, t)
    return score


# --- operator L -----------------------------------------------------------

def _l_scalar(problem: SdeProblem, sfun, x, t, probe):
    """L[s](x, t) = 0.5 div(G G^T s) + 0.5 ||G^T s||^2 - <A, s> - div A.

    probe=None computes the divergence exactly from d basis JVPs; otherwise a
    single fixed Rademacher probe gives the Hutchinson estimate.
    """

    def composite(xi):
        g = problem.G(xi, t)
        return g @ (g.T @ sfun(xi, t))

    if probe is None:
        eye = jnp.eye(problem.d)
        jvps = jax.vmap(lambda e: jax.jvp(composite, (x,), (e,))[1])(eye)
        div = jnp.trace(jvps)
    else:
        _, hv = jax.jvp(composite, (x,), (probe,))
        div = probe @ hv
    g = problem.G(x, t)
    s = sfun(x, t)
    gts = g.T @ s
    return 0.5 * div + 0.5 * gts @ gts - problem.A(x, t) @ s - problem.div_A(x, t)


def operator_L(problem: SdeProblem, score_fn, x, t,
               trace_mode: str = "exact", rng: np.random.Generator | None = None) -> float:
    """Evaluate L[s](x, t) for a jax-traceable score function or ScoreModel."""
    probe = _make_probe(trace_mode, problem.d, rng)
    sfun = _as_score_fn(score_fn)
    val = _l_scalar(problem, sfun, jnp.asarray(x, float), jnp.asarray(t, float), probe)
    return float(val)


def _make_probe(trace_mode, d, rng):
    if trace_mode == "exact":
        return None
    if trace_mode == "hutchinson":
        if rng is None:
            raise ValueError("hutchinson trace mode requires an rng")
        return jnp.asarray(rademacher(rng, (d,)))
    raise ValueError(f"unknown trace mode {trace_mode!r}")


# --- score-PINN -----------------------------------------------------------

def _score_pinn_residual_point(problem, sapply, params, x, t, probe):
    """dt s - grad_x L_hat[s]; the probe (or exact trace) is fixed inside."""
    _, dt_s = jax.jvp(lambda tt: sapply(params, x, tt), (t,), (jnp.ones(()),))
    sfun = lambda xi, tt: sapply(params, xi, tt)
    grad_l = jax.grad(lambda xi: _l_scalar(problem, sfun, xi, t, probe))(x)
    return dt_s - grad_l


def score_pinn_residual(problem: SdeProblem, model: ScoreModel, x, t,
                        rng: np.random.Generator | None = None,
                        trace_mode: str = "hutchinson") -> np.ndarray:
    """Pointwise score-PDE residual vector."""
    probe = _make_probe(trace_mode, problem.d, rng)
    sapply = score_apply(model)
    res = _score_pinn_residual_point(
        problem, sapply, model.net.params,
        jnp.asarray(x, float), jnp.asarray(t, float), probe)
    res = np.asarray(res)
    if not np.all(np.isfinite(res)):
        raise FloatingPointError(f"non-finite score-PDE residual at t={t}")
    return res


def make_score_pinn_loss(problem: SdeProblem, model: ScoreModel,
                         weights: LossWeights, trace_mode: str = "hutchinson"):
    """Jitted (params, x (n,d), t (n,), probes (n,d), x0 (m,d)) -> scalar loss.

    In hard-constraint mode the initial term is identically zero and skipped.
    probes are ignored in exact trace mode (pass anything of the right shape).
    """
    sapply = score_apply(model)
    exact = trace_mode == "exact"
    hard = model.mode == HARD
    s0 = dist.jax_score_fn(problem.p0)

    def residual_sq(params, x, t, probe):
        r = _score_pinn_residual_point(problem, sapply, params, x, t,
                                       None if exact else probe)
        return r @ r

    def loss(params, x, t, probes, x0):
        res = jnp.mean(jax.vmap(residual_sq, in_axes=(None, 0, 0, 0))(
            params, x, t, probes))
        total = weights.lambda_residual * res
        if not hard:
            def init_sq(xi):
                diff = sapply(params, xi, jnp.zeros(())) - s0(xi)
                return diff @ diff
            total = total + weights.lambda_initial * jnp.mean(jax.vmap(init_sq)(x0))
        return total

    return jax.jit(loss)


def loss_score_pinn(problem: SdeProblem, model: ScoreModel, batch: ResidualBatch,
                    weights: LossWeights, rng: np.random.Generator,
                    trace_mode: str = "hutchinson") -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    probes = rademacher(rng, batch.x.shape)
    fn = make_score_pinn_loss(problem, model, weights, trace_mode)
    x0 = batch.x0 if batch.x0 is not None else batch.x
    return float(fn(model.net.params, jnp.asarray(batch.x), jnp.asarray(batch.t),
                    jnp.asarray(probes), jnp.asarray(x0)))


# --- score matching -------------------------------------------------------

def make_sm_loss(model: ScoreModel, time_exponent: float = 0.5):
    """Jitted (params, x, t, target) -> mean_k t_k^p ||s(x_k,t_k) - target_k||^2."""
    sapply = score_apply(model)

    def point(params, x, t, target):
        diff = sapply(params, x, t) - target
        return t**time_exponent * (diff @ diff)

    def loss(params, x, t, target):
        return jnp.mean(jax.vmap(point, in_axes=(None, 0, 0, 0))(params, x, t, target))

    return jax.jit(loss)


def loss_sm(problem: SdeProblem, model: ScoreModel, batch: ResidualBatch,
            weights: LossWeights) -> float:
    """Conditional score-matching loss with time weight lambda(t) = t^p."""
    if problem.transition is None:
        raise NotImplementedError(
            f"problem {problem.tag!r} exposes no transition kernel; "
            "vanilla score matching is unavailable (use SSM or Score-PINN)")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.x0 is None:
        raise ValueError("SM batch must carry the start points x0")
    target = problem.transition.score(batch.x, batch.x0, batch.t)
    fn = make_sm_loss(model, weights.sm_time_exponent)
    return float(fn(model.net.params, jnp.asarray(batch.x), jnp.asarray(batch.t),
                    jnp.asarray(target)))


# --- sliced score matching ------------------------------------------------

def make_ssm_loss(model: ScoreModel, trace_mode: str = "hutchinson"):
    """Jitted (params, x, t, probes) -> mean_k [0.5||s||^2 + div s]."""
    sapply = score_apply(model)
    exact = trace_mode == "exact"

    def point(params, x, t, probe):
        s = sapply(params, x, t)
        sfun = lambda xi: sapply(params, xi, t)
        if exact:
            eye = jnp.eye(x.shape[0])
            jvps = jax.vmap(lambda e: jax.jvp(sfun, (x,), (e,))[1])(eye)
            div = jnp.trace(jvps)
        else:
            _, sv = jax.jvp(sfun, (x,), (probe,))
            div = probe @ sv
        return 0.5 * s @ s + div

    def loss(params, x, t, probes):
        return jnp.mean(jax.vmap(point, in_axes=(None, 0, 0, 0))(params, x, t, probes))

    return jax.jit(loss)


def loss_ssm(problem: SdeProblem, model: ScoreModel, batch: ResidualBatch,
             rng: np.random.Generator | None = None,
             trace_mode: str = "hutchinson") -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    probes = _make_batch_probes(trace_mode, batch.x.shape, rng)
    fn = make_ssm_loss(model, trace_mode)
    return float(fn(model.net.params, jnp.asarray(batch.x), jnp.asarray(batch.t),
                    jnp.asarray(probes)))


def _make_batch_probes(trace_mode, shape, rng):
    if trace_mode == "exact":
        return np.zeros(shape)
    if rng is None:
        raise ValueError("hutchinson trace mode requires an rng")
    return rademacher(rng, shape)


# --- LL-ODE ---------------------------------------------------------------

def make_l_target(problem: SdeProblem, score_fn, trace_mode: str = "exact"):
    """Jitted (x (n,d), t (n,), probes (n,d)) -> L[s] per point, for a frozen
    score. The score enters as a read-only callable: this loss never updates it."""
    sfun = _as_score_fn(score_fn)
    exact = trace_mode == "exact"

    def point(x, t, probe):
        return _l_scalar(problem, sfun, x, t, None if exact else probe)

    return jax.jit(jax.vmap(point))


def make_ll_ode_loss(problem: SdeProblem, ll_model: LLModel, weights: LossWeights):
    """Jitted (params, x, t, target_l, x0, q0_x0) -> LL-ODE loss. target_l is
    L[s] precomputed per point from the frozen score."""
    qapply = ll_apply(ll_model)
    hard = ll_model.mode == HARD

    def point(params, x, t, target):
        _, dt_q = jax.jvp(lambda tt: qapply(params, x, tt), (t,), (jnp.ones(()),))
        return (dt_q - target) ** 2

    def loss(params, x, t, target_l, x0, q0_x0):
        res = jnp.mean(jax.vmap(point, in_axes=(None, 0, 0, 0))(params, x, t, target_l))
        total = weights.lambda_residual * res
        if not hard:
            def init_sq(xi, qi):
                return (qapply(params, xi, jnp.zeros(())) - qi) ** 2
            total = total + weights.lambda_initial * jnp.mean(
                jax.vmap(init_sq)(x0, q0_x0))
        return total

    return jax.jit(loss)


def loss_ll_ode(problem: SdeProblem, ll_model: LLModel, frozen_score,
                batch: ResidualBatch, weights: LossWeights,
                rng: np.random.Generator | None = None,
                trace_mode: str = "exact") -> float:
    """Algorithm stage-2 loss; frozen_score may be a ScoreModel or callable and
    is never updated here."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    probes = _make_batch_probes(trace_mode, batch.x.shape, rng)
    target = make_l_target(problem, frozen_score, trace_mode)(
        jnp.asarray(batch.x), jnp.asarray(batch.t), jnp.asarray(probes))
    fn = make_ll_ode_loss(problem, ll_model, weights)
    x0 = batch.x0 if batch.x0 is not None else batch.x
    q0_x0 = np.array([dist.log_pdf(problem.p0, xi) for xi in np.atleast_2d(x0)])
    return float(fn(ll_model.net.params, jnp.asarray(batch.x), jnp.asarray(batch.t),
                    target, jnp.asarray(x0), jnp.asarray(q0_x0)))


# --- direct-LL HJB baseline ----------------------------------------------

def _hjb_residual_point(problem, qapply, params, x, t, probe):
    _, dt_q = jax.jvp(lambda tt: qapply(params, x, tt), (t,), (jnp.ones(()),))
    grad_q = lambda xi, tt: jax.grad(lambda xx: qapply(params, xx, tt))(xi)
    return dt_q - _l_scalar(problem, grad_q, x, t, probe)


def hjb_residual_direct_ll(problem: SdeProblem, ll_model: LLModel, x, t,
                           rng: np.random.Generator | None = None,
                           trace_mode: str = "hutchinson") -> float:
    """Residual of the HJB equation satisfied by the LL: dt q - L[grad q]."""
    probe = _make_probe(trace_mode, problem.d, rng)
    qapply = ll_apply(ll_model)
    val = float(_hjb_residual_point(problem, qapply, ll_model.net.params,
                                    jnp.asarray(x, float), jnp.asarray(t, float),
                                    probe))
    if not math.isfinite(val):
        raise FloatingPointError(f"non-finite HJB residual at t={t}")
    return val


def make_direct_ll_loss(problem: SdeProblem, ll_model: LLModel,
                        weights: LossWeights, trace_mode: str = "hutchinson"):
    """Jitted (params, x, t, probes, x0, q0_x0) -> mean squared HJB residual
    (+ initial term in plain mode)."""
    qapply = ll_apply(ll_model)
    exact = trace_mode == "exact"
    hard = ll_model.mode == HARD

    def point(params, x, t, probe):
        r = _hjb_residual_point(problem, qapply, params, x, t,
                                None if exact else probe)
        return r**2

    def loss(params, x, t, probes, x0, q0_x0):
        res = jnp.mean(jax.vmap(point, in_axes=(None, 0, 0, 0))(params, x, t, probes))
        total = weights.lambda_residual * res
        if not hard:
            def init_sq(xi, qi):
                return (qapply(params, xi, jnp.zeros(())) - qi) ** 2
            total = total + weights.lambda_initial * jnp.mean(
                jax.vmap(init_sq)(x0, q0_x0))
        return total

    return jax.jit(loss)


def make_hjb_sq_grad_x(problem: SdeProblem, ll_model: LLModel):
    """Jitted (params, x (n,d), t (n,), probes (n,d)) -> gradient of the squared
    HJB residual with respect to x, per point. Build once and reuse across
    epochs: params is an argument, so parameter updates do not retrace."""
    qapply = ll_apply(ll_model)

    def sq_residual(params, x, t_, probe):
        r = _hjb_residual_point(problem, qapply, params, x, t_, probe)
        return r**2

    return jax.jit(jax.vmap(jax.grad(sq_residual, argnums=1),
                            in_axes=(None, 0, 0, 0)))


def adversarial_perturb(points: np.ndarray, ll_model: LLModel, problem: SdeProblem,
                        t, epochs: int = 5, step: float = 0.2,
                        inner_lr: float = 1e-3,
                        rng: np.random.Generator | None = None,
                        grad_fn=None) -> np.ndarray:
    """Move residual points toward (approximate) maximizers of the squared HJB
    residual: `epochs` ascent steps of an adaptive-moment optimizer at
    `inner_lr`, each per-point update clipped to norm `step`."""
    params = ll_model.net.params
    rng = rng if rng is not None else np.random.default_rng(0)
    probes = jnp.asarray(rademacher(rng, points.shape))
    if grad_fn is None:
        grad_fn = make_hjb_sq_grad_x(problem, ll_model)

    x = np.asarray(points, float).copy()
    t = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for k in range(1, epochs + 1):
        g = np.asarray(grad_fn(params, jnp.asarray(x), jnp.asarray(t), probes))
        g = np.where(np.isfinite(g), g, 0.0)    # revert non-finite points
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        update = inner_lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
        norms = np.linalg.norm(update, axis=1, keepdims=True)
        update = np.where(norms > step, update * (step / np.maximum(norms, 1e-300)), update)
        x = x + update    # ascent: maximize the squared residual
    return x
