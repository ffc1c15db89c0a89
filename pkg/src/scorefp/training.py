"""Adam optimizer, learning-rate schedule, and the two-stage training driver.

Stage 1 fits the score (SM, SSM, or score-PINN); stage 2 regresses the LL
model onto the LL-ODE right-hand side evaluated with the frozen score. The
direct-LL baseline trains a single LL network on the HJB residual with
adversarially perturbed batches. Every run is deterministic given
(config, seed): all randomness flows through one numpy Generator.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import distributions as dist
from . import objectives as obj
from .diffnet import DiffNet, flatten_params, init_diffnet, rademacher, unflatten_params
from .objectives import LLModel, LossWeights, ScoreModel
from .sde_problems import SdeProblem, sample_residual_batch

SM = "sm"
SSM = "ssm"
SCORE_PINN = "score-pinn"
DIRECT_LL = "direct-ll"
METHODS = (SM, SSM, SCORE_PINN, DIRECT_LL)


@dataclass(frozen=True)
class TrainConfig:
    method: str = SM
    epochs: int = 100_000
    n_residual: int = 1000
    lr0: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 10_000
    hidden: int = 512
    n_layers: int = 4            # weight layers, per the 4-layer MLP setup
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    trace_mode: str = "hutchinson"
    probes: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    constraint_mode: str = obj.HARD
    valid_every: int = 1000
    valid_size: int = 1000
    ll_trace_mode: str = "exact"  # trace mode for the frozen-score LL target
    adv_epochs: int = 5
    adv_step: float = 0.2
    adv_lr: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.n_residual < 1:
            raise ValueError("epochs must be >= 0 and n_residual >= 1")
        if self.lr0 <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("lr0 must be positive and decay in (0, 1]")

    def widths(self, d: int, out_dim: int) -> tuple[int, ...]:
        return (d + 1,) + (self.hidden,) * (self.n_layers - 1) + (out_dim,)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(n_params: int) -> "AdamState":
        return AdamState(m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float) -> tuple[AdamState, np.ndarray]:
    """Standard bias-corrected adaptive-moment update."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("params, grad, and moments must share one shape")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite gradient at step {state.step + 1}: "
            f"{np.count_nonzero(~np.isfinite(grad))} bad entries")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), new_params


def lr_at(config: TrainConfig, epoch: int) -> float:
    """lr0 * decay^floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay ** (epoch // config.lr_decay_every)


@dataclass
class TrainLog:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    valid_epochs: list = field(default_factory=list)
    valid_metric: list = field(default_factory=list)
    seconds_per_epoch: float = float("nan")


def _flatten_grads(grads) -> np.ndarray:
    """Flatten a (W, b)-per-layer gradient pytree in canonical param order."""
    return np.concatenate([np.asarray(g).ravel() for pair in grads for g in pair])


def _run_loop(net: DiffNet, config: TrainConfig, make_batch_args, valid_fn,
              loss_fn) -> tuple[DiffNet, TrainLog]:
    """Shared Adam loop: fresh residual batch each epoch, periodic validation,
    best-validation checkpoint returned."""
    vg = jax.jit(jax.value_and_grad(loss_fn))
    flat = flatten_params(net)
    state = AdamState.init(flat.size)
    log = TrainLog()
    best_metric, best_flat = math.inf, flat.copy()
    current = net
    t_start = time.perf_counter()
    for epoch in range(config.epochs):
        args = make_batch_args(current, epoch)
        loss, grads = vg(current.params, *args)
        loss = float(loss)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        state, flat = adam_step(state, flat, _flatten_grads(grads),
                                lr_at(config, epoch))
        current = unflatten_params(current, flat)
        log.loss.append(loss)
        log.lr.append(lr_at(config, epoch))
        if (epoch + 1) % config.valid_every == 0 or epoch + 1 == config.epochs:
            metric = float(valid_fn(current))
            log.valid_epochs.append(epoch + 1)
            log.valid_metric.append(metric)
            if math.isfinite(metric) and metric <= best_metric:
                best_metric, best_flat = metric, flat.copy()
    if config.epochs:
        log.seconds_per_epoch = (time.perf_counter() - t_start) / config.epochs
    best = unflatten_params(net, best_flat) if math.isfinite(best_metric) else current
    return best, log


def _score_validation(problem: SdeProblem, config: TrainConfig, model_template,
                      rng: np.random.Generator):
    """Fixed held-out set; metric is score RMSE vs the analytic score when the
    marginal is known, otherwise an exact-trace SSM loss on a fixed batch."""
    batch = sample_residual_batch(problem, config.valid_size, rng)
    if problem.marginal is not None:
        targets = np.stack([problem.exact_score(batch.x[i], batch.t[i])
                            for i in range(len(batch))])
        apply = obj.score_apply(model_template)
        batched = jax.jit(jax.vmap(apply, in_axes=(None, 0, 0)))
        xj, tj, tg = jnp.asarray(batch.x), jnp.asarray(batch.t), jnp.asarray(targets)

        def metric(net: DiffNet) -> float:
            pred = batched(net.params, xj, tj)
            return float(jnp.sqrt(jnp.mean((pred - tg) ** 2)))

        return metric
    ssm = obj.make_ssm_loss(model_template, trace_mode="exact")
    xj, tj = jnp.asarray(batch.x), jnp.asarray(batch.t)
    zeros = jnp.zeros_like(xj)

    def metric(net: DiffNet) -> float:
        return float(ssm(net.params, xj, tj, zeros))

    return metric


def _ll_validation(problem: SdeProblem, config: TrainConfig, model_template,
                   rng: np.random.Generator, loss_fn, loss_args_fn):
    """LL relative L2 on a fixed held-out set when the marginal is known;
    otherwise the training loss on that fixed batch (exact-trace probes)."""
    batch = sample_residual_batch(problem, config.valid_size, rng)
    if problem.marginal is not None:
        apply = obj.ll_apply(model_template)
        batched = jax.jit(jax.vmap(apply, in_axes=(None, 0, 0)))
        xj, tj = jnp.asarray(batch.x), jnp.asarray(batch.t)
        exact = np.array([problem.exact_ll(batch.x[i], batch.t[i])
                          for i in range(len(batch))])
        denom = float(np.linalg.norm(exact))

        def metric(net: DiffNet) -> float:
            pred = np.asarray(batched(net.params, xj, tj))
            return float(np.linalg.norm(pred - exact) / denom)

        return metric
    args = loss_args_fn(batch)

    def metric(net: DiffNet) -> float:
        return float(loss_fn(net.params, *args))

    return metric


def train_score(problem: SdeProblem, config: TrainConfig,
                rng: np.random.Generator) -> tuple[ScoreModel, TrainLog]:
    """Stage 1: fit the score with the configured method."""
    if config.method not in (SM, SSM, SCORE_PINN):
        raise ValueError(f"train_score does not handle method {config.method!r}")
    if config.method == SM and problem.transition is None:
        raise NotImplementedError(
            f"problem {problem.tag!r} has no transition kernel; SM unavailable")
    net = init_diffnet(config.widths(problem.d, problem.d),
                       seed=int(rng.integers(2**31)))
    model = ScoreModel(net=net, problem=problem, mode=config.constraint_mode)
    if config.epochs == 0:
        return model, TrainLog()
    valid_fn = _score_validation(problem, config, model, rng)

    if config.method == SM:
        loss_fn = obj.make_sm_loss(model, config.weights.sm_time_exponent)

        def make_args(current, epoch):
            batch = sample_residual_batch(problem, config.n_residual, rng)
            target = problem.transition.score(batch.x, batch.x0, batch.t)
            return (jnp.asarray(batch.x), jnp.asarray(batch.t), jnp.asarray(target))
    elif config.method == SSM:
        loss_fn = obj.make_ssm_loss(model, config.trace_mode)

        def make_args(current, epoch):
            batch = sample_residual_batch(problem, config.n_residual, rng)
            probes = rademacher(rng, batch.x.shape)
            return (jnp.asarray(batch.x), jnp.asarray(batch.t), jnp.asarray(probes))
    else:
        loss_fn = obj.make_score_pinn_loss(problem, model, config.weights,
                                           config.trace_mode)

        def make_args(current, epoch):
            batch = sample_residual_batch(problem, config.n_residual, rng)
            probes = rademacher(rng, batch.x.shape)
            return (jnp.asarray(batch.x), jnp.asarray(batch.t),
                    jnp.asarray(probes), jnp.asarray(batch.x0))

    best_net, log = _run_loop(net, config, make_args, valid_fn, loss_fn)
    return ScoreModel(net=best_net, problem=problem, mode=config.constraint_mode), log


def _q0_term(problem: SdeProblem, x0: np.ndarray, soft: bool) -> jnp.ndarray:
    if soft:
        return jnp.asarray([dist.log_pdf(problem.p0, xi) for xi in x0])
    return jnp.zeros(len(x0))


def train_ll(problem: SdeProblem, config: TrainConfig, frozen_score,
             rng: np.random.Generator) -> tuple[LLModel, TrainLog]:
    """Stage 2: regress the LL model onto L[s] with the score frozen."""
    net = init_diffnet(config.widths(problem.d, 1), seed=int(rng.integers(2**31)))
    model = LLModel(net=net, problem=problem, mode=config.constraint_mode)
    if config.epochs == 0:
        return model, TrainLog()
    target_fn = obj.make_l_target(problem, frozen_score, config.ll_trace_mode)
    exact_target_fn = obj.make_l_target(problem, frozen_score, "exact")
    loss_fn = obj.make_ll_ode_loss(problem, model, config.weights)
    soft = config.constraint_mode != obj.HARD

    def batch_args(batch, target_fn=target_fn):
        xj, tj = jnp.asarray(batch.x), jnp.asarray(batch.t)
        probes = rademacher(rng, batch.x.shape)
        target = target_fn(xj, tj, jnp.asarray(probes))
        return (xj, tj, target, jnp.asarray(batch.x0),
                _q0_term(problem, batch.x0, soft))

    def make_args(current, epoch):
        return batch_args(sample_residual_batch(problem, config.n_residual, rng))

    valid_fn = _ll_validation(problem, config, model, rng, loss_fn,
                              lambda b: batch_args(b, exact_target_fn))
    best_net, log = _run_loop(net, config, make_args, valid_fn, loss_fn)
    return LLModel(net=best_net, problem=problem, mode=config.constraint_mode), log


def train_direct_ll(problem: SdeProblem, config: TrainConfig,
                    rng: np.random.Generator) -> tuple[LLModel, TrainLog]:
    """Baseline: fit the LL directly on the HJB residual with adversarially
    perturbed residual batches."""
    if config.method != DIRECT_LL:
        raise ValueError("config.method must be 'direct-ll'")
    net = init_diffnet(config.widths(problem.d, 1), seed=int(rng.integers(2**31)))
    model = LLModel(net=net, problem=problem, mode=config.constraint_mode)
    if config.epochs == 0:
        return model, TrainLog()
    loss_fn = obj.make_direct_ll_loss(problem, model, config.weights,
                                      config.trace_mode)
    exact_loss_fn = obj.make_direct_ll_loss(problem, model, config.weights, "exact")
    adv_grad_fn = obj.make_hjb_sq_grad_x(problem, model)
    soft = config.constraint_mode != obj.HARD

    def make_args(current, epoch):
        batch = sample_residual_batch(problem, config.n_residual, rng)
        current_model = LLModel(net=current, problem=problem,
                                mode=config.constraint_mode)
        x_adv = obj.adversarial_perturb(batch.x, current_model, problem, batch.t,
                                        epochs=config.adv_epochs,
                                        step=config.adv_step,
                                        inner_lr=config.adv_lr, rng=rng,
                                        grad_fn=adv_grad_fn)
        return (jnp.asarray(x_adv), jnp.asarray(batch.t),
                jnp.asarray(rademacher(rng, batch.x.shape)),
                jnp.asarray(batch.x0), _q0_term(problem, batch.x0, soft))

    def valid_args(batch):
        return (jnp.asarray(batch.x), jnp.asarray(batch.t),
                jnp.zeros_like(jnp.asarray(batch.x)),
                jnp.asarray(batch.x0), _q0_term(problem, batch.x0, soft))

    valid_fn = _ll_validation(problem, config, model, rng, exact_loss_fn,
                              valid_args)
    best_net, log = _run_loop(net, config, make_args, valid_fn, loss_fn)
    return LLModel(net=best_net, problem=problem, mode=config.constraint_mode), log
