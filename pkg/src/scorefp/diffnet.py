"""Fully-connected network with exact first- and second-order derivative queries.

All losses in this package differentiate the network with respect to its
parameters, its spatial input, and time, sometimes twice. Everything here is
float64: the log-likelihood scales involved make float32 risky.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class DiffNet:
    """MLP over the concatenated input (x, t).

    widths[0] must be d+1 for a d-dimensional problem; widths[-1] is the
    output dimension. Hidden layers use tanh (C^2, required because the
    score-PDE residual differentiates the network twice), the output layer
    is linear.
    """

    widths: tuple[int, ...]
    params: tuple[tuple[jnp.ndarray, jnp.ndarray], ...]
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def with_params(self, params) -> "DiffNet":
        return replace(self, params=tuple(params))


_ACTIVATIONS = {"tanh": jnp.tanh, "identity": lambda z: z}


def init_diffnet(widths, seed: int, activation: str = "tanh") -> DiffNet:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ValueError(f"invalid layer widths {widths}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params.append((jnp.asarray(w), jnp.zeros(fan_out)))
    return DiffNet(widths=widths, params=tuple(params), activation=activation)


@lru_cache(maxsize=None)
def _apply_fn(widths: tuple[int, ...], activation: str):
    act = _ACTIVATIONS[activation]
    n_layers = len(widths) - 1

    def apply(params, x, t):
        h = jnp.concatenate([x, jnp.reshape(t, (1,))])
        for k, (w, b) in enumerate(params):
            h = w @ h + b
            if k < n_layers - 1:
                h = act(h)
        return h

    return apply


def apply_fn(net: DiffNet):
    """Pure function (params, x, t) -> output for this net's architecture."""
    return _apply_fn(net.widths, net.activation)


def _check_input(net: DiffNet, x, t):
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape != (net.in_dim - 1,):
        raise ValueError(
            f"expected input of shape ({net.in_dim - 1},), got {x.shape}"
        )
    t = jnp.asarray(t, dtype=jnp.float64)
    if not jnp.isfinite(t):
        raise ValueError("t must be finite")
    return x, t


def forward(net: DiffNet, x, t) -> jnp.ndarray:
    """Evaluate the network at (x, t)."""
    x, t = _check_input(net, x, t)
    return apply_fn(net)(net.params, x, t)


# --- parameter flattening -------------------------------------------------

def param_count(net: DiffNet) -> int:
    return sum(w.size + b.size for w, b in net.params)


def flatten_params(net: DiffNet) -> np.ndarray:
    """Canonical flat view: layer by layer, weight (row-major) then bias."""
    chunks = []
    for w, b in net.params:
        chunks.append(np.asarray(w).ravel())
        chunks.append(np.asarray(b).ravel())
    return np.concatenate(chunks)


def unflatten_params(net: DiffNet, flat) -> DiffNet:
    """Inverse of flatten_params for this architecture."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_count(net),):
        raise ValueError(
            f"expected flat vector of length {param_count(net)}, got {flat.shape}"
        )
    params, i = [], 0
    for fan_in, fan_out in zip(net.widths[:-1], net.widths[1:]):
        w = flat[i : i + fan_out * fan_in].reshape(fan_out, fan_in)
        i += fan_out * fan_in
        b = flat[i : i + fan_out]
        i += fan_out
        params.append((jnp.asarray(w), jnp.asarray(b)))
    return net.with_params(params)


# --- derivative queries ---------------------------------------------------

def grad_params(net: DiffNet, x, t, cotangent) -> np.ndarray:
    """d<cotangent, forward(x, t)>/dparams as a canonical flat vector."""
    x, t = _check_input(net, x, t)
    cotangent = jnp.asarray(cotangent, dtype=jnp.float64)
    if cotangent.shape != (net.out_dim,):
        raise ValueError(
            f"cotangent must have shape ({net.out_dim},), got {cotangent.shape}"
        )
    apply = apply_fn(net)
    _, vjp = jax.vjp(lambda p: apply(p, x, t), net.params)
    (grads,) = vjp(cotangent)
    return flatten_params(net.with_params(grads))


def grad_input(net: DiffNet, x, t):
    """Exact Jacobian w.r.t. x (out x d) and derivative w.r.t. t (out,)."""
    x, t = _check_input(net, x, t)
    apply = apply_fn(net)
    dx = jax.jacrev(lambda xi: apply(net.params, xi, t))(x)
    dt = jax.jacrev(lambda ti: apply(net.params, x, ti))(t)
    return np.asarray(dx), np.asarray(dt)


def jvp_input(net: DiffNet, x, t, v) -> jnp.ndarray:
    """(doutput/dx) @ v without materializing the Jacobian."""
    x, t = _check_input(net, x, t)
    v = jnp.asarray(v, dtype=jnp.float64)
    if v.shape != x.shape:
        raise ValueError(f"tangent must have shape {x.shape}, got {v.shape}")
    apply = apply_fn(net)
    _, out_tangent = jax.jvp(lambda xi: apply(net.params, xi, t), (x,), (v,))
    return out_tangent


def divergence_exact(net: DiffNet, x, t) -> float:
    """Trace of the input Jacobian, from d basis-vector JVPs. Requires out == d."""
    x, t = _check_input(net, x, t)
    d = x.shape[0]
    if net.out_dim != d:
        raise ValueError(
            f"divergence needs out_dim == d, got {net.out_dim} != {d}"
        )
    apply = apply_fn(net)

    def jvp_i(e):
        _, tang = jax.jvp(lambda xi: apply(net.params, xi, t), (x,), (e,))
        return tang

    tangents = jax.vmap(jvp_i)(jnp.eye(d))
    return float(jnp.trace(tangents))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def divergence_hutchinson(net: DiffNet, x, t, probes: int, rng: np.random.Generator) -> float:
    """Unbiased divergence estimate: mean over Rademacher probes of v^T J v."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x, t = _check_input(net, x, t)
    d = x.shape[0]
    if net.out_dim != d:
        raise ValueError(
            f"divergence needs out_dim == d, got {net.out_dim} != {d}"
        )
    apply = apply_fn(net)
    vs = jnp.asarray(rademacher(rng, (probes, d)))

    def probe(v):
        _, tang = jax.jvp(lambda xi: apply(net.params, xi, t), (x,), (v,))
        return v @ tang

    return float(jnp.mean(jax.vmap(probe)(vs)))


# --- checkpoint io --------------------------------------------------------

def save_checkpoint(net: DiffNet, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "widths": list(net.widths),
        "activation": net.activation,
        "params": flatten_params(net).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> DiffNet:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    skeleton = init_diffnet(payload["widths"], seed=0, activation=payload["activation"])
    return unflatten_params(skeleton, np.asarray(payload["params"]))
