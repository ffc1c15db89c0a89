"""Closed-form densities, scores, and samplers for the benchmark families.

Covariances follow the anisotropic construction used throughout the
experiments: random orthogonal eigenspace with reciprocal-paired eigenvalues,
so det(Sigma) = 1 for even d and the conditioning is mild but nontrivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Sigma = Q^T Gamma Q with paired eigenvalues lam_{2i+1} = 1/lam_{2i}."""

    d: int
    q: np.ndarray          # orthogonal, d x d
    eigenvalues: np.ndarray  # positive, length d
    sigma: np.ndarray
    sqrt_sigma: np.ndarray   # symmetric square root

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d,
            "q": self.q.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        })

    @staticmethod
    def from_json(text: str) -> "CovarianceSpec":
        data = json.loads(text)
        return _assemble(np.asarray(data["q"]), np.asarray(data["eigenvalues"]))


def _assemble(q: np.ndarray, eigenvalues: np.ndarray) -> CovarianceSpec:
    d = q.shape[0]
    gamma = np.diag(eigenvalues)
    sigma = q.T @ gamma @ q
    sigma = 0.5 * (sigma + sigma.T)
    sqrt_sigma = q.T @ np.diag(np.sqrt(eigenvalues)) @ q
    return CovarianceSpec(d=d, q=q, eigenvalues=eigenvalues, sigma=sigma,
                          sqrt_sigma=sqrt_sigma)


def make_covariance(d: int, rng: np.random.Generator) -> CovarianceSpec:
    """Random anisotropic covariance: Q from QR, eigenvalues in reciprocal pairs.

    lam_{2i} ~ Unif[1, 1.1], lam_{2i+1} = 1/lam_{2i}; odd trailing eigenvalue
    (odd d) is drawn from Unif[1, 1.1] unpaired.
    """
    if d < 2:
        raise ValueError("d must be >= 2 (eigenvalue pairing undefined below)")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q @ np.diag(np.sign(np.diag(r)))  # fix QR sign ambiguity
    eigenvalues = np.empty(d)
    for i in range(0, d - 1, 2):
        lam = rng.uniform(1.0, 1.1)
        eigenvalues[i] = lam
        eigenvalues[i + 1] = 1.0 / lam
    if d % 2 == 1:
        eigenvalues[d - 1] = rng.uniform(1.0, 1.1)
    return _assemble(q, eigenvalues)


GAUSSIAN = "gaussian"
LOG_NORMAL = "log_normal"
CAUCHY = "cauchy"
LAPLACE = "laplace"


@dataclass(frozen=True, eq=False)
class Density:
    """One of the closed-form families. Parameters not used by a family are None.

    gaussian / log_normal: mean + covariance (log-space for log_normal).
    cauchy: isotropic multivariate (elliptical, scale gamma).
    laplace: product of independent 1-d Laplace(a, b) factors.
    """

    family: str
    d: int
    mean: np.ndarray | None = None
    cov: CovarianceSpec | None = None
    scale: float = 1.0      # cauchy gamma
    loc: float = 0.0        # laplace a
    b: float = 1.0          # laplace b

    def __post_init__(self):
        if self.family not in (GAUSSIAN, LOG_NORMAL, CAUCHY, LAPLACE):
            raise ValueError(f"unknown family {self.family!r}")


def gaussian_density(mean: np.ndarray, cov: CovarianceSpec) -> Density:
    return Density(family=GAUSSIAN, d=cov.d, mean=np.asarray(mean, float), cov=cov)


def isotropic_spec(d: int, variance: float = 1.0) -> CovarianceSpec:
    """Covariance spec for variance * I."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    return _assemble(np.eye(d), variance * np.ones(d))


def unit_gaussian(d: int) -> Density:
    return gaussian_density(np.zeros(d), isotropic_spec(d))


def log_normal_density(mean: np.ndarray, cov: CovarianceSpec) -> Density:
    return Density(family=LOG_NORMAL, d=cov.d, mean=np.asarray(mean, float), cov=cov)


def cauchy_density(d: int, scale: float = 1.0) -> Density:
    return Density(family=CAUCHY, d=d, scale=scale)


def laplace_density(d: int, loc: float = 0.0, b: float = 1.0) -> Density:
    return Density(family=LAPLACE, d=d, loc=loc, b=b)


def _sigma_inv(cov: CovarianceSpec) -> np.ndarray:
    return cov.q.T @ np.diag(1.0 / cov.eigenvalues) @ cov.q


def _log_det(cov: CovarianceSpec) -> float:
    return float(np.sum(np.log(cov.eigenvalues)))


def log_pdf(density: Density, x: np.ndarray) -> float:
    """Exact log density, normalization constants included."""
    x = np.asarray(x, float)
    if x.shape != (density.d,):
        raise ValueError(f"expected x of shape ({density.d},), got {x.shape}")
    d = density.d
    if density.family == GAUSSIAN:
        z = x - density.mean
        quad = z @ _sigma_inv(density.cov) @ z
        return -0.5 * d * math.log(2 * math.pi) - 0.5 * _log_det(density.cov) - 0.5 * quad
    if density.family == LOG_NORMAL:
        if np.any(x <= 0):
            raise ValueError("log-normal support is the positive orthant")
        z = np.log(x) - density.mean
        quad = z @ _sigma_inv(density.cov) @ z
        return (-0.5 * d * math.log(2 * math.pi) - 0.5 * _log_det(density.cov)
                - 0.5 * quad - float(np.sum(np.log(x))))
    if density.family == CAUCHY:
        g = density.scale
        const = (gammaln((1 + d) / 2) - gammaln(0.5) - 0.5 * d * math.log(math.pi)
                 - d * math.log(g))
        return float(const - 0.5 * (d + 1) * np.log1p(np.dot(x, x) / g**2))
    # laplace
    z = np.abs(x - density.loc)
    return float(-d * math.log(2 * density.b) - np.sum(z) / density.b)


def score(density: Density, x: np.ndarray) -> np.ndarray:
    """grad_x log_pdf. Accepts a single point (d,) or a batch (n, d)."""
    x = np.asarray(x, float)
    batched = x.ndim == 2
    xs = x if batched else x[None, :]
    if xs.shape[1] != density.d:
        raise ValueError(f"expected points of dimension {density.d}")
    d = density.d
    if density.family == GAUSSIAN:
        out = -(xs - density.mean) @ _sigma_inv(density.cov)
    elif density.family == LOG_NORMAL:
        if np.any(xs <= 0):
            raise ValueError("log-normal support is the positive orthant")
        out = -1.0 / xs - ((np.log(xs) - density.mean) @ _sigma_inv(density.cov)) / xs
    elif density.family == CAUCHY:
        g2 = density.scale**2
        denom = g2 + np.sum(xs**2, axis=1, keepdims=True)
        out = -(d + 1) * xs / denom
    else:  # laplace; sign(0) = 0 is the symmetric subgradient choice
        out = -np.sign(xs - density.loc) / density.b
    return out if batched else out[0]


def jax_log_pdf_fn(density: Density):
    """Jax-traceable x -> log_pdf(density, x), for hard-constraint wrappers."""
    import jax.numpy as jnp

    d = density.d
    if density.family in (GAUSSIAN, LOG_NORMAL):
        inv = jnp.asarray(_sigma_inv(density.cov))
        mean = jnp.asarray(density.mean)
        const = -0.5 * d * math.log(2 * math.pi) - 0.5 * _log_det(density.cov)
        if density.family == GAUSSIAN:
            return lambda x: const - 0.5 * (x - mean) @ inv @ (x - mean)

        def ll_lognormal(x):
            z = jnp.log(x) - mean
            return const - 0.5 * z @ inv @ z - jnp.sum(jnp.log(x))

        return ll_lognormal
    if density.family == CAUCHY:
        g = density.scale
        const = (gammaln((1 + d) / 2) - gammaln(0.5)
                 - 0.5 * d * math.log(math.pi) - d * math.log(g))
        return lambda x: const - 0.5 * (d + 1) * jnp.log1p(x @ x / g**2)
    loc, b = density.loc, density.b
    return lambda x: -d * math.log(2 * b) - jnp.sum(jnp.abs(x - loc)) / b


def jax_score_fn(density: Density):
    """Jax-traceable x -> score(density, x)."""
    import jax.numpy as jnp

    d = density.d
    if density.family == GAUSSIAN:
        inv = jnp.asarray(_sigma_inv(density.cov))
        mean = jnp.asarray(density.mean)
        return lambda x: -inv @ (x - mean)
    if density.family == LOG_NORMAL:
        inv = jnp.asarray(_sigma_inv(density.cov))
        mean = jnp.asarray(density.mean)
        return lambda x: -1.0 / x - (inv @ (jnp.log(x) - mean)) / x
    if density.family == CAUCHY:
        g2 = density.scale**2
        return lambda x: -(d + 1) * x / (g2 + x @ x)
    loc, b = density.loc, density.b
    return lambda x: -jnp.sign(x - loc) / b


def sample(density: Density, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws, shape (n, d)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    d = density.d
    if density.family == GAUSSIAN:
        z = rng.standard_normal((n, d))
        return density.mean + z @ density.cov.sqrt_sigma.T
    if density.family == LOG_NORMAL:
        z = rng.standard_normal((n, d))
        return np.exp(density.mean + z @ density.cov.sqrt_sigma.T)
    if density.family == CAUCHY:
        # elliptical multivariate construction: one chi^2_1 divisor per draw,
        # not d independent 1-d Cauchys (the PDF is not a product form)
        z = rng.standard_normal((n, d))
        w = rng.chisquare(1, size=(n, 1))
        return density.scale * z / np.sqrt(w)
    # laplace via inverse CDF per coordinate
    u = rng.uniform(-0.5, 0.5, size=(n, d))
    return density.loc - density.b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
