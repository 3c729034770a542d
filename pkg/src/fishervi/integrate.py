"""Expectation engines under a Gaussian weighting measure.

Three routes, matching what different problem sizes need:

* 1-d Gauss-Hermite quadrature (nodes by Golub-Welsch at startup, cached),
* seeded Monte Carlo over draws from the Gaussian family,
* a second-order expansion around the Gaussian mean for the two
  logistic-regression integrands that the structured solver assembly needs:
  ``1/(1+exp(x'theta))`` and ``theta_j/(1+exp(x'theta))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
from scipy.special import expit

from fishervi.gaussian import MomentParam, NaturalParam, sample
from fishervi.targets import Dataset


class IntegrationError(RuntimeError):
    """An expectation could not be evaluated (non-finite integrand)."""


@dataclass(frozen=True)
class IntegratorConfig:
    """How solver expectations are evaluated.

    Attributes:
        method: "quadrature" (d=1 only), "monte_carlo", or "taylor".
        n_nodes: Gauss-Hermite node count (quadrature).
        n_samples: Monte Carlo sample count.
        seed: Seed for the Monte Carlo draws.
    """

    method: str = "monte_carlo"
    n_nodes: int = 64
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("quadrature", "monte_carlo", "taylor"):
            raise ValueError(f"unknown integrator method {self.method!r}")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be at least 2")
        if self.n_samples < 100:
            raise ValueError("n_samples must be at least 100")


def _orthonormal_hermite(n: int, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values of the orthonormal Hermite polynomials 0..n-1 at t, plus p_n.

    Orthonormal with respect to exp(-t^2): p_{k+1} = (t p_k - sqrt(k/2)
    p_{k-1}) / sqrt((k+1)/2).
    """
    vals = np.empty((n + 1, t.shape[0]))
    vals[0] = np.pi**-0.25
    vals[1] = t * vals[0] * np.sqrt(2.0)
    for k in range(1, n):
        vals[k + 1] = (t * vals[k] - np.sqrt(k / 2.0) * vals[k - 1]) / np.sqrt((k + 1) / 2.0)
    return vals[:n], vals[n]


@lru_cache(maxsize=None)
def gauss_hermite(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes and weights for weight exp(-t^2).

    Golub-Welsch: eigenvalues of the symmetric tridiagonal Jacobi matrix
    (zero diagonal, off-diagonal sqrt(k/2)) supply the nodes, polished by
    one Newton step on the orthonormal recurrence. Weights come from the
    Christoffel identity 1 / sum_k p_k(t)^2, a sum of positive terms, which
    keeps the tiny extreme-node weights accurate in a relative sense (the
    raw eigenvector components do not, and high-degree exactness needs it).
    """
    if n_nodes < 2:
        raise ValueError("n_nodes must be at least 2")
    off = np.sqrt(np.arange(1, n_nodes) / 2.0)
    nodes = scipy.linalg.eigh_tridiagonal(np.zeros(n_nodes), off, eigvals_only=True)
    lower, p_n = _orthonormal_hermite(n_nodes, nodes)
    # p_n'(t) = sqrt(2 n) p_{n-1}(t)
    nodes = nodes - p_n / (np.sqrt(2.0 * n_nodes) * lower[-1])
    lower, _ = _orthonormal_hermite(n_nodes, nodes)
    weights = 1.0 / np.sum(lower**2, axis=0)
    # enforce the exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights


def gh_expectation(f: Callable, mu: float, sigma2: float, n_nodes: int = 64) -> float:
    """E[f(theta)] under N(mu, sigma2) by Gauss-Hermite quadrature.

    Change of variables theta = mu + sqrt(2 sigma2) t maps the Gaussian
    expectation onto the exp(-t^2) weight; exact for polynomials f of
    degree <= 2 n_nodes - 1.

    Args:
        f: Integrand; must accept an ndarray of evaluation points and
            return an array of the same shape.
        mu: Mean of the weighting normal.
        sigma2: Variance of the weighting normal (positive).
        n_nodes: Number of quadrature nodes.

    Raises:
        IntegrationError: if f is non-finite at any node.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    t, w = gauss_hermite(n_nodes)
    theta = mu + np.sqrt(2.0 * sigma2) * t
    vals = np.asarray(f(theta), dtype=float)
    if vals.shape != theta.shape:
        raise ValueError("integrand did not return one value per node")
    bad = ~np.isfinite(vals)
    if np.any(bad):
        loc = theta[bad][0]
        raise IntegrationError(f"integrand non-finite at node theta={loc!r}")
    return float((w / np.sqrt(np.pi)) @ vals)


class McEstimate(NamedTuple):
    """Monte Carlo estimate with per-component standard errors."""

    value: np.ndarray
    stderr: np.ndarray


def mc_expectation(f: Callable, psi: NaturalParam, cfg: IntegratorConfig) -> McEstimate:
    """Sample mean of f over draws from the Gaussian q_psi.

    Args:
        f: Maps a draw matrix of shape ``(n, d)`` to values ``(n,)`` or
            ``(n, k)`` (one row per draw).
        psi: Parameters of the weighting Gaussian.
        cfg: Sample count and seed; deterministic for a fixed seed.

    Raises:
        IntegrationError: if f is non-finite at some draw (reported by index).
    """
    draws = sample(psi, cfg.n_samples, cfg.seed)
    vals = np.asarray(f(draws), dtype=float)
    if vals.shape[0] != cfg.n_samples:
        raise ValueError("integrand did not return one row per draw")
    if vals.ndim == 1:
        vals = vals[:, None]
    finite = np.isfinite(vals).all(axis=1)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise IntegrationError(f"integrand non-finite at draw index {idx}")
    value = vals.mean(axis=0)
    stderr = vals.std(axis=0, ddof=1) / np.sqrt(cfg.n_samples)
    return McEstimate(value, stderr)


# ---------------------------------------------------------------------------
# Second-order expansion of the logistic-regression integrands
# ---------------------------------------------------------------------------
#
# With u = x'theta and s(u) = 1/(1+exp(u)) = expit(-u):
#   s'(u)  = -expit(u) (1 - expit(u))
#   s''(u) = -expit(u) (1 - expit(u)) (1 - 2 expit(u))
# E[f(theta)] is approximated by f(mu) + 0.5 tr(H_f(mu) Sigma); the gradient
# term drops because E[theta - mu] = 0.


def _sigmoid_derivs(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    e = expit(u)
    s0 = expit(-u)
    s1 = -e * s0
    s2 = s1 * (1.0 - 2.0 * e)
    return s0, s1, s2


def coord_sigmoid_grad(theta: np.ndarray, x: np.ndarray, j: int) -> np.ndarray:
    """Gradient of theta_j / (1 + exp(x'theta)) at theta."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    s0, s1, _ = _sigmoid_derivs(np.array(x @ theta))
    grad = theta[j] * s1 * x
    grad[j] += s0
    return grad


def coord_sigmoid_hessian(theta: np.ndarray, x: np.ndarray, j: int) -> np.ndarray:
    """Hessian of theta_j / (1 + exp(x'theta)) at theta."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    _, s1, s2 = _sigmoid_derivs(np.array(x @ theta))
    ej = np.zeros_like(theta)
    ej[j] = 1.0
    return s1 * (np.outer(ej, x) + np.outer(x, ej)) + theta[j] * s2 * np.outer(x, x)


def taylor_sigmoid_means(p: MomentParam, data: Dataset) -> np.ndarray:
    """E[1/(1+exp(x_i'theta))] for every observation, second-order expansion."""
    u0 = data.x @ p.mu
    s0, _, s2 = _sigmoid_derivs(u0)
    quad = np.einsum("ij,ij->i", data.x, data.x @ p.sigma)
    return s0 + 0.5 * s2 * quad


def taylor_coord_sigmoid_means(p: MomentParam, data: Dataset) -> np.ndarray:
    """E[theta_j/(1+exp(x_i'theta))] for every (i, j), shape ``(n, d)``."""
    u0 = data.x @ p.mu
    s0, s1, s2 = _sigmoid_derivs(u0)
    sx = data.x @ p.sigma
    quad = np.einsum("ij,ij->i", data.x, sx)
    return (s0 + 0.5 * s2 * quad)[:, None] * p.mu[None, :] + s1[:, None] * sx


def taylor_expectation_sigmoid(i: int, p: MomentParam, data: Dataset) -> float:
    """Expansion of E[1/(1+exp(x_i'theta))] around the Gaussian mean."""
    if not 0 <= i < data.n:
        raise IndexError(f"observation index {i} out of range")
    return float(taylor_sigmoid_means(p, data)[i])


def taylor_expectation_coord_sigmoid(i: int, j: int, p: MomentParam, data: Dataset) -> float:
    """Expansion of E[theta_j/(1+exp(x_i'theta))] around the Gaussian mean."""
    if not 0 <= i < data.n:
        raise IndexError(f"observation index {i} out of range")
    if not 0 <= j < data.d:
        raise IndexError(f"coordinate index {j} out of range")
    return float(taylor_coord_sigmoid_means(p, data)[i, j])
