"""Full-covariance multivariate Gaussian as an exponential family.

The density is written as ``q_psi(theta) = exp(psi @ s(theta) + g(psi))``
with all theta-dependence carried by the statistic vector ``s`` (the base
measure is identically zero). For dimension ``d`` the parameter vector has
``m = d(d+3)/2`` entries laid out as

* entries ``0..d-1``:        ``-0.5 * omega_11, ..., -0.5 * omega_dd``
  (scaled diagonal of the precision matrix ``Omega = Sigma^{-1}``),
* entries ``d..d+d(d-1)/2``: negated off-diagonal precision bands,
  ordered by offset ``k = 1..d-1`` and within each band by row
  ``j = 1..d-k`` (i.e. ``-omega_{1,1+k}, ..., -omega_{d-k,d}``),
* final ``d`` entries:       ``Omega @ mu``.

``s(theta)`` mirrors this layout exactly: squares ``theta_j^2``, band-ordered
cross products ``theta_j * theta_{j+k}``, then the linear terms, so that
``psi @ s(theta) = -0.5 theta' Omega theta + theta' Omega mu``.

Every function here is pure; parameter containers are frozen dataclasses.
Randomness enters only through explicit seeds (Philox, counter-based, so
draws are reproducible regardless of threading).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg


class PositiveDefiniteError(ValueError):
    """A covariance or precision matrix failed its Cholesky factorization.

    Attributes:
        minor: 1-based index of the offending leading minor, when known.
    """

    def __init__(self, message: str, minor: int | None = None):
        super().__init__(message)
        self.minor = minor


def _chol_lower(mat: np.ndarray, what: str) -> np.ndarray:
    """Lower Cholesky factor, raising PositiveDefiniteError with the minor index."""
    try:
        return scipy.linalg.cholesky(mat, lower=True)
    except scipy.linalg.LinAlgError as exc:
        minor = None
        token = str(exc).split("-th")[0]
        if token.isdigit():
            minor = int(token)
        raise PositiveDefiniteError(
            f"{what} is not positive definite: {exc}", minor=minor
        ) from exc


def _symmetrize_from_upper(mat: np.ndarray) -> np.ndarray:
    """Exactly symmetric matrix built from the upper triangle of ``mat``."""
    upper = np.triu(mat)
    return upper + np.triu(mat, k=1).T


@dataclass(frozen=True)
class MomentParam:
    """Mean/covariance parametrization of the Gaussian family.

    The stored covariance is rebuilt from the upper triangle of the input so
    ``sigma == sigma.T`` holds exactly; positive definiteness is checked by
    Cholesky at construction.

    Attributes:
        mu: Mean vector, shape ``(d,)``.
        sigma: Covariance matrix, shape ``(d, d)``, symmetric positive definite.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        d = mu.shape[0]
        if sigma.shape != (d, d):
            raise ValueError(f"sigma shape {sigma.shape} does not match mu dimension {d}")
        sigma = _symmetrize_from_upper(sigma)
        _chol_lower(sigma, "covariance")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance."""
        return _chol_lower(self.sigma, "covariance")


def _dim_from_len(m: int) -> int:
    d = int(round((-3 + np.sqrt(9 + 8 * m)) / 2))
    if d * (d + 3) // 2 != m:
        raise ValueError(f"vector length {m} is not d(d+3)/2 for any integer d")
    return d


@dataclass(frozen=True)
class NaturalParam:
    """Natural-parameter vector of the Gaussian family (module layout).

    Attributes:
        psi: Parameter vector, shape ``(m,)`` with ``m = d(d+3)/2``.
        d: Dimension of the underlying variable.
    """

    psi: np.ndarray
    d: int = field(default=0)

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim != 1:
            raise ValueError("psi must be a 1-d vector")
        d = self.d if self.d else _dim_from_len(psi.shape[0])
        if d * (d + 3) // 2 != psi.shape[0]:
            raise ValueError(f"psi length {psi.shape[0]} inconsistent with d={d}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "d", d)

    @property
    def m(self) -> int:
        return self.psi.shape[0]

    def precision(self) -> np.ndarray:
        """The implied precision matrix Omega (symmetric by construction)."""
        d = self.d
        omega = np.zeros((d, d))
        omega[np.diag_indices(d)] = -2.0 * self.psi[:d]
        for idx, (j, l) in enumerate(cross_pairs(d)):
            omega[j, l] = omega[l, j] = -self.psi[d + idx]
        return omega

    def linear(self) -> np.ndarray:
        """The final block ``Omega @ mu``."""
        return self.psi[-self.d:]


@lru_cache(maxsize=None)
def cross_pairs(d: int) -> tuple[tuple[int, int], ...]:
    """Canonical (0-based) index pairs of the cross-product block.

    Band order: offset k = 1..d-1, then row j = 0..d-1-k, giving pairs
    (j, j+k). This single ordering is shared by psi, s(theta), D(theta),
    and the assembled least-squares system.
    """
    return tuple((j, j + k) for k in range(1, d) for j in range(d - k))


def moment_to_natural(p: MomentParam) -> NaturalParam:
    """Convert (mu, Sigma) to the natural-parameter layout.

    Raises:
        PositiveDefiniteError: if Sigma fails its Cholesky factorization.
    """
    low = p.chol()
    omega = scipy.linalg.cho_solve((low, True), np.eye(p.dim))
    omega = 0.5 * (omega + omega.T)
    d = p.dim
    psi = np.empty(d * (d + 3) // 2)
    psi[:d] = -0.5 * np.diag(omega)
    for idx, (j, l) in enumerate(cross_pairs(d)):
        psi[d + idx] = -omega[j, l]
    psi[-d:] = omega @ p.mu
    return NaturalParam(psi, d)


def natural_to_moment(psi: NaturalParam) -> MomentParam:
    """Invert the natural parametrization: Sigma = Omega^{-1}, mu = Sigma (Omega mu).

    Raises:
        PositiveDefiniteError: if the implied precision is not positive definite
            (the solver layer owns recovery, e.g. by damping).
    """
    omega = psi.precision()
    low = _chol_lower(omega, "precision")
    sigma = scipy.linalg.cho_solve((low, True), np.eye(psi.d))
    mu = scipy.linalg.cho_solve((low, True), psi.linear())
    return MomentParam(mu, sigma)


def sufficient_stats(theta: np.ndarray) -> np.ndarray:
    """Statistic vector s(theta): squares, band-ordered cross products, linear terms.

    Accepts a single point of shape ``(d,)`` or a batch ``(n, d)``; returns
    ``(m,)`` or ``(n, m)`` respectively.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    n, d = th.shape
    m = d * (d + 3) // 2
    s = np.empty((n, m))
    s[:, :d] = th**2
    for idx, (j, l) in enumerate(cross_pairs(d)):
        s[:, d + idx] = th[:, j] * th[:, l]
    s[:, -d:] = th
    return s[0] if np.asarray(theta).ndim == 1 else s


def stat_jacobian(theta: np.ndarray) -> np.ndarray:
    """The d x m derivative matrix D(theta) with D[r, j] = d s_j / d theta_r."""
    th = np.asarray(theta, dtype=float)
    d = th.shape[0]
    m = d * (d + 3) // 2
    D = np.zeros((d, m))
    D[np.arange(d), np.arange(d)] = 2.0 * th
    for idx, (j, l) in enumerate(cross_pairs(d)):
        D[j, d + idx] = th[l]
        D[l, d + idx] = th[j]
    D[np.arange(d), m - d + np.arange(d)] = 1.0
    return D


def score(theta: np.ndarray, psi: NaturalParam) -> np.ndarray:
    """Gradient of log q_psi at theta, equal to D(theta) @ psi.

    Accepts ``(d,)`` or a batch ``(n, d)``.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    d = psi.d
    if th.shape[1] != d:
        raise ValueError(f"theta dimension {th.shape[1]} does not match psi (d={d})")
    out = np.empty_like(th)
    pairs = cross_pairs(d)
    # accumulate D(theta) @ psi without materializing D per point
    out[:] = psi.psi[-d:]
    out += 2.0 * th * psi.psi[:d]
    for idx, (j, l) in enumerate(pairs):
        out[:, j] += th[:, l] * psi.psi[d + idx]
        out[:, l] += th[:, j] * psi.psi[d + idx]
    return out[0] if np.asarray(theta).ndim == 1 else out


def log_normalizer(psi: NaturalParam) -> float:
    """g(psi) such that exp(psi @ s + g) integrates to one."""
    omega = psi.precision()
    low = _chol_lower(omega, "precision")
    mu = scipy.linalg.cho_solve((low, True), psi.linear())
    logdet = 2.0 * np.sum(np.log(np.diag(low)))
    return float(-0.5 * mu @ omega @ mu + 0.5 * logdet - 0.5 * psi.d * np.log(2 * np.pi))


def log_density(theta: np.ndarray, psi: NaturalParam) -> np.ndarray | float:
    """Normalized log density, evaluated through the natural parametrization."""
    s = sufficient_stats(theta)
    g = log_normalizer(psi)
    val = s @ psi.psi + g
    return float(val) if np.asarray(theta).ndim == 1 else val


def sample(psi: NaturalParam, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points from q_psi, deterministically for a given seed.

    Uses the lower Cholesky factor of Sigma applied to standard-normal draws
    from a counter-based (Philox) generator, so output is bit-identical
    across thread counts.
    """
    p = natural_to_moment(psi)
    low = p.chol()
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.standard_normal((n, p.dim))
    return p.mu + z @ low.T
