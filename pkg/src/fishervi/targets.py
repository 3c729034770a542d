"""Target distributions exposing an unnormalized log density and its score.

Normalizing constants are never computed: the score-matching objective does
not depend on them, and the benchmark harness normalizes 1-d densities on a
plotting grid when needed.

Multivariate targets accept a single point ``(d,)`` or a batch ``(n, d)``.
The 1-d test densities operate elementwise on scalars or arrays of any
shape, so a batch column ``(n, 1)`` works transparently.
"""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

from fishervi.gaussian import MomentParam

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


class TargetModel(ABC):
    """Differentiable unnormalized log posterior.

    Implementations are immutable after construction; ``log_unnorm`` and
    ``score`` are pure and safe to call concurrently.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        """Dimension of the variable."""

    @abstractmethod
    def log_unnorm(self, theta):
        """Unnormalized log density at ``theta``."""

    @abstractmethod
    def score(self, theta):
        """Gradient of ``log_unnorm`` with respect to ``theta``."""

    def score_affine(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Coefficients (c, G) when score(theta) = c + G theta, else None.

        Targets with an affine score admit exact least-squares assembly
        from the first two moments of the weighting Gaussian.
        """
        return None

    def _prep(self, theta) -> tuple[np.ndarray, str]:
        """Normalize input to a batch ``(n, d)`` plus a mode tag for output."""
        th = np.asarray(theta, dtype=float)
        d = self.dim
        if d == 1:
            if th.ndim == 0:
                return th.reshape(1, 1), "scalar"
            if th.ndim == 1:
                return th[:, None], "flat"
            if th.ndim == 2 and th.shape[1] == 1:
                return th, "batch"
        else:
            if th.ndim == 1 and th.shape[0] == d:
                return th[None, :], "single"
            if th.ndim == 2 and th.shape[1] == d:
                return th, "batch"
        raise ValueError(f"theta of shape {th.shape} does not match target dimension {d}")

    @staticmethod
    def _out_scalar(vals: np.ndarray, mode: str):
        """Shape a per-point scalar result ``(n,)`` back to the input's form."""
        if mode in ("scalar", "single"):
            return float(vals[0])
        return vals

    @staticmethod
    def _out_vector(vals: np.ndarray, mode: str):
        """Shape a per-point vector result ``(n, d)`` back to the input's form."""
        if mode == "scalar":
            return float(vals[0, 0])
        if mode == "flat":
            return vals[:, 0]
        if mode == "single":
            return vals[0]
        return vals


@dataclass(frozen=True)
class Dataset:
    """Logistic-regression data with a Gaussian prior variance.

    Attributes:
        x: Design matrix, shape ``(n, d)``.
        y: Binary responses in {0, 1}, shape ``(n,)``.
        tau2: Prior variance of the independent N(0, tau2 I) prior.

    ``n = 0`` is permitted (the posterior is then the prior), which the
    DSVI diagnostics rely on; the CSV loader requires at least one row.
    """

    x: np.ndarray
    y: np.ndarray
    tau2: float = 5.0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("y entries must be 0 or 1")
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "tau2", float(self.tau2))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_csv(cls, path, tau2: float = 5.0) -> "Dataset":
        """Load from a CSV with header row ``y,x1,...,xd``."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty file")
            expected = ["y"] + [f"x{i}" for i in range(1, len(header))]
            if [h.strip() for h in header] != expected:
                raise ValueError(f"{path}: header must be y,x1,...,xd, got {header}")
            rows = [[float(v) for v in row] for row in reader if row]
        if not rows:
            raise ValueError(f"{path}: no observations")
        arr = np.asarray(rows)
        return cls(x=arr[:, 1:], y=arr[:, 0], tau2=tau2)

    def to_csv(self, path) -> None:
        """Write in the ``y,x1,...,xd`` format at full float precision."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y"] + [f"x{i}" for i in range(1, self.d + 1)])
            for yi, xi in zip(self.y, self.x):
                writer.writerow([f"{int(yi)}"] + [f"{v:.17g}" for v in xi])


class LogisticTarget(TargetModel):
    """Bayesian logistic-regression posterior, up to its normalizing constant.

    log density: sum_i [y_i u_i - log(1 + exp(u_i))] - theta'theta / (2 tau2)
    with u_i = x_i' theta. The log(1+exp) term uses the overflow-safe form
    max(u, 0) + log1p(exp(-|u|)).
    """

    def __init__(self, data: Dataset):
        self.data = data

    @property
    def dim(self) -> int:
        return self.data.d

    def log_unnorm(self, theta):
        th, mode = self._prep(theta)
        u = th @ self.data.x.T
        log1pexp = np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
        ll = (self.data.y * u - log1pexp).sum(axis=1)
        ll -= 0.5 * np.sum(th**2, axis=1) / self.data.tau2
        return self._out_scalar(ll, mode)

    def score(self, theta):
        th, mode = self._prep(theta)
        u = th @ self.data.x.T
        out = (self.data.y - expit(u)) @ self.data.x - th / self.data.tau2
        return self._out_vector(out, mode)


def logistic_target(data: Dataset) -> LogisticTarget:
    """Posterior target for logistic-regression data under a N(0, tau2 I) prior."""
    return LogisticTarget(data)


class GaussianTarget(TargetModel):
    """Multivariate Gaussian target with known mean and covariance.

    Its score is affine, so solvers can assemble expectations exactly;
    used as the self-consistency ground truth in tests and benchmarks.
    """

    def __init__(self, mu, sigma):
        p = MomentParam(mu, sigma)
        self.mu = p.mu
        self.sigma = p.sigma
        low = p.chol()
        omega = np.linalg.inv(low.T) @ np.linalg.inv(low)
        self._omega = 0.5 * (omega + omega.T)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def log_unnorm(self, theta):
        th, mode = self._prep(theta)
        diff = th - self.mu
        val = -0.5 * np.einsum("ni,ij,nj->n", diff, self._omega, diff)
        return self._out_scalar(val, mode)

    def score(self, theta):
        th, mode = self._prep(theta)
        out = (self.mu - th) @ self._omega
        return self._out_vector(out, mode)

    def score_affine(self):
        return self._omega @ self.mu, -self._omega


# ---------------------------------------------------------------------------
# 1-d test densities
# ---------------------------------------------------------------------------


def student_t_score(theta, nu: float):
    """Score of the Student-t density: -(nu+1) theta / (nu + theta^2)."""
    th = np.asarray(theta, dtype=float)
    out = -(nu + 1.0) * th / (nu + th**2)
    return float(out) if np.isscalar(theta) else out


def mixture_score(theta, w: float, mu1: float, mu2: float):
    """Score of log[w phi(theta-mu1) + (1-w) phi(theta-mu2)].

    Computed through component responsibilities r = expit(l1 - l2), which
    stays finite for any theta (log-sum-exp discipline).
    """
    th = np.asarray(theta, dtype=float)
    with np.errstate(divide="ignore"):
        l1 = np.log(w) - 0.5 * (th - mu1) ** 2
        l2 = np.log1p(-w) - 0.5 * (th - mu2) ** 2
    r1 = expit(l1 - l2)
    out = -r1 * (th - mu1) - (1.0 - r1) * (th - mu2)
    return float(out) if np.isscalar(theta) else out


def _mills_ratio(t: np.ndarray) -> np.ndarray:
    """phi(t)/Phi(t), with an asymptotic expansion below t = -30.

    For t -> -inf, Phi(t) ~ phi(t)/(-t) (1 - 1/t^2 + 3/t^4 - 15/t^6), so the
    ratio ~ -t / (1 - 1/t^2 + 3/t^4 - 15/t^6); both phi and Phi underflow
    there, hence the branch.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    tail = t < -30.0
    safe = ~tail
    ts = t[safe]
    phi = np.exp(-0.5 * ts**2 - _LOG_SQRT_2PI)
    out[safe] = phi / ndtr(ts)
    tt = t[tail]
    if tt.size:
        inv2 = 1.0 / tt**2
        out[tail] = -tt / (1.0 - inv2 * (1.0 - inv2 * (3.0 - 15.0 * inv2)))
    return out


def skew_normal_score(theta, alpha: float):
    """Score of the standard skew normal: -theta + alpha phi(a t)/Phi(a t)."""
    th = np.asarray(theta, dtype=float)
    out = -th + alpha * _mills_ratio(alpha * th)
    return float(out) if np.isscalar(theta) else out


class _Target1D(TargetModel):
    """Base for the scalar test densities (elementwise log_unnorm/score)."""

    @property
    def dim(self) -> int:
        return 1


class StudentT(_Target1D):
    """Student-t density with ``nu`` degrees of freedom."""

    def __init__(self, nu: float):
        if not nu > 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)

    def log_unnorm(self, theta):
        th = np.asarray(theta, dtype=float)
        out = -0.5 * (self.nu + 1.0) * np.log1p(th**2 / self.nu)
        return float(out) if np.isscalar(theta) else out

    def score(self, theta):
        return student_t_score(theta, self.nu)


class NormalMixture(_Target1D):
    """Two-component unit-variance normal mixture w N(mu1,1) + (1-w) N(mu2,1)."""

    def __init__(self, w: float = 0.75, mu1: float = 0.0, mu2: float = 2.5):
        if not 0.0 < w <= 1.0:
            raise ValueError("w must lie in (0, 1]")
        self.w = float(w)
        self.mu1 = float(mu1)
        self.mu2 = float(mu2)

    def log_unnorm(self, theta):
        th = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore"):
            l1 = np.log(self.w) - 0.5 * (th - self.mu1) ** 2
            l2 = np.log1p(-self.w) - 0.5 * (th - self.mu2) ** 2
        out = np.logaddexp(l1, l2)
        return float(out) if np.isscalar(theta) else out

    def score(self, theta):
        return mixture_score(theta, self.w, self.mu1, self.mu2)


class SkewNormal(_Target1D):
    """Standard skew normal with shape ``alpha``: 2 phi(t) Phi(alpha t)."""

    def __init__(self, alpha: float):
        self.alpha = float(alpha)

    def log_unnorm(self, theta):
        th = np.asarray(theta, dtype=float)
        out = -0.5 * th**2 + log_ndtr(self.alpha * th)
        return float(out) if np.isscalar(theta) else out

    def score(self, theta):
        return skew_normal_score(theta, self.alpha)
