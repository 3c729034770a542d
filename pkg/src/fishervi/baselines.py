"""Reference methods the score-matching fits are compared against.

* Random-walk Metropolis-Hastings (the "true posterior" reference),
* the Jaakkola-Jordan quadratic-bound iteration for logistic regression,
* doubly stochastic variational inference (reparametrized ELBO ascent over
  a mean vector and a Cholesky factor),
* KL-divergence fitting of a 1-d normal by quadrature, for the 1-d
  comparisons.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.optimize
from scipy.special import expit

from fishervi.gaussian import MomentParam
from fishervi.integrate import IntegrationError, gauss_hermite, gh_expectation
from fishervi.targets import Dataset, TargetModel


class DivergenceError(RuntimeError):
    """A stochastic optimizer left the plausible region; carries diagnostics."""

    def __init__(self, message: str, step: int, norm: float):
        super().__init__(message)
        self.step = step
        self.norm = norm


@dataclass(frozen=True)
class McmcConfig:
    """Random-walk chain settings.

    proposal_scale "auto" adapts toward 0.234 acceptance during burn-in
    (stochastic approximation on the log scale) and freezes afterward, so
    the retained chain has a fixed, valid kernel.
    """

    n_iter: int = 100_000
    burn_in: int = 20_000
    proposal_scale: float | str = "auto"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if self.proposal_scale != "auto" and not float(self.proposal_scale) > 0:
            raise ValueError("proposal_scale must be positive or 'auto'")


@dataclass(frozen=True)
class McmcResult:
    """Post-burn-in draws with their sample statistics."""

    samples: np.ndarray
    acceptance_rate: float
    mean: np.ndarray
    cov: np.ndarray

    def to_csv(self, path) -> None:
        """One draw per row, header theta1,...,thetad, full precision."""
        d = self.samples.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"theta{i}" for i in range(1, d + 1)])
            for row in self.samples:
                writer.writerow([f"{v:.17g}" for v in row])

    def to_json_dict(self) -> dict:
        return {
            "n_samples": int(self.samples.shape[0]),
            "acceptance_rate": self.acceptance_rate,
            "mean": self.mean.tolist(),
            "cov": self.cov.ravel().tolist(),
        }


def metropolis_hastings(target: TargetModel, cfg: McmcConfig | None = None) -> McmcResult:
    """Gaussian random-walk chain on the target's unnormalized log density.

    Proposals theta' = theta + scale * eps with eps ~ N(0, I), accepted in
    log space. Deterministic for a fixed seed.
    """
    cfg = cfg or McmcConfig()
    d = target.dim
    rng = np.random.default_rng(cfg.seed)
    theta = np.zeros(d)
    lp = float(np.squeeze(target.log_unnorm(theta)))
    if not np.isfinite(lp):
        raise ValueError("log density is not finite at the zero initial state")

    adapt = cfg.proposal_scale == "auto"
    log_scale = np.log(2.38 / np.sqrt(d)) if adapt else np.log(float(cfg.proposal_scale))

    steps = rng.standard_normal((cfg.n_iter, d))
    log_u = np.log(rng.random(cfg.n_iter))
    kept = np.empty((cfg.n_iter - cfg.burn_in, d))
    accepted_after_burn_in = 0
    for t in range(cfg.n_iter):
        proposal = theta + np.exp(log_scale) * steps[t]
        lp_new = float(np.squeeze(target.log_unnorm(proposal)))
        log_ratio = lp_new - lp
        if log_u[t] < log_ratio:
            theta, lp = proposal, lp_new
            if t >= cfg.burn_in:
                accepted_after_burn_in += 1
        if adapt and t < cfg.burn_in:
            alpha = min(1.0, np.exp(log_ratio))
            log_scale += (t + 1.0) ** -0.6 * (alpha - 0.234)
        if t >= cfg.burn_in:
            kept[t - cfg.burn_in] = theta

    return McmcResult(
        samples=kept,
        acceptance_rate=accepted_after_burn_in / kept.shape[0],
        mean=kept.mean(axis=0),
        cov=np.atleast_2d(np.cov(kept.T)),
    )


# ---------------------------------------------------------------------------
# Jaakkola-Jordan bound
# ---------------------------------------------------------------------------


def jj_lambda(xi):
    """tanh(xi/2) / (4 xi), with the continuity value 1/8 at xi = 0."""
    xi = np.asarray(xi, dtype=float)
    out = np.full_like(xi, 0.125)
    nz = xi != 0
    out[nz] = np.tanh(xi[nz] / 2.0) / (4.0 * xi[nz])
    return out


def jj_fit(data: Dataset, tol: float = 1e-8, max_sweeps: int = 1000) -> MomentParam:
    """Quadratic-bound iteration for the logistic posterior.

    Alternates the Gaussian update
        Sigma = (I/tau2 + 2 sum_i lambda(xi_i) x_i x_i')^{-1}
        mu    = Sigma sum_i (y_i - 1/2) x_i
    with the bound-parameter update xi_i^2 = x_i'(Sigma + mu mu') x_i,
    until max |Delta xi| <= tol. The precision is a PSD sum plus I/tau2, so
    positive definiteness cannot fail.
    """
    x, y = data.x, data.y
    xi = np.sqrt(data.tau2) * np.linalg.norm(x, axis=1)
    half = x.T @ (y - 0.5)
    eye = np.eye(data.d)
    for _ in range(max_sweeps):
        lam = jj_lambda(xi)
        precision = eye / data.tau2 + 2.0 * (x.T * lam) @ x
        sigma = np.linalg.inv(precision)
        sigma = 0.5 * (sigma + sigma.T)
        mu = sigma @ half
        second = sigma + np.outer(mu, mu)
        xi_new = np.sqrt(np.einsum("ij,jk,ik->i", x, second, x))
        done = np.max(np.abs(xi_new - xi)) <= tol if xi.size else True
        xi = xi_new
        if done:
            break
    return MomentParam(mu, sigma)


# ---------------------------------------------------------------------------
# Doubly stochastic variational inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DsviConfig:
    n_steps: int = 20_000
    step_size: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.step_size <= 0:
            raise ValueError("n_steps must be >= 1 and step_size positive")


def _softplus(c):
    return np.maximum(c, 0.0) + np.log1p(np.exp(-np.abs(c)))


def dsvi_fit(data: Dataset, cfg: DsviConfig | None = None) -> MomentParam:
    """Reparametrized ELBO ascent over (mu, L) for the logistic posterior.

    theta = mu + L z with z ~ N(0, I), one draw per step, full-data
    gradients, step size decaying as 1/sqrt(t). The diagonal of L is kept
    positive through a softplus; off-diagonals are free. Deterministic for
    a fixed seed.

    Raises:
        DivergenceError: if ||mu|| exceeds 1e6 (gradient blow-up guard).
    """
    from fishervi.targets import LogisticTarget

    cfg = cfg or DsviConfig()
    target = LogisticTarget(data)
    d = data.d
    rng = np.random.default_rng(cfg.seed)

    mu = np.zeros(d)
    # start at the prior: L = sqrt(tau2) I
    c = np.log(np.expm1(np.sqrt(data.tau2))) * np.ones(d)
    low_off = np.zeros((d, d))
    strict = np.tril(np.ones((d, d)), k=-1)

    for t in range(1, cfg.n_steps + 1):
        diag = _softplus(c)
        low = low_off * strict + np.diag(diag)
        z = rng.standard_normal(d)
        theta = mu + low @ z
        g = target.score(theta)
        eta = cfg.step_size / np.sqrt(t)

        grad_low = np.outer(g, z)
        grad_diag = np.diag(grad_low) + 1.0 / diag  # entropy term d/dL_ii sum log L_ii
        mu = mu + eta * g
        low_off = low_off + eta * grad_low * strict
        c = c + eta * grad_diag * expit(c)

        norm = float(np.linalg.norm(mu))
        if norm > 1e6:
            raise DivergenceError(
                f"mean norm {norm:.3g} exceeded 1e6 at step {t}", step=t, norm=norm
            )

    diag = _softplus(c)
    low = low_off * strict + np.diag(diag)
    return MomentParam(mu, low @ low.T)


# ---------------------------------------------------------------------------
# 1-d KL fitting
# ---------------------------------------------------------------------------


def kl_divergence_1d(mu: float, sigma: float, target: TargetModel, n_nodes: int = 128) -> float:
    """E_q[log q - log target] under q = N(mu, sigma^2), up to the target's
    unknown normalizing constant (differences between fits are meaningful)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if target.dim != 1:
        raise ValueError("kl_divergence_1d applies to 1-d targets")
    entropy = 0.5 * np.log(2.0 * np.pi * np.e * sigma**2)
    expected = gh_expectation(
        lambda th: np.asarray(target.log_unnorm(th), dtype=float), float(mu), float(sigma**2), n_nodes
    )
    return float(-entropy - expected)


def kl_fit_1d(
    target: TargetModel,
    mu_range: tuple[float, float] = (-10.0, 10.0),
    sigma_range: tuple[float, float] = (0.05, 10.0),
    grid_size: int = 200,
    n_nodes: int = 128,
) -> tuple[float, float]:
    """Best-KL normal approximation of a 1-d target.

    Coarse (mu, sigma) grid scan (sigma log-spaced) followed by Nelder-Mead
    refinement over (mu, log sigma), all expectations by Gauss-Hermite.
    """
    if target.dim != 1:
        raise ValueError("kl_fit_1d applies to 1-d targets")
    t_nodes, t_weights = gauss_hermite(n_nodes)
    mus = np.linspace(mu_range[0], mu_range[1], grid_size)
    sigmas = np.geomspace(sigma_range[0], sigma_range[1], grid_size)
    # theta grid (n_mu, n_sigma, n_nodes), evaluated flat and reduced over nodes
    theta = mus[:, None, None] + np.sqrt(2.0) * sigmas[None, :, None] * t_nodes
    vals = np.asarray(target.log_unnorm(theta.ravel()), dtype=float).reshape(theta.shape)
    if not np.all(np.isfinite(vals)):
        raise IntegrationError("target log density non-finite on the search grid")
    expected = vals @ (t_weights / np.sqrt(np.pi))
    objective = -0.5 * np.log(2.0 * np.pi * np.e * sigmas**2)[None, :] - expected
    i, j = np.unravel_index(np.argmin(objective), objective.shape)

    def nm_objective(params):
        return kl_divergence_1d(params[0], np.exp(params[1]), target, n_nodes)

    result = scipy.optimize.minimize(
        nm_objective,
        np.array([mus[i], np.log(sigmas[j])]),
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000},
    )
    return float(result.x[0]), float(np.exp(result.x[1]))
