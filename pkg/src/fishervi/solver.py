"""Score-matching Gaussian fits by damped iteratively re-weighted least squares.

The objective is the expected squared norm of the difference between the
target's score and the Gaussian family's score, taken under the current
Gaussian iterate. Freezing the weighting measure makes the problem quadratic
in the natural parameters: the minimizer solves ``M psi = v`` with

    M = E[D(theta)' D(theta)],    v = E[D(theta)' z(theta)],

where ``D`` is the statistic Jacobian and ``z`` the target score. ``M``
depends only on the first two moments of the weighting Gaussian (every entry
of ``D'D`` has degree at most two), so it is assembled exactly; ``v`` is
assembled by quadrature (d=1), Monte Carlo, a structured logistic-regression
path, or exactly for targets with affine scores. Updates are damped,
``psi <- rho M^{-1} v + (1-rho) psi``, with automatic step halving when an
update would leave the positive-definite cone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

from fishervi.gaussian import (
    MomentParam,
    NaturalParam,
    PositiveDefiniteError,
    cross_pairs,
    moment_to_natural,
    natural_to_moment,
    score as gaussian_score,
)
from fishervi.integrate import IntegratorConfig, gh_expectation
from fishervi.targets import Dataset, LogisticTarget, TargetModel

ASSEMBLIES = (
    "auto",
    "generic_mc",
    "generic_quadrature",
    "logistic_taylor",
    "logistic_mc",
    "affine_exact",
)


class SolverError(RuntimeError):
    """The least-squares iteration could not proceed.

    Attributes:
        iteration: 0-based iteration index at which the failure occurred.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    """Damping, stopping rule, and expectation strategy for a fit run.

    Attributes:
        rho: Damping weight in (0, 1] on the least-squares solution.
        max_iter: Iteration cap.
        tol: Stop when the max-norm parameter change drops below this.
        integrator: Expectation engine settings.
        assembly: One of ASSEMBLIES; "auto" picks per target
            (affine-score targets exact, logistic structured with the
            second-order expansion, 1-d quadrature, otherwise Monte Carlo).
    """

    rho: float = 0.5
    max_iter: int = 500
    tol: float = 1e-6
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    assembly: str = "auto"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.assembly not in ASSEMBLIES:
            raise ValueError(f"unknown assembly {self.assembly!r}")


@dataclass(frozen=True)
class TraceEntry:
    iter: int
    psi: np.ndarray
    delta_inf: float
    objective: float | None = None


@dataclass(frozen=True)
class FitReport:
    """Outcome of a fit run, including the per-iteration trace."""

    psi_star: NaturalParam
    moment: MomentParam
    iterations: int
    converged: bool
    trace: tuple[TraceEntry, ...]
    wall_time_s: float

    def to_json_dict(self) -> dict:
        trace = []
        for entry in self.trace:
            row = {"iter": entry.iter, "delta_inf": entry.delta_inf}
            if entry.objective is not None:
                row["objective"] = entry.objective
            trace.append(row)
        return {
            "psi_star": self.psi_star.psi.tolist(),
            "mu": self.moment.mu.tolist(),
            "sigma": self.moment.sigma.ravel().tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": trace,
            "wall_time_s": self.wall_time_s,
        }


# ---------------------------------------------------------------------------
# Exact assembly: coefficient tensors and second-moment contractions
# ---------------------------------------------------------------------------
#
# Each column j of D(theta) is affine in theta: D[r, j] = sum_a C[j, r, a] T_a
# with T = (theta, 1). Then with E2 = E[T T'] (built from mu and Sigma),
#   M[j, l] = tr(C_j E2 C_l'),   and for affine scores z = G theta + c,
#   v[j] = tr(C_j E2 [G, c]').


@lru_cache(maxsize=None)
def _coeff_tensor(d: int) -> np.ndarray:
    m = d * (d + 3) // 2
    coeff = np.zeros((m, d, d + 1))
    for j in range(d):
        coeff[j, j, j] = 2.0
    for idx, (j, l) in enumerate(cross_pairs(d)):
        coeff[d + idx, j, l] = 1.0
        coeff[d + idx, l, j] = 1.0
    for j in range(d):
        coeff[m - d + j, j, d] = 1.0
    return coeff


def _second_moments(p: MomentParam) -> np.ndarray:
    d = p.dim
    e2 = np.empty((d + 1, d + 1))
    e2[:d, :d] = p.sigma + np.outer(p.mu, p.mu)
    e2[:d, d] = p.mu
    e2[d, :d] = p.mu
    e2[d, d] = 1.0
    return e2


def _assemble_m(p: MomentParam) -> np.ndarray:
    coeff = _coeff_tensor(p.dim)
    m = np.einsum("jra,ab,lrb->jl", coeff, _second_moments(p), coeff)
    return 0.5 * (m + m.T)


def assemble_mt(psi: NaturalParam) -> np.ndarray:
    """E[D(theta)' D(theta)] under q_psi, exact from the first two moments."""
    return _assemble_m(natural_to_moment(psi))


def _assemble_v_affine(p: MomentParam, c: np.ndarray, g: np.ndarray) -> np.ndarray:
    coeff = _coeff_tensor(p.dim)
    zc = np.hstack([g, np.asarray(c, dtype=float)[:, None]])
    return np.einsum("jra,ab,rb->j", coeff, _second_moments(p), zc)


# ---------------------------------------------------------------------------
# Monte Carlo / quadrature assembly of v
# ---------------------------------------------------------------------------


def _dtz_rows(draws: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Per-draw values of D(theta)' z(theta), shape ``(n, m)``."""
    n, d = draws.shape
    m = d * (d + 3) // 2
    out = np.empty((n, m))
    out[:, :d] = 2.0 * draws * scores
    for idx, (j, l) in enumerate(cross_pairs(d)):
        out[:, d + idx] = draws[:, l] * scores[:, j] + draws[:, j] * scores[:, l]
    out[:, -d:] = scores
    return out


def _base_draws(d: int, cfg: IntegratorConfig) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    return rng.standard_normal((cfg.n_samples, d))


def _transform(p: MomentParam, z: np.ndarray) -> np.ndarray:
    return p.mu + z @ p.chol().T


def _assemble_v_mc(
    p: MomentParam, target: TargetModel, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    draws = _transform(p, z)
    scores = target.score(draws)
    rows = _dtz_rows(draws, scores)
    n = rows.shape[0]
    return rows.mean(axis=0), rows.std(axis=0, ddof=1) / np.sqrt(n)


def _assemble_v_quadrature(
    p: MomentParam, target: TargetModel, n_nodes: int
) -> np.ndarray:
    if p.dim != 1:
        raise ValueError("quadrature assembly requires d=1")
    mu, s2 = float(p.mu[0]), float(p.sigma[0, 0])
    v0 = gh_expectation(lambda th: 2.0 * th * target.score(th), mu, s2, n_nodes)
    v1 = gh_expectation(target.score, mu, s2, n_nodes)
    return np.array([v0, v1])


def assemble_vt_generic(
    psi: NaturalParam,
    target: TargetModel,
    cfg: IntegratorConfig | None = None,
    return_stderr: bool = False,
):
    """E[D(theta)' z(theta)] under q_psi via the configured integrator.

    Quadrature (d=1) is deterministic and reports zero standard error;
    Monte Carlo is deterministic for a fixed seed.
    """
    cfg = cfg or IntegratorConfig()
    if target.dim != psi.d:
        raise ValueError(f"target dimension {target.dim} does not match psi (d={psi.d})")
    p = natural_to_moment(psi)
    if cfg.method == "quadrature":
        v = _assemble_v_quadrature(p, target, cfg.n_nodes)
        return (v, np.zeros_like(v)) if return_stderr else v
    v, se = _assemble_v_mc(p, target, _base_draws(psi.d, cfg))
    return (v, se) if return_stderr else v


# ---------------------------------------------------------------------------
# Structured logistic-regression assembly
# ---------------------------------------------------------------------------
#
# For the logistic posterior the target score is
#   z(theta) = sum_i x_i (y_i - 1 + s_i(theta)) - theta / tau2,
# with s_i(theta) = 1/(1+exp(x_i'theta)). Taking E[D' z] blockwise gives,
# with A[r, j] = sum_i x_ir ((y_i - 1) mu_j + E[theta_j s_i]) and
# S2 = Sigma + mu mu':
#   quadratic stat (j, l):  A[j, l] + A[l, j] - 2 S2[j, l] / tau2
#   linear stat r:          sum_i x_ir (y_i - 1 + E[s_i]) - mu_r / tau2.
# Only E[s_i] and E[theta_j s_i] require an expectation engine (second-order
# expansion or Monte Carlo); everything else is exact in (mu, Sigma).


def _v_from_means(
    p: MomentParam, data: Dataset, e_sig: np.ndarray, e_coord: np.ndarray
) -> np.ndarray:
    d = data.d
    m = d * (d + 3) // 2
    s2 = p.sigma + np.outer(p.mu, p.mu)
    a = data.x.T @ ((data.y - 1.0)[:, None] * p.mu[None, :] + e_coord)
    v = np.empty(m)
    v[:d] = 2.0 * (np.diag(a) - np.diag(s2) / data.tau2)
    for idx, (j, l) in enumerate(cross_pairs(d)):
        v[d + idx] = a[j, l] + a[l, j] - 2.0 * s2[j, l] / data.tau2
    v[-d:] = data.x.T @ (data.y - 1.0 + e_sig) - p.mu / data.tau2
    return v


def _logistic_rows(p: MomentParam, data: Dataset, draws: np.ndarray) -> np.ndarray:
    """Per-draw structured v values (Monte Carlo enters only the sigmoid means)."""
    d = data.d
    m = d * (d + 3) // 2
    n_draws = draws.shape[0]
    sig = expit(-(draws @ data.x.T))  # (S, n)
    b = sig @ data.x  # (S, d): sum_i s_i(theta) x_i
    const_a = np.outer(data.x.T @ (data.y - 1.0), p.mu)  # (d, d)
    s2 = p.sigma + np.outer(p.mu, p.mu)
    rows = np.empty((n_draws, m))
    rows[:, :d] = 2.0 * (np.diag(const_a)[None, :] + b * draws - np.diag(s2)[None, :] / data.tau2)
    for idx, (j, l) in enumerate(cross_pairs(d)):
        rows[:, d + idx] = (
            const_a[j, l]
            + const_a[l, j]
            + b[:, j] * draws[:, l]
            + b[:, l] * draws[:, j]
            - 2.0 * s2[j, l] / data.tau2
        )
    rows[:, -d:] = (data.y - 1.0) @ data.x + b - p.mu[None, :] / data.tau2
    return rows


def assemble_vt_logistic(
    psi: NaturalParam,
    data: Dataset,
    method: str = "taylor",
    cfg: IntegratorConfig | None = None,
    return_stderr: bool = False,
):
    """Structured assembly of E[D' z] for the logistic-regression posterior.

    Args:
        psi: Current Gaussian iterate.
        data: Logistic-regression data (carries the prior variance).
        method: "taylor" (second-order expansion of the sigmoid means,
            deterministic) or "mc" (seeded Monte Carlo means).
        cfg: Sample count and seed for method="mc".
        return_stderr: Also return per-entry standard errors (zero for
            the deterministic path).
    """
    if data.d != psi.d:
        raise ValueError(f"data dimension {data.d} does not match psi (d={psi.d})")
    if method not in ("taylor", "mc"):
        raise ValueError(f"unknown method {method!r}")
    p = natural_to_moment(psi)
    if method == "taylor":
        from fishervi.integrate import taylor_coord_sigmoid_means, taylor_sigmoid_means

        v = _v_from_means(p, data, taylor_sigmoid_means(p, data), taylor_coord_sigmoid_means(p, data))
        return (v, np.zeros_like(v)) if return_stderr else v
    cfg = cfg or IntegratorConfig()
    rows = _logistic_rows(p, data, _transform(p, _base_draws(psi.d, cfg)))
    v = rows.mean(axis=0)
    if not return_stderr:
        return v
    se = rows.std(axis=0, ddof=1) / np.sqrt(rows.shape[0])
    return v, se


# ---------------------------------------------------------------------------
# Divergence estimators
# ---------------------------------------------------------------------------


def _score_difference_sq(
    psi: NaturalParam, target: TargetModel, draws: np.ndarray, form: str
) -> np.ndarray:
    if form == "reduced":
        q_scores = gaussian_score(draws, psi)
    elif form == "direct":
        p = natural_to_moment(psi)
        omega = psi.precision()
        q_scores = (p.mu - draws) @ omega
    else:
        raise ValueError(f"unknown form {form!r}")
    diff = target.score(draws) - q_scores
    return np.sum(diff * diff, axis=1)


def fisher_divergence_estimate(
    psi: NaturalParam,
    target: TargetModel,
    cfg: IntegratorConfig | None = None,
    form: str = "reduced",
) -> tuple[float, float]:
    """Estimate of E_q||score(target) - score(q)||^2 with its standard error.

    form="reduced" evaluates the Gaussian score through the statistic
    Jacobian (D(theta) psi); form="direct" evaluates it from the moment
    parametrization. The two are algebraically identical, so their agreement
    exercises the assembly plumbing.
    """
    cfg = cfg or IntegratorConfig()
    if target.dim != psi.d:
        raise ValueError(f"target dimension {target.dim} does not match psi (d={psi.d})")
    if cfg.method == "quadrature":
        if psi.d != 1:
            raise ValueError("quadrature is permitted only for d=1")
        p = natural_to_moment(psi)
        val = gh_expectation(
            lambda th: _score_difference_sq(psi, target, th[:, None], form),
            float(p.mu[0]),
            float(p.sigma[0, 0]),
            cfg.n_nodes,
        )
        return val, 0.0
    p = natural_to_moment(psi)
    draws = _transform(p, _base_draws(psi.d, cfg))
    vals = _score_difference_sq(psi, target, draws, form)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.shape[0]))


def fisher_divergence(
    psi: NaturalParam, target: TargetModel, cfg: IntegratorConfig | None = None
) -> float:
    """Score-matching divergence of the target from q_psi (nonnegative)."""
    return fisher_divergence_estimate(psi, target, cfg)[0]


# ---------------------------------------------------------------------------
# The iteration
# ---------------------------------------------------------------------------


def _solve_normal_equations(
    m: np.ndarray, v: np.ndarray, iteration: int | None = None
) -> np.ndarray:
    reg = 1e-10 * (1.0 + np.max(np.abs(np.diag(m))))
    try:
        low = scipy.linalg.cho_factor(m + reg * np.eye(m.shape[0]), lower=True)
    except scipy.linalg.LinAlgError as exc:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise SolverError(f"normal matrix not factorizable{where}: {exc}", iteration) from exc
    x = scipy.linalg.cho_solve(low, v)
    # one refinement pass against the unregularized matrix removes the
    # O(reg * ||M^{-1}||) bias the shift introduces
    x += scipy.linalg.cho_solve(low, v - m @ x)
    return x


def irls_step(psi_t: NaturalParam, v: np.ndarray, m: np.ndarray, rho: float) -> NaturalParam:
    """One damped update rho * M^{-1} v + (1 - rho) * psi_t.

    The solve uses a symmetric (Cholesky) factorization of M with a tiny
    diagonal regularization; Monte Carlo-estimated systems can be
    numerically semidefinite.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    direction = _solve_normal_equations(np.asarray(m, dtype=float), np.asarray(v, dtype=float))
    return NaturalParam(rho * direction + (1.0 - rho) * psi_t.psi, psi_t.d)


def default_init(target: TargetModel, data: Dataset | None = None) -> NaturalParam:
    """Starting point: the prior for logistic targets, a grid-argmax mean
    with unit variance for 1-d targets, standard normal otherwise."""
    if data is None and isinstance(target, LogisticTarget):
        data = target.data
    if data is not None:
        d = data.d
        return moment_to_natural(MomentParam(np.zeros(d), data.tau2 * np.eye(d)))
    if target.dim == 1:
        grid = np.linspace(-5.0, 5.0, 10001)
        mu0 = float(grid[np.argmax(target.log_unnorm(grid))])
        return moment_to_natural(MomentParam(np.array([mu0]), np.eye(1)))
    d = target.dim
    return moment_to_natural(MomentParam(np.zeros(d), np.eye(d)))


def _resolve_assembly(target: TargetModel, cfg: SolverConfig) -> str:
    if cfg.assembly != "auto":
        return cfg.assembly
    if target.score_affine() is not None:
        return "affine_exact"
    if isinstance(target, LogisticTarget):
        return "logistic_taylor"
    if target.dim == 1:
        return "generic_quadrature"
    return "generic_mc"


def fit(
    target: TargetModel,
    init: NaturalParam | None = None,
    cfg: SolverConfig | None = None,
) -> FitReport:
    """Run the damped least-squares iteration to convergence.

    Stops when the max-norm parameter change drops to ``cfg.tol`` or after
    ``cfg.max_iter`` iterations (``converged=False``, no exception). An
    update that would make the implied precision indefinite is rejected and
    retried with the damping halved, up to ten times, before raising
    SolverError. Monte Carlo assemblies reuse one set of base normal draws
    across iterations (re-shaped by each iterate's Cholesky factor) so the
    stopping rule is not washed out by sampling jitter.
    """
    cfg = cfg or SolverConfig()
    psi = init if init is not None else default_init(target)
    if target.dim != psi.d:
        raise ValueError(f"target dimension {target.dim} does not match init (d={psi.d})")
    assembly = _resolve_assembly(target, cfg)
    if assembly == "affine_exact" and target.score_affine() is None:
        raise ValueError("affine_exact assembly requires a target with an affine score")
    if assembly in ("logistic_taylor", "logistic_mc") and not isinstance(target, LogisticTarget):
        raise ValueError(f"{assembly} assembly requires a logistic-regression target")
    if assembly == "generic_quadrature" and target.dim != 1:
        raise ValueError("quadrature assembly is permitted only for d=1")

    quadrature_diag = assembly == "generic_quadrature" or (
        target.dim == 1 and cfg.integrator.method == "quadrature"
    )
    z = None
    if assembly in ("generic_mc", "logistic_mc") or not quadrature_diag:
        z = _base_draws(target.dim, cfg.integrator)
    diag_cfg = replace(cfg.integrator, method="quadrature" if quadrature_diag else "monte_carlo")

    start = time.perf_counter()
    moment = natural_to_moment(psi)
    trace: list[TraceEntry] = []
    converged = False
    for t in range(cfg.max_iter):
        m_mat = _assemble_m(moment)
        if assembly == "affine_exact":
            c, g = target.score_affine()
            v = _assemble_v_affine(moment, c, g)
        elif assembly == "generic_quadrature":
            v = _assemble_v_quadrature(moment, target, cfg.integrator.n_nodes)
        elif assembly == "generic_mc":
            v, _ = _assemble_v_mc(moment, target, z)
        elif assembly == "logistic_taylor":
            from fishervi.integrate import taylor_coord_sigmoid_means, taylor_sigmoid_means

            data = target.data
            v = _v_from_means(
                moment, data, taylor_sigmoid_means(moment, data), taylor_coord_sigmoid_means(moment, data)
            )
        else:  # logistic_mc
            v = _logistic_rows(moment, target.data, _transform(moment, z)).mean(axis=0)

        direction = _solve_normal_equations(m_mat, v, t)
        rho = cfg.rho
        new_moment = None
        for _ in range(11):
            candidate = rho * direction + (1.0 - rho) * psi.psi
            try:
                new_moment = natural_to_moment(NaturalParam(candidate, psi.d))
                break
            except PositiveDefiniteError:
                rho *= 0.5
        if new_moment is None:
            raise SolverError(
                f"update left the positive-definite cone at iteration {t} "
                "despite ten damping halvings",
                iteration=t,
            )
        new_psi = NaturalParam(candidate, psi.d)
        delta = float(np.max(np.abs(new_psi.psi - psi.psi)))

        objective = None
        if quadrature_diag or t % 10 == 0:
            if quadrature_diag:
                objective, _ = fisher_divergence_estimate(new_psi, target, diag_cfg)
            else:
                draws = _transform(new_moment, z)
                objective = float(np.mean(_score_difference_sq(new_psi, target, draws, "reduced")))
        trace.append(TraceEntry(iter=t + 1, psi=new_psi.psi.copy(), delta_inf=delta, objective=objective))
        psi, moment = new_psi, new_moment
        if delta <= cfg.tol:
            converged = True
            break

    return FitReport(
        psi_star=psi,
        moment=moment,
        iterations=len(trace),
        converged=converged,
        trace=tuple(trace),
        wall_time_s=time.perf_counter() - start,
    )


def fisher_fit_1d(
    target: TargetModel,
    init: tuple[float, float] | None = None,
    n_nodes: int = 128,
) -> tuple[float, float]:
    """Best score-matching normal approximation of a 1-d target, by direct
    minimization of the divergence over (mu, log sigma).

    For the full Gaussian family, the fixed point of the re-weighted
    least-squares iteration satisfies the same stationarity conditions as
    KL minimization (Gaussian integration by parts turns E[D'(z - D psi)]=0
    into the usual mean/curvature matching). The distinctive behavior of
    the score-matching objective on non-Gaussian 1-d targets therefore
    comes from minimizing the divergence itself, which this does with
    quadrature and Nelder-Mead. The search is local, seeded at the
    target's bulk (grid-argmax mean, unit deviation): heavy-tailed targets
    let the divergence vanish in the wide-variance limit, and the
    meaningful fit is the minimizer near the mass of the target.
    """
    if target.dim != 1:
        raise ValueError("fisher_fit_1d applies to 1-d targets")
    if init is None:
        p0 = natural_to_moment(default_init(target))
        init = (float(p0.mu[0]), float(np.sqrt(p0.sigma[0, 0])))
    cfg = IntegratorConfig(method="quadrature", n_nodes=n_nodes)

    def objective(params):
        psi = moment_to_natural(
            MomentParam(np.array([params[0]]), np.array([[np.exp(2.0 * params[1])]]))
        )
        return fisher_divergence_estimate(psi, target, cfg)[0]

    result = scipy.optimize.minimize(
        objective,
        np.array([init[0], np.log(init[1])]),
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 2000},
    )
    return float(result.x[0]), float(np.exp(result.x[1]))


def normal_mean_update(
    psi_t: float, sigma2: float, target: TargetModel, n_nodes: int = 64
) -> float:
    """Fixed-variance normal-mean update: psi + sigma2 E[score] by quadrature.

    The one-parameter specialization of the full iteration; its fixed point
    zeroes the expected target score under N(psi, sigma2).
    """
    if target.dim != 1:
        raise ValueError("normal_mean_update applies to 1-d targets")
    return float(psi_t + sigma2 * gh_expectation(target.score, psi_t, sigma2, n_nodes))
