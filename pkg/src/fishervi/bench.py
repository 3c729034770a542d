"""Experiment orchestration: data generation, error metrics, calibration
curves, replicate sweeps, and file emission for tables and figures.

All CSV output uses 17-significant-digit floats so emitted values re-parse
exactly. Benchmark result files are byte-identical across runs with the
same seed list; wall-clock timings live in a separate file excluded from
that guarantee.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import chi2, gaussian_kde

from fishervi.baselines import (
    DsviConfig,
    McmcConfig,
    McmcResult,
    dsvi_fit,
    jj_fit,
    kl_fit_1d,
    metropolis_hastings,
)
from fishervi.gaussian import MomentParam
from fishervi.solver import SolverConfig, fisher_fit_1d, fit
from fishervi.targets import Dataset, LogisticTarget, TargetModel

METHODS = ("fisher", "jj", "dsvi")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass(frozen=True)
class GenConfig:
    """Synthetic logistic-regression data: true coefficients from an
    isotropic normal, covariate rows isotropic or serially correlated
    across coordinates (stationary AR(1), unit marginal variance, scaled
    for comparability with the isotropic case)."""

    n: int
    d: int
    covariate: str = "isotropic"
    covariate_variance: float = 3.0
    ar_rho: float = 0.8
    theta_variance: float = 1.0
    tau2: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.covariate not in ("isotropic", "ar1"):
            raise ValueError(f"unknown covariate model {self.covariate!r}")
        if not -1.0 < self.ar_rho < 1.0:
            raise ValueError("ar_rho must lie in (-1, 1)")
        if min(self.covariate_variance, self.theta_variance, self.tau2) <= 0:
            raise ValueError("variances must be positive")


def generate_dataset(cfg: GenConfig) -> tuple[Dataset, np.ndarray]:
    """Draw (Dataset, true coefficient vector), deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    theta = rng.normal(0.0, np.sqrt(cfg.theta_variance), cfg.d)
    if cfg.covariate == "isotropic":
        x = rng.normal(0.0, np.sqrt(cfg.covariate_variance), (cfg.n, cfg.d))
    else:
        innov = rng.standard_normal((cfg.n, cfg.d))
        x = np.empty((cfg.n, cfg.d))
        x[:, 0] = innov[:, 0]
        for j in range(1, cfg.d):
            x[:, j] = cfg.ar_rho * x[:, j - 1] + np.sqrt(1.0 - cfg.ar_rho**2) * innov[:, j]
        x *= np.sqrt(cfg.covariate_variance)
    y = (rng.random(cfg.n) < expit(x @ theta)).astype(float)
    return Dataset(x, y, tau2=cfg.tau2), theta


def error_metrics(fitted: MomentParam, ref: McmcResult) -> tuple[float, float]:
    """(l2 mean error, Frobenius covariance error) against the reference."""
    if fitted.dim != ref.mean.shape[0]:
        raise ValueError("dimension mismatch between fit and reference")
    mean_err = float(np.linalg.norm(fitted.mu - ref.mean))
    cov_err = float(np.linalg.norm(fitted.sigma - ref.cov, ord="fro"))
    return mean_err, cov_err


@dataclass(frozen=True)
class CoverageCurve:
    """Reference-measure probability of the fit's highest-density ellipsoids.

    ``prob[k]`` estimates the reference probability of the region whose
    nominal (Gaussian) content is ``grid[k]``; a well-calibrated fit tracks
    the diagonal.
    """

    grid: np.ndarray
    prob: np.ndarray
    mean_abs_dev: float


def coverage_curve(
    fitted: MomentParam, ref: McmcResult, grid: np.ndarray | None = None
) -> CoverageCurve:
    """Fraction of reference draws inside each nominal-content ellipsoid.

    The region at level c is {theta: (theta-mu)' Sigma^{-1} (theta-mu) <=
    chi2_d(c)}; its reference probability is estimated by the fraction of
    MCMC draws inside, which is nondecreasing in c by construction.
    """
    if grid is None:
        grid = np.round(np.arange(0.01, 1.0, 0.01), 10)
    grid = np.asarray(grid, dtype=float)
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("grid levels must lie strictly inside (0, 1)")
    d = fitted.dim
    low = fitted.chol()
    import scipy.linalg

    centered = ref.samples - fitted.mu
    z = scipy.linalg.solve_triangular(low, centered.T, lower=True)
    mahal = np.sort(np.sum(z * z, axis=0))
    thresholds = chi2.ppf(grid, df=d)
    counts = np.searchsorted(mahal, thresholds, side="right")
    prob = counts / mahal.shape[0]
    return CoverageCurve(grid=grid, prob=prob, mean_abs_dev=float(np.mean(np.abs(prob - grid))))


# ---------------------------------------------------------------------------
# Replicate sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    n: int = 200
    d: int = 5
    covariate: str = "isotropic"
    replicates: int = 10
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] | None = None
    seed: int = 0
    tau2: float = 5.0
    mcmc_iters: int = 100_000
    mcmc_burn_in: int = 20_000
    fisher_assembly: str = "logistic_taylor"

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.seeds is not None and len(self.seeds) != self.replicates:
            raise ValueError("seeds must provide one entry per replicate")

    def replicate_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(int(s) for s in self.seeds)
        return tuple(self.seed + r for r in range(self.replicates))


@dataclass(frozen=True)
class MethodOutcome:
    method: str
    mean_err: float | None
    cov_err: float | None
    coverage_mad: float | None
    wall_time_s: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class ReplicateOutcome:
    replicate: int
    seed: int
    mcmc_acceptance: float
    outcomes: dict[str, MethodOutcome]


@dataclass(frozen=True)
class BenchmarkReport:
    config: BenchmarkConfig
    replicates: tuple[ReplicateOutcome, ...]

    def averages(self) -> dict[str, dict[str, float]]:
        """Method-level means over successful replicates."""
        out = {}
        for method in self.config.methods:
            rows = [r.outcomes[method] for r in self.replicates if not r.outcomes[method].failed]
            if rows:
                out[method] = {
                    "replicates": len(rows),
                    "mean_err": float(np.mean([r.mean_err for r in rows])),
                    "cov_err": float(np.mean([r.cov_err for r in rows])),
                    "coverage_mad": float(np.mean([r.coverage_mad for r in rows])),
                }
            else:
                out[method] = {"replicates": 0}
        return out

    def write(self, out_dir) -> None:
        """Emit results.csv / summary.csv (deterministic) and timings.csv."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "seed", "method", "mean_err", "cov_err", "coverage_mad", "error"])
            for rep in self.replicates:
                for method in self.config.methods:
                    o = rep.outcomes[method]
                    if o.failed:
                        writer.writerow([rep.replicate, rep.seed, method, "", "", "", o.error])
                    else:
                        writer.writerow(
                            [rep.replicate, rep.seed, method]
                            + [_fmt(v) for v in (o.mean_err, o.cov_err, o.coverage_mad)]
                            + [""]
                        )
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "method", "mean_err", "cov_err", "coverage_mad"])
            for method, avg in self.averages().items():
                if avg["replicates"]:
                    writer.writerow(
                        [self.config.n, method]
                        + [_fmt(avg[k]) for k in ("mean_err", "cov_err", "coverage_mad")]
                    )
                else:
                    writer.writerow([self.config.n, method, "", "", ""])
        with open(out / "timings.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "method", "wall_time_s"])
            for rep in self.replicates:
                for method in self.config.methods:
                    writer.writerow([rep.replicate, method, f"{rep.outcomes[method].wall_time_s:.6f}"])
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def to_json_dict(self) -> dict:
        return {
            "config": {
                "n": self.config.n,
                "d": self.config.d,
                "covariate": self.config.covariate,
                "covariate_note": "ar1 correlates coordinates within each row",
                "replicates": self.config.replicates,
                "methods": list(self.config.methods),
                "seeds": list(self.replicate_seeds_used()),
                "tau2": self.config.tau2,
                "mcmc_iters": self.config.mcmc_iters,
                "fisher_assembly": self.config.fisher_assembly,
            },
            "averages": self.averages(),
            "replicates": [
                {
                    "replicate": rep.replicate,
                    "seed": rep.seed,
                    "mcmc_acceptance": rep.mcmc_acceptance,
                    "methods": {
                        m: {
                            "mean_err": o.mean_err,
                            "cov_err": o.cov_err,
                            "coverage_mad": o.coverage_mad,
                            "wall_time_s": o.wall_time_s,
                            "error": o.error,
                        }
                        for m, o in rep.outcomes.items()
                    },
                }
                for rep in self.replicates
            ],
        }

    def replicate_seeds_used(self) -> tuple[int, ...]:
        return tuple(rep.seed for rep in self.replicates)


def _fit_method(method: str, data: Dataset, cfg: BenchmarkConfig, seed: int) -> MomentParam:
    if method == "fisher":
        report = fit(LogisticTarget(data), cfg=SolverConfig(assembly=cfg.fisher_assembly))
        return report.moment
    if method == "jj":
        return jj_fit(data)
    return dsvi_fit(data, DsviConfig(seed=seed))


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    """Generate data, run the reference chain and every method per
    replicate, and collect error metrics and calibration deviations.

    A failing method is recorded on its replicate and skipped; the sweep
    never aborts. Fully deterministic for a fixed seed list.
    """
    reps = []
    for r, seed in enumerate(cfg.replicate_seeds()):
        data, _ = generate_dataset(
            GenConfig(n=cfg.n, d=cfg.d, covariate=cfg.covariate, tau2=cfg.tau2, seed=seed)
        )
        ref = metropolis_hastings(
            LogisticTarget(data),
            McmcConfig(n_iter=cfg.mcmc_iters, burn_in=cfg.mcmc_burn_in, seed=seed + 1_000_000),
        )
        outcomes = {}
        for method in cfg.methods:
            start = time.perf_counter()
            try:
                fitted = _fit_method(method, data, cfg, seed + 2_000_000)
                mean_err, cov_err = error_metrics(fitted, ref)
                mad = coverage_curve(fitted, ref).mean_abs_dev
                outcomes[method] = MethodOutcome(
                    method, mean_err, cov_err, mad, time.perf_counter() - start
                )
            except Exception as exc:  # record and continue with other methods
                outcomes[method] = MethodOutcome(
                    method, None, None, None, time.perf_counter() - start, error=f"{type(exc).__name__}: {exc}"
                )
        reps.append(
            ReplicateOutcome(
                replicate=r, seed=seed, mcmc_acceptance=ref.acceptance_rate, outcomes=outcomes
            )
        )
    return BenchmarkReport(config=cfg, replicates=tuple(reps))


# ---------------------------------------------------------------------------
# 1-d comparisons and figure data
# ---------------------------------------------------------------------------


def fit1d_compare(
    target: TargetModel,
    out_path=None,
    grid_points: int = 1001,
) -> dict[str, tuple[float, float]]:
    """Fit a 1-d target by KL and by score matching; optionally emit a
    density grid file (theta, grid-normalized target, one column per fit).
    """
    mu_kl, sigma_kl = kl_fit_1d(target)
    mu_f, sigma_f = fisher_fit_1d(target)
    fits = {"kl": (mu_kl, sigma_kl), "fisher": (mu_f, sigma_f)}
    if out_path is not None:
        sd = max(sigma_kl, sigma_f)
        lo = min(mu_kl, mu_f) - 6.0 * sd
        hi = max(mu_kl, mu_f) + 6.0 * sd
        theta = np.linspace(lo, hi, grid_points)
        dens = np.exp(np.asarray(target.log_unnorm(theta), dtype=float))
        dens /= np.trapezoid(dens, theta)
        cols = {"theta": theta, "target": dens}
        for name, (m, s) in fits.items():
            cols[name] = np.exp(-0.5 * (theta - m) ** 2 / s**2) / np.sqrt(2 * np.pi * s**2)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(cols))
            for i in range(grid_points):
                writer.writerow([_fmt(c[i]) for c in cols.values()])
    return fits


def contour_grid(
    fits: dict[str, MomentParam],
    ref: McmcResult,
    pair: tuple[int, int],
    grid_size: int = 60,
    pad: float = 0.15,
) -> dict[str, np.ndarray]:
    """Pairwise-marginal density grids: a kernel-density estimate of the
    reference draws plus the 2-d Gaussian marginal of every fit.

    ``pair`` uses 0-based coordinate indices; the grid spans the reference
    draws' range padded by ``pad`` on each side.
    """
    i, j = pair
    pts = ref.samples[:, [i, j]]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    lo, hi = lo - pad * span, hi + pad * span
    gx = np.linspace(lo[0], hi[0], grid_size)
    gy = np.linspace(lo[1], hi[1], grid_size)
    mx, my = np.meshgrid(gx, gy, indexing="ij")
    flat = np.vstack([mx.ravel(), my.ravel()])
    out = {"x": mx.ravel(), "y": my.ravel(), "kde_mcmc": gaussian_kde(pts.T)(flat)}
    for name, p in fits.items():
        mu2 = p.mu[[i, j]]
        sig2 = p.sigma[np.ix_([i, j], [i, j])]
        det = np.linalg.det(sig2)
        inv = np.linalg.inv(sig2)
        diff = flat.T - mu2
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        out[name] = np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det))
    return out


def write_contour_csv(grid: dict[str, np.ndarray], path) -> None:
    keys = list(grid)
    n = grid[keys[0]].shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for r in range(n):
            writer.writerow([_fmt(grid[k][r]) for k in keys])


def write_coverage_csv(curve: CoverageCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["c", "prob"])
        for c, p in zip(curve.grid, curve.prob):
            writer.writerow([_fmt(c), _fmt(p)])
