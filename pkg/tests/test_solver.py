"""Tests for the damped least-squares solver and its system assembly."""

import numpy as np
import pytest
from scipy.special import expit

from fishervi.gaussian import (
    MomentParam,
    NaturalParam,
    moment_to_natural,
    natural_to_moment,
)
from fishervi.integrate import IntegratorConfig
from fishervi.solver import (
    FitReport,
    SolverConfig,
    SolverError,
    assemble_mt,
    assemble_vt_generic,
    assemble_vt_logistic,
    default_init,
    fisher_divergence,
    fisher_divergence_estimate,
    fit,
    irls_step,
    normal_mean_update,
)
from fishervi.targets import (
    Dataset,
    GaussianTarget,
    LogisticTarget,
    SkewNormal,
    StudentT,
)

QUAD = IntegratorConfig(method="quadrature", n_nodes=64)


def random_logistic(seed, n=20, d=3, x_scale=1.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, x_scale, (n, d))
    theta = rng.standard_normal(d)
    y = (rng.random(n) < expit(x @ theta)).astype(float)
    return Dataset(x, y, tau2=5.0)


def random_gaussian_target(rng, d):
    a = rng.standard_normal((d, d))
    return GaussianTarget(rng.standard_normal(d), a @ a.T + d * np.eye(d))


class TestFisherDivergence:
    def test_identical_densities_quadrature(self):
        p = MomentParam(np.array([0.4]), np.array([[1.7]]))
        psi = moment_to_natural(p)
        assert fisher_divergence(psi, GaussianTarget(p.mu, p.sigma), QUAD) <= 1e-12

    def test_identical_densities_mc(self):
        rng = np.random.default_rng(0)
        p = MomentParam(rng.standard_normal(3), np.eye(3) + 0.2)
        psi = moment_to_natural(p)
        val, se = fisher_divergence_estimate(
            psi, GaussianTarget(p.mu, p.sigma), IntegratorConfig(n_samples=2000, seed=1)
        )
        assert val <= max(3.0 * se, 1e-20)

    def test_closed_form_mean_shift(self):
        psi = moment_to_natural(MomentParam(np.zeros(1), np.eye(1)))
        val = fisher_divergence(psi, GaussianTarget(np.array([1.0]), np.eye(1)), QUAD)
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_closed_form_variance_mismatch(self):
        psi = moment_to_natural(MomentParam(np.zeros(1), np.eye(1)))
        val = fisher_divergence(psi, GaussianTarget(np.array([0.0]), np.array([[4.0]])), QUAD)
        assert val == pytest.approx(0.5625, abs=1e-10)

    def test_closed_form_general_gaussian_pair(self):
        # F = (mu1-mu2)^2/s2^2 + s1 (1/s2 - 1/s1)^2 for variances s1, s2
        mu1, s1, mu2, s2 = 0.3, 1.6, -0.9, 0.7
        psi = moment_to_natural(MomentParam(np.array([mu1]), np.array([[s1]])))
        target = GaussianTarget(np.array([mu2]), np.array([[s2]]))
        expected = (mu1 - mu2) ** 2 / s2**2 + s1 * (1 / s2 - 1 / s1) ** 2
        assert fisher_divergence(psi, target, QUAD) == pytest.approx(expected, rel=1e-12)

    def test_direct_and_reduced_forms_agree(self):
        # the two estimators integrate the same function; with independent
        # draws they must agree to within Monte Carlo error
        rng = np.random.default_rng(77)
        for inst in range(50):
            d = int(rng.integers(1, 6))
            a = rng.standard_normal((d, d))
            psi = moment_to_natural(MomentParam(rng.standard_normal(d), a @ a.T + d * np.eye(d)))
            if inst % 2 == 0:
                target = random_gaussian_target(rng, d)
            else:
                x = rng.normal(0, 1, (15, d))
                th = rng.standard_normal(d)
                y = (rng.random(15) < expit(x @ th)).astype(float)
                target = LogisticTarget(Dataset(x, y, tau2=5.0))
            v1, s1 = fisher_divergence_estimate(
                psi, target, IntegratorConfig(n_samples=4000, seed=inst), form="direct"
            )
            v2, s2 = fisher_divergence_estimate(
                psi, target, IntegratorConfig(n_samples=4000, seed=10_000 + inst), form="reduced"
            )
            assert abs(v1 - v2) <= 4.0 * np.hypot(s1, s2)

    def test_quadrature_rejected_above_1d(self):
        psi = moment_to_natural(MomentParam(np.zeros(2), np.eye(2)))
        with pytest.raises(ValueError):
            fisher_divergence(psi, GaussianTarget(np.zeros(2), np.eye(2)), QUAD)


class TestAssembleM:
    def test_standard_normal_1d(self):
        psi = moment_to_natural(MomentParam(np.zeros(1), np.eye(1)))
        np.testing.assert_allclose(assemble_mt(psi), [[4.0, 0.0], [0.0, 1.0]], atol=1e-12)

    def test_shifted_normal_1d(self):
        psi = moment_to_natural(MomentParam(np.array([1.0]), np.eye(1)))
        np.testing.assert_allclose(assemble_mt(psi), [[8.0, 2.0], [2.0, 1.0]], atol=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_matches_monte_carlo(self, d):
        from fishervi.gaussian import sample, stat_jacobian

        rng = np.random.default_rng(d)
        a = rng.standard_normal((d, d))
        psi = moment_to_natural(MomentParam(rng.standard_normal(d), a @ a.T + d * np.eye(d)))
        m_exact = assemble_mt(psi)
        draws = sample(psi, 10**6, seed=d + 50)
        jacs = np.stack([stat_jacobian(th) for th in draws[:200_000]])
        prods = np.einsum("srj,srl->sjl", jacs, jacs)
        m_mc = prods.mean(axis=0)
        se = prods.std(axis=0, ddof=1) / np.sqrt(prods.shape[0])
        assert np.all(np.abs(m_exact - m_mc) <= 4.0 * se + 1e-12)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(5)
        for d in (1, 3, 6):
            a = rng.standard_normal((d, d))
            psi = moment_to_natural(MomentParam(rng.standard_normal(d), a @ a.T + d * np.eye(d)))
            m = assemble_mt(psi)
            np.testing.assert_array_equal(m, m.T)
            assert np.min(np.linalg.eigvalsh(m)) > -1e-10


class TestAssembleVGeneric:
    def test_hand_moments_1d(self):
        # q = N(0,1), target N(1,1): z = 1 - theta, v = (E[2 th (1-th)], E[1-th])
        psi = moment_to_natural(MomentParam(np.zeros(1), np.eye(1)))
        v = assemble_vt_generic(psi, GaussianTarget(np.array([1.0]), np.eye(1)), QUAD)
        np.testing.assert_allclose(v, [-2.0, 1.0], atol=1e-12)

    def test_fixed_point_normal_equations(self):
        # target equal to q: v = M psi exactly under quadrature
        p = MomentParam(np.array([0.7]), np.array([[2.2]]))
        psi = moment_to_natural(p)
        v = assemble_vt_generic(psi, GaussianTarget(p.mu, p.sigma), QUAD)
        np.testing.assert_allclose(v, assemble_mt(psi) @ psi.psi, atol=1e-10)

    def test_fixed_point_mc_within_noise(self):
        rng = np.random.default_rng(8)
        p = MomentParam(rng.standard_normal(3), np.eye(3) * 1.5)
        psi = moment_to_natural(p)
        v, se = assemble_vt_generic(
            psi,
            GaussianTarget(p.mu, p.sigma),
            IntegratorConfig(n_samples=50_000, seed=2),
            return_stderr=True,
        )
        assert np.all(np.abs(v - assemble_mt(psi) @ psi.psi) <= 4.0 * se)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(9)
        psi = moment_to_natural(MomentParam(rng.standard_normal(2), np.eye(2)))
        target = random_gaussian_target(rng, 2)
        cfg = IntegratorConfig(n_samples=1000, seed=13)
        np.testing.assert_array_equal(
            assemble_vt_generic(psi, target, cfg), assemble_vt_generic(psi, target, cfg)
        )

    def test_dimension_mismatch(self):
        psi = moment_to_natural(MomentParam(np.zeros(2), np.eye(2)))
        with pytest.raises(ValueError):
            assemble_vt_generic(psi, GaussianTarget(np.zeros(3), np.eye(3)))


class TestAssembleVLogistic:
    def test_oracle_equivalence_against_generic(self):
        # primary correctness gate for the structured assembly algebra
        for inst in range(20):
            rng = np.random.default_rng(700 + inst)
            data = random_logistic(700 + inst, n=20, d=3)
            mu = rng.normal(0, 0.5, 3)
            a = rng.standard_normal((3, 3))
            sig = a @ a.T + 3 * np.eye(3)
            sig *= 0.5 / np.linalg.norm(sig, 2)
            psi = moment_to_natural(MomentParam(mu, sig))
            v1, s1 = assemble_vt_generic(
                psi,
                LogisticTarget(data),
                IntegratorConfig(n_samples=20_000, seed=inst),
                return_stderr=True,
            )
            v2, s2 = assemble_vt_logistic(
                psi,
                data,
                method="mc",
                cfg=IntegratorConfig(n_samples=20_000, seed=5000 + inst),
                return_stderr=True,
            )
            assert np.all(np.abs(v1 - v2) <= 4.0 * np.sqrt(s1**2 + s2**2))

    def test_zero_covariates_reduce_to_prior_terms(self):
        from fishervi.gaussian import cross_pairs

        rng = np.random.default_rng(30)
        d = 3
        data = Dataset(np.zeros((4, d)), np.ones(4), tau2=5.0)
        mu = rng.standard_normal(d)
        a = rng.standard_normal((d, d))
        sig = a @ a.T + d * np.eye(d)
        p = MomentParam(mu, sig)
        v = assemble_vt_logistic(moment_to_natural(p), data, method="taylor")
        np.testing.assert_allclose(v[:d], -2.0 * (mu**2 + np.diag(sig)) / 5.0, atol=1e-12)
        for idx, (j, l) in enumerate(cross_pairs(d)):
            assert v[d + idx] == pytest.approx(-2.0 * (mu[j] * mu[l] + sig[j, l]) / 5.0, abs=1e-12)
        np.testing.assert_allclose(v[-d:], -mu / 5.0, atol=1e-12)

    def test_taylor_against_large_mc(self):
        # moderate-scale iterate: expansion within 5% of a 10^6-draw estimate
        data = random_logistic(41, n=50, d=3)
        rng = np.random.default_rng(41)
        mu = rng.uniform(0.3, 1.0, 3) * rng.choice([-1.0, 1.0], 3)
        sig = 0.1 * np.eye(3)
        psi = moment_to_natural(MomentParam(mu, sig))
        v_t = assemble_vt_logistic(psi, data, method="taylor")
        v_mc = assemble_vt_logistic(
            psi, data, method="mc", cfg=IntegratorConfig(n_samples=10**6, seed=4)
        )
        assert np.linalg.norm(v_t - v_mc) / np.linalg.norm(v_mc) < 0.05

    def test_dimension_mismatch(self):
        psi = moment_to_natural(MomentParam(np.zeros(2), np.eye(2)))
        with pytest.raises(ValueError):
            assemble_vt_logistic(psi, random_logistic(1, d=3), method="taylor")

    def test_unknown_method(self):
        psi = moment_to_natural(MomentParam(np.zeros(3), np.eye(3)))
        with pytest.raises(ValueError):
            assemble_vt_logistic(psi, random_logistic(1, d=3), method="exact")


class TestIrlsStep:
    def test_undamped_solves(self):
        m = np.array([[4.0, 0.0], [0.0, 1.0]])
        v = np.array([-2.0, 1.0])
        psi = irls_step(NaturalParam(np.array([-0.5, 0.0])), v, m, rho=1.0)
        np.testing.assert_allclose(psi.psi, [-0.5, 1.0], atol=1e-12)
        # lands on the N(1,1) parameters
        p = natural_to_moment(psi)
        assert p.mu[0] == pytest.approx(1.0)
        assert p.sigma[0, 0] == pytest.approx(1.0)

    def test_fixed_point_invariant_under_damping(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + 5 * np.eye(5)
        psi_vec = rng.standard_normal(5)
        # build a psi that solves M psi = v; needs a valid layout length
        m = m[:2, :2]
        psi = NaturalParam(np.array([-0.5, 0.3]))
        v = m @ psi.psi
        out = irls_step(psi, v, m, rho=0.5)
        np.testing.assert_allclose(out.psi, psi.psi, atol=1e-10)

    def test_singular_matrix_raises(self):
        with pytest.raises(SolverError):
            irls_step(NaturalParam(np.array([-0.5, 0.0])), np.ones(2), -np.eye(2), rho=1.0)

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            irls_step(NaturalParam(np.array([-0.5, 0.0])), np.ones(2), np.eye(2), rho=0.0)


class TestFit:
    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_gaussian_self_consistency(self, d):
        rng = np.random.default_rng(d)
        a = rng.standard_normal((d, d))
        sigma = a @ a.T + d * np.eye(d)
        mu = rng.standard_normal(d)
        report = fit(GaussianTarget(mu, sigma), cfg=SolverConfig(rho=1.0, tol=1e-12))
        assert report.converged and report.iterations <= 25
        np.testing.assert_allclose(report.moment.mu, mu, atol=1e-8)
        np.testing.assert_allclose(report.moment.sigma, sigma, atol=1e-8)

    def test_damping_does_not_move_the_fixed_point(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((3, 3))
        target = GaussianTarget(rng.standard_normal(3), a @ a.T + 3 * np.eye(3))
        finals = [
            fit(target, cfg=SolverConfig(rho=rho, tol=1e-12, max_iter=2000)).psi_star.psi
            for rho in (0.25, 0.5, 1.0)
        ]
        for other in finals[1:]:
            np.testing.assert_allclose(other, finals[0], atol=1e-8)

    def test_init_at_answer_converges_immediately(self):
        p = MomentParam(np.array([0.5, -1.0]), np.array([[1.0, 0.2], [0.2, 0.7]]))
        report = fit(GaussianTarget(p.mu, p.sigma), init=moment_to_natural(p))
        assert report.converged and report.iterations == 1

    def test_logistic_desk_scale_converges(self):
        data = random_logistic(42, n=200, d=5, x_scale=np.sqrt(3))
        report = fit(LogisticTarget(data))
        assert report.converged
        assert report.iterations <= 500

    def test_trace_contract(self):
        data = random_logistic(42, n=100, d=3)
        report = fit(LogisticTarget(data))
        assert len(report.trace) == report.iterations
        assert report.trace[-1].delta_inf <= 1e-6
        assert all(np.isfinite(e.delta_inf) for e in report.trace)
        # accepted iterates all stay in the positive-definite cone
        for entry in report.trace:
            natural_to_moment(NaturalParam(entry.psi, 3))

    def test_normal_equations_residual_at_convergence(self):
        data = random_logistic(42, n=200, d=5, x_scale=np.sqrt(3))
        tol = 1e-6
        report = fit(LogisticTarget(data), cfg=SolverConfig(rho=0.5, tol=tol))
        psi = report.psi_star
        resid = assemble_mt(psi) @ psi.psi - assemble_vt_logistic(psi, data, method="taylor")
        assert np.max(np.abs(resid)) <= 10 * tol

    def test_normal_equations_residual_mc_fresh_seed(self):
        data = random_logistic(42, n=100, d=3)
        tol = 1e-4
        cfg = SolverConfig(
            rho=0.5, tol=tol, assembly="logistic_mc", integrator=IntegratorConfig(n_samples=4000, seed=3)
        )
        report = fit(LogisticTarget(data), cfg=cfg)
        assert report.converged
        psi = report.psi_star
        v, se = assemble_vt_logistic(
            psi, data, method="mc", cfg=IntegratorConfig(n_samples=4000, seed=98765), return_stderr=True
        )
        resid = np.abs(assemble_mt(psi) @ psi.psi - v)
        assert np.all(resid <= 10 * tol + 4.0 * se)

    def test_max_iter_exhaustion_returns_unconverged(self):
        data = random_logistic(42, n=100, d=3)
        report = fit(LogisticTarget(data), cfg=SolverConfig(max_iter=2))
        assert not report.converged
        assert report.iterations == 2

    def test_mc_assembly_deterministic(self):
        data = random_logistic(13, n=50, d=2)
        cfg = SolverConfig(
            assembly="logistic_mc", tol=1e-4, integrator=IntegratorConfig(n_samples=2000, seed=21)
        )
        a = fit(LogisticTarget(data), cfg=cfg)
        b = fit(LogisticTarget(data), cfg=cfg)
        np.testing.assert_array_equal(a.psi_star.psi, b.psi_star.psi)

    def test_objective_recorded_every_iteration_under_quadrature(self):
        report = fit(StudentT(4.0))
        assert all(e.objective is not None for e in report.trace)
        assert all(e.objective >= 0 for e in report.trace)

    def test_objective_sparse_under_mc(self):
        data = random_logistic(42, n=100, d=3)
        report = fit(LogisticTarget(data))
        recorded = [e.iter for e in report.trace if e.objective is not None]
        assert recorded == [i for i in range(1, report.iterations + 1) if (i - 1) % 10 == 0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(rho=1.5)
        with pytest.raises(ValueError):
            SolverConfig(tol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(assembly="magic")

    def test_assembly_requires_matching_target(self):
        with pytest.raises(ValueError):
            fit(StudentT(2.0), cfg=SolverConfig(assembly="logistic_taylor"))
        with pytest.raises(ValueError):
            fit(StudentT(2.0), cfg=SolverConfig(assembly="affine_exact"))

    def test_report_serialization(self):
        import json

        report = fit(GaussianTarget(np.array([1.0]), np.eye(1)), cfg=SolverConfig(rho=1.0))
        blob = json.dumps(report.to_json_dict())
        back = json.loads(blob)
        assert back["converged"] is True
        assert back["iterations"] == len(back["trace"])
        assert len(back["sigma"]) == 1
        np.testing.assert_allclose(back["mu"], [1.0], atol=1e-8)


class TestNormalMeanUpdate:
    def test_symmetric_gaussian_fixed_point(self):
        target = GaussianTarget(np.array([3.0]), np.array([[4.0]]))
        psi = 0.0
        for _ in range(200):
            new = normal_mean_update(psi, 1.0, target)
            if abs(new - psi) <= 1e-12:
                break
            psi = new
        assert abs(psi - 3.0) <= 1e-8

    def test_standard_normal_already_fixed(self):
        target = GaussianTarget(np.array([0.0]), np.eye(1))
        assert normal_mean_update(0.0, 1.0, target) == pytest.approx(0.0, abs=1e-14)

    def test_student_t_symmetric_fixed_point(self):
        target = StudentT(4.0)
        assert abs(normal_mean_update(0.0, 1.0, target)) <= 1e-8
        psi = 0.5
        for _ in range(500):
            new = normal_mean_update(psi, 1.0, target)
            if abs(new - psi) <= 1e-12:
                break
            psi = new
        assert abs(psi) <= 1e-8

    def test_rejects_multivariate(self):
        with pytest.raises(ValueError):
            normal_mean_update(0.0, 1.0, GaussianTarget(np.zeros(2), np.eye(2)))


class TestDefaultInit:
    def test_logistic_prior_init(self):
        data = random_logistic(2, n=10, d=2)
        p = natural_to_moment(default_init(LogisticTarget(data)))
        np.testing.assert_allclose(p.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(p.sigma, 5.0 * np.eye(2), atol=1e-10)

    def test_student_t_symmetric_mode(self):
        p = natural_to_moment(default_init(StudentT(4.0)))
        assert p.mu[0] == pytest.approx(0.0, abs=1e-12)
        assert p.sigma[0, 0] == pytest.approx(1.0)

    def test_skew_normal_grid_argmax(self):
        from scipy.stats import skewnorm

        p = natural_to_moment(default_init(SkewNormal(6.0)))
        grid = np.linspace(-5.0, 5.0, 10001)
        oracle = grid[np.argmax(skewnorm.logpdf(grid, 6.0))]
        assert p.mu[0] == pytest.approx(oracle, abs=1e-9)
