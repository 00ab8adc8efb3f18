"""Interacting particle system, coupled runs, and the measure-flow solver."""

from __future__ import annotations

import numpy as np
import pytest

from chaoslab.meanfield import (
    Ensemble,
    _advance,
    _ips_drift,
    comonotone_coupling,
    flow_gap,
    identical_coupling,
    independent_coupling,
    run_coupled,
    shift_coupling,
    simulate_ips,
    solve_mkv_picard,
)
from chaoslab.models import get_model
from chaoslab.sde import ModelConstants, ModelSpec, NoiseDriver, TimeGrid, euler_maruyama
from chaoslab.measures import EmpiricalMeasure, wasserstein_p


def _free_model():
    """Confined diffusion with no interaction."""
    return ModelSpec(
        dim=1,
        noise_dim=1,
        b0=lambda t, x: -x,
        b1=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
        sigma=lambda t, x: np.ones((1, 1)),
        constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=0.0),
        horizon=1.0,
        name="free",
    )


def _self_visible_model():
    """Kernel with a constant part, so the self-interaction term is visible."""
    return ModelSpec(
        dim=1,
        noise_dim=1,
        b0=lambda t, x: np.zeros_like(x),
        b1=lambda t, x, y: 0.0 * (x + y) + 0.5,
        sigma=lambda t, x: np.ones((1, 1)),
        constants=ModelConstants(k_b=0.0, k_sigma=0.0, delta=1.0, b1_sup=0.5),
        horizon=1.0,
        name="constant_kernel",
    )


class TestSimulateIps:
    def test_no_interaction_matches_single_paths(self):
        model = _free_model()
        grid = TimeGrid(1.0, 40)
        driver = NoiseDriver(5)
        init = Ensemble.from_states(np.linspace(-1, 1, 6))
        traj = simulate_ips(model, init, grid, driver, replication=3)
        # Each particle must coincide bit for bit with a standalone
        # integration under its own stream.
        from chaoslab.meanfield import _TAG_PATHS

        for i in range(6):
            dw = driver.child(_TAG_PATHS).increments(grid, i, 3, 1)
            single = euler_maruyama(
                lambda t, x: -x, model.sigma, init.states[i], grid, dw
            )
            assert np.array_equal(traj[:, i, :], single)

    def test_single_particle_self_interaction(self):
        model = _self_visible_model()
        grid = TimeGrid(1.0, 1)
        driver = NoiseDriver(9)
        init = Ensemble.from_states(np.array([2.0]))
        traj = simulate_ips(model, init, grid, driver)
        from chaoslab.meanfield import _TAG_PATHS

        dw = driver.child(_TAG_PATHS).increments(grid, 0, 0, 1)
        # Drift must be b0 + b1(t, x, x) = 0.5 for the single particle.
        expected = 2.0 + 0.5 * grid.h + dw[0, 0]
        assert traj[-1, 0, 0] == pytest.approx(expected, abs=1e-15)

    def test_symmetric_kernel_zero_mean_drift(self):
        # sin(y - x) is antisymmetric, so the ensemble-summed drift vanishes
        # identically at any configuration; checked at a symmetric init.
        bundle = get_model("bounded_kernel_1d")
        states = np.concatenate([np.linspace(0.1, 1.0, 32), -np.linspace(0.1, 1.0, 32)])
        drift = _ips_drift(bundle.spec)(0.0, states[:, None])
        interaction = drift[:, 0] + states  # remove b0 = -x
        assert abs(interaction.mean()) < 1e-14

    def test_exchangeability_up_to_roundoff(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(0.5, 25)
        driver = NoiseDriver(21)
        n = 16
        x0 = np.linspace(-1.5, 1.5, n)[:, None]
        dw = driver.increment_block(grid, n, 0, 1)
        base = _advance(bundle.spec, _ips_drift(bundle.spec), x0, grid, dw)
        perm = np.random.default_rng(0).permutation(n)
        permuted = _advance(
            bundle.spec, _ips_drift(bundle.spec), x0[perm], grid, dw[:, perm, :]
        )
        # Relabelling permutes trajectories; equality is up to float
        # summation order inside the empirical kernel mean.
        np.testing.assert_allclose(permuted, base[:, perm, :], rtol=1e-9, atol=1e-12)


class TestCouplings:
    def test_identical(self):
        sampler = lambda n, rng: rng.standard_normal((n, 1))
        a, b = identical_coupling(sampler).draw(5, np.random.default_rng(0))
        assert np.array_equal(a, b)

    def test_shift_displacements(self):
        sampler = lambda n, rng: rng.standard_normal((n, 1))
        a, b = shift_coupling(sampler, np.array([0.125])).draw(8, np.random.default_rng(0))
        np.testing.assert_allclose(a - b, 0.125)

    def test_independent(self):
        sampler = lambda n, rng: rng.standard_normal((n, 1))
        a, b = independent_coupling(sampler, sampler).draw(16, np.random.default_rng(0))
        assert not np.array_equal(a, b)

    def test_comonotone_monotone_pairs(self):
        from scipy.stats import norm

        coupling = comonotone_coupling(lambda u: norm.ppf(u, scale=2.0), norm.ppf)
        a, b = coupling.draw(64, np.random.default_rng(3))
        order_a = np.argsort(a[:, 0])
        order_b = np.argsort(b[:, 0])
        assert np.array_equal(order_a, order_b)


class TestRunCoupled:
    def test_identical_coupling_free_model_all_equal(self):
        model = _free_model()
        grid = TimeGrid(1.0, 30)
        driver = NoiseDriver(33)
        flow = solve_mkv_picard(
            model, lambda n, rng: rng.standard_normal((n, 1)), 150, grid, driver=driver
        )
        run = run_coupled(
            model,
            identical_coupling(lambda n, rng: rng.standard_normal((n, 1))),
            8,
            grid,
            driver,
            flow,
        )
        assert np.array_equal(run.ips_paths, run.xbar_paths)
        assert np.array_equal(run.xbar_paths, run.limit_paths)
        assert np.all(run.initial_displacements == 0.0)

    def test_intermediate_and_limit_differ_only_by_initials(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(0.5, 25)
        driver = NoiseDriver(35)
        flow = solve_mkv_picard(bundle.spec, bundle.init_sampler, 200, grid, driver=driver)
        run_id = run_coupled(
            bundle.spec, identical_coupling(bundle.init_sampler), 8, grid, driver, flow, 1
        )
        assert np.array_equal(run_id.xbar_paths, run_id.limit_paths)
        run_shift = run_coupled(
            bundle.spec,
            shift_coupling(bundle.init_sampler, np.array([0.125])),
            8,
            grid,
            driver,
            flow,
            1,
        )
        np.testing.assert_allclose(run_shift.initial_displacements, 0.125)
        assert not np.array_equal(run_shift.xbar_paths, run_shift.limit_paths)

    def test_strong_gap_decreases_with_n(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(0.5, 25)
        driver = NoiseDriver(37)
        flow = solve_mkv_picard(bundle.spec, bundle.init_sampler, 400, grid, driver=driver)
        coupling = identical_coupling(bundle.init_sampler)
        gaps = []
        for idx, n in enumerate((8, 32, 128)):
            vals = []
            for trial in range(25):
                run = run_coupled(
                    bundle.spec, coupling, n, grid, driver.child(50, idx), flow, trial
                )
                vals.append(
                    float(((run.ips_paths[-1] - run.xbar_paths[-1]) ** 2).mean())
                )
            gaps.append(np.mean(vals))
        assert gaps[0] > gaps[1] > gaps[2]

    def test_unconverged_flow_requires_override(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(0.5, 25)
        driver = NoiseDriver(39)
        flow = solve_mkv_picard(
            bundle.spec, bundle.init_sampler, 150, grid, tol=1e-9, max_iter=2, driver=driver
        )
        assert not flow.converged
        with pytest.raises(ValueError, match="converge"):
            run_coupled(
                bundle.spec,
                identical_coupling(bundle.init_sampler),
                4,
                grid,
                driver,
                flow,
            )

    def test_grid_mismatch_rejected(self):
        bundle = get_model("bounded_kernel_1d")
        driver = NoiseDriver(41)
        flow = solve_mkv_picard(
            bundle.spec, bundle.init_sampler, 150, TimeGrid(0.5, 25), driver=driver
        )
        with pytest.raises(ValueError, match="grid"):
            run_coupled(
                bundle.spec,
                identical_coupling(bundle.init_sampler),
                4,
                TimeGrid(0.5, 50),
                driver,
                flow,
            )


class TestPicard:
    def test_free_model_converges_first_iteration(self):
        model = _free_model()
        grid = TimeGrid(1.0, 40)
        flow = solve_mkv_picard(
            model,
            lambda n, rng: rng.standard_normal((n, 1)),
            300,
            grid,
            driver=NoiseDriver(43),
        )
        assert flow.converged and flow.iteration_count == 1

    def test_gap_decay_ratio_below_one(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(1.0, 50)
        flow = solve_mkv_picard(
            bundle.spec,
            bundle.init_sampler,
            800,
            grid,
            tol=1e-12,
            max_iter=5,
            driver=NoiseDriver(45),
        )
        assert not flow.converged  # tolerance unreachable by design
        ratios = [b / a for a, b in zip(flow.gap_history, flow.gap_history[1:])]
        assert np.mean(ratios) < 1.0

    def test_uniqueness_across_initial_guesses(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(1.0, 50)
        driver = NoiseDriver(47)
        flow_a = solve_mkv_picard(
            bundle.spec, bundle.init_sampler, 500, grid, driver=driver, initial_guess="free"
        )
        flow_b = solve_mkv_picard(
            bundle.spec,
            bundle.init_sampler,
            500,
            grid,
            driver=driver,
            initial_guess="constant",
        )
        assert flow_a.converged and flow_b.converged
        gap = flow_gap(flow_a.atoms, flow_b.atoms)
        assert gap < 3.0 * max(flow_a.tol, flow_b.tol)

    def test_extra_iteration_stays_within_tolerance(self):
        bundle = get_model("bounded_kernel_1d")
        grid = TimeGrid(1.0, 50)
        driver = NoiseDriver(49)
        flow = solve_mkv_picard(bundle.spec, bundle.init_sampler, 500, grid, driver=driver)
        assert flow.converged
        # One more application of the map moves the flow by less than the
        # tolerance plus Monte Carlo noise (tol is twice the noise floor).
        from chaoslab.meanfield import _TAG_PICARD, _frozen_drift

        picard = NoiseDriver(49).child(_TAG_PICARD)
        x0 = flow.atoms[0]
        dw = picard.increment_block(grid, x0.shape[0], flow.iteration_count + 1, 1)
        extra = euler_maruyama(
            _frozen_drift(bundle.spec, grid, flow.atoms), bundle.spec.sigma, x0, grid, dw
        )
        assert flow_gap(extra, flow.atoms) < flow.tol + 1.5 * flow.tol

    def test_empirical_law_converges_to_init(self):
        # At t = 0 the limit-system cloud is an i.i.d. sample of the initial
        # law; its transport distance to a frozen reference sample decreases
        # with N on average.
        rng = np.random.default_rng(51)
        reference = EmpiricalMeasure.from_samples(rng.standard_normal(4000))
        dists = []
        for n in (16, 64, 256):
            reps = [
                wasserstein_p(
                    EmpiricalMeasure.from_samples(rng.standard_normal(n)), reference, 1.0
                )
                for _ in range(20)
            ]
            dists.append(np.mean(reps))
        assert dists[0] > dists[1] > dists[2]

    def test_support_size_floor(self):
        bundle = get_model("bounded_kernel_1d")
        with pytest.raises(ValueError, match="support_size"):
            solve_mkv_picard(
                bundle.spec, bundle.init_sampler, 50, TimeGrid(1.0, 10), driver=NoiseDriver(1)
            )

    def test_measure_flow_laws_valid(self):
        model = _free_model()
        grid = TimeGrid(0.5, 10)
        flow = solve_mkv_picard(
            model, lambda n, rng: rng.standard_normal((n, 1)), 120, grid, driver=NoiseDriver(53)
        )
        law = flow.law(grid.steps)
        assert law.n_atoms == 120 and law.is_uniform()
        assert len(flow.laws) == grid.steps + 1
