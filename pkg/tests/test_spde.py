"""Spectral model construction, kernel bounds, and the exponential integrator."""

from __future__ import annotations

import math

import numpy as np
import pytest

from chaoslab.meanfield import flow_gap, identical_coupling
from chaoslab.sde import NoiseDriver, TimeGrid, make_modulus
from chaoslab.spde import (
    SpectralField,
    build_spectrum,
    default_field_sampler,
    kernel_b1_spectral,
    mkv_spde_flow,
    odd_sqrt,
    run_coupled_spde,
    simulate_spde_free,
    simulate_spde_ips,
)


class TestBuildSpectrum:
    def test_accepted_pair_and_trace_value(self):
        model = build_spectrum(n_modes=16, smoothing_power=1.0, trace_exponent=0.25)
        assert model.eigenvalues[0] == pytest.approx(math.pi ** 2)
        # Integral comparison: the computed trace must dominate the head sum
        # and stay finite.
        head = float(np.sum(model.eigenvalues ** (0.25 - 1.0)))
        assert model.trace_value > head
        assert math.isfinite(model.trace_value)

    def test_rejected_pair_reports_values(self):
        with pytest.raises(ValueError, match=r"0\.6"):
            build_spectrum(n_modes=8, smoothing_power=0.6, trace_exponent=0.5)

    def test_eigenvalue_ratio_closed_form(self):
        for eps in (0.75, 1.0, 1.5):
            model = build_spectrum(n_modes=4, smoothing_power=eps, trace_exponent=0.1)
            assert model.eigenvalues[1] / model.eigenvalues[0] == pytest.approx(2.0 ** (2 * eps))

    def test_smoothing_power_floor(self):
        with pytest.raises(ValueError, match="exceed 1/2"):
            build_spectrum(n_modes=4, smoothing_power=0.5, trace_exponent=0.1)

    def test_ellipticity_band_on_noise_weights(self):
        with pytest.raises(ValueError, match="ellipticity"):
            build_spectrum(n_modes=4, q_diag=np.full(4, 2.0), delta=1.0)

    def test_custom_b_tilde_requires_modulus(self):
        with pytest.raises(ValueError, match="modulus"):
            build_spectrum(n_modes=4, b_tilde=lambda r: 0.5 * np.tanh(r))


class TestKernel:
    def test_zero_at_equal_fields(self):
        model = build_spectrum(n_modes=8)
        x = np.random.default_rng(0).normal(size=(5, 8))
        np.testing.assert_array_equal(kernel_b1_spectral(x, x, model), np.zeros((5, 8)))

    def test_mode_bounds_hold(self):
        model = build_spectrum(n_modes=16)
        rng = np.random.default_rng(1)
        coef = kernel_b1_spectral(
            rng.normal(scale=3.0, size=(1000, 16)), rng.normal(scale=3.0, size=(1000, 16)), model
        )
        assert np.all(np.abs(coef) <= model.mode_bounds + 1e-12)

    def test_dini_displacement_bound(self):
        # |kernel(x, y) - kernel(x', y')| <= sqrt(sum 1/i^2) (phi(|x - x'|) +
        # phi(|y - y'|)) with the odd square root's modulus phi(r) = sqrt(2r).
        model = build_spectrum(n_modes=32)
        rng = np.random.default_rng(2)
        factor = math.sqrt(math.pi ** 2 / 6.0)
        phi = model.modulus
        for _ in range(200):
            x, y = rng.normal(size=(2, 32))
            dx, dy = 0.5 * rng.normal(size=(2, 32))
            lhs = np.linalg.norm(
                kernel_b1_spectral(x, y, model) - kernel_b1_spectral(x + dx, y + dy, model)
            )
            rhs = factor * (
                float(phi(np.linalg.norm(dx))) + float(phi(np.linalg.norm(dy)))
            )
            assert lhs <= rhs + 1e-12

    def test_spectral_field_validation(self):
        with pytest.raises(ValueError, match="finite"):
            SpectralField(np.array([1.0, np.inf]))
        field = SpectralField(np.array([1.0, 2.0]))
        assert field.coefficients.shape == (2,)


class TestExponentialIntegrator:
    def test_stationary_variance_matches_ou(self):
        model = build_spectrum(n_modes=16)
        driver = NoiseDriver(201)
        grid = TimeGrid(1.0, 200)
        init = default_field_sampler(model)(512, driver.child(1).generator())
        path = simulate_spde_free(model, init, grid, driver.child(2))
        tail = path[grid.steps // 2 :]
        for i in range(5):
            target = 1.0 / (2.0 * model.eigenvalues[i])
            observed = float((tail[:, :, i] ** 2).mean())
            assert observed == pytest.approx(target, rel=0.05)

    def test_single_particle_matches_free_run(self):
        # With one particle the empirical measure is its own point mass and
        # the kernel vanishes at equal fields, so the interacting run must
        # coincide bit for bit with the drift-free dynamics.
        model = build_spectrum(n_modes=8)
        driver = NoiseDriver(203)
        grid = TimeGrid(0.5, 20)
        init = default_field_sampler(model)(1, driver.child(1).generator())
        ips = simulate_spde_ips(model, init, grid, driver.child(7))
        free = simulate_spde_free(model, init, grid, driver.child(7))
        assert np.array_equal(ips, free)

    def test_high_mode_energy_ordering(self):
        model = build_spectrum(n_modes=12)
        driver = NoiseDriver(205)
        grid = TimeGrid(1.0, 100)
        init = default_field_sampler(model)(256, driver.child(1).generator())
        path = simulate_spde_free(model, init, grid, driver.child(2))
        energies = (path[grid.steps // 2 :] ** 2).mean(axis=(0, 1))
        assert np.all(np.diff(energies) < 0)

    def test_truncation_stability_leading_modes(self):
        # Doubling the mode count must leave leading-mode statistics within
        # Monte Carlo resolution (higher modes decay too fast to matter).
        driver = NoiseDriver(207)
        grid = TimeGrid(1.0, 50)
        stats = []
        for idx, modes in enumerate((16, 32)):
            model = build_spectrum(n_modes=modes)
            init = default_field_sampler(model)(128, driver.child(idx, 1).generator())
            path = simulate_spde_ips(model, init, grid, driver.child(idx, 2))
            stats.append((path[-1][:, :3] ** 2).mean(axis=0))
        se = np.abs(stats[0]) * math.sqrt(2.0 / 128)
        np.testing.assert_allclose(stats[0], stats[1], atol=3.0 * float(se.max()))

    def test_non_finite_abort(self):
        from chaoslab.errors import NumericalAbort
        import dataclasses

        model = build_spectrum(n_modes=4)
        bad = dataclasses.replace(
            model, b_tilde=lambda r: np.full_like(np.asarray(r, dtype=float), np.nan)
        )
        driver = NoiseDriver(209)
        grid = TimeGrid(0.5, 5)
        init = np.zeros((2, 4))
        with pytest.raises(NumericalAbort):
            simulate_spde_ips(bad, init, grid, driver)


class TestSpdeFlow:
    def test_zero_kernel_converges_immediately(self):
        model = build_spectrum(
            n_modes=8,
            b_tilde=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
            modulus=make_modulus("power", a=0.5),
        )
        driver = NoiseDriver(211)
        grid = TimeGrid(0.5, 20)
        flow = mkv_spde_flow(model, default_field_sampler(model), 150, grid, driver=driver)
        assert flow.converged and flow.iteration_count == 1

    def test_uniqueness_across_initial_guesses(self):
        model = build_spectrum(n_modes=16)
        driver = NoiseDriver(213)
        grid = TimeGrid(0.5, 25)
        sampler = default_field_sampler(model)
        flow_a = mkv_spde_flow(model, sampler, 200, grid, driver=driver, initial_guess="free")
        flow_b = mkv_spde_flow(model, sampler, 200, grid, driver=driver, initial_guess="constant")
        assert flow_a.converged and flow_b.converged
        gap = flow_gap(flow_a.atoms, flow_b.atoms, max_modes=3)
        assert gap < 3.0 * max(flow_a.tol, flow_b.tol)

    def test_coupled_strong_gap_decreases(self):
        model = build_spectrum(n_modes=16)
        driver = NoiseDriver(215)
        grid = TimeGrid(0.5, 25)
        sampler = default_field_sampler(model)
        flow = mkv_spde_flow(model, sampler, 150, grid, driver=driver.child(1))
        coupling = identical_coupling(sampler)
        gaps = []
        for idx, n in enumerate((8, 32)):
            vals = []
            for trial in range(24):
                run = run_coupled_spde(
                    model, coupling, n, grid, driver.child(2, idx), flow, trial,
                    allow_unconverged=True,
                )
                diff = run.ips_paths[-1][:, :3] - run.xbar_paths[-1][:, :3]
                vals.append(float((diff ** 2).sum(axis=1).mean()))
            gaps.append(np.mean(vals))
        assert gaps[1] < gaps[0]

    def test_identical_coupling_zero_kernel_all_equal(self):
        model = build_spectrum(
            n_modes=8,
            b_tilde=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
            modulus=make_modulus("power", a=0.5),
        )
        driver = NoiseDriver(217)
        grid = TimeGrid(0.5, 10)
        sampler = default_field_sampler(model)
        flow = mkv_spde_flow(model, sampler, 120, grid, driver=driver.child(1))
        run = run_coupled_spde(
            model, identical_coupling(sampler), 4, grid, driver.child(2), flow
        )
        assert np.array_equal(run.ips_paths, run.xbar_paths)
        assert np.array_equal(run.xbar_paths, run.limit_paths)
