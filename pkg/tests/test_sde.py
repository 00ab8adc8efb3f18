"""Time grids, moduli, model audits, noise streams, and the integrator."""

from __future__ import annotations

import math

import numpy as np
import pytest

from chaoslab.errors import NumericalAbort
from chaoslab.sde import (
    ModelConstants,
    ModelSpec,
    NoiseDriver,
    TimeGrid,
    euler_maruyama,
    make_modulus,
    validate_model,
    validate_modulus,
)

OU_TERMINAL_VARIANCE = 0.43233235838169365  # (1 - e^-2) / 2 at T = 1


class TestTimeGrid:
    def test_basics(self):
        grid = TimeGrid(2.0, 4)
        assert grid.h == 0.5
        np.testing.assert_allclose(grid.times(), [0.0, 0.5, 1.0, 1.5, 2.0])
        assert grid.node_of(1.5) == 3

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 4)
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)
        with pytest.raises(ValueError, match="node"):
            TimeGrid(1.0, 3).node_of(0.5)


class TestModulus:
    def test_power_half(self):
        phi = make_modulus("power", a=0.5)
        assert float(phi(4.0)) == pytest.approx(2.0)
        # Closed form of the small-scale integral of phi(r)/r: 1/a.
        assert phi.dini_integral_hint == pytest.approx(2.0)
        assert validate_modulus(phi) == pytest.approx(2.0, rel=1e-6)

    def test_power_range_enforced(self):
        with pytest.raises(ValueError, match=r"\(0, 1/2\]"):
            make_modulus("power", a=0.7)

    def test_linear_disguised_as_power_rejected(self):
        # phi(r) = r has a convex square; the midpoint audit must refuse it.
        with pytest.raises(ValueError, match="concavity"):
            make_modulus("custom", evaluator=lambda r: np.asarray(r, dtype=float), name="slope1")

    def test_linear_cap_accepted(self):
        phi = make_modulus("linear_cap", c=1.0)
        assert float(phi(0.25)) == pytest.approx(0.5)
        assert float(phi(4.0)) == pytest.approx(1.0)  # capped

    def test_non_monotone_rejected(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            make_modulus(
                "custom", evaluator=lambda r: np.abs(np.sin(np.asarray(r))), name="wavy"
            )

    def test_nonzero_origin_rejected(self):
        with pytest.raises(ValueError, match="phi\\(0\\)"):
            make_modulus("custom", evaluator=lambda r: np.asarray(r) + 0.1, name="offset")

    def test_dini_quadrature_failure_rejected(self):
        # Grid audits evaluate on arrays; the quadrature evaluates pointwise.
        # An evaluator that breaks on scalar probes exercises the guard that
        # converts quadrature failures into validation errors.
        def scalar_poison(r):
            r = np.asarray(r, dtype=float)
            if r.ndim == 0:
                raise FloatingPointError("pointwise evaluation blew up")
            return np.sqrt(np.maximum(r, 0.0))

        with pytest.raises(ValueError, match="Dini"):
            make_modulus("custom", evaluator=scalar_poison, name="quad_poison")


def _constant_sigma(d, n):
    mat = np.eye(d, n)
    return lambda t, x: mat


def _ou_model(delta=1.0):
    return ModelSpec(
        dim=1,
        noise_dim=1,
        b0=lambda t, x: -x,
        b1=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
        sigma=_constant_sigma(1, 1),
        constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=delta, b1_sup=0.0),
        horizon=1.0,
        name="ou",
    )


class TestModelValidation:
    def test_valid_model_passes(self):
        validate_model(_ou_model(), seed=1)

    def test_ellipticity_violation(self):
        model = ModelSpec(
            dim=1,
            noise_dim=1,
            b0=lambda t, x: -x,
            b1=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
            sigma=lambda t, x: 2.0 * np.eye(1),
            constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=0.0),
            horizon=1.0,
        )
        with pytest.raises(ValueError, match="spectrum"):
            validate_model(model, seed=1)

    def test_kernel_bound_violation(self):
        model = ModelSpec(
            dim=1,
            noise_dim=1,
            b0=lambda t, x: -x,
            b1=lambda t, x, y: 0.0 * x + 0.0 * y + 2.0,
            sigma=_constant_sigma(1, 1),
            constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=1.0),
            horizon=1.0,
        )
        with pytest.raises(ValueError, match="declared bound"):
            validate_model(model, seed=1)

    def test_lipschitz_violation(self):
        model = ModelSpec(
            dim=1,
            noise_dim=1,
            b0=lambda t, x: x * x,
            b1=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
            sigma=_constant_sigma(1, 1),
            constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=0.0),
            horizon=1.0,
        )
        with pytest.raises(ValueError, match="Lipschitz"):
            validate_model(model, seed=1)


class TestNoiseDriver:
    def test_replay_bit_identical(self):
        grid = TimeGrid(1.0, 50)
        driver = NoiseDriver(123)
        a = driver.increments(grid, particle=3, replication=7, noise_dim=2)
        b = NoiseDriver(123).increments(grid, particle=3, replication=7, noise_dim=2)
        assert np.array_equal(a, b)

    def test_distinct_keys_differ(self):
        grid = TimeGrid(1.0, 10)
        driver = NoiseDriver(123)
        base = driver.increments(grid, 0, 0)
        assert not np.array_equal(base, driver.increments(grid, 1, 0))
        assert not np.array_equal(base, driver.increments(grid, 0, 1))
        assert not np.array_equal(base, driver.child(5).increments(grid, 0, 0))

    def test_stream_independence_correlation(self):
        grid = TimeGrid(1.0, 4000)
        driver = NoiseDriver(99)
        block = driver.increment_block(grid, 4, 0, 1)[:, :, 0]
        n = block.shape[0]
        for i in range(4):
            for j in range(i + 1, 4):
                corr = np.corrcoef(block[:, i], block[:, j])[0, 1]
                assert abs(corr) <= 4.0 / math.sqrt(n)

    def test_increment_scaling(self):
        grid = TimeGrid(2.0, 200)
        driver = NoiseDriver(7)
        dw = driver.increments(grid, 0, 0, noise_dim=50)
        assert dw.var() == pytest.approx(grid.h, rel=0.1)


class TestEulerMaruyama:
    def test_zero_dynamics_constant_path(self):
        grid = TimeGrid(1.0, 20)
        dw = NoiseDriver(1).increments(grid, 0, 0)
        path = euler_maruyama(
            lambda t, x: np.zeros_like(x),
            lambda t, x: np.zeros((1, 1)),
            np.array([1.5]),
            grid,
            dw,
        )
        assert np.all(path == 1.5)

    def test_brownian_terminal_variance(self):
        grid = TimeGrid(1.0, 100)
        driver = NoiseDriver(17)
        dw = driver.increment_block(grid, 10_000, 0, 1)
        path = euler_maruyama(
            lambda t, x: np.zeros_like(x),
            _constant_sigma(1, 1),
            np.zeros((10_000, 1)),
            grid,
            dw,
        )
        assert path[-1][:, 0].var(ddof=1) == pytest.approx(1.0, rel=0.05)

    def test_ou_terminal_variance(self):
        grid = TimeGrid(1.0, 1000)
        driver = NoiseDriver(23)
        dw = driver.increment_block(grid, 10_000, 0, 1)
        path = euler_maruyama(
            lambda t, x: -x, _constant_sigma(1, 1), np.zeros((10_000, 1)), grid, dw
        )
        v = path[-1][:, 0].var(ddof=1)
        assert v == pytest.approx(OU_TERMINAL_VARIANCE, rel=0.05)

    def test_replay_determinism_full_path(self):
        grid = TimeGrid(1.0, 50)
        driver = NoiseDriver(31)
        dw = driver.increment_block(grid, 8, 4, 1)
        run = lambda: euler_maruyama(
            lambda t, x: -x, _constant_sigma(1, 1), np.full((8, 1), 0.3), grid, dw
        )
        assert np.array_equal(run(), run())

    def test_weak_order_sanity_halved_step(self):
        # Halving h moves the smooth OU functional by less than the Monte
        # Carlo uncertainty at this sample size.
        driver = NoiseDriver(37)
        n = 10_000
        ests = []
        for steps in (100, 200):
            grid = TimeGrid(1.0, steps)
            dw = driver.child(steps).increment_block(grid, n, 0, 1)
            path = euler_maruyama(
                lambda t, x: -x, _constant_sigma(1, 1), np.zeros((n, 1)), grid, dw
            )
            terminal = path[-1][:, 0]
            ests.append((terminal ** 2).mean())
        stderr = OU_TERMINAL_VARIANCE * math.sqrt(2.0 / n)
        assert abs(ests[0] - ests[1]) < 3.0 * stderr

    def test_non_finite_abort_reports_step(self):
        grid = TimeGrid(1.0, 10)
        dw = NoiseDriver(3).increments(grid, 0, 0)
        with pytest.raises(NumericalAbort) as err:
            euler_maruyama(
                lambda t, x: np.full_like(x, 1e308),
                _constant_sigma(1, 1),
                np.array([1e308]),
                grid,
                dw,
            )
        assert err.value.step is not None

    def test_shape_mismatch_rejected(self):
        grid = TimeGrid(1.0, 10)
        with pytest.raises(ValueError, match="increments"):
            euler_maruyama(
                lambda t, x: -x,
                _constant_sigma(1, 1),
                np.zeros((4, 1)),
                grid,
                np.zeros((5, 4, 1)),
            )
