"""Registered test models for the study harness.

Three desk-scale models cover the regimes the laboratory exercises: a smooth
bounded interaction in dimension one, a low-regularity (Dini-continuous)
interaction in dimension one, and the spectral mean-field SPDE.  Initial
laws are standard Gaussians (stationary-scaled per mode for the spectral
model) so quantile functions are available for comonotone couplings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm

from .sde import ModelConstants, ModelSpec, make_modulus
from .spde import SpectralModel, build_spectrum, default_field_sampler

__all__ = ["ModelBundle", "MODEL_REGISTRY", "get_model"]


@dataclass(frozen=True)
class ModelBundle:
    """A registered model plus everything the harness needs to run it."""

    model_id: str
    kind: str  # "finite" or "spde"
    spec: ModelSpec | SpectralModel
    init_sampler: Callable[[int, np.random.Generator], np.ndarray]
    init_ppf: Callable[[np.ndarray], np.ndarray] | None = None


def _gaussian_sampler(dim: int):
    def sampler(n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, dim))

    return sampler


def _bounded_kernel_1d() -> ModelBundle:
    """Confined diffusion with smooth bounded interaction sin(y - x)."""

    def kernel_mean(t, states, atoms):
        # Angle addition collapses the cloud average exactly:
        # mean_m sin(a_m - x) = cos(x) mean(sin a) - sin(x) mean(cos a).
        a = atoms[:, 0]
        s_bar = np.sin(a).mean()
        c_bar = np.cos(a).mean()
        x = states[:, 0]
        return (s_bar * np.cos(x) - c_bar * np.sin(x))[:, None]

    spec = ModelSpec(
        dim=1,
        noise_dim=1,
        b0=lambda t, x: -x,
        b1=lambda t, x, y: np.sin(y - x),
        sigma=lambda t, x: np.ones((1, 1)),
        constants=ModelConstants(k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=1.0),
        horizon=1.0,
        name="bounded_kernel_1d",
        b1_mean=kernel_mean,
    )
    return ModelBundle(
        model_id="bounded_kernel_1d",
        kind="finite",
        spec=spec,
        init_sampler=_gaussian_sampler(1),
        init_ppf=lambda u: norm.ppf(u),
    )


def _dini_kernel_1d() -> ModelBundle:
    """Confined diffusion whose interaction is bounded but only Dini
    continuous: half the capped odd square root of the displacement."""
    cap = make_modulus("linear_cap", c=1.0)
    # Sharpest modulus of the kernel below: the odd square-root profile picks
    # up a sqrt(2) across sign changes, and the kernel bound 1/2 caps the
    # displacement at 1 (reached by r = 2).
    kernel_modulus = make_modulus(
        "custom",
        evaluator=lambda r: 0.5 * np.sqrt(2.0 * np.minimum(np.maximum(r, 0.0), 2.0)),
        name="dini_kernel_modulus",
    )

    def kernel(t, x, y):
        s = y - x
        return 0.5 * np.sign(s) * np.asarray(cap(np.abs(s)), dtype=float)

    spec = ModelSpec(
        dim=1,
        noise_dim=1,
        b0=lambda t, x: -x,
        b1=kernel,
        sigma=lambda t, x: np.ones((1, 1)),
        constants=ModelConstants(
            k_b=1.0, k_sigma=0.0, delta=1.0, b1_sup=0.5, modulus=kernel_modulus
        ),
        horizon=1.0,
        name="dini_kernel_1d",
    )
    return ModelBundle(
        model_id="dini_kernel_1d",
        kind="finite",
        spec=spec,
        init_sampler=_gaussian_sampler(1),
        init_ppf=lambda u: norm.ppf(u),
    )


def _spde_spectral() -> ModelBundle:
    model = build_spectrum(n_modes=64, smoothing_power=1.0, trace_exponent=0.25)
    return ModelBundle(
        model_id="spde_spectral",
        kind="spde",
        spec=model,
        init_sampler=default_field_sampler(model),
    )


MODEL_REGISTRY: dict[str, Callable[[], ModelBundle]] = {
    "bounded_kernel_1d": _bounded_kernel_1d,
    "dini_kernel_1d": _dini_kernel_1d,
    "spde_spectral": _spde_spectral,
}


def get_model(model_id: str) -> ModelBundle:
    try:
        factory = MODEL_REGISTRY[model_id]
    except KeyError:
        raise KeyError(
            f"unknown model {model_id!r}; registered: {sorted(MODEL_REGISTRY)}"
        ) from None
    return factory()
