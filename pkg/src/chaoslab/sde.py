"""Time grids, splittable noise streams, model specifications, moduli of
continuity, and the Euler-Maruyama integrator.

Everything downstream (particle systems, measure flows, change-of-measure
diagnostics) is built on the primitives here.  The design constraint that
shapes this module is synchronous coupling: several systems must consume the
*same* Brownian increments per particle, and replays must be bit-identical
regardless of how work is scheduled.  Streams are therefore derived from
keys, never from shared sequential state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import NumericalAbort

__all__ = [
    "TimeGrid",
    "ModulusFunction",
    "make_modulus",
    "validate_modulus",
    "ModelConstants",
    "ModelSpec",
    "validate_model",
    "NoiseDriver",
    "euler_maruyama",
]

# Modulus audit parameters: equispaced grid for monotonicity / concavity of
# the squared modulus, and the inner cutoff for the Dini integral.
AUDIT_GRID_POINTS = 1000
AUDIT_GRID_MAX = 10.0
DINI_INNER_CUTOFF = 1e-10


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with `steps` increments of size h = T/steps."""

    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon must be positive and finite, got {self.T}")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")

    @property
    def h(self) -> float:
        return self.T / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def node_of(self, t: float) -> int:
        """Index of the grid node at time t; t must lie on the grid."""
        k = int(round(t / self.h))
        if k < 0 or k > self.steps or abs(k * self.h - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"t={t} is not a node of the grid (T={self.T}, steps={self.steps})")
        return k


# ---------------------------------------------------------------------------
# Moduli of continuity (increasing, concave square, finite Dini integral)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModulusFunction:
    """A modulus of continuity phi with phi(0)=0, phi nondecreasing, phi^2
    concave, and integral of phi(r)/r over (0, 1] finite.

    The class constraints are audited numerically by `validate_modulus`; use
    `make_modulus` to build validated instances.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    name: str
    dini_integral_hint: float | None = None

    def __call__(self, r):
        return self.evaluator(np.asarray(r, dtype=float))


def _audit_grid() -> np.ndarray:
    return np.linspace(0.0, AUDIT_GRID_MAX, AUDIT_GRID_POINTS)


def validate_modulus(phi: ModulusFunction) -> float:
    """Audit the class constraints on a fixed grid; returns the Dini integral.

    Raises ValueError naming the violated constraint.  The concavity check is
    the midpoint test on the equispaced audit grid, which for a uniform grid
    reduces to non-positive second differences of phi^2.
    """
    grid = _audit_grid()
    vals = np.asarray(phi(grid), dtype=float)
    if vals.shape != grid.shape:
        raise ValueError(f"modulus {phi.name!r} must evaluate elementwise on arrays")
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"modulus {phi.name!r} is non-finite on the audit grid")
    if abs(vals[0]) > 1e-12:
        raise ValueError(f"modulus {phi.name!r} has phi(0)={vals[0]:.3e} != 0")
    if np.any(vals < -1e-12):
        raise ValueError(f"modulus {phi.name!r} takes negative values")
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError(f"modulus {phi.name!r} is not nondecreasing on the audit grid")
    sq = vals * vals
    tol = 1e-9 * max(1.0, float(sq.max()))
    second = sq[2:] - 2.0 * sq[1:-1] + sq[:-2]
    if np.any(second > tol):
        r_bad = grid[1:-1][second > tol][0]
        raise ValueError(
            f"modulus {phi.name!r}: squared modulus fails the midpoint concavity "
            f"audit near r={r_bad:.4g}"
        )
    integrand = lambda r: float(phi(r)) / r
    try:
        dini, err = integrate.quad(integrand, DINI_INNER_CUTOFF, 1.0, limit=200)
    except Exception as exc:
        raise ValueError(f"modulus {phi.name!r}: Dini integral did not converge: {exc}")
    if not math.isfinite(dini) or err > 1e-6 * max(1.0, abs(dini)):
        raise ValueError(
            f"modulus {phi.name!r}: Dini integral not convergent "
            f"(value {dini:.4g}, error estimate {err:.2g})"
        )
    return dini


def audit_concave_modulus(fn: Callable[[np.ndarray], np.ndarray], name: str = "modulus") -> None:
    """Lighter audit for dual-distance moduli: phi(0) = 0, nondecreasing,
    and phi itself concave on the grid.

    This is the requirement for the transport distance induced by
    phi(|x - y|) to be a metric with a matching dual formulation; it admits
    phi(r) = r, which the stricter squared-concavity class (required of
    interaction-kernel moduli) rejects.
    """
    grid = _audit_grid()
    vals = np.asarray(fn(grid), dtype=float)
    if vals.shape != grid.shape or not np.all(np.isfinite(vals)):
        raise ValueError(f"{name}: must evaluate elementwise and finitely on arrays")
    if abs(vals[0]) > 1e-12:
        raise ValueError(f"{name}: phi(0) = {vals[0]:.3e} != 0")
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError(f"{name}: not nondecreasing on the audit grid")
    tol = 1e-9 * max(1.0, float(np.abs(vals).max()))
    second = vals[2:] - 2.0 * vals[1:-1] + vals[:-2]
    if np.any(second > tol):
        raise ValueError(f"{name}: not concave on the audit grid")


def make_modulus(kind: str, **params) -> ModulusFunction:
    """Build a validated modulus of continuity.

    kinds:
      power(a):       phi(r) = r**a with a in (0, 1/2]; the square r**(2a) is
                      concave and the Dini integral equals 1/a.
      linear_cap(c):  phi(r) = sqrt(min(c*r, c*c)); the square is the capped
                      linear profile min(c*r, c^2), the steepest concave
                      square permitted by the class.
      custom:         phi from params['evaluator'], audited like the rest.
    """
    if kind == "power":
        a = float(params.pop("a"))
        if params:
            raise ValueError(f"unexpected parameters {sorted(params)} for power modulus")
        if not 0.0 < a <= 0.5:
            raise ValueError(f"power modulus requires exponent in (0, 1/2], got {a}")
        phi = ModulusFunction(
            evaluator=lambda r, _a=a: np.power(np.maximum(r, 0.0), _a),
            name=f"power({a:g})",
            dini_integral_hint=1.0 / a,
        )
    elif kind == "linear_cap":
        c = float(params.pop("c"))
        if params:
            raise ValueError(f"unexpected parameters {sorted(params)} for linear_cap modulus")
        if c <= 0:
            raise ValueError(f"linear_cap modulus requires c > 0, got {c}")
        if c >= 1.0:
            hint = 2.0 * math.sqrt(c)
        else:
            hint = 2.0 * c + c * math.log(1.0 / c)
        phi = ModulusFunction(
            evaluator=lambda r, _c=c: np.sqrt(np.minimum(_c * np.maximum(r, 0.0), _c * _c)),
            name=f"linear_cap({c:g})",
            dini_integral_hint=hint,
        )
    elif kind == "custom":
        evaluator = params.pop("evaluator")
        name = params.pop("name", "custom")
        hint = params.pop("dini_integral_hint", None)
        if params:
            raise ValueError(f"unexpected parameters {sorted(params)} for custom modulus")
        phi = ModulusFunction(evaluator=evaluator, name=name, dini_integral_hint=hint)
    else:
        raise ValueError(f"unknown modulus kind {kind!r}")
    validate_modulus(phi)
    return phi


# ---------------------------------------------------------------------------
# Model specification with assumption audits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConstants:
    """Declared constants a model promises to satisfy.

    k_b:      Lipschitz constant of the interaction-free drift.
    k_sigma:  Lipschitz constant of the diffusion field.
    delta:    two-sided ellipticity bound, 1/delta <= sigma sigma^T <= delta.
    b1_sup:   uniform bound on the interaction kernel.
    modulus:  optional continuity modulus of the kernel (low-regularity models).
    """

    k_b: float
    k_sigma: float
    delta: float
    b1_sup: float
    modulus: ModulusFunction | None = None

    def __post_init__(self):
        if self.delta < 1.0:
            raise ValueError(f"ellipticity constant delta must be >= 1, got {self.delta}")
        if self.b1_sup < 0 or self.k_b < 0 or self.k_sigma < 0:
            raise ValueError("model constants must be non-negative")


@dataclass(frozen=True)
class ModelSpec:
    """A mean-field model dX = [b0(t,X) + <b1(t,X,.), mu>] dt + sigma(t,X) dW.

    b0(t, x):     interaction-free drift, x of shape (..., dim) -> (..., dim).
    b1(t, x, y):  interaction kernel, broadcastable over leading axes.
    sigma(t, x):  diffusion matrix, (dim, noise_dim) or (..., dim, noise_dim).

    All callables must be vectorised over leading axes; the particle-system
    integrators rely on broadcasting for the O(N^2) kernel sums.

    b1_mean(t, states, atoms), when supplied, must equal the row mean of the
    pairwise kernel matrix exactly (up to float reassociation): some kernels
    admit an algebraic collapse of the average over a cloud (for example
    trigonometric kernels via angle addition), turning the O(N * M) pairwise
    sum into O(N + M).  The integrators use it when present; omitting it
    always falls back to the generic broadcast.
    """

    dim: int
    noise_dim: int
    b0: Callable[[float, np.ndarray], np.ndarray]
    b1: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray], np.ndarray]
    constants: ModelConstants
    horizon: float
    name: str = ""
    b1_mean: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None


def validate_model(model: ModelSpec, seed: int = 0, n_probes: int = 200, box: float = 4.0) -> None:
    """Probabilistic audit of the declared constants on random probes.

    This catches configuration errors (wrong delta, unbounded kernel, missing
    Lipschitz constant); it is an audit, not a proof of the global bounds.
    """
    rng = np.random.default_rng(seed)
    d = model.dim
    c = model.constants
    xs = rng.uniform(-box, box, size=(n_probes, d))
    ys = rng.uniform(-box, box, size=(n_probes, d))
    ts = rng.uniform(0.0, model.horizon, size=n_probes)
    tol = 1e-9
    for t, x, y in zip(ts, xs, ys):
        a = np.atleast_2d(np.asarray(model.sigma(t, x), dtype=float))
        if a.shape != (d, model.noise_dim):
            raise ValueError(
                f"model {model.name!r}: sigma returned shape {a.shape}, "
                f"expected {(d, model.noise_dim)}"
            )
        eigs = np.linalg.eigvalsh(a @ a.T)
        if eigs.min() < 1.0 / c.delta - tol or eigs.max() > c.delta + tol:
            raise ValueError(
                f"model {model.name!r}: sigma sigma^T spectrum {eigs} leaves "
                f"[{1.0 / c.delta:.4g}, {c.delta:.4g}] at t={t:.3g}"
            )
        k = np.asarray(model.b1(t, x, y), dtype=float)
        if np.linalg.norm(k) > c.b1_sup + tol:
            raise ValueError(
                f"model {model.name!r}: |b1|={np.linalg.norm(k):.4g} exceeds the "
                f"declared bound {c.b1_sup:.4g}"
            )
        gap = np.linalg.norm(x - y)
        if gap > 1e-12:
            lip = np.linalg.norm(
                np.asarray(model.b0(t, x), dtype=float) - np.asarray(model.b0(t, y), dtype=float)
            ) / gap
            if lip > c.k_b * (1.0 + 1e-9) + tol:
                raise ValueError(
                    f"model {model.name!r}: b0 Lipschitz ratio {lip:.4g} exceeds "
                    f"the declared constant {c.k_b:.4g}"
                )


# ---------------------------------------------------------------------------
# Noise streams
# ---------------------------------------------------------------------------


class NoiseDriver:
    """Deterministic, splittable Gaussian streams keyed by integers.

    Keys are (master_seed, namespace..., particle, replication) fed through
    numpy's SeedSequence spawn keys into the counter-based Philox generator.
    Identical keys replay bit-identical sequences; distinct keys give
    statistically independent streams, independent of call order or thread
    scheduling.  `child` extends the namespace so that disjoint parts of a
    computation (initial draws, solver iterations, trial paths) can never
    collide on keys.
    """

    def __init__(self, master_seed: int, _namespace: tuple[int, ...] = ()):
        self.master_seed = int(master_seed)
        self._namespace = tuple(int(t) for t in _namespace)

    def child(self, *tags: int) -> "NoiseDriver":
        return NoiseDriver(self.master_seed, self._namespace + tags)

    def generator(self, particle: int = 0, replication: int = 0) -> np.random.Generator:
        key = self._namespace + (int(particle), int(replication))
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))

    def normals(self, shape, particle: int = 0, replication: int = 0) -> np.ndarray:
        """Standard normal block drawn from the keyed stream."""
        return self.generator(particle, replication).standard_normal(shape)

    def increments(
        self, grid: TimeGrid, particle: int = 0, replication: int = 0, noise_dim: int = 1
    ) -> np.ndarray:
        """Brownian increments of shape (steps, noise_dim), variance h each."""
        z = self.normals((grid.steps, noise_dim), particle, replication)
        return math.sqrt(grid.h) * z

    def increment_block(
        self, grid: TimeGrid, n_particles: int, replication: int = 0, noise_dim: int = 1
    ) -> np.ndarray:
        """Increments for particles 0..N-1 stacked to (steps, N, noise_dim)."""
        block = np.empty((grid.steps, n_particles, noise_dim))
        for i in range(n_particles):
            block[:, i, :] = self.increments(grid, i, replication, noise_dim)
        return block


# ---------------------------------------------------------------------------
# Euler-Maruyama
# ---------------------------------------------------------------------------


def _apply_diffusion(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    if sig.ndim == 2:
        return dw @ sig.T
    if sig.ndim == dw.ndim + 1:
        return np.einsum("...ij,...j->...i", sig, dw)
    raise ValueError(f"diffusion shape {sig.shape} incompatible with increments {dw.shape}")


def euler_maruyama(
    drift: Callable[[float, np.ndarray], np.ndarray],
    sigma: Callable[[float, np.ndarray], np.ndarray],
    x0: Sequence[float] | np.ndarray,
    grid: TimeGrid,
    increments: np.ndarray,
) -> np.ndarray:
    """Explicit Euler-Maruyama on a uniform grid.

    X_{k+1} = X_k + drift(t_k, X_k) h + sigma(t_k, X_k) dW_k.

    Supports a single state of shape (d,) with increments (steps, n) and a
    batch of states (N, d) with increments (steps, N, n); the path returned
    has one leading time axis of length steps + 1.  Raises NumericalAbort
    with the offending step index when a state becomes non-finite.
    """
    x = np.array(x0, dtype=float)
    dw = np.asarray(increments, dtype=float)
    if dw.shape[0] != grid.steps or dw.ndim != x.ndim + 1:
        raise ValueError(
            f"increments shape {dw.shape} does not match state shape {x.shape} "
            f"and grid with {grid.steps} steps"
        )
    h = grid.h
    path = np.empty((grid.steps + 1,) + x.shape)
    path[0] = x
    for k in range(grid.steps):
        t = k * h
        b = np.asarray(drift(t, x), dtype=float)
        sig = np.asarray(sigma(t, x), dtype=float)
        x = x + h * b + _apply_diffusion(sig, dw[k])
        if not np.all(np.isfinite(x)):
            raise NumericalAbort("Euler-Maruyama state became non-finite", step=k + 1)
        path[k + 1] = x
    return path
