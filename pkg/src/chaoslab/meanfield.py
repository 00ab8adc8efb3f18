"""The N-particle interacting system, its mean-field limit law via Picard
iteration on measure flows, and synchronously coupled reference processes.

Three systems share Brownian streams per particle index:

  * the interacting system, whose drift averages the kernel over the live
    empirical measure (self-interaction included, matching the 1/N sum over
    all particles);
  * an intermediate system started from the interacting system's initial
    points but driven by the kernel averaged against the frozen limit flow;
  * independent limit copies started from their own initial points with the
    same frozen-flow drift.

Because the intermediate and limit systems share dynamics and noise and
differ only through initial points, pathwise gaps between the three isolate
exactly the two error sources of interest: the empirical-measure fluctuation
and the initial-law discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure
from .sde import ModelSpec, NoiseDriver, TimeGrid, euler_maruyama

__all__ = [
    "Ensemble",
    "MeasureFlow",
    "CoupledRun",
    "InitialCoupling",
    "identical_coupling",
    "shift_coupling",
    "independent_coupling",
    "comonotone_coupling",
    "simulate_ips",
    "solve_mkv_picard",
    "run_coupled",
    "iterate_measure_flow",
    "flow_gap",
]

# Stream namespaces: disjoint key prefixes so initial draws, solver
# iterations, floor estimates, and trial paths can never collide.
_TAG_INIT = 1
_TAG_PATHS = 2
_TAG_PICARD = 3
_TAG_FLOOR = 4
_TAG_SUPPORT = 5

PICARD_MIN_SUPPORT = 100
FLOW_GAP_MODES = 3


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ensemble:
    """States of an N-particle system at a single time."""

    states: np.ndarray
    time: float
    n_particles: int

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[0] != self.n_particles:
            raise ValueError(f"states must be (N, d) with N={self.n_particles}, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("ensemble states must be finite")
        object.__setattr__(self, "states", s)

    @classmethod
    def from_states(cls, states, time: float = 0.0) -> "Ensemble":
        s = np.asarray(states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        return cls(states=s, time=time, n_particles=s.shape[0])


@dataclass
class MeasureFlow:
    """An empirical approximation of a time-indexed law flow.

    `atoms` holds the support paths as an array (steps + 1, support, d);
    `laws` exposes the same data as one empirical measure per grid node.
    """

    grid: TimeGrid
    atoms: np.ndarray
    iteration_count: int
    converged: bool
    final_gap: float
    gap_history: list[float] = field(default_factory=list)
    tol: float = float("nan")

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim != 3 or a.shape[0] != self.grid.steps + 1:
            raise ValueError(
                f"atoms must be (steps+1, support, d), got {a.shape} for "
                f"{self.grid.steps} steps"
            )
        if not np.all(np.isfinite(a)):
            raise ValueError("flow atoms must be finite")
        self.atoms = a

    @property
    def support_size(self) -> int:
        return self.atoms.shape[1]

    def law(self, node: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_samples(self.atoms[node])

    @property
    def laws(self) -> list[EmpiricalMeasure]:
        return [self.law(k) for k in range(self.grid.steps + 1)]


@dataclass(frozen=True)
class CoupledRun:
    """Trajectories of the three synchronously coupled systems.

    All path arrays have shape (steps + 1, N, d) and were advanced with
    identical per-particle Brownian increments.
    """

    ips_paths: np.ndarray
    xbar_paths: np.ndarray
    limit_paths: np.ndarray
    driver: NoiseDriver
    initial_displacements: np.ndarray


# ---------------------------------------------------------------------------
# Initial couplings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialCoupling:
    """A joint draw of paired initial points for the interacting system and
    the limit copies."""

    kind: str
    draw: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def _as_cloud(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def identical_coupling(sampler) -> InitialCoupling:
    def draw(n, rng):
        x = _as_cloud(sampler(n, rng))
        return x, x

    return InitialCoupling(kind="identical", draw=draw)


def shift_coupling(sampler, shift) -> InitialCoupling:
    """Interacting-system initials are the limit initials plus a fixed shift.

    The resulting initial laws are mutually singular point translations, the
    regime where entropy-based initial comparisons degenerate but transport
    costs stay informative.
    """
    shift_arr = np.atleast_1d(np.asarray(shift, dtype=float))

    def draw(n, rng):
        x = _as_cloud(sampler(n, rng))
        return x + shift_arr[None, :], x

    return InitialCoupling(kind=f"shift({np.linalg.norm(shift_arr):g})", draw=draw)


def independent_coupling(sampler_ips, sampler_limit) -> InitialCoupling:
    def draw(n, rng):
        return _as_cloud(sampler_ips(n, rng)), _as_cloud(sampler_limit(n, rng))

    return InitialCoupling(kind="independent", draw=draw)


def comonotone_coupling(ppf_ips, ppf_limit) -> InitialCoupling:
    """Couple through a shared uniform variable and the two quantile maps."""

    def draw(n, rng):
        u = rng.uniform(size=n)
        return _as_cloud(ppf_ips(u)), _as_cloud(ppf_limit(u))

    return InitialCoupling(kind="comonotone", draw=draw)


# ---------------------------------------------------------------------------
# Drifts
# ---------------------------------------------------------------------------


def _kernel_mean(model: ModelSpec, t: float, states: np.ndarray, atoms: np.ndarray):
    if model.b1_mean is not None:
        return np.asarray(model.b1_mean(t, states, atoms), dtype=float)
    return np.asarray(
        model.b1(t, states[:, None, :], atoms[None, :, :]), dtype=float
    ).mean(axis=1)


def _ips_drift(model: ModelSpec):
    def drift(t, states):
        inter = _kernel_mean(model, t, states, states)
        return np.asarray(model.b0(t, states), dtype=float) + inter

    return drift


def _frozen_drift(model: ModelSpec, grid: TimeGrid, flow_atoms: np.ndarray):
    def drift(t, states):
        k = int(round(t / grid.h))
        inter = _kernel_mean(model, t, states, flow_atoms[k])
        return np.asarray(model.b0(t, states), dtype=float) + inter

    return drift


def _advance(model: ModelSpec, drift, x0: np.ndarray, grid: TimeGrid, dw: np.ndarray):
    return euler_maruyama(drift, model.sigma, x0, grid, dw)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def simulate_ips(
    model: ModelSpec,
    init: Ensemble,
    grid: TimeGrid,
    driver: NoiseDriver,
    replication: int = 0,
) -> np.ndarray:
    """Advance the interacting particle system; returns (steps+1, N, d).

    Per step, the drift of particle i is b0(t, x_i) plus the kernel averaged
    over all N current states including x_i itself, then an Euler-Maruyama
    update with particle i's own increment stream.  The kernel evaluation is
    the O(N^2) pairwise broadcast.
    """
    dw = driver.child(_TAG_PATHS).increment_block(
        grid, init.n_particles, replication, model.noise_dim
    )
    return _advance(model, _ips_drift(model), init.states, grid, dw)


def flow_gap(atoms_a: np.ndarray, atoms_b: np.ndarray, max_modes: int = FLOW_GAP_MODES) -> float:
    """Sup over grid nodes of the distance between two empirical flows.

    In dimension one this is the exact 1-Wasserstein distance (sorted
    pairing).  In higher dimension it is the max over the leading
    `max_modes` coordinate marginals of their one-dimensional distances --
    a cheap lower-bound surrogate for the joint distance that the iteration
    uses as its stopping metric.
    """
    if atoms_a.shape != atoms_b.shape:
        raise ValueError(f"flow shapes differ: {atoms_a.shape} vs {atoms_b.shape}")
    d = atoms_a.shape[2]
    coords = range(min(d, max_modes))
    worst = 0.0
    for k in range(atoms_a.shape[0]):
        for j in coords:
            a = np.sort(atoms_a[k, :, j])
            b = np.sort(atoms_b[k, :, j])
            worst = max(worst, float(np.mean(np.abs(a - b))))
    return worst


def iterate_measure_flow(
    initial_atoms: np.ndarray,
    simulate_frozen: Callable[[np.ndarray, int], np.ndarray],
    grid: TimeGrid,
    tol: float | None,
    max_iter: int,
    noise_floor: Callable[[np.ndarray], float] | None = None,
    gap_modes: int = FLOW_GAP_MODES,
) -> MeasureFlow:
    """Generic fixed-point iteration on empirical measure flows.

    `simulate_frozen(flow_atoms, replication)` must return the law flow of
    the dynamics with the kernel averaged against `flow_atoms`, using fresh
    streams for each replication index.  When `tol` is None it is set to
    twice the Monte Carlo noise floor measured by re-simulating the initial
    flow with independent streams.
    """
    atoms = np.asarray(initial_atoms, dtype=float)
    if tol is None:
        if noise_floor is None:
            raise ValueError("tol=None requires a noise_floor callback")
        floor = noise_floor(atoms)
        tol = 2.0 * floor
    if tol <= 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    gaps: list[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        new_atoms = simulate_frozen(atoms, iteration)
        gap = flow_gap(new_atoms, atoms, max_modes=gap_modes)
        gaps.append(gap)
        atoms = new_atoms
        if gap < tol:
            converged = True
            break
    return MeasureFlow(
        grid=grid,
        atoms=atoms,
        iteration_count=iteration,
        converged=converged,
        final_gap=gaps[-1] if gaps else float("nan"),
        gap_history=gaps,
        tol=tol,
    )


def solve_mkv_picard(
    model: ModelSpec,
    init_sampler: Callable[[int, np.random.Generator], np.ndarray],
    support_size: int,
    grid: TimeGrid,
    tol: float | None = None,
    max_iter: int = 20,
    driver: NoiseDriver | None = None,
    initial_guess: str | np.ndarray = "free",
) -> MeasureFlow:
    """Approximate the limit law flow by iterating the frozen-flow map.

    Each iteration simulates `support_size` paths whose kernel term is
    averaged against the previous iterate's atoms node by node, with fresh
    independent streams per iteration; the iteration stops when the sup-node
    flow gap drops below `tol` (default: twice the measured Monte Carlo
    noise floor).  Callers must check `converged` -- a flow returned after
    `max_iter` iterations without meeting the tolerance is flagged, not
    raised.

    `initial_guess` selects the starting flow: "free" (law flow of the
    kernel-free dynamics), "constant" (the initial cloud held constant over
    the grid), or an explicit atoms array -- different starting flows must
    reach the same fixed point.
    """
    if support_size < PICARD_MIN_SUPPORT:
        raise ValueError(f"support_size must be >= {PICARD_MIN_SUPPORT}, got {support_size}")
    if driver is None:
        raise ValueError("solve_mkv_picard requires a NoiseDriver")
    rng0 = driver.child(_TAG_SUPPORT).generator()
    x0 = _as_cloud(init_sampler(support_size, rng0))
    if x0.shape != (support_size, model.dim):
        raise ValueError(f"init_sampler returned shape {x0.shape}")

    picard_driver = driver.child(_TAG_PICARD)
    floor_driver = driver.child(_TAG_FLOOR)

    def simulate_frozen(flow_atoms: np.ndarray, replication: int, *, _driver=picard_driver):
        dw = _driver.increment_block(grid, support_size, replication, model.noise_dim)
        return _advance(model, _frozen_drift(model, grid, flow_atoms), x0, grid, dw)

    def free_flow(replication: int, *, _driver=floor_driver) -> np.ndarray:
        dw = _driver.increment_block(grid, support_size, replication, model.noise_dim)
        drift = lambda t, states: np.asarray(model.b0(t, states), dtype=float)
        return _advance(model, drift, x0, grid, dw)

    initial_atoms = _initial_flow_atoms(initial_guess, free_flow, x0, grid)

    def noise_floor(_atoms: np.ndarray) -> float:
        return flow_gap(free_flow(1), free_flow(2))

    return iterate_measure_flow(
        initial_atoms,
        simulate_frozen,
        grid,
        tol=tol,
        max_iter=max_iter,
        noise_floor=noise_floor,
    )


def _initial_flow_atoms(initial_guess, free_flow, x0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    if isinstance(initial_guess, str):
        if initial_guess == "free":
            return free_flow(0)
        if initial_guess == "constant":
            return np.broadcast_to(x0, (grid.steps + 1,) + x0.shape).copy()
        raise ValueError(f"unknown initial_guess {initial_guess!r}")
    atoms = np.asarray(initial_guess, dtype=float)
    if atoms.shape != (grid.steps + 1,) + x0.shape:
        raise ValueError(
            f"initial_guess atoms must have shape {(grid.steps + 1,) + x0.shape}, "
            f"got {atoms.shape}"
        )
    return atoms


def run_coupled(
    model: ModelSpec,
    coupling: InitialCoupling,
    n_particles: int,
    grid: TimeGrid,
    driver: NoiseDriver,
    mkv_flow: MeasureFlow,
    replication: int = 0,
    allow_unconverged: bool = False,
) -> CoupledRun:
    """Advance the interacting, intermediate, and limit systems on shared
    streams.

    The intermediate system starts from the interacting system's initial
    points, the limit system from its own; both use the frozen-flow drift,
    so for coinciding initial points their paths agree bit for bit.
    """
    if not mkv_flow.converged and not allow_unconverged:
        raise ValueError(
            "mkv_flow did not converge; pass allow_unconverged=True to override"
        )
    if mkv_flow.grid.steps != grid.steps or abs(mkv_flow.grid.T - grid.T) > 1e-12:
        raise ValueError("flow grid does not match the simulation grid")
    rng_init = driver.child(_TAG_INIT).generator(0, replication)
    x0_ips, x0_limit = coupling.draw(n_particles, rng_init)
    if x0_ips.shape != (n_particles, model.dim) or x0_limit.shape != (n_particles, model.dim):
        raise ValueError("coupling produced clouds of the wrong shape")

    dw = driver.child(_TAG_PATHS).increment_block(
        grid, n_particles, replication, model.noise_dim
    )
    frozen = _frozen_drift(model, grid, mkv_flow.atoms)
    ips = _advance(model, _ips_drift(model), x0_ips, grid, dw)
    xbar = _advance(model, frozen, x0_ips, grid, dw)
    limit = _advance(model, frozen, x0_limit, grid, dw)
    return CoupledRun(
        ips_paths=ips,
        xbar_paths=xbar,
        limit_paths=limit,
        driver=driver,
        initial_displacements=np.linalg.norm(x0_ips - x0_limit, axis=1),
    )
