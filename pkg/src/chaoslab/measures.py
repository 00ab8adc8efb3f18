"""Empirical measures, transport costs, and exact discrete optimal transport.

All laboratory measures are finite point clouds, so every distance here is
computed *exactly*: sorted pairing in dimension one (convex costs), min-cost
assignment for equal-size uniform supports, and a dense linear program for
general weights on small supports.  Exactness is the point -- these values
back identity checks (product splitting, duality reductions, triangle
inequalities) where an approximate solver would make the checks vacuous.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import SolverCapError
from .sde import ModulusFunction, audit_concave_modulus

__all__ = [
    "EmpiricalMeasure",
    "CostFunction",
    "TransportPlan",
    "wasserstein_p",
    "transport_cost",
    "w_phi",
    "weighted_variation",
    "product_transport",
    "joint_product_transport",
    "binned_densities",
]

# Exact-solver size caps: assignment for equal-size uniform clouds, dense LP
# for general weights.  Larger instances are out of scope for exact mode.
ASSIGNMENT_ATOM_CAP = 10_000
LP_ATOM_CAP = 64

_WEIGHT_TOL = 1e-12
_MARGINAL_TOL = 1e-9


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalMeasure:
    """A finite weighted point cloud representing a probability law.

    points:  (n, dim) array of atom locations.
    weights: (n,) non-negative array summing to one (within 1e-12).
    """

    points: np.ndarray
    weights: np.ndarray
    dim: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(f"points must have shape (n, {self.dim}), got {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise ValueError(f"weights shape {w.shape} does not match {pts.shape[0]} atoms")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("points and weights must be finite")
        if np.any(w < -_WEIGHT_TOL):
            raise ValueError("weights must be non-negative")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL * max(1, len(w)):
            raise ValueError(f"weights sum to {w.sum():.17g}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_samples(cls, samples, weights=None) -> "EmpiricalMeasure":
        """Uniform (or explicitly weighted) empirical measure on samples."""
        pts = np.asarray(samples, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            w = w / w.sum()
        return cls(points=pts, weights=w, dim=pts.shape[1])

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    def is_uniform(self) -> bool:
        n = self.n_atoms
        return bool(np.allclose(self.weights, 1.0 / n, rtol=0, atol=_WEIGHT_TOL))


@dataclass(frozen=True)
class CostFunction:
    """A pairwise cost vanishing on the diagonal.

    `evaluator` maps a single pair of points to a non-negative real; `matrix`
    evaluates all pairs between two clouds at once (vectorised for the
    built-in kinds, looped for custom evaluators).
    """

    kind: str
    evaluator: Callable[[np.ndarray, np.ndarray], float]
    _matrix: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    @staticmethod
    def euclidean_power(p: float) -> "CostFunction":
        """|x - y|^p."""
        if p <= 0:
            raise ValueError(f"exponent must be positive, got {p}")

        def matrix(x, y, _p=p):
            return _pairwise_dist(x, y) ** _p

        return CostFunction(
            kind=f"euclidean_power({p:g})",
            evaluator=lambda a, b, _p=p: float(np.linalg.norm(np.subtract(a, b)) ** _p),
            _matrix=matrix,
        )

    @staticmethod
    def psi_eta(eta: float) -> "CostFunction":
        """|x - y|^(2*eta) + |x - y|^2, the mixed-power initial cost."""
        if not 0.0 < eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {eta}")

        def matrix(x, y, _e=eta):
            r = _pairwise_dist(x, y)
            return r ** (2.0 * _e) + r * r

        def pair(a, b, _e=eta):
            r = float(np.linalg.norm(np.subtract(a, b)))
            return r ** (2.0 * _e) + r * r

        return CostFunction(kind=f"psi_eta({eta:g})", evaluator=pair, _matrix=matrix)

    @staticmethod
    def psi_phi(phi: ModulusFunction) -> "CostFunction":
        """phi(|x - y|)^2 + |x - y|^2 for a continuity modulus phi."""

        def matrix(x, y, _phi=phi):
            r = _pairwise_dist(x, y)
            v = np.asarray(_phi(r), dtype=float)
            return v * v + r * r

        def pair(a, b, _phi=phi):
            r = float(np.linalg.norm(np.subtract(a, b)))
            v = float(_phi(r))
            return v * v + r * r

        return CostFunction(kind=f"psi_phi({phi.name})", evaluator=pair, _matrix=matrix)

    @staticmethod
    def modulus(phi: ModulusFunction) -> "CostFunction":
        """phi(|x - y|) itself, the cost behind the modulus transport distance."""

        def matrix(x, y, _phi=phi):
            return np.asarray(_phi(_pairwise_dist(x, y)), dtype=float)

        return CostFunction(
            kind=f"modulus({phi.name})",
            evaluator=lambda a, b, _phi=phi: float(_phi(np.linalg.norm(np.subtract(a, b)))),
            _matrix=matrix,
        )

    @staticmethod
    def custom(evaluator: Callable[[np.ndarray, np.ndarray], float], name: str = "custom"):
        return CostFunction(kind=name, evaluator=evaluator, _matrix=None)

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self._matrix is not None:
            return self._matrix(x, y)
        out = np.empty((x.shape[0], y.shape[0]))
        for i, xi in enumerate(x):
            for j, yj in enumerate(y):
                out[i, j] = self.evaluator(xi, yj)
        return out


@dataclass(frozen=True)
class TransportPlan:
    """An optimal coupling matrix together with its cost."""

    plan: np.ndarray
    cost: float

    def check_marginals(self, mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
        if np.abs(self.plan.sum(axis=1) - mu.weights).max() > _MARGINAL_TOL:
            raise ValueError("plan row sums do not match the source weights")
        if np.abs(self.plan.sum(axis=0) - nu.weights).max() > _MARGINAL_TOL:
            raise ValueError("plan column sums do not match the target weights")


def _pairwise_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.linalg.norm(diff, axis=-1)


# ---------------------------------------------------------------------------
# Exact solvers
# ---------------------------------------------------------------------------


def _solve_assignment(cost: np.ndarray) -> tuple[float, np.ndarray | None]:
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    value = float(cost[rows, cols].sum() / n)
    return value, np.stack([rows, cols])


def _solve_lp(cost: np.ndarray, w_mu: np.ndarray, w_nu: np.ndarray) -> tuple[float, np.ndarray]:
    n, m = cost.shape
    # Row-sum and column-sum equality constraints; the final column constraint
    # is redundant (total mass) and dropped for numerical rank.
    a_rows = np.zeros((n, n * m))
    for i in range(n):
        a_rows[i, i * m : (i + 1) * m] = 1.0
    a_cols = np.zeros((m - 1, n * m))
    for j in range(m - 1):
        a_cols[j, j::m] = 1.0
    a_eq = np.vstack([a_rows, a_cols])
    b_eq = np.concatenate([w_mu, w_nu[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - HiGHS is reliable on feasible instances
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun), res.x.reshape(n, m)


def _optimal_cost(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    cost_matrix: np.ndarray,
    want_plan: bool,
) -> tuple[float, np.ndarray | None]:
    equal_uniform = mu.n_atoms == nu.n_atoms and mu.is_uniform() and nu.is_uniform()
    if equal_uniform:
        if mu.n_atoms > ASSIGNMENT_ATOM_CAP:
            raise SolverCapError(
                f"{mu.n_atoms} atoms exceed the exact assignment cap {ASSIGNMENT_ATOM_CAP}"
            )
        value, idx = _solve_assignment(cost_matrix)
        if not want_plan:
            return value, None
        plan = np.zeros_like(cost_matrix)
        plan[idx[0], idx[1]] = 1.0 / mu.n_atoms
        return value, plan
    if max(mu.n_atoms, nu.n_atoms) > LP_ATOM_CAP:
        raise SolverCapError(
            f"general-weight transport limited to {LP_ATOM_CAP} atoms per side, "
            f"got {mu.n_atoms} x {nu.n_atoms}"
        )
    value, plan = _solve_lp(cost_matrix, mu.weights, nu.weights)
    return value, plan if want_plan else None


def _require_same_dim(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def _quantile_wasserstein_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float) -> float:
    """Exact inf-cost for |x-y|^p in dimension one via quantile functions.

    The monotone (quantile) coupling is optimal for convex costs with any
    weights: integrate |F^-1(u) - G^-1(u)|^p over the merged piecewise-
    constant quantile segments.
    """
    ox = np.argsort(mu.points[:, 0], kind="stable")
    oy = np.argsort(nu.points[:, 0], kind="stable")
    xs, wx = mu.points[ox, 0], mu.weights[ox]
    ys, wy = nu.points[oy, 0], nu.weights[oy]
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    levels = np.union1d(cx, cy)
    levels = levels[levels <= 1.0 + 1e-15]
    prev = 0.0
    total = 0.0
    for level in levels:
        seg = level - prev
        if seg <= 0:
            continue
        i = min(np.searchsorted(cx, prev + seg / 2), len(xs) - 1)
        j = min(np.searchsorted(cy, prev + seg / 2), len(ys) - 1)
        total += seg * abs(xs[i] - ys[j]) ** p
        prev = level
    return float(total)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def wasserstein_p(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    p: float,
    return_plan: bool = False,
):
    """Exact p-Wasserstein distance, (inf-cost)^(1/max(p, 1)).

    Dimension one with p >= 1 uses the monotone quantile coupling (sorted
    pairing for equal-size uniform clouds), which is optimal for convex
    costs with any weights; other equal-size uniform instances use min-cost
    assignment; general weights use the dense LP.  For p < 1 the monotone
    coupling is *not* optimal (concave costs reward keeping overlapping
    mass in place), so those instances always go through the matrix
    solvers.
    """
    _require_same_dim(mu, nu)
    if p <= 0:
        raise ValueError(f"order p must be positive, got {p}")
    exponent = 1.0 / max(p, 1.0)
    if mu.dim == 1 and p >= 1.0 and not return_plan:
        if mu.n_atoms == nu.n_atoms and mu.is_uniform() and nu.is_uniform():
            xs = np.sort(mu.points[:, 0])
            ys = np.sort(nu.points[:, 0])
            total = float(np.mean(np.abs(xs - ys) ** p))
        else:
            total = _quantile_wasserstein_1d(mu, nu, p)
        return total ** exponent
    cost = CostFunction.euclidean_power(p).matrix(mu.points, nu.points)
    value, plan = _optimal_cost(mu, nu, cost, want_plan=return_plan)
    dist = value ** exponent
    if return_plan:
        return dist, TransportPlan(plan=plan, cost=value)
    return dist


def transport_cost(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    cost: CostFunction,
    return_plan: bool = False,
):
    """Exact optimal value of the discrete transport problem (no outer root)."""
    _require_same_dim(mu, nu)
    matrix = cost.matrix(mu.points, nu.points)
    if np.any(matrix < -_MARGINAL_TOL):
        raise ValueError(f"cost {cost.kind!r} produced negative entries")
    value, plan = _optimal_cost(mu, nu, matrix, want_plan=return_plan)
    if return_plan:
        return value, TransportPlan(plan=plan, cost=value)
    return value


def w_phi(mu: EmpiricalMeasure, nu: EmpiricalMeasure, phi) -> float:
    """Transport distance with pairwise cost phi(|x - y|).

    For increasing concave phi with phi(0) = 0, phi composed with the
    Euclidean distance is itself a metric, so Kantorovich-Rubinstein duality
    identifies the dual supremum over functions with phi-modulus at most one
    with this transport infimum; we compute the primal side.

    Accepts either a validated ModulusFunction or a plain callable; plain
    callables are audited for the concave-increasing requirement only
    (phi(r) = r is admissible here though not in the kernel-modulus class).
    """
    if not isinstance(phi, ModulusFunction):
        audit_concave_modulus(phi)
        phi = ModulusFunction(
            evaluator=lambda r, _f=phi: np.asarray(_f(np.asarray(r, dtype=float)), dtype=float),
            name=getattr(phi, "__name__", "callable"),
        )
    return transport_cost(mu, nu, CostFunction.modulus(phi))


def weighted_variation(
    p_hist: np.ndarray,
    q_hist: np.ndarray,
    k: float,
    bin_centers: np.ndarray,
) -> float:
    """Weighted variation distance between two binned densities.

    The exact dual optimum over test functions dominated by the weight on
    the discretised laws: sum_b |p_b - q_b| (1 + |center_b|^k) for k > 0.
    At k = 0 the distance is the plain variation norm (test functions
    bounded by one), sum_b |p_b - q_b| -- twice the usual total variation
    distance -- matching the convention under which the squared variation
    norm is controlled by twice the relative entropy.
    """
    p = np.asarray(p_hist, dtype=float)
    q = np.asarray(q_hist, dtype=float)
    centers = np.asarray(bin_centers, dtype=float)
    if k < 0:
        raise ValueError(f"weight exponent must be >= 0, got {k}")
    if p.shape != q.shape or p.shape[0] != centers.shape[0]:
        raise ValueError(
            f"binning mismatch: histograms {p.shape} vs {q.shape}, centers {centers.shape}"
        )
    for name, h in (("p", p), ("q", q)):
        if abs(h.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} histogram is not normalised (sum {h.sum():.6g})")
    if k == 0:
        weight = 1.0
    else:
        radii = np.abs(centers) if centers.ndim == 1 else np.linalg.norm(centers, axis=-1)
        weight = 1.0 + radii ** k
    return float(np.sum(np.abs(p - q) * weight))


def binned_densities(
    samples_p: np.ndarray,
    samples_q: np.ndarray,
    bins: int = 200,
    pad_std: float = 3.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Histogram two sample sets on a shared binning (dimension 1 or 2).

    The binning spans the pooled sample range extended by `pad_std` pooled
    standard deviations per axis.  Returns (p_hist, q_hist, centers) with the
    histograms normalised to probability mass and centers of shape (B,) in
    dimension one or (B, 2) for the flattened two-dimensional grid.
    """
    sp = np.asarray(samples_p, dtype=float)
    sq = np.asarray(samples_q, dtype=float)
    if sp.ndim == 1:
        sp = sp[:, None]
    if sq.ndim == 1:
        sq = sq[:, None]
    if sp.shape[1] != sq.shape[1]:
        raise ValueError("sample dimensions differ")
    d = sp.shape[1]
    if d not in (1, 2):
        raise ValueError(f"binned surrogate supports dimension 1 or 2, got {d}")
    pooled = np.vstack([sp, sq])
    lo = pooled.min(axis=0) - pad_std * pooled.std(axis=0)
    hi = pooled.max(axis=0) + pad_std * pooled.std(axis=0)
    edges = [np.linspace(lo[j], hi[j], bins + 1) for j in range(d)]
    hp, _ = np.histogramdd(sp, bins=edges)
    hq, _ = np.histogramdd(sq, bins=edges)
    hp = hp.ravel() / sp.shape[0]
    hq = hq.ravel() / sq.shape[0]
    mids = [(e[:-1] + e[1:]) / 2.0 for e in edges]
    if d == 1:
        centers = mids[0]
    else:
        grid = np.meshgrid(*mids, indexing="ij")
        centers = np.stack([g.ravel() for g in grid], axis=-1)
    return hp, hq, centers


def product_transport(
    mu_list: Sequence[EmpiricalMeasure],
    nu_list: Sequence[EmpiricalMeasure],
    cost_list: Sequence[CostFunction],
) -> float:
    """Transport cost between product measures under a sum-of-marginals cost.

    For costs of the form sum_i Psi_i(x_i, y_i) the optimal product coupling
    splits across marginals, so the joint optimum equals the sum of the
    marginal optima; `joint_product_transport` provides the direct joint
    computation used to verify the identity on small instances.
    """
    if not len(mu_list) == len(nu_list) == len(cost_list):
        raise ValueError(
            f"marginal lists must share a length, got "
            f"{len(mu_list)}/{len(nu_list)}/{len(cost_list)}"
        )
    if len(mu_list) == 0:
        raise ValueError("need at least one marginal")
    return float(
        sum(transport_cost(mu, nu, c) for mu, nu, c in zip(mu_list, nu_list, cost_list))
    )


def joint_product_transport(
    mu_list: Sequence[EmpiricalMeasure],
    nu_list: Sequence[EmpiricalMeasure],
    cost_list: Sequence[CostFunction],
) -> float:
    """Direct transport optimum between the product measures.

    Builds the full product clouds (atom tuples, multiplied weights) and the
    summed cost matrix, then solves the joint problem exactly.  Exponential
    in the number of marginals; intended for verification instances only.
    """
    if not len(mu_list) == len(nu_list) == len(cost_list):
        raise ValueError("marginal lists must share a length")
    mu_sizes = [m.n_atoms for m in mu_list]
    nu_sizes = [m.n_atoms for m in nu_list]
    n_joint = int(np.prod(mu_sizes))
    m_joint = int(np.prod(nu_sizes))
    if max(n_joint, m_joint) > LP_ATOM_CAP:
        raise SolverCapError(
            f"joint product instance has {n_joint} x {m_joint} atoms, "
            f"beyond the LP cap {LP_ATOM_CAP}"
        )
    mu_idx = list(itertools.product(*[range(s) for s in mu_sizes]))
    nu_idx = list(itertools.product(*[range(s) for s in nu_sizes]))
    w_mu = np.array([np.prod([mu_list[i].weights[ix[i]] for i in range(len(mu_list))]) for ix in mu_idx])
    w_nu = np.array([np.prod([nu_list[i].weights[ix[i]] for i in range(len(nu_list))]) for ix in nu_idx])
    cost = np.zeros((n_joint, m_joint))
    for a, ia in enumerate(mu_idx):
        for b, ib in enumerate(nu_idx):
            cost[a, b] = sum(
                cost_list[i].evaluator(mu_list[i].points[ia[i]], nu_list[i].points[ib[i]])
                for i in range(len(mu_list))
            )
    value, _ = _solve_lp(cost, w_mu, w_nu)
    return value
