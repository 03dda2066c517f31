"""Counting losses built around entropy-regularized optimal transport.

Ground truth is a dot map ``z`` rasterized onto the prediction grid plus the
raw point coordinates; the prediction ``zhat`` is the network's density map.
The total objective combines an absolute count error, a transport term that
moves predicted mass toward the annotated points, and a variation term that
penalizes the pointwise gap, weighted 1 / 0.1 / 0.01 by default.
"""

import dataclasses
import warnings

import numpy as np

from fflab import tensor as T
from fflab.tensor import Tensor


class EmptyTargetError(ValueError):
    """Raised when a transport target has no points; callers skip the term."""


@dataclasses.dataclass
class LossWeights:
    lambda_ot: float = 0.1
    lambda_var: float = 0.01

    def __post_init__(self):
        if self.lambda_ot < 0 or self.lambda_var < 0:
            raise ValueError("loss weights must be non-negative")


@dataclasses.dataclass
class LossConfig:
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    epsilon: float = 10.0
    max_iters: int = 100
    tolerance: float = 1e-6
    stride: int = 8
    variation: str = "paper"  # paper | normalized
    detach_ot_normalization: bool = True
    guard: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.variation not in ("paper", "normalized"):
            raise ValueError(f"unknown variation kind {self.variation!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclasses.dataclass
class SinkhornProblem:
    """Normalized transport instance between grid cells and points.

    ``a`` holds source weights over m grid cells, ``b`` target weights over k
    points, and ``cost`` their m x k squared-distance matrix in grid units.
    """

    a: np.ndarray
    b: np.ndarray
    cost: np.ndarray
    epsilon: float = 10.0
    max_iters: int = 100
    tolerance: float = 1e-6

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.b.size == 0:
            raise EmptyTargetError("transport target has no points")
        if self.cost.shape != (self.a.size, self.b.size):
            raise ValueError(f"cost shape {self.cost.shape} does not match "
                             f"marginals ({self.a.size}, {self.b.size})")
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise ValueError("marginals must be non-negative")
        if abs(self.a.sum() - 1.0) > 1e-9 or abs(self.b.sum() - 1.0) > 1e-9:
            raise ValueError(f"marginals must sum to one, got {self.a.sum()!r} "
                             f"and {self.b.sum()!r}")
        if np.any(self.cost < 0):
            raise ValueError("cost matrix must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclasses.dataclass
class SinkhornResult:
    alpha: np.ndarray  # row (grid-side) entropic dual; -inf on zero-mass rows
    beta: np.ndarray  # column (point-side) dual, the beta* of the OT loss
    plan: np.ndarray  # (m, k) transport plan
    cost: np.ndarray  # the cost matrix the solve ran on
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool
    error_history: list | None = None

    @property
    def transport_cost(self):
        return float((self.plan * self.cost).sum())

    def grid_potential(self):
        """beta* mapped back onto the grid through the transport geometry.

        Eq-7-style losses pair a per-point dual with a per-cell density, so
        the point-side potential is pushed to cells as its soft c-transform:
        -epsilon * lse_j((beta_j - cost_ij) / epsilon).  On cells carrying
        mass this equals alpha - epsilon*log(a); unlike alpha it stays finite
        on empty cells, and as epsilon shrinks it approaches the unregularized
        row potential.
        """
        arg = (self.beta[None, :] - self.cost) / self.epsilon
        return -self.epsilon * _lse(arg, axis=1)


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(problem, track_errors=False):
    """Log-domain Sinkhorn iteration for entropy-regularized transport.

    Solves min <plan, cost> - epsilon * H(plan) over plans with the problem's
    marginals.  Alternates exact row and column potential updates until the L1
    row-marginal error drops below tolerance or the iteration budget runs out;
    column marginals are exact after every sweep by construction.
    Deterministic for fixed inputs.
    """
    p = problem
    with np.errstate(divide="ignore"):  # log of zero-mass atoms is -inf
        log_a = np.log(p.a)
        log_b = np.log(p.b)
    eps = p.epsilon
    f = np.zeros_like(p.a)
    g = np.zeros_like(p.b)
    err = np.inf
    history = [] if track_errors else None
    it = 0
    for it in range(1, p.max_iters + 1):
        f = eps * log_a - eps * _lse((g[None, :] - p.cost) / eps, axis=1)
        g = eps * log_b - eps * _lse((f[:, None] - p.cost) / eps, axis=0)
        plan = np.exp((f[:, None] + g[None, :] - p.cost) / eps)
        err = float(np.abs(plan.sum(axis=1) - p.a).sum())
        if history is not None:
            history.append(err)
        if err < p.tolerance:
            break
    return SinkhornResult(alpha=f, beta=g, plan=plan, cost=p.cost, epsilon=eps,
                          iterations=it, marginal_error=err,
                          converged=err < p.tolerance, error_history=history)


def cost_matrix(grid_h, grid_w, points, stride=8):
    """Squared distances between cell centers and points, in grid units.

    Cell (r, c) sits at (c + 0.5, r + 0.5); points come in image pixels and
    are divided by the stride.  Rows follow the row-major flattening of the
    grid, so row r*grid_w + c matches ``density.reshape(-1)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cx = np.arange(grid_w) + 0.5
    cy = np.arange(grid_h) + 0.5
    gx, gy = np.meshgrid(cx, cy)
    px = points[:, 0] / stride
    py = points[:, 1] / stride
    dx = gx.reshape(-1, 1) - px[None, :]
    dy = gy.reshape(-1, 1) - py[None, :]
    return dx * dx + dy * dy


def solve_transport(zhat_data, points, stride=8, epsilon=10.0, max_iters=100,
                    tolerance=1e-6, guard=1e-8):
    """Build and solve the transport problem between a density map and points.

    Returns None when the map carries no mass (nothing to transport).  Raises
    EmptyTargetError when there are no points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        raise EmptyTargetError("no points to transport to")
    zd = np.asarray(zhat_data, dtype=np.float64)
    if zd.ndim != 2:
        raise ValueError(f"expected a (grid_h, grid_w) density map, got {zd.shape}")
    if np.any(zd < 0):
        raise ValueError("density map must be non-negative")
    total = float(zd.sum())
    if total <= guard:
        return None
    gh, gw = zd.shape
    problem = SinkhornProblem(
        a=zd.reshape(-1) / total,
        b=np.full(points.shape[0], 1.0 / points.shape[0]),
        cost=cost_matrix(gh, gw, points, stride=stride),
        epsilon=epsilon, max_iters=max_iters, tolerance=tolerance)
    return sinkhorn(problem)


def count_loss(z, zhat):
    """Absolute difference of total masses: | ||z||_1 - ||zhat||_1 |."""
    z = np.asarray(z)
    if z.shape != tuple(zhat.shape):
        raise ValueError(f"grid shapes differ: {z.shape} vs {zhat.shape}")
    z_total = float(np.abs(z).sum())
    return T.absolute(T.add(T.l1_norm(zhat), -z_total))


def variation_loss(z, zhat, kind="paper", guard=1e-8):
    """Pointwise-gap penalty scaled by the true count.

    ``paper`` is the verbatim form ||z||_1 * ||z - zhat||_1.  ``normalized``
    compares the maps as distributions first: ||z||_1 * || z/||z||_1 -
    zhat/||zhat||_1 ||_1, guarded against empty maps.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != tuple(zhat.shape):
        raise ValueError(f"grid shapes differ: {z.shape} vs {zhat.shape}")
    zt = Tensor(z, dtype=zhat.dtype)
    z_total = float(np.abs(z).sum())
    if kind == "paper":
        return T.mul(T.l1_norm(T.add(zt, T.mul(zhat, -1.0))), z_total)
    if kind != "normalized":
        raise ValueError(f"unknown variation kind {kind!r}")
    zn = Tensor(z / max(z_total, guard), dtype=zhat.dtype)
    inv = T.reciprocal(T.add(T.l1_norm(zhat), guard))
    zhn = T.mul(zhat, inv)
    return T.mul(T.l1_norm(T.add(zn, T.mul(zhn, -1.0))), z_total)


def ot_loss(zhat, points, result, detach_normalization=True, guard=1e-8):
    """Transport term <beta*/||zhat||_1 - <beta*, zhat>/||zhat||_1^2, zhat>.

    ``result`` comes from ``solve_transport``/``sinkhorn`` on this map; the
    per-point dual beta* is mapped onto the grid first (see
    ``SinkhornResult.grid_potential``), because the inner products pair it
    with the grid-shaped density.

    By default the bracketed vector is a frozen constant, so the loss VALUE is
    zero up to rounding while its gradient is exactly that vector: the term
    steers mass along the transport geometry without differentiating the
    potentials.  With ``detach_normalization=False`` the 1/||zhat||_1 factors
    stay in the graph; the expression is then identically zero for
    non-negative maps, gradient included, which makes that flag useful only
    for verifying the cancellation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        raise EmptyTargetError("no points to transport to")
    if not result.converged:
        warnings.warn(
            f"sinkhorn stopped at marginal error {result.marginal_error:.3e} "
            f"after {result.iterations} iterations; using its duals anyway",
            RuntimeWarning, stacklevel=2)
    zd = zhat.data.astype(np.float64).reshape(-1)
    if result.cost.shape != (zd.size, points.shape[0]):
        raise ValueError(f"result solves a {result.cost.shape} problem, got "
                         f"{zd.size} cells and {points.shape[0]} points")
    beta_star = result.grid_potential()
    flat = T.reshape(zhat, (-1,))
    if detach_normalization:
        denom = max(float(np.abs(zd).sum()), guard)
        vec = beta_star / denom - float(beta_star @ zd) / (denom * denom)
        return T.dot(Tensor(vec, dtype=zhat.dtype), flat)
    bt = Tensor(beta_star, dtype=zhat.dtype)
    inv = T.reciprocal(T.add(T.l1_norm(flat), guard))
    inner = T.dot(bt, flat)
    return T.add(T.mul(inner, inv),
                 T.mul(T.mul(T.mul(inner, T.tsum(flat)), T.mul(inv, inv)), -1.0))


def total_loss(z, zhat, points, config=None):
    """Weighted sum of the three terms for one image.

    Returns (loss tensor, parts) where parts holds the weighted contributions
    as floats under keys count/ot/variation/total.  Images without points, and
    maps without mass, skip the transport term and contribute count and
    variation only.
    """
    config = config or LossConfig()
    w = config.weights
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = count_loss(z, zhat)
    parts = {"count": out.item()}
    parts["ot"] = 0.0
    if points.shape[0] > 0 and w.lambda_ot > 0:
        result = solve_transport(zhat.data, points, stride=config.stride,
                                 epsilon=config.epsilon, max_iters=config.max_iters,
                                 tolerance=config.tolerance, guard=config.guard)
        if result is not None:
            ot = T.mul(ot_loss(zhat, points, result,
                               detach_normalization=config.detach_ot_normalization,
                               guard=config.guard), w.lambda_ot)
            parts["ot"] = ot.item()
            out = T.add(out, ot)
    if w.lambda_var > 0:
        var = T.mul(variation_loss(z, zhat, kind=config.variation, guard=config.guard),
                    w.lambda_var)
        parts["variation"] = var.item()
        out = T.add(out, var)
    else:
        parts["variation"] = 0.0
    parts["total"] = out.item()
    return out, parts
