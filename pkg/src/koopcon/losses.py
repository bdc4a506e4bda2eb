"""Loss terms for condensation and the entropic optimal-transport solver."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, log_softmax, matmul


@dataclass(frozen=True)
class LossWeights:
    alpha0: float = 1.0
    alpha1: float = 0.1
    alpha2: float = 1.0
    alpha3: float = 0.01
    # absolute entropic regularization; when None it is relative_epsilon * mean(cost)
    sinkhorn_epsilon: Optional[float] = None
    sinkhorn_relative_epsilon: float = 0.05
    sinkhorn_max_iters: int = 200
    sinkhorn_tolerance: float = 1e-6

    def __post_init__(self):
        for key in ("alpha0", "alpha1", "alpha2", "alpha3"):
            value = getattr(self, key)
            if not value >= 0:
                raise ConfigError(f"{key} must be >= 0, got {value}", key=key)
        if self.sinkhorn_epsilon is not None and not self.sinkhorn_epsilon > 0:
            raise ConfigError(f"sinkhorn_epsilon must be > 0, got {self.sinkhorn_epsilon}", key="sinkhorn_epsilon")
        if not self.sinkhorn_relative_epsilon > 0:
            raise ConfigError("sinkhorn_relative_epsilon must be > 0", key="sinkhorn_relative_epsilon")
        if self.sinkhorn_max_iters < 1:
            raise ConfigError("sinkhorn_max_iters must be >= 1", key="sinkhorn_max_iters")
        if not self.sinkhorn_tolerance > 0:
            raise ConfigError("sinkhorn_tolerance must be > 0", key="sinkhorn_tolerance")

    @property
    def alphas(self) -> Tuple[float, float, float, float]:
        return (self.alpha0, self.alpha1, self.alpha2, self.alpha3)


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: np.ndarray
    objective: float
    epsilon: float
    iterations: int
    # max marginal deviation of the returned plan
    marginal_error: float
    # row-marginal deviation of the Sinkhorn iterate before rounding
    residual: float = 0.0


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over every element."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction_loss: shapes {x.shape} and {x_hat.shape} differ")
    diff = x_hat - x
    return (diff * diff).mean()


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: {n} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ContractError(f"cross_entropy_loss: labels must lie in [0, {m})")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    top = z.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(z - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_iterate(cost, epsilon, f, g, max_iters, tolerance):
    n, m = cost.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    error = np.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        f = -epsilon * _logsumexp((g[None, :] - cost) / epsilon + log_b[None, :], axis=1)
        g = -epsilon * _logsumexp((f[:, None] - cost) / epsilon + log_a[:, None], axis=0)
        plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon + log_a[:, None] + log_b[None, :])
        # columns are exact after the g update
        error = np.abs(plan.sum(axis=1) - 1.0 / n).max()
        if error < tolerance:
            break
    return f, g, plan, iters, float(error)


def round_to_marginals(plan: np.ndarray) -> np.ndarray:
    """Project a positive plan onto the uniform transport polytope.

    Rows and then columns are scaled down to their target mass and the
    leftover mass is added back as a rank-one term, so both marginals are
    exact up to rounding while the plan moves by at most the marginal error.
    """
    n, m = plan.shape
    a, b = np.full(n, 1.0 / n), np.full(m, 1.0 / m)
    plan = plan * np.minimum(1.0, a / plan.sum(axis=1))[:, None]
    plan = plan * np.minimum(1.0, b / plan.sum(axis=0))[None, :]
    err_a = np.maximum(a - plan.sum(axis=1), 0.0)
    err_b = np.maximum(b - plan.sum(axis=0), 0.0)
    mass = err_a.sum()
    if mass > 0:
        plan = plan + np.outer(err_a, err_b) / mass
    return plan


def _marginal_error(plan: np.ndarray) -> float:
    n, m = plan.shape
    return float(max(np.abs(plan.sum(axis=1) - 1.0 / n).max(), np.abs(plan.sum(axis=0) - 1.0 / m).max()))


def sinkhorn(
    cost: np.ndarray,
    epsilon: float,
    max_iters: int = 200,
    tolerance: float = 1e-6,
    anneal: bool = True,
) -> TransportPlan:
    """Entropic OT between uniform marginals via log-domain Sinkhorn updates.

    Iterates dual potentials until the row marginal of the plan is within
    ``tolerance`` of 1/n (columns are exact after each update) or
    ``max_iters`` is reached, then rounds the iterate onto the set of plans
    with exact uniform marginals. The returned objective is the transport
    cost <plan, cost> without the entropy term.

    With ``anneal`` the potentials are first warmed up on a geometric
    sequence of larger regularizations (halving from max(cost)), which
    reaches the same fixed point far faster when epsilon is small.
    ``max_iters`` bounds each stage.
    """
    if not epsilon > 0:
        raise ConfigError(f"Sinkhorn epsilon must be > 0, got {epsilon}", key="sinkhorn_epsilon")
    n, m = cost.shape
    f, g = np.zeros(n), np.zeros(m)
    iters = 0
    if anneal:
        stage = float(cost.max())
        while stage > 2.0 * epsilon:
            f, g, _, k, _ = _sinkhorn_iterate(cost, stage, f, g, max_iters, 1e-3 / n)
            iters += k
            stage *= 0.5
    f, g, plan, k, residual = _sinkhorn_iterate(cost, epsilon, f, g, max_iters, tolerance)
    plan = round_to_marginals(plan)
    objective = float((plan * cost).sum())
    return TransportPlan(plan, cost, objective, epsilon, iters + k, _marginal_error(plan), residual)


def resolve_epsilon(cost: np.ndarray, weights: LossWeights) -> float:
    if weights.sinkhorn_epsilon is not None:
        return weights.sinkhorn_epsilon
    return weights.sinkhorn_relative_epsilon * float(cost.mean())


def sinkhorn_wasserstein(y: Tensor, y_prime: Tensor, weights: LossWeights = LossWeights()) -> Tuple[Tensor, TransportPlan]:
    """Entropic Wasserstein cost between two latent point clouds.

    Squared Euclidean ground cost, uniform weights. The gradient treats the
    converged plan as a constant (envelope gradient), so only the cost matrix
    is differentiated.
    """
    y, y_prime = as_tensor(y), as_tensor(y_prime)
    if y.ndim != 2 or y_prime.ndim != 2 or y.shape[1] != y_prime.shape[1]:
        raise DimensionError(f"sinkhorn_wasserstein: latent shapes {y.shape} and {y_prime.shape} disagree")
    if not (np.isfinite(y.data).all() and np.isfinite(y_prime.data).all()):
        raise NumericError("sinkhorn_wasserstein: non-finite latent values")

    cost = squared_distances(y.data, y_prime.data)
    n, m = cost.shape
    if n == 1 or m == 1 or not cost.any():
        # a single point on either side (or coincident clouds) admits only the product coupling
        product = np.full((n, m), 1.0 / (n * m))
        plan = TransportPlan(product, cost, float((product * cost).sum()), 0.0, 0, 0.0)
    else:
        plan = sinkhorn(cost, resolve_epsilon(cost, weights), weights.sinkhorn_max_iters, weights.sinkhorn_tolerance)

    pi = plan.plan
    # <pi, C> = sum_i r_i |y_i|^2 + sum_j c_j |y'_j|^2 - 2 tr(pi^T y y'^T)
    row_mass = Tensor(pi.sum(axis=1)[:, None])
    col_mass = Tensor(pi.sum(axis=0)[:, None])
    cross = (matmul(Tensor(pi.T), y) * y_prime).sum()
    value = (row_mass * y * y).sum() + (col_mass * y_prime * y_prime).sum() - 2.0 * cross
    return value, plan


def exact_ot_oracle(y: np.ndarray, y_prime: np.ndarray) -> float:
    """Exact OT cost between equal-size uniform clouds via optimal assignment."""
    y = np.asarray(y, dtype=np.float64)
    y_prime = np.asarray(y_prime, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y_prime.ndim == 1:
        y_prime = y_prime[:, None]
    n = len(y)
    if len(y_prime) != n or n > 10 or n < 1:
        raise ContractError(f"exact_ot_oracle needs 1 <= n == n' <= 10, got {n} and {len(y_prime)}")
    cost = squared_distances(y, y_prime)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)


def covariance_loss(y_prime: Tensor) -> Tuple[Tensor, bool]:
    """Squared Frobenius distance of the latent covariance from the identity.

    Returns ``(loss, skipped)``; fewer than two rows have no spread, so the
    term is zero and ``skipped`` is True.
    """
    y_prime = as_tensor(y_prime)
    n, d = y_prime.shape
    if n < 2:
        return Tensor(0.0), True
    centred = y_prime - y_prime.mean(axis=0, keepdims=True)
    cov = matmul(centred.T, centred) * (1.0 / n)
    diff = cov - np.eye(d)
    return (diff * diff).sum(), False


def total_loss(l_re, l_ce, l_w, l_cov, weights: LossWeights) -> Tensor:
    """Weighted sum of the four terms; refuses non-finite inputs."""
    terms = {"l_re": l_re, "l_ce": l_ce, "l_w": l_w, "l_cov": l_cov}
    for name, term in terms.items():
        value = term.data if isinstance(term, Tensor) else np.asarray(term, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NumericError(f"loss term {name} is not finite ({float(value)})")
    out = Tensor(0.0)
    for alpha, term in zip(weights.alphas, terms.values()):
        out = out + as_tensor(term) * alpha
    return out
