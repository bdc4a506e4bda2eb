"""Built-in numerical self checks: finite-difference gradients for every
differentiable operation and entropic OT against exact assignment."""

from __future__ import annotations

from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from .gradcheck import check_gradients
from .losses import (
    covariance_loss,
    cross_entropy_loss,
    exact_ot_oracle,
    reconstruction_loss,
    sinkhorn,
    sinkhorn_wasserstein,
    squared_distances,
)
from .networks import CondenserHead, EncoderDecoder, InstanceNorm
from .tensor import Tensor, avg_pool2d, conv2d, conv_transpose2d, matmul, softmax

GRAD_TOLERANCE = 1e-4
OT_TOLERANCE = 0.02
MARGINAL_TOLERANCE = 1e-6


def _u(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape))


def gradient_cases(rng) -> Iterator[Tuple[str, Callable[[], Tensor], List[Tensor], Optional[Callable[[], Tensor]]]]:
    """Yield (name, scalar function, inputs, finite-difference reference or None) per operation."""
    a, b = _u(rng, 3, 4), _u(rng, 4, 2)
    yield "matmul", lambda: (matmul(a, b) ** 2).sum(), [a, b], None

    x, w, bias = _u(rng, 2, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    yield "conv2d", lambda: (conv2d(x, w, bias, stride=2, padding=1) ** 2).sum(), [x, w, bias], None

    xt, wt = _u(rng, 2, 3, 3, 3), _u(rng, 3, 2, 4, 4)
    yield "conv_transpose2d", lambda: (conv_transpose2d(xt, wt, None, 2, 1) ** 2).sum(), [xt, wt], None

    xp = _u(rng, 1, 2, 5, 4)
    yield "avg_pool2d", lambda: (avg_pool2d(xp, 2) ** 2).sum(), [xp], None

    norm = InstanceNorm(2)
    norm.weight.data, norm.bias.data = rng.uniform(0.5, 2, 2), rng.uniform(-1, 1, 2)
    xn, wn = _u(rng, 2, 2, 3, 3), Tensor(rng.uniform(size=(2, 2, 3, 3)))
    yield "instance_norm", lambda: (norm(xn) * wn).sum(), [xn, norm.weight, norm.bias], None

    logits, weights = _u(rng, 3, 5), Tensor(rng.uniform(size=(3, 5)))
    yield "softmax", lambda: (softmax(logits, axis=1) * weights).sum(), [logits], None

    head = CondenserHead(3, 4, 2, rng)
    head.w_q.data, head.w_k.data = rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3))
    ya = _u(rng, 4, 3)
    yield "self_attention", lambda: (head.self_attention(ya) ** 2).sum(), [ya, head.w_q, head.w_k, head.w_v], None
    yield "condense_map", lambda: (head.condense_map(ya) ** 2).sum(), [ya, head.mix], None

    ae = EncoderDecoder((1, 8, 8), latent_dim=3, preset="shallow", rng=rng)
    img = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8)))
    yield "encode", lambda: (ae.encode(img) ** 2).sum(), [img], None
    lat = _u(rng, 2, 3)
    yield "decode", lambda: (ae.decode(lat) ** 2).sum(), [lat], None

    target, pred = Tensor(rng.uniform(size=(2, 3))), _u(rng, 2, 3)
    yield "reconstruction_loss", lambda: reconstruction_loss(target, pred), [pred], None
    labels = rng.integers(0, 5, size=3)
    yield "cross_entropy_loss", lambda: cross_entropy_loss(logits, labels), [logits], None
    cov_in = _u(rng, 5, 3)
    yield "covariance_loss", lambda: covariance_loss(cov_in)[0], [cov_in], None

    # envelope gradient: finite differences of <plan, C(y, y')> with the converged plan held fixed
    y1, y2 = _u(rng, 4, 2), _u(rng, 3, 2)
    frozen = Tensor(sinkhorn_wasserstein(y1, y2)[1].plan)

    def frozen_objective():
        diff = y1.reshape(4, 1, 2) - y2.reshape(1, 3, 2)
        return (frozen * (diff * diff).sum(axis=2)).sum()

    yield "sinkhorn_wasserstein", lambda: sinkhorn_wasserstein(y1, y2)[0], [y1, y2], frozen_objective


def run_gradient_suite(instances: int = 20, seed: int = 0) -> dict:
    """Worst relative error per operation over ``instances`` random draws."""
    worst = {}
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        for name, fn, inputs, reference in gradient_cases(rng):
            worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs, reference=reference))
    return worst


def ot_instance(rng):
    n = int(rng.integers(2, 7))
    d = int(rng.choice([1, 2, 8]))
    return rng.normal(size=(n, d)), rng.normal(size=(n, d))


def run_ot_suite(instances: int = 50, seed: int = 0, relative_epsilon: float = 1e-3) -> List[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(instances):
        y, y_prime = ot_instance(rng)
        cost = squared_distances(y, y_prime)
        plan = sinkhorn(cost, relative_epsilon * cost.mean(), max_iters=100_000, tolerance=1e-9, anneal=True)
        exact = exact_ot_oracle(y, y_prime)
        rows.append({
            "n": len(y),
            "d": y.shape[1],
            "sinkhorn": plan.objective,
            "exact": exact,
            "relative_error": abs(plan.objective - exact) / exact,
            "marginal_error": plan.marginal_error,
        })
    return rows


def main(print_fn=print) -> bool:
    ok = True
    for name, err in run_gradient_suite().items():
        passed = err < GRAD_TOLERANCE
        ok &= passed
        print_fn(f"[{'PASS' if passed else 'FAIL'}] gradient {name}: max rel. error {err:.2e}")
    rows = run_ot_suite()
    worst_rel = max(r["relative_error"] for r in rows)
    worst_marg = max(r["marginal_error"] for r in rows)
    passed = worst_rel < OT_TOLERANCE and worst_marg < MARGINAL_TOLERANCE
    ok &= passed
    print_fn(
        f"[{'PASS' if passed else 'FAIL'}] sinkhorn vs exact OT on {len(rows)} instances: "
        f"max rel. error {worst_rel:.2e}, max marginal error {worst_marg:.1e}"
    )
    return ok
