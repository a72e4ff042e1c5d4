"""Central finite-difference gradient checks.

The numerical side perturbs raw float64 arrays and re-runs the forward
computation; it never touches the recorded backward functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .pooling import mil_pool, pool_lse_lba, PoolingSpec, PoolKind

STEP = 1e-4
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Gradient of the scalar ``f()`` w.r.t. ``arr``, which is perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def numerical_gradient_smooth(f: Callable[[], float], arr: np.ndarray,
                              step: float = STEP) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`numerical_gradient`, but flags coordinates whose +-step
    perturbation flips any relu activation (the difference quotient is then
    not an estimate of the derivative).  Returns ``(grad, crossed)``."""

    def run():
        with T.track_relu_masks() as masks:
            value = f()
        return value, masks

    _, base = run()
    grad = np.zeros_like(arr)
    crossed = np.zeros(arr.shape, dtype=bool)
    flat, g, c = arr.reshape(-1), grad.reshape(-1), crossed.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp, mp = run()
        flat[i] = old - step
        fm, mm = run()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * step)
        c[i] = mp != base or mm != base
    return grad, crossed


def check(build: Callable[[Sequence[T.Tensor]], T.Tensor], inputs: Sequence[T.Tensor],
          rng: np.random.Generator, step: float = STEP) -> float:
    """Worst relative error over ``inputs`` for the op composed in ``build``.

    Non-scalar outputs are projected onto a fixed random direction so the
    check covers every output entry.
    """
    out = build(inputs)
    weights = rng.standard_normal(out.shape) if out.data.size > 1 else None

    def scalar(o: T.Tensor) -> T.Tensor:
        return o if weights is None else T.weighted_sum(o, weights)

    for t in inputs:
        t.grad = None
    T.backward(scalar(out))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f() -> float:
        return float(scalar(build(inputs)).data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        worst = max(worst, relative_error(a, numerical_gradient(f, t.data, step)))
    return worst


MAX_SKIPPED_FRACTION = 0.05


@dataclass
class CheckResult:
    op: str
    worst: float
    seeds: int
    skipped: int = 0  # coordinates excluded because the perturbation crossed a relu kink
    total: int = 0

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE and self.skipped <= MAX_SKIPPED_FRACTION * max(self.total, 1)


def _param(rng, shape, scale=1.0, away_from_zero=0.0):
    data = rng.standard_normal(shape) * scale
    if away_from_zero:
        data = np.where(np.abs(data) < away_from_zero, np.where(data < 0, -4.0, 4.0) * away_from_zero, data)
    return T.Tensor(data, requires_grad=True)


def _op_cases():
    """Op name -> list of (input factory, builder).  Names match the recorded op names."""

    def conv3(rng):
        return [_param(rng, (2, 3, 5, 5)), _param(rng, (4, 3, 3, 3)), _param(rng, (4,))]

    def conv1(rng):
        return [_param(rng, (2, 3, 6, 6)), _param(rng, (5, 3, 1, 1))]

    def unary(rng):
        return [_param(rng, (2, 3, 4, 4), away_from_zero=1e-3)]

    def pair(rng):
        return [_param(rng, (2, 3, 4, 4)), _param(rng, (2, 3, 4, 4))]

    def triple(rng):
        return [_param(rng, (2, 1, 3, 3)), _param(rng, (2, 2, 3, 3)), _param(rng, (2, 3, 3, 3))]

    def saliency(n_beta):
        def make(rng):
            return [T.Tensor(rng.uniform(0.05, 0.95, (2, 3, 4, 4)), requires_grad=True),
                    _param(rng, (n_beta,), scale=0.5)]
        return make

    def saliency_only(rng):
        return [T.Tensor(rng.uniform(0.05, 0.95, (2, 3, 4, 4)), requires_grad=True)]

    def probs(rng):
        return [T.Tensor(rng.uniform(0.05, 0.95, (4, 3)), requires_grad=True)]

    labels = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 0], [0, 1, 0]], dtype=float)
    lba = PoolingSpec(PoolKind.LSE_LBA, r0=5.0)
    fixed = [PoolingSpec(PoolKind.LSE, r=7.0), PoolingSpec(PoolKind.GM, r=3.0),
             PoolingSpec(PoolKind.NOISY_OR), PoolingSpec(PoolKind.AVERAGE), PoolingSpec(PoolKind.MAX)]
    return {
        "conv2d": [
            (conv3, lambda xs: T.conv2d(xs[0], xs[1], stride=1, bias=xs[2])),
            (conv3, lambda xs: T.conv2d(xs[0], xs[1], stride=2, bias=xs[2])),
            (conv1, lambda xs: T.conv2d(xs[0], xs[1], stride=2)),
        ],
        "relu": [(unary, lambda xs: T.relu(xs[0]))],
        "sigmoid": [(unary, lambda xs: T.sigmoid(xs[0]))],
        "add": [(pair, lambda xs: T.add(xs[0], xs[1]))],
        "concat_channels": [(triple, lambda xs: T.concat_channels(xs))],
        "nearest_upsample2x": [(unary, lambda xs: T.nearest_upsample2x(xs[0]))],
        "avg_pool2x2": [(unary, lambda xs: T.avg_pool2x2(xs[0]))],
        "scale": [(unary, lambda xs: T.scale(xs[0], -1.7))],
        "sum": [(unary, lambda xs: T.sum_all(xs[0]))],
        "mean": [(unary, lambda xs: T.mean_all(xs[0]))],
        "weighted_sum": [(unary, lambda xs: T.weighted_sum(xs[0], np.linspace(-1, 1, 96).reshape(2, 3, 4, 4)))],
        "mil_pool": [
            (saliency(1), lambda xs: mil_pool(xs[0], lba, xs[1])),
            (saliency(3), lambda xs: mil_pool(xs[0], lba, xs[1])),
        ] + [(saliency_only, lambda xs, spec=spec: mil_pool(xs[0], spec)) for spec in fixed],
        "binary_cross_entropy": [(probs, lambda xs: T.binary_cross_entropy(xs[0], labels))],
    }


OPS = list(_op_cases())


def check_ops(seeds: int = 5) -> list[CheckResult]:
    results = []
    for name, variants in _op_cases().items():
        worst = 0.0
        for seed in range(seeds):
            for make, build in variants:
                rng = np.random.default_rng(seed)
                worst = max(worst, check(build, make(rng), rng))
        results.append(CheckResult(name, worst, seeds))
    return results


def check_lse_lba_scalar(seeds: int = 5) -> CheckResult:
    """dp/dS and dp/dbeta of a single 2-D map against finite differences."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(100 + seed)
        S = rng.uniform(0.05, 0.95, (6, 6))
        r0, beta = float(rng.choice([0.0, 5.0, 10.0])), float(rng.normal(0, 1))
        res = pool_lse_lba(S, r0, beta)
        num_S = numerical_gradient(lambda: pool_lse_lba(S, r0, beta).p, S)
        b = np.array([beta])
        num_b = numerical_gradient(lambda: pool_lse_lba(S, r0, b[0]).p, b)
        worst = max(worst, relative_error(res.dP_dS, num_S),
                    relative_error(np.array([res.dP_dbeta]), num_b))
    return CheckResult("pool_lse_lba", worst, seeds)


def check_model(seeds: int = 5) -> CheckResult:
    """End-to-end check of the tiny model: every parameter, including beta."""
    from .model import Model, ModelConfig, mil_loss

    worst = 0.0
    skipped = total = 0
    for seed in range(seeds):
        cfg = ModelConfig.tiny(seed=seed)
        model = Model(cfg)
        rng = np.random.default_rng(1000 + seed)
        for p in model.params.values():
            p.data += rng.normal(0, 0.05, p.shape)
        x = rng.uniform(0, 1, (2, 1, cfg.input_size, cfg.input_size))
        y = rng.integers(0, 2, (2, cfg.num_classes)).astype(float)

        def loss_value() -> float:
            return float(mil_loss(model.forward(x), y).data)

        model.zero_grad()
        T.backward(mil_loss(model.forward(x), y))
        for name, p in model.params.items():
            analytic = p.grad.copy()
            numeric, crossed = numerical_gradient_smooth(loss_value, p.data)
            keep = ~crossed
            skipped += int(crossed.sum())
            total += crossed.size
            worst = max(worst, relative_error(analytic[keep], numeric[keep]))
    return CheckResult("model_end_to_end", worst, seeds, skipped, total)


def run_all(seeds: int = 5) -> list[CheckResult]:
    return check_ops(seeds) + [check_lse_lba_scalar(seeds), check_model(seeds)]
