"""Multi-instance pooling functions.

Every pooling function reduces the last two axes of a saliency array
``S[..., h, w]`` (entries in [0, 1]) to one probability per leading index, and
returns the analytic gradient alongside the value.  The LSE family is computed
with a max shift so it never overflows, whatever the sharpness.

``GM`` and the product form of ``Noisy-OR`` are deliberately evaluated
naively; on large maps of small scores they underflow/saturate, which is the
failure mode LSE-LBA avoids.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T

BETA_MAX = 10.0


class PoolKind(str, enum.Enum):
    MAX = "max"
    AVERAGE = "average"
    GM = "gm"
    NOISY_OR = "noisy_or"
    LSE = "lse"
    LSE_LBA = "lse_lba"


@dataclass(frozen=True)
class PoolingSpec:
    kind: PoolKind = PoolKind.LSE_LBA
    r: float = 1.0
    r0: float = 5.0
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind(self.kind))
        if self.kind in (PoolKind.GM, PoolKind.LSE) and not self.r > 0:
            raise ValueError(f"{self.kind.value} pooling needs r > 0, got {self.r}")
        if self.r0 < 0:
            raise ValueError(f"r0 must be >= 0, got {self.r0}")

    @property
    def learnable(self) -> bool:
        return self.kind is PoolKind.LSE_LBA

    @property
    def r_eff(self) -> float:
        if self.kind is PoolKind.LSE_LBA:
            return effective_sharpness(self.r0, self.beta)
        return self.r


@dataclass
class PoolResult:
    p: np.ndarray
    dP_dS: np.ndarray
    dP_dbeta: np.ndarray | None = None
    log_complement: np.ndarray | None = None  # log(1 - p), Noisy-OR only

    def __post_init__(self):
        if self.p.ndim == 0:
            self.p = float(self.p)
            if self.dP_dbeta is not None:
                self.dP_dbeta = float(self.dP_dbeta)
            if self.log_complement is not None:
                self.log_complement = float(self.log_complement)


class NonFiniteInput(ValueError, FloatingPointError):
    """Pooling received NaN or inf (typically a diverged network)."""


def effective_sharpness(r0, beta):
    return r0 + np.exp(beta)


def _as_maps(S, check_range: bool = True) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] == 0 or S.shape[-2] == 0:
        raise ValueError(f"pooling needs a non-empty (..., h, w) map, got shape {S.shape}")
    if check_range:
        if not np.all(np.isfinite(S)):
            raise NonFiniteInput("pooling input contains non-finite values")
        if S.min() < 0.0 or S.max() > 1.0:
            raise ValueError(f"pooling input must lie in [0, 1]; got range "
                             f"[{S.min():.6g}, {S.max():.6g}]")
    return S


def _lse_core(S: np.ndarray, r: np.ndarray):
    """Shifted log-sum-exp mean.  ``r`` broadcasts against ``S.shape[:-2]``."""
    r4 = r[..., None, None]
    M = S.max(axis=(-2, -1), keepdims=True)
    e = np.exp(r4 * (S - M))
    total = e.sum(axis=(-2, -1), keepdims=True)
    size = S.shape[-1] * S.shape[-2]
    p = M[..., 0, 0] + np.log(total[..., 0, 0] / size) / r
    weights = e / total
    return p, weights


def pool_lse(S, r: float) -> PoolResult:
    """Log-sum-exp pooling ``(1/r) log(mean(exp(r S)))`` with fixed sharpness."""
    if not r > 0:
        raise ValueError(f"LSE pooling needs r > 0, got {r}")
    S = _as_maps(S)
    r_arr = np.broadcast_to(np.asarray(r, dtype=np.float64), S.shape[:-2])
    p, w = _lse_core(S, r_arr)
    return PoolResult(p, w)


def pool_lse_lba(S, r0: float, beta) -> PoolResult:
    """LSE pooling with lower-bounded adaptive sharpness ``r = r0 + exp(beta)``.

    ``beta`` is a scalar or an array broadcastable to ``S.shape[:-2]``.
    ``dP_dbeta`` has the shape of ``p``.
    """
    if r0 < 0:
        raise ValueError(f"r0 must be >= 0, got {r0}")
    S = _as_maps(S)
    eb = np.broadcast_to(np.exp(np.asarray(beta, dtype=np.float64)), S.shape[:-2])
    r = r0 + eb
    p, w = _lse_core(S, r)
    # dp/dr = (sum(w * S) - p) / r
    ws = (w * S).sum(axis=(-2, -1))
    dp_dbeta = eb * (ws - p) / r
    return PoolResult(p, w, dp_dbeta)


def pool_gm(S, r: float) -> PoolResult:
    """Generalised mean ``(mean(S ** r)) ** (1 / r)``, evaluated naively.

    Large maps of small scores underflow to ``p = 0`` here (a warning is not
    raised; callers compare against LSE to see it).  ``0 ** r`` is taken as 0.
    """
    if not r > 0:
        raise ValueError(f"GM pooling needs r > 0, got {r}")
    S = _as_maps(S)
    size = S.shape[-1] * S.shape[-2]
    with np.errstate(under="ignore", divide="ignore"):
        powered = np.where(S > 0, S ** r, 0.0)
        m = powered.sum(axis=(-2, -1)) / size
        p = m ** (1.0 / r)
        pk = p[..., None, None]
        safe = (S > 0) & (pk > 0)
        grad = np.where(safe, (np.where(safe, S, 1.0) / np.where(pk > 0, pk, 1.0)) ** (r - 1.0) / size, 0.0)
    return PoolResult(p, grad)


def pool_nor(S) -> PoolResult:
    """Noisy-OR ``1 - prod(1 - S)`` in product form.

    ``log_complement`` carries ``log(1 - p)`` accumulated in log space
    (``sum(log1p(-S))``); it stays accurate long after the product form has
    saturated ``p`` to 1.  Use :func:`pool_nor_log` for the log-space probability.
    """
    S = _as_maps(S)
    flat = (1.0 - S).reshape(*S.shape[:-2], -1)
    p = 1.0 - np.prod(flat, axis=-1)
    # d p / d S_j = prod_{i != j} (1 - S_i), via exclusive prefix/suffix products
    ones = np.ones(flat.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, flat[..., :-1]], axis=-1), axis=-1)
    suffix = np.cumprod(np.concatenate([ones, flat[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    grad = (prefix * suffix).reshape(S.shape)
    with np.errstate(divide="ignore"):
        log_c = np.log1p(-S).sum(axis=(-2, -1))
    return PoolResult(p, grad, log_complement=log_c)


def pool_nor_log(S) -> PoolResult:
    """Noisy-OR computed as ``1 - exp(sum(log(1 - S)))``."""
    res = pool_nor(S)
    p = -np.expm1(np.asarray(res.log_complement))
    return PoolResult(p, res.dP_dS, log_complement=res.log_complement)


def pool_max(S) -> PoolResult:
    """Maximum; the gradient goes to the first maximal entry in row-major order."""
    S = _as_maps(S, check_range=False)
    flat = S.reshape(*S.shape[:-2], -1)
    idx = flat.argmax(axis=-1)
    grad = np.zeros_like(flat)
    np.put_along_axis(grad, idx[..., None], 1.0, axis=-1)
    return PoolResult(flat.max(axis=-1), grad.reshape(S.shape))


def pool_avg(S) -> PoolResult:
    S = _as_maps(S, check_range=False)
    size = S.shape[-1] * S.shape[-2]
    return PoolResult(S.mean(axis=(-2, -1)), np.full(S.shape, 1.0 / size))


def pool(S, spec: PoolingSpec, beta=None) -> PoolResult:
    """Dispatch on ``spec.kind``; ``beta`` overrides ``spec.beta`` for LSE-LBA."""
    kind = spec.kind
    if kind is PoolKind.LSE_LBA:
        return pool_lse_lba(S, spec.r0, spec.beta if beta is None else beta)
    if kind is PoolKind.LSE:
        return pool_lse(S, spec.r)
    if kind is PoolKind.GM:
        return pool_gm(S, spec.r)
    if kind is PoolKind.NOISY_OR:
        return pool_nor(S)
    if kind is PoolKind.MAX:
        return pool_max(S)
    return pool_avg(S)


def mil_pool(S: T.Tensor, spec: PoolingSpec, beta: T.Tensor | None = None) -> T.Tensor:
    """Differentiable pooling of a ``(n, K, h, w)`` saliency tensor to ``(n, K)``.

    For LSE-LBA, ``beta`` is a tensor of shape ``(1,)`` (shared across classes)
    or ``(K,)`` and receives the analytic ``dP/dbeta``.
    """
    if S.ndim != 4:
        raise ValueError(f"mil_pool expects (n, K, h, w), got {S.shape}")
    if spec.kind is PoolKind.LSE_LBA:
        if beta is None:
            beta = T.Tensor(np.array([spec.beta]))
        n, K = S.shape[:2]
        if beta.shape not in ((1,), (K,)):
            raise ValueError(f"beta must have shape (1,) or ({K},), got {beta.shape}")
        res = pool_lse_lba(S.data, spec.r0, beta.data)
        shared = beta.shape == (1,)

        def grad_fn(g):
            gS = g[..., None, None] * res.dP_dS
            gb = (g * res.dP_dbeta).sum(axis=0)
            gb = np.array([gb.sum()]) if shared else gb
            return gS, gb

        return T.record_custom("mil_pool", (S, beta), res.p, grad_fn)

    res = pool(S.data, spec)
    return T.record_custom("mil_pool", (S,), res.p, lambda g: (g[..., None, None] * res.dP_dS,))


def clamp_beta(beta: T.Tensor, upper: float = BETA_MAX) -> None:
    """Keep ``exp(beta)`` finite during optimisation."""
    np.minimum(beta.data, upper, out=beta.data)
