"""Multi-resolution saliency network with LSE-LBA pooling.

Data flow for ``levels = L`` and saliency side ``N``::

    x (input_size) -> stem 3x3 conv
      -> reduce_block -> F^1 (input/2) -> reduce_block -> F^2 (input/4) ... F^L
    every level whose side is <= N gets its own dense refinement;
    starting from the coarsest level, fuse() upsamples and merges with the
    next finer refined map until side N is reached -> F^0
    F^0 -> shared 1x1 instance classifier -> sigmoid -> S (n, K, N, N)
    S -> per-class LSE-LBA pooling -> P (n, K)

Saliency tensors are laid out ``(batch, class, row, col)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .pooling import PoolingSpec, PoolKind, effective_sharpness, mil_pool


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 64
    levels: int = 3
    base_channels: int = 8
    channels_per_level: tuple[int, ...] = ()
    dense_depth: int = 2
    growth_rate: int = 8
    fuse_channels: int = 16
    num_classes: int = 2
    saliency_resolution: int = 16
    r0: float = 5.0
    beta_init: float = 0.0
    per_class_beta: bool = False
    pool_kind: str = "lse_lba"
    pool_r: float = 1.0
    refine_mode: str = "dense"
    seed: int = 0

    def __post_init__(self):
        self.channels_per_level = tuple(int(c) for c in self.channels_per_level)
        if not self.channels_per_level:
            self.channels_per_level = tuple(self.base_channels * 2 ** l for l in range(1, self.levels + 1))
        self.validate()

    @classmethod
    def tiny(cls, seed: int = 0) -> "ModelConfig":
        """16x16 input, two levels; under 2000 parameters (used by gradient checks)."""
        return cls(input_size=16, levels=2, base_channels=2, channels_per_level=(4, 8), dense_depth=1,
                   growth_rate=3, fuse_channels=4, num_classes=2, saliency_resolution=8, seed=seed)

    def level_side(self, level: int) -> int:
        return self.input_size // 2 ** level

    @property
    def finest_level(self) -> int:
        """Level whose side equals the saliency resolution."""
        return int(round(np.log2(self.input_size / self.saliency_resolution)))

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ConfigError(f"channels_per_level has {len(self.channels_per_level)} entries, "
                              f"expected one per level ({self.levels})")
        if self.num_classes < 1 or self.dense_depth < 1:
            raise ConfigError("num_classes and dense_depth must be >= 1")
        side = self.input_size
        for level in range(1, self.levels + 1):
            if side % 2:
                raise ConfigError(f"level {level}: cannot halve odd side {side} "
                                  f"(input_size {self.input_size}, levels {self.levels})")
            side //= 2
        sides = {level: self.level_side(level) for level in range(1, self.levels)}
        if self.saliency_resolution not in sides.values():
            listing = ", ".join(f"level {k}: {v}" for k, v in sides.items())
            raise ConfigError(f"saliency_resolution {self.saliency_resolution} does not match a fusable "
                              f"level side ({listing}; level {self.levels} is the coarsest and has "
                              f"nothing below it to fuse)")
        if self.refine_mode not in ("dense", "residual"):
            raise ConfigError(f"refine_mode must be 'dense' or 'residual', got {self.refine_mode!r}")
        PoolingSpec(PoolKind(self.pool_kind), r=self.pool_r, r0=self.r0, beta=self.beta_init)

    def pooling_spec(self) -> PoolingSpec:
        return PoolingSpec(PoolKind(self.pool_kind), r=self.pool_r, r0=self.r0, beta=self.beta_init)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    P: T.Tensor  # (n, K)
    S: T.Tensor  # (n, K, N, N)
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)


def _he(rng, c_out, c_in, k):
    return rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k))


def _xavier(rng, c_out, c_in):
    return rng.normal(0.0, np.sqrt(2.0 / (c_in + c_out)), (c_out, c_in, 1, 1))


class Model:
    """Parameters live in ``self.params`` (insertion order is the canonical order)."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.spec = config.pooling_spec()
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(config.seed)
        c = config

        self._conv("stem", rng, c.base_channels, 1, 3)
        c_prev = c.base_channels
        for level in range(1, c.levels + 1):
            c_out = c.channels_per_level[level - 1]
            self._conv(f"reduce{level}.g1", rng, c_prev, c_prev, 1)
            self._conv(f"reduce{level}.g2", rng, c_out, c_prev, 3)
            self._conv(f"reduce{level}.g3", rng, c_out, c_out, 1)
            self._conv(f"reduce{level}.f", rng, c_out, c_prev, 1)
            c_prev = c_out

        self.refined_channels: dict[int, int] = {}
        for level in self.fused_levels:
            c_in = c.channels_per_level[level - 1]
            if c.refine_mode == "dense":
                for m in range(c.dense_depth):
                    self._conv(f"refine{level}.{m}", rng, c.growth_rate, c_in + m * c.growth_rate, 3)
                self.refined_channels[level] = c_in + c.dense_depth * c.growth_rate
            else:
                for m in range(c.dense_depth):
                    self._conv(f"refine{level}.{m}.a", rng, c_in, c_in, 3)
                    self._conv(f"refine{level}.{m}.b", rng, c_in, c_in, 3)
                self.refined_channels[level] = c_in

        c_lower = self.refined_channels[c.levels]
        for level in reversed(self.fused_levels[:-1]):
            self._conv(f"fuse{level}", rng, c.fuse_channels, c_lower + self.refined_channels[level], 3)
            c_lower = c.fuse_channels

        self._add("classifier.w", _xavier(rng, c.num_classes, c_lower))
        self._add("classifier.b", np.zeros(c.num_classes))
        if self.spec.learnable:
            n_beta = c.num_classes if c.per_class_beta else 1
            self._add("beta", np.full(n_beta, float(c.beta_init)))

    # -- construction helpers -------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> T.Tensor:
        t = T.Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name, rng, c_out, c_in, k):
        self._add(f"{name}.w", _he(rng, c_out, c_in, k))
        self._add(f"{name}.b", np.zeros(c_out))

    @property
    def fused_levels(self) -> list[int]:
        """Levels taking part in coarse-to-fine fusion, finest first."""
        return list(range(self.config.finest_level, self.config.levels + 1))

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def conv(self, name: str, x: T.Tensor, stride: int = 1) -> T.Tensor:
        return T.conv2d(x, self.params[f"{name}.w"], stride=stride, bias=self.params[f"{name}.b"])

    @property
    def beta(self) -> T.Tensor | None:
        return self.params.get("beta")

    def r_eff(self) -> np.ndarray:
        if self.beta is None:
            return np.array([self.spec.r_eff])
        return effective_sharpness(self.config.r0, self.beta.data)

    # -- blocks ---------------------------------------------------------------

    def reduce_block(self, F: T.Tensor, level: int) -> T.Tensor:
        """relu(g(F) + f(F)) halving the side; g is 1x1 -> 3x3/2 -> 1x1, f a strided 1x1 projection."""
        h, w = F.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"reduce_block needs even spatial dims, got {h}x{w}")
        name = f"reduce{level}"
        g = T.relu(self.conv(f"{name}.g1", F))
        g = T.relu(self.conv(f"{name}.g2", g, stride=2))
        g = self.conv(f"{name}.g3", g)
        return T.relu(T.add(g, self.conv(f"{name}.f", F, stride=2)))

    def dense_refine(self, F_list: Sequence[T.Tensor], level: int) -> T.Tensor:
        """Each step convolves the concatenation of every earlier map; returns the full concatenation."""
        maps = list(F_list)
        side = maps[0].shape[2:]
        for F in maps[1:]:
            if F.shape[2:] != side:
                raise ValueError(f"dense_refine spatial mismatch: {side} vs {F.shape[2:]}")
        if self.config.refine_mode == "residual":
            F = maps[0] if len(maps) == 1 else T.concat_channels(maps)
            for m in range(self.config.dense_depth):
                g = self.conv(f"refine{level}.{m}.b", T.relu(self.conv(f"refine{level}.{m}.a", F)))
                F = T.relu(T.add(g, F))
            return F
        for m in range(self.config.dense_depth):
            stacked = maps[0] if len(maps) == 1 else T.concat_channels(maps)
            maps.append(T.relu(self.conv(f"refine{level}.{m}", stacked)))
        return T.concat_channels(maps)

    def fuse(self, F_lower: T.Tensor, F_same: T.Tensor, level: int) -> T.Tensor:
        up = T.nearest_upsample2x(F_lower)
        if up.shape[0] != F_same.shape[0] or up.shape[2:] != F_same.shape[2:]:
            raise ValueError(f"fuse: upsampled lower map {up.shape} does not match {F_same.shape}")
        return T.relu(self.conv(f"fuse{level}", T.concat_channels([up, F_same])))

    # -- forward --------------------------------------------------------------

    def forward(self, x) -> Prediction:
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        c = self.config
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (c.input_size, c.input_size):
            raise ValueError(f"expected input of shape (n, 1, {c.input_size}, {c.input_size}), got {x.shape}")
        shapes = {}
        F = T.relu(self.conv("stem", x))
        shapes["stem"] = F.shape
        levels = {}
        for level in range(1, c.levels + 1):
            F = self.reduce_block(F, level)
            levels[level] = F
            shapes[f"level{level}"] = F.shape
        refined = {l: self.dense_refine([levels[l]], l) for l in self.fused_levels}
        F0 = refined[c.levels]
        for level in reversed(self.fused_levels[:-1]):
            F0 = self.fuse(F0, refined[level], level)
            shapes[f"fused{level}"] = F0.shape
        logits = T.conv2d(F0, self.params["classifier.w"], bias=self.params["classifier.b"])
        S = T.sigmoid(logits)
        P = mil_pool(S, self.spec, self.beta)
        shapes["saliency"] = S.shape
        return Prediction(P, S, shapes)

    def predict(self, images: np.ndarray, batch_size: int = 50) -> tuple[np.ndarray, np.ndarray]:
        """Inference in chunks: returns ``(P, S)`` as arrays."""
        Ps, Ss = [], []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                pred = self.forward(images[i:i + batch_size])
                Ps.append(pred.P.data)
                Ss.append(pred.S.data)
        return np.concatenate(Ps), np.concatenate(Ss)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=T.DTYPE)


def mil_loss(pred: Prediction, y) -> T.Tensor:
    """Multi-label cross-entropy averaged over classes and batch."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    K = pred.P.shape[-1]
    if y.shape[-1] != K:
        raise ValueError(f"label vector has {y.shape[-1]} entries, model predicts {K} classes")
    return T.binary_cross_entropy(pred.P, y)
