"""Composite segmentation loss, encoder-scaled RMSProp and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import ShapeError, Tensor, _record

logger = logging.getLogger(__name__)

DEFAULT_C_MAP = {"encoder1": 0.01, "encoder2": 1.0, "decoder": 1.0}


class UnmappedGroupError(KeyError):
    """A parameter belongs to a group without a learning-rate scale."""


@dataclass(frozen=True)
class LossConfig:
    lam: float = 2.0
    epsilon: float = 1.0
    clamp: float = 1e-7

    def __post_init__(self):
        if self.lam <= 0 or self.epsilon <= 0 or not 0 < self.clamp < 0.5:
            raise ValueError(f"invalid loss config {self}")


def dice_coefficient(p, g, epsilon: float = 1.0) -> float:
    """(2 sum(g p) + eps) / (sum p + sum g + eps)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    return float((2 * np.dot(g, p) + epsilon) / (p.sum() + g.sum() + epsilon))


def loss_terms(p: np.ndarray, g: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, float]:
    """The positive-class cross-entropy term and the dice term, in float64."""
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    pc = np.clip(p, cfg.clamp, 1 - cfg.clamp)
    ce = -(cfg.lam / 2) * np.dot(g, np.log(pc)) / p.size
    dice = (2 * np.dot(g, p) + cfg.epsilon) / (p.sum() + g.sum() + cfg.epsilon)
    return float(ce), float(1 - dice)


def composite_loss(p: Tensor, g, cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted cross-entropy plus dice loss over all elements of ``p``.

    ``g`` is a binary array of the same shape. Differentiable w.r.t. ``p``;
    the log term sees ``p`` clamped to ``[clamp, 1 - clamp]``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != p.shape:
        raise ShapeError(f"prediction {list(p.shape)} and ground truth {list(g.shape)} differ")
    if not (np.all(np.isfinite(p.data)) and np.all(np.isfinite(g))):
        raise ValueError("composite_loss received non-finite input")
    pd = p.data.astype(np.float64)
    n = pd.size
    pc = np.clip(pd, cfg.clamp, 1 - cfg.clamp)
    inter = float((g * pd).sum())
    denom = float(pd.sum() + g.sum()) + cfg.epsilon
    numer = 2 * inter + cfg.epsilon
    ce = -(cfg.lam / 2) * float((g * np.log(pc)).sum()) / n
    value = ce + 1 - numer / denom

    def backward(grad):
        inside = (pd >= cfg.clamp) & (pd <= 1 - cfg.clamp)
        d_ce = np.where(inside, -(cfg.lam / 2) * g / (n * pc), 0.0)
        d_dice = -(2 * g * denom - numer) / denom ** 2
        return ((float(grad) * (d_ce + d_dice)).astype(p.dtype),)

    return _record("composite_loss", (p,), np.asarray(value, dtype=p.dtype), backward)


def binary_cross_entropy(p: Tensor, y, clamp: float = 1e-7) -> Tensor:
    """Mean two-sided BCE, used by the encoder proxy pretraining."""
    y = np.asarray(y, dtype=np.float64)
    pd = p.data.astype(np.float64)
    pc = np.clip(pd, clamp, 1 - clamp)
    value = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))

    def backward(grad):
        inside = (pd >= clamp) & (pd <= 1 - clamp)
        d = np.where(inside, (pc - y) / (pc * (1 - pc)) / pd.size, 0.0)
        return ((float(grad) * d).astype(p.dtype),)

    return _record("bce", (p,), np.asarray(value, dtype=p.dtype), backward)


# ---------------------------------------------------------------------------
# RMSProp with per-group scale
# ---------------------------------------------------------------------------


def default_group(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class OptimizerState:
    eta: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    c_map: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_C_MAP))
    sq_avg: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        bad = {k: v for k, v in self.c_map.items() if not v > 0}
        if bad:
            raise ValueError(f"c scales must be positive: {bad}")

    def effective_lr(self) -> dict[str, float]:
        return {group: c * self.eta for group, c in self.c_map.items()}


def rmsprop_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    group_of: Callable[[str], str] = default_group,
) -> dict[str, np.ndarray]:
    """Apply one scaled RMSProp update in place and return the applied deltas.

    ``E <- rho E + (1 - rho) g^2`` then ``theta <- theta - c * eta * g / sqrt(E + eps)``
    with ``c`` looked up from the parameter's group. Updates are computed in
    float64; the returned delta for a group with scale ``c`` is exactly
    ``c`` times the unscaled step.
    """
    scales = {}
    for name in params:
        group = group_of(name)
        if group not in state.c_map:
            raise UnmappedGroupError(f"parameter {name} is in group {group!r}, which has no c scale")
        scales[name] = state.c_map[group]

    deltas: dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {list(g.shape)}, parameter has {list(param.shape)}")
        sq = state.sq_avg.get(name)
        if sq is None:
            sq = np.zeros(param.shape, dtype=np.float64)
        sq = state.rho * sq + (1 - state.rho) * g * g
        state.sq_avg[name] = sq
        step = state.eta * g / np.sqrt(sq + state.eps)
        delta = scales[name] * step
        param.data = (param.data.astype(np.float64) - delta).astype(param.dtype)
        deltas[name] = delta
    state.steps += 1
    return deltas


class ScaledRMSProp:
    """Owns the optimizer state for one model's named parameters."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        eta: float = 1e-4,
        rho: float = 0.9,
        eps: float = 1e-8,
        c_map: Optional[Mapping[str, float]] = None,
        group_of: Callable[[str], str] = default_group,
    ):
        self.params = dict(params)
        self.group_of = group_of
        self.state = OptimizerState(eta, rho, eps, dict(c_map if c_map is not None else DEFAULT_C_MAP))
        groups = {group_of(n) for n in self.params}
        missing = sorted(groups - set(self.state.c_map))
        if missing:
            raise UnmappedGroupError(f"no c scale for parameter groups {missing}")

    def log_effective_lr(self) -> None:
        groups = sorted({self.group_of(n) for n in self.params})
        for group in groups:
            c = self.state.c_map[group]
            logger.info("group %s: c=%g effective_lr=%g", group, c, c * self.state.eta)

    def step(self) -> dict[str, np.ndarray]:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        return rmsprop_step(self.state, self.params, grads, self.group_of)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopState:
    patience: int = 10
    min_delta: float = 1e-4
    best: float = float("-inf")
    best_epoch: int = 0
    epoch: int = 0
    since_improvement: int = 0
    best_weights: Optional[dict] = None
    stopped: bool = False


def early_stop_check(state: EarlyStopState, val_dice: float, model=None) -> str:
    """Record one epoch's validation dice; returns ``"continue"`` or ``"stop"``.

    An improvement of at least ``min_delta`` resets the counter and
    snapshots ``model``; the run stops once the counter exceeds
    ``patience``, restoring the snapshot into ``model``.
    """
    if not 0.0 <= val_dice <= 1.0:
        raise ValueError(f"validation dice must lie in [0, 1], got {val_dice}")
    state.epoch += 1
    if val_dice >= state.best + state.min_delta:
        state.best = val_dice
        state.best_epoch = state.epoch
        state.since_improvement = 0
        if model is not None:
            state.best_weights = model.state_dict()
        return "continue"
    state.since_improvement += 1
    if state.since_improvement > state.patience:
        state.stopped = True
        if model is not None and state.best_weights is not None:
            model.load_state_dict(state.best_weights)
        return "stop"
    return "continue"
