"""AdamW with decoupled weight decay, plus the warmup learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import OptimError

__all__ = ["OptimState", "adamw_step", "lr_at", "AdamW"]


@dataclass
class OptimState:
    """First/second moment buffers and hyperparameters for one parameter group."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.01) -> "OptimState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        )


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
               state: OptimState, lr: float,
               names: Optional[Sequence[str]] = None) -> None:
    """Apply one AdamW update in place.

    Weight decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    ``params`` and ``grads`` are matched by position with ``state``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise OptimError(
            f"adamw_step: got {len(params)} params, {len(grads)} grads, "
            f"state sized for {len(state.m)}")
    if lr < 0:
        raise OptimError(f"adamw_step: negative learning rate {lr}")
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names else str(i)
        if g is None:
            raise OptimError(f"adamw_step: missing gradient for parameter {label}")
        if g.shape != p.data.shape:
            raise OptimError(
                f"adamw_step: gradient shape {g.shape} does not match parameter "
                f"{label} of shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimError(f"adamw_step: non-finite gradient for parameter {label}")

    state.step += 1
    t = state.step
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1 ** t)
    bc2 = np.float32(1.0 - state.beta2 ** t)
    lr32 = np.float32(lr)
    wd = np.float32(state.weight_decay)
    eps = np.float32(state.eps)
    one = np.float32(1.0)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float32)
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr32 * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.data)


def lr_at(iteration: int, base_lr: float, warmup_iters: int, total_iters: int,
          decay: str = "constant", power: float = 0.9) -> float:
    """Learning rate at ``iteration``: linear warmup from 0, then flat or poly decay.

    During warmup the rate is ``base_lr * iteration / warmup_iters``.  After
    warmup, ``constant`` holds ``base_lr``; ``poly`` scales it by
    ``(1 - progress) ** power`` where progress runs over the post-warmup span.
    """
    if iteration < 0 or total_iters <= 0 or warmup_iters < 0:
        raise OptimError(
            f"lr_at: invalid iteration={iteration}, warmup={warmup_iters}, "
            f"total={total_iters}")
    if warmup_iters > total_iters:
        raise OptimError(f"lr_at: warmup {warmup_iters} exceeds total {total_iters}")
    if decay not in ("constant", "poly"):
        raise OptimError(f"lr_at: unknown decay mode {decay!r}")
    if warmup_iters > 0 and iteration < warmup_iters:
        return base_lr * iteration / warmup_iters
    if decay == "constant":
        return base_lr
    span = max(total_iters - warmup_iters, 1)
    progress = min((iteration - warmup_iters) / span, 1.0)
    return base_lr * (1.0 - progress) ** power


class AdamW:
    """Per-group AdamW over a parameter dict, sharing one schedule scale.

    ``groups`` maps a group name to (parameter names, base learning rate);
    each group keeps independent moment buffers and step counts.
    """

    def __init__(self, params: dict[str, Tensor],
                 groups: dict[str, tuple[list[str], float]],
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        seen: set[str] = set()
        self._groups: list[tuple[str, list[str], list[Tensor], float, OptimState]] = []
        for gname, (names, base_lr) in groups.items():
            missing = [n for n in names if n not in params]
            if missing:
                raise OptimError(f"AdamW: unknown parameters in group {gname}: {missing}")
            dup = seen.intersection(names)
            if dup:
                raise OptimError(f"AdamW: parameters assigned twice: {sorted(dup)}")
            seen.update(names)
            plist = [params[n] for n in names]
            state = OptimState.for_params(plist, beta1, beta2, eps, weight_decay)
            self._groups.append((gname, list(names), plist, base_lr, state))
        unassigned = set(params) - seen
        if unassigned:
            raise OptimError(f"AdamW: parameters not in any group: {sorted(unassigned)}")

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        for gname, names, plist, base_lr, state in self._groups:
            glist = [grads.get(n) for n in names]
            adamw_step(plist, glist, state, base_lr * lr_scale, names=names)

    @property
    def group_names(self) -> list[str]:
        return [g[0] for g in self._groups]
