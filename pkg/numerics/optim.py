"""
Parameters, AdamW with decoupled weight decay, and the warmup/linear-decay schedule.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from exceptions import ShapeError
from logger import setup_logger
from numerics.tensor import Tensor

logger = setup_logger(__name__)


class Parameter(Tensor):
    """
    Named trainable tensor carrying its own AdamW slots.

    ``m`` and ``v`` are the first and second moment estimates, ``t`` the number
    of updates this parameter has received.
    """

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape}, t={self.t})"


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak`` then linear decay to zero at ``total_steps``."""
    peak: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak <= 0:
            raise ValueError(f"peak learning rate must be positive, got {self.peak}")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup steps must be within [0, total_steps], got {self.warmup_steps} of {self.total_steps}"
            )


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    """
    Learning rate at a 0-based optimizer step.

    Examples:
        >>> lr_at_step(LrSchedule(1e-5, 3000, 10000), 0)
        0.0
        >>> lr_at_step(LrSchedule(1e-5, 3000, 10000), 3000)
        1e-05
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= schedule.total_steps:
        return 0.0
    if step < schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    remaining = schedule.total_steps - step
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak * remaining / span


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """
    One AdamW update, in place, in name order.

    Decay is applied to the parameter directly: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).

    Raises:
        ValueError: non-positive learning rate or non-finite gradient
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")

    order = sorted(range(len(params)), key=lambda i: params[i].name)
    for i in order:
        p, g = params[i], grads[i]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {p.name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {p.name}")
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


class AdamW:
    """
    AdamW over named parameter groups, each with its own schedule.

    Args:
        groups: group name -> parameters
        schedules: group name -> LrSchedule
    """

    def __init__(
        self,
        groups: Dict[str, List[Parameter]],
        schedules: Dict[str, LrSchedule],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        missing = sorted(set(groups) - set(schedules))
        if missing:
            raise ValueError(f"no schedule for parameter group(s): {', '.join(missing)}")
        self.groups = {name: sorted(params, key=lambda p: p.name) for name, params in groups.items()}
        self.schedules = dict(schedules)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def rates(self, step: int) -> Dict[str, float]:
        return {name: lr_at_step(self.schedules[name], step) for name in sorted(self.groups)}

    def zero_grad(self, group: Optional[str] = None) -> None:
        names = [group] if group else list(self.groups)
        for name in names:
            for p in self.groups[name]:
                p.zero_grad()

    def step(self, step: int, group: Optional[str] = None) -> Dict[str, float]:
        """
        Update every group (or one) with its scheduled rate at ``step``.

        A group whose scheduled rate is exactly zero (warmup origin) is skipped,
        leaving its moments and step counters untouched. So is every parameter
        that received no gradient this step: no decay, no moment update.
        """
        rates = self.rates(step)
        names = [group] if group else sorted(self.groups)
        for name in names:
            lr = rates[name]
            if lr <= 0.0:
                logger.debug("Skipping update of group %s at step %s (rate 0)", name, step)
                continue
            params = [p for p in self.groups[name] if p.grad is not None]
            if not params:
                logger.debug("Skipping update of group %s at step %s (no gradients)", name, step)
                continue
            adamw_step(
                params,
                [p.grad for p in params],
                lr,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
                weight_decay=self.weight_decay,
            )
        return rates
