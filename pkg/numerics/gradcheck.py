"""
Central finite-difference checks of analytic gradients.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from numerics.optim import Parameter
from numerics.tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    """Per-parameter maximum relative error against central differences."""
    errors: Dict[str, float] = field(default_factory=dict)
    probes: Dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tolerance for e in self.errors.values())

    def failures(self) -> List[str]:
        return [name for name, e in sorted(self.errors.items()) if not (e <= self.tolerance)]


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-5,
    samples: Optional[int] = None,
    seed: int = 0,
    corrupt: Optional[str] = None,
) -> GradCheckResult:
    """
    Compare backward() gradients with central differences of ``loss_fn``.

    ``loss_fn`` must be a pure function of the parameter values. At most
    ``samples`` coordinates per parameter are probed. ``corrupt`` names a
    parameter whose analytic gradient is deliberately offset (negative control).
    """
    rng = np.random.default_rng(seed)
    params = sorted(params, key=lambda p: p.name)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = {p.name: p.grad_or_zeros().copy() for p in params}
    for p in params:
        p.zero_grad()
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter to corrupt: {corrupt}")
        analytic[corrupt] = analytic[corrupt] + 1.0

    result = GradCheckResult(tolerance=tolerance)
    with no_grad():
        for p in params:
            flat_count = p.data.size
            if samples is None or samples >= flat_count:
                coords = np.arange(flat_count)
            else:
                coords = np.sort(rng.choice(flat_count, size=samples, replace=False))
            worst = 0.0
            for flat in coords:
                index = np.unravel_index(flat, p.data.shape)
                original = p.data[index]
                p.data[index] = original + h
                plus = loss_fn().item()
                p.data[index] = original - h
                minus = loss_fn().item()
                p.data[index] = original
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, relative_error(float(analytic[p.name][index]), numeric, floor))
            result.errors[p.name] = worst
            result.probes[p.name] = len(coords)
    return result
