"""Central finite-difference verification of the hand-written backward pass.

The checker samples a deterministic subset of scalar parameters (covering
every parameter block), perturbs each by +/-h, and compares the resulting
difference quotient against the analytic gradient.  Meaningful only in
float64; float32 rounding drowns the signal at usable step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import GroundingModel, InvalidStateError

REL_ERR_FLOOR = 1e-8


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    num_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _sample_coordinates(model: GroundingModel, num_samples: int, seed: int):
    """At least `num_samples` flat coordinates, stratified so every block
    contributes at least two (or all, for single-element blocks)."""
    rng = np.random.default_rng(seed)
    total = model.num_parameters()
    picks: list[tuple[str, int]] = []
    for name, p in model.params.items():
        share = max(2, int(round(num_samples * p.size / total)))
        share = min(share, p.size)
        idx = rng.choice(p.size, size=share, replace=False)
        picks.extend((name, int(i)) for i in idx)
    return picks


def gradcheck(
    loss_fn: Callable[[GroundingModel], tuple[float, dict[str, np.ndarray]]],
    model: GroundingModel,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    num_samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against (f(x+h) - f(x-h)) / 2h.

    `loss_fn` maps a model to (scalar loss, per-parameter gradient dict) and
    must be deterministic; two evaluations at the same point are compared to
    detect dropout or other hidden state.
    """
    if not (step > 0):
        raise ValueError(f"finite-difference step must be positive, got {step}")
    model = model.to_dtype(np.float64)

    loss0, analytic = loss_fn(model)
    loss1, _ = loss_fn(model)
    if loss0 != loss1:
        raise InvalidStateError(
            f"loss_fn is not deterministic ({loss0!r} != {loss1!r}); disable dropout"
        )

    worst = ("", 0.0)
    picks = _sample_coordinates(model, num_samples, seed)
    for name, flat_idx in picks:
        p = model.params[name]
        orig = p.flat[flat_idx]
        p.flat[flat_idx] = orig + step
        f_plus, _ = loss_fn(model)
        p.flat[flat_idx] = orig - step
        f_minus, _ = loss_fn(model)
        p.flat[flat_idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = float(analytic[name].flat[flat_idx])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), REL_ERR_FLOOR)
        if rel > worst[1]:
            worst = (f"{name}[{flat_idx}]", rel)
    return GradCheckReport(
        max_rel_error=worst[1],
        worst_parameter=worst[0],
        num_checked=len(picks),
        tolerance=tolerance,
    )
