"""Adversarial, probability-map and cycle losses.

All losses are L1 distances between discriminator outputs and their ideal
targets: real images should score 1 globally and per pixel, synthetic ones 0,
and the generator is rewarded when its output scores 1 on both heads. Local
terms reduce over pixels with a mean by default so they stay commensurate
with the global term under the 1.0 combination weight; a sum reduction is
available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .errors import NumericError, ValidationError

LOCAL_REDUCTIONS = ("mean", "sum")


def _check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")
    return t


def _check_unit_range(name: str, t: torch.Tensor) -> torch.Tensor:
    _check_finite(name, t)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise NumericError(f"{name} must lie in [0, 1]")
    return t


def _local_term(m: torch.Tensor, target: float, reduction: str) -> torch.Tensor:
    if reduction not in LOCAL_REDUCTIONS:
        raise ValidationError(f"local_reduction must be one of {LOCAL_REDUCTIONS}")
    diff = (m - target).abs().flatten(1)
    per_item = diff.mean(dim=1) if reduction == "mean" else diff.sum(dim=1)
    return per_item.mean()


def disc_global_loss(g_real: torch.Tensor, g_fake: torch.Tensor) -> torch.Tensor:
    """Batch-averaged |d_real - 1| + |d_fake - 0| on the global head."""
    _check_unit_range("g_real", g_real)
    _check_unit_range("g_fake", g_fake)
    return (g_real - 1.0).abs().mean() + g_fake.abs().mean()


def disc_local_loss(
    map_real: torch.Tensor, map_fake: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Per-pixel analogue of the global loss on the probability maps."""
    _check_unit_range("map_real", map_real)
    _check_unit_range("map_fake", map_fake)
    return _local_term(map_real, 1.0, reduction) + _local_term(map_fake, 0.0, reduction)


def disc_total_loss(global_part: torch.Tensor, local_part: torch.Tensor, local_weight: float = 1.0):
    """Linear combination of the two discriminator terms, weight 1.0 by default."""
    return global_part + local_weight * local_part


def gen_adv_loss(
    g_fake: torch.Tensor,
    map_fake: torch.Tensor | None,
    reduction: str = "mean",
    local_weight: float = 1.0,
) -> torch.Tensor:
    """Generator reward: both heads should call the synthetic image real."""
    _check_unit_range("g_fake", g_fake)
    loss = (g_fake - 1.0).abs().mean()
    if map_fake is not None and local_weight != 0.0:
        _check_unit_range("map_fake", map_fake)
        loss = loss + local_weight * _local_term(map_fake, 1.0, reduction)
    return loss


def cycle_loss(
    x_real: torch.Tensor,
    x_cycled: torch.Tensor,
    y_real: torch.Tensor,
    y_cycled: torch.Tensor,
) -> torch.Tensor:
    """Pixel-mean L1 reconstruction error of both round trips."""
    if x_real.shape != x_cycled.shape or y_real.shape != y_cycled.shape:
        raise ValidationError("cycle loss requires matching shapes per pair")
    _check_finite("x_real", x_real)
    _check_finite("x_cycled", x_cycled)
    _check_finite("y_real", y_real)
    _check_finite("y_cycled", y_cycled)
    return (x_cycled - x_real).abs().mean() + (y_cycled - y_real).abs().mean()


@dataclass
class LossBreakdown:
    """Every scalar the training step produced, per translation direction.

    Suffix ``_y`` belongs to the X->Y direction (networks D_Y, G_Y), ``_x``
    to Y->X. ``d_total_*`` is exactly ``d_global_* + local_weight * d_local_*``
    and ``total`` is the declared weighted sum of all parts.
    """

    d_global_y: float = 0.0
    d_local_y: float = 0.0
    d_total_y: float = 0.0
    g_adv_y: float = 0.0
    d_global_x: float = 0.0
    d_local_x: float = 0.0
    d_total_x: float = 0.0
    g_adv_x: float = 0.0
    cycle: float = 0.0
    lambda_cyc: float = 0.0
    total: float = 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[float]:
        return [float(getattr(self, n)) for n in self.field_names()]


def total_loss(parts: LossBreakdown, lambda_cyc: float) -> float:
    """Sum of both adversarial objectives plus the weighted cycle term."""
    return (
        parts.d_total_y + parts.g_adv_y + parts.d_total_x + parts.g_adv_x + lambda_cyc * parts.cycle
    )
