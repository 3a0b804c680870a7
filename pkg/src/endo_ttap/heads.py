"""Uncertainty and occlusion heads plus the curriculum flow-scaling schedule.

Both heads share the same input, the channel concatenation of the fused
feature map with the alpha-scaled forward and backward flow, and each runs
its own stack of three 3x3 convolutions with rectifiers in between (the last
stage is linear so log-variance and logits stay signed).  The curriculum
adapter is the scalar alpha ramp itself: it scales the flow channels from
nearly invisible to fully visible as training progresses and carries no
learned parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .core import FlowField, OcclusionMap, UncertaintyMap
from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float
    alpha_end: float
    total_steps: int

    def __post_init__(self):
        if self.alpha_start <= 0 or self.alpha_end <= 0:
            raise ValueError("alpha endpoints must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")


def alpha_at(sched: AlphaSchedule, step: int) -> float:
    """Geometric interpolation between the schedule endpoints.

    log(alpha) is affine in the step; out-of-range steps clamp with a
    warning.  The endpoints are returned exactly.
    """
    if step < 0 or step > sched.total_steps:
        logger.warning("alpha_at step %d outside [0, %d]; clamping",
                       step, sched.total_steps)
        step = min(max(step, 0), sched.total_steps)
    if step == 0:
        return sched.alpha_start
    if step == sched.total_steps:
        return sched.alpha_end
    r = step / sched.total_steps
    return math.exp((1.0 - r) * math.log(sched.alpha_start)
                    + r * math.log(sched.alpha_end))


class UOHead(nn.Module):
    """Three alternating convolution/rectifier stages, one output channel."""

    def __init__(self, in_channels: int, mid1: int = 64, mid2: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, mid1, 3, padding=1)
        self.conv2 = nn.Conv2d(mid1, mid2, 3, padding=1)
        self.conv3 = nn.Conv2d(mid2, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        return self.conv3(x)


class UOHeads(nn.Module):
    """Paired uncertainty (log-variance) and occlusion (logit) heads."""

    def __init__(self, feature_channels: int = 128):
        super().__init__()
        in_channels = feature_channels + 4  # fused features + both flows
        self.uncertainty_head = UOHead(in_channels)
        self.occlusion_head = UOHead(in_channels)

    def forward(
        self,
        f_ga: torch.Tensor,
        fwd_flow: FlowField | torch.Tensor,
        bwd_flow: FlowField | torch.Tensor,
        alpha: float,
    ) -> tuple[UncertaintyMap, OcclusionMap]:
        fwd = fwd_flow.vectors if isinstance(fwd_flow, FlowField) else fwd_flow
        bwd = bwd_flow.vectors if isinstance(bwd_flow, FlowField) else bwd_flow
        if f_ga.shape[:2] != fwd.shape[:2] or f_ga.shape[:2] != bwd.shape[:2]:
            raise ShapeMismatchError(
                f"head inputs disagree spatially: f_ga {tuple(f_ga.shape[:2])}, "
                f"fwd {tuple(fwd.shape[:2])}, bwd {tuple(bwd.shape[:2])}")
        stacked = torch.cat([f_ga, alpha * fwd, alpha * bwd], dim=-1)
        x = stacked.permute(2, 0, 1).unsqueeze(0)
        log_var = self.uncertainty_head(x).squeeze(0).squeeze(0)
        occ_logits = self.occlusion_head(x).squeeze(0).squeeze(0)
        return UncertaintyMap(log_var), OcclusionMap(occ_logits)

    def raw_forward(
        self,
        f_ga: torch.Tensor,
        fwd: torch.Tensor,
        bwd: torch.Tensor,
        alpha: float,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Map tensors without wrapping (keeps autograd graphs lean)."""
        stacked = torch.cat([f_ga, alpha * fwd, alpha * bwd], dim=-1)
        x = stacked.permute(2, 0, 1).unsqueeze(0)
        return (self.uncertainty_head(x).squeeze(0).squeeze(0),
                self.occlusion_head(x).squeeze(0).squeeze(0))
