"""Multi-facet guided attention: align six feature sources and fuse them.

Forward/backward flow (channel-attended), the four backbone intermediates
(channel-attended) and a semantic embedding are mapped into one latent space.
The flow/semantic hybrid acts as the attention query; each intermediate acts
as key and value.  The fused map is the sum of the four attention terms,
computed over flattened spatial tokens with 1/sqrt(C) scaling.

All public tensors are HxWxC.  For desk-scale speed the module can pool its
inputs to a coarser token grid before attention (``stride``) and/or restrict
keys to a Chebyshev window (``window``); the attention arithmetic itself is
exact on whatever grid it sees.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: global average pool, bottleneck, logistic."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.force_identity = False  # test hook: all-ones gate

    def gate(self, f: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return torch.ones(f.shape[-1], dtype=f.dtype, device=f.device)
        pooled = f.mean(dim=(0, 1))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.gate(f)


class HybridFuser(nn.Module):
    """Concatenate flow-attended and semantic features, 1x1-project."""

    def __init__(self, flow_channels: int, semantic_channels: int, out_channels: int):
        super().__init__()
        self.flow_channels = flow_channels
        self.semantic_channels = semantic_channels
        self.proj = nn.Linear(flow_channels + semantic_channels, out_channels)

    def init_identity_on_semantic(self) -> None:
        """Test hook: output channels copy the semantic block verbatim."""
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
            n = min(self.semantic_channels, self.proj.weight.shape[0])
            for i in range(n):
                self.proj.weight[i, self.flow_channels + i] = 1.0

    def forward(self, flow_attn: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
        if flow_attn.shape[:2] != semantic.shape[:2]:
            raise ShapeMismatchError(
                f"hybrid fusion spatial mismatch: {tuple(flow_attn.shape[:2])} vs "
                f"{tuple(semantic.shape[:2])}")
        return self.proj(torch.cat([flow_attn, semantic], dim=-1))


class LatentProjector(nn.Module):
    """Per-position affine map into the shared latent space."""

    def __init__(self, in_channels: int, latent_channels: int):
        super().__init__()
        self.proj = nn.Linear(in_channels, latent_channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.proj(f)


def _window_mask(h: int, w: int, window: int, device, dtype) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    ys = ys.reshape(-1)
    xs = xs.reshape(-1)
    near = ((ys[:, None] - ys[None, :]).abs() <= window) & \
           ((xs[:, None] - xs[None, :]).abs() <= window)
    mask = torch.zeros(h * w, h * w, device=device, dtype=dtype)
    mask[~near] = float("-inf")
    return mask


def guided_attention(
    query: torch.Tensor,
    middles: list[torch.Tensor],
    window: int | None = None,
    return_attention: bool = False,
):
    """Sum of per-intermediate attention terms over spatial tokens.

    ``query`` and each entry of ``middles`` are HxWxC with a shared shape.
    For every intermediate i the keys and the values are the same tensor, and
    term_i = softmax(Q K_i^T / sqrt(C)) K_i over the flattened token axis.
    """
    if len(middles) != 4:
        raise ShapeMismatchError(f"expected 4 middle features, got {len(middles)}")
    h, w, c = query.shape
    for i, m in enumerate(middles):
        if m.shape != query.shape:
            raise ShapeMismatchError(
                f"middle feature {i} shape {tuple(m.shape)} != query {tuple(query.shape)}")

    q = query.reshape(h * w, c)
    scale = 1.0 / math.sqrt(c)
    mask = None
    if window is not None:
        mask = _window_mask(h, w, window, query.device, query.dtype)

    out = torch.zeros_like(q)
    attentions = []
    for m in middles:
        k = m.reshape(h * w, c)
        scores = (q @ k.t()) * scale
        if mask is not None:
            scores = scores + mask
        attn = torch.softmax(scores, dim=-1)
        out = out + attn @ k
        if return_attention:
            attentions.append(attn)
    f_ga = out.reshape(h, w, c)
    if return_attention:
        return f_ga, attentions
    return f_ga


class MultiFacetGuidedAttention(nn.Module):
    """The full fusion stage, from raw feature sources to the fused map.

    ``enabled=False`` drops the attention weighting entirely and returns the
    plain sum of the projected intermediates (the fusion-ablation baseline);
    ``use_semantic=False`` zeroes the semantic input so the query carries
    flow information only.
    """

    def __init__(
        self,
        middle_channels: int = 32,
        semantic_channels: int = 64,
        c_ls: int = 128,
        c_hybrid: int = 128,
        window: int | None = None,
        stride: int = 1,
        enabled: bool = True,
        use_semantic: bool = True,
    ):
        super().__init__()
        self.c_ls = c_ls
        self.window = window
        self.stride = stride
        self.enabled = enabled
        self.use_semantic = use_semantic

        self.flow_attention = ChannelAttention(4)
        self.middle_attention = nn.ModuleList(
            [ChannelAttention(middle_channels) for _ in range(4)])
        self.fuser = HybridFuser(4, semantic_channels, c_hybrid)
        self.hybrid_projector = LatentProjector(c_hybrid, c_ls)
        self.middle_projectors = nn.ModuleList(
            [LatentProjector(middle_channels, c_ls) for _ in range(4)])

    @staticmethod
    def _pool(f: torch.Tensor, stride: int) -> torch.Tensor:
        if stride == 1:
            return f
        x = f.permute(2, 0, 1).unsqueeze(0)
        x = F.avg_pool2d(x, stride, ceil_mode=True)
        return x.squeeze(0).permute(1, 2, 0)

    @staticmethod
    def _unpool(f: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = f.permute(2, 0, 1).unsqueeze(0)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return x.squeeze(0).permute(1, 2, 0)

    def forward(
        self,
        fwd_flow: torch.Tensor,
        bwd_flow: torch.Tensor,
        middles: list[torch.Tensor],
        semantic: torch.Tensor,
    ) -> torch.Tensor:
        h, w = fwd_flow.shape[:2]
        flow_stack = torch.cat([fwd_flow, bwd_flow], dim=-1)
        if not self.use_semantic:
            semantic = torch.zeros_like(semantic)

        attended = [att(m) for att, m in zip(self.middle_attention, middles)]
        keys = [proj(m) for proj, m in zip(self.middle_projectors, attended)]

        if not self.enabled:
            return keys[0] + keys[1] + keys[2] + keys[3]

        flow_attn = self.flow_attention(flow_stack)
        hybrid = self.fuser(flow_attn, semantic)
        query = self.hybrid_projector(hybrid)

        if self.stride > 1:
            query = self._pool(query, self.stride)
            keys = [self._pool(k, self.stride) for k in keys]
        f_ga = guided_attention(query, keys, window=self.window)
        if self.stride > 1:
            f_ga = self._unpool(f_ga, h, w)
        return f_ga
