"""Frozen flow backbone and semantic embedder interfaces with toy backends.

The toy flow backbone is a correlation block matcher: seeded random feature
convolutions, a coarse exhaustive search at stride 4, then a few local
refinement iterations at full resolution.  Alongside forward/backward flow it
exposes the four intermediate feature maps consumed by the attention fusion
stage (cost volume, recurrent hidden state, context, motion), each 32
channels at frame resolution.  All parameters are fixed at construction from
a recorded seed and are never updated by training.

The toy semantic embedder is a fixed random linear projection over 8x8
patches, bilinearly upsampled back to frame resolution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import Frame, FlowField
from .errors import EndoTtapError, FrameSizeMismatchError


@dataclass
class MiddleFeatureSet:
    """The four flow-backbone intermediates, each HxWxC at frame resolution."""

    cost_volume: torch.Tensor
    hidden_state: torch.Tensor
    context: torch.Tensor
    motion: torch.Tensor

    def as_list(self) -> list[torch.Tensor]:
        return [self.cost_volume, self.hidden_state, self.context, self.motion]


@dataclass
class FlowBackboneOutput:
    forward_flow: FlowField
    backward_flow: FlowField
    middles: MiddleFeatureSet
    refinement_sequence: list[FlowField]


def _seeded_tensor(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    t = torch.randn(*shape, generator=gen) * scale
    t.requires_grad_(False)
    return t


class ToyFlowBackbone:
    """Deterministic block-matching flow estimator with fixed random filters."""

    def __init__(
        self,
        seed: int = 0,
        feat_channels: int = 16,
        middle_channels: int = 32,
        coarse_stride: int = 4,
        coarse_radius: int = 4,
        refine_radius: int = 2,
        refine_iters: int = 4,
        temperature: float = 0.05,
    ):
        self.seed = seed
        self.feat_channels = feat_channels
        self.middle_channels = middle_channels
        self.coarse_stride = coarse_stride
        self.coarse_radius = coarse_radius
        self.refine_radius = refine_radius
        self.refine_iters = refine_iters
        self.temperature = temperature

        gen = torch.Generator().manual_seed(seed)
        c = feat_channels
        m = middle_channels
        n_local = (2 * refine_radius + 1) ** 2
        self._params = {
            "feat_w1": _seeded_tensor(gen, c, 3, 3, 3, scale=(2.0 / 27) ** 0.5),
            "feat_w2": _seeded_tensor(gen, c, c, 3, 3, scale=(2.0 / (9 * c)) ** 0.5),
            "ctx_w1": _seeded_tensor(gen, m, 3, 3, 3, scale=(2.0 / 27) ** 0.5),
            "ctx_w2": _seeded_tensor(gen, m, m, 3, 3, scale=(2.0 / (9 * m)) ** 0.5),
            "cost_proj": _seeded_tensor(gen, m, n_local, 1, 1, scale=(1.0 / n_local) ** 0.5),
            "motion_proj": _seeded_tensor(gen, m, 3, 1, 1, scale=0.5),
            "gru_wx": _seeded_tensor(gen, m, n_local + 2, 1, 1, scale=(1.0 / (n_local + 2)) ** 0.5),
            "gru_wh": _seeded_tensor(gen, m, m, 1, 1, scale=(0.5 / m) ** 0.5),
        }

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self._params)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode())
            digest.update(self._params[name].numpy().tobytes())
        return digest.hexdigest()

    # -- internals ----------------------------------------------------------

    @staticmethod
    def _center_normalize(x: torch.Tensor) -> torch.Tensor:
        # remove the per-channel spatial mean so pooled/smooth regions do not
        # collapse onto one direction, then unit-normalize for cosine scores
        x = x - x.mean(dim=(2, 3), keepdim=True)
        return F.normalize(x, dim=1)

    @staticmethod
    def _blur3(x: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)

    def _features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Raw centered feature map; normalization happens per use site."""
        x = pixels.permute(2, 0, 1).unsqueeze(0)  # 1x3xHxW
        x = F.conv2d(x, self._params["feat_w1"], padding=1).relu()
        x = F.conv2d(x, self._params["feat_w2"], padding=1)
        return x - x.mean(dim=(2, 3), keepdim=True)

    @staticmethod
    def _shift(x: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
        # sample x at (col+dx, row+dy) with zero padding outside
        _, _, h, w = x.shape
        pad_l, pad_r = max(-dx, 0), max(dx, 0)
        pad_t, pad_b = max(-dy, 0), max(dy, 0)
        padded = F.pad(x, (pad_l, pad_r, pad_t, pad_b))
        return padded[:, :, pad_t + dy:pad_t + dy + h, pad_l + dx:pad_l + dx + w]

    @staticmethod
    def _zero_motion_prior(corr: torch.Tensor, shifts: list[tuple[int, int]],
                           strength: float = 2e-3) -> torch.Tensor:
        # small preference for short shifts; breaks ties in textureless cells
        penalty = corr.new_tensor([abs(s[0]) + abs(s[1]) for s in shifts])
        return corr - strength * penalty.view(1, -1, 1, 1)

    def _argmax_flow(self, corr: torch.Tensor, shifts: list[tuple[int, int]],
                     scale: float) -> torch.Tensor:
        # hard winner-take-all; corr: 1 x n_shifts x h x w
        scored = self._zero_motion_prior(corr, shifts)
        idx = scored.argmax(dim=1)  # 1 x h x w
        table = corr.new_tensor(shifts)  # n x 2
        flow = table[idx]  # 1 x h x w x 2
        return flow.permute(0, 3, 1, 2) * scale

    def _refine_delta(self, corr: torch.Tensor, r: int) -> torch.Tensor:
        """Hard local argmax plus 1-D parabolic sub-pixel fit on each axis.

        ``corr`` is 1 x (side*side) x h x w laid out row-major over
        (dy, dx) in [-r, r]^2; returns a 1 x 2 x h x w pixel delta.
        """
        side = 2 * r + 1
        shifts = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        scored = self._zero_motion_prior(corr, shifts)
        _, _, h, w = corr.shape
        vol = corr.reshape(1, side, side, h, w)  # (1, dy, dx, h, w)
        flat = scored.argmax(dim=1)  # 1 x h x w
        iy = flat // side
        ix = flat % side

        def parabola(values_m, values_0, values_p):
            denom = values_m - 2.0 * values_0 + values_p
            offset = 0.5 * (values_m - values_p) / torch.where(
                denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
            # only trust the fit where the profile has clear negative curvature
            return torch.where(denom < -1e-3,
                               offset.clamp(-0.5, 0.5),
                               torch.zeros_like(offset))

        iy_c = iy.clamp(1, side - 2)
        ix_c = ix.clamp(1, side - 2)
        idx_b = torch.zeros_like(flat)

        def take(dy_off, dx_off):
            return vol[idx_b, iy_c + dy_off, ix_c + dx_off,
                       torch.arange(h).view(1, -1, 1), torch.arange(w).view(1, 1, -1)]

        sub_x = parabola(take(0, -1), take(0, 0), take(0, 1))
        sub_y = parabola(take(-1, 0), take(0, 0), take(1, 0))
        # no sub-pixel estimate when the peak sits on the window edge
        sub_x = torch.where((ix > 0) & (ix < side - 1), sub_x, torch.zeros_like(sub_x))
        sub_y = torch.where((iy > 0) & (iy < side - 1), sub_y, torch.zeros_like(sub_y))
        dx = (ix - r).to(corr.dtype) + sub_x
        dy = (iy - r).to(corr.dtype) + sub_y
        # when the zero shift already matches as well as the best candidate,
        # stay put: keeps aligned regions (e.g. identical frames) at zero flow
        c00 = vol[:, r, r]
        settled = c00 >= vol.amax(dim=(1, 2)) - 1e-4
        zero = torch.zeros_like(dx)
        dx = torch.where(settled, zero, dx)
        dy = torch.where(settled, zero, dy)
        return torch.stack([dx, dy], dim=1)

    def _correlate(self, fa: torch.Tensor, fb: torch.Tensor,
                   shifts: list[tuple[int, int]]) -> torch.Tensor:
        rows = [(fa * self._shift(fb, dx, dy)).sum(dim=1, keepdim=True)
                for dx, dy in shifts]
        return torch.cat(rows, dim=1)

    def _correlate_padded(self, fa: torch.Tensor, fb: torch.Tensor,
                          radius: int) -> torch.Tensor:
        # replicate-pad the key map so border pixels correlate against real
        # content instead of zeros; ties there resolve via the motion prior
        shifts = [(dx, dy)
                  for dy in range(-radius, radius + 1)
                  for dx in range(-radius, radius + 1)]
        fb_pad = F.pad(fb, (radius, radius, radius, radius), mode="replicate")
        h, w = fa.shape[2:]
        rows = []
        for dx, dy in shifts:
            window = fb_pad[:, :, radius + dy:radius + dy + h,
                            radius + dx:radius + dx + w]
            rows.append((fa * window).sum(dim=1, keepdim=True))
        return torch.cat(rows, dim=1)

    def _warp(self, x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        # x: 1xCxHxW, flow: 1x2xHxW in pixels; clamp-to-edge sampling
        _, _, h, w = x.shape
        ys, xs = torch.meshgrid(torch.arange(h, dtype=x.dtype),
                                torch.arange(w, dtype=x.dtype), indexing="ij")
        gx = (xs + flow[0, 0]).clamp(0, w - 1) / max(w - 1, 1) * 2 - 1
        gy = (ys + flow[0, 1]).clamp(0, h - 1) / max(h - 1, 1) * 2 - 1
        grid = torch.stack([gx, gy], dim=-1).unsqueeze(0)
        return F.grid_sample(x, grid, mode="bilinear", align_corners=True)

    def _estimate(self, raw_a: torch.Tensor, raw_b: torch.Tensor):
        """Coarse-to-fine flow a->b plus per-iteration estimates and extras."""
        stride = self.coarse_stride
        ca = self._center_normalize(self._blur3(F.avg_pool2d(raw_a, stride)))
        cb = self._center_normalize(self._blur3(F.avg_pool2d(raw_b, stride)))
        r = self.coarse_radius
        shifts = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        corr = self._correlate(ca, cb, shifts)
        # spatial cost aggregation (neighborhood consensus) plus a global
        # translation prior: cells without valid evidence, e.g. the
        # zero-padded border bands, inherit the dominant image motion
        corr = self._blur3(corr) + 0.35 * corr.mean(dim=(2, 3), keepdim=True)
        coarse = self._argmax_flow(corr, shifts, scale=float(stride))
        flow = F.interpolate(coarse, size=raw_a.shape[2:], mode="bilinear",
                             align_corners=False)

        # smoothed fine features give a correlation cone wide enough for
        # stable sub-pixel soft-argmax
        fa = F.normalize(self._blur3(raw_a), dim=1)
        fb = F.normalize(self._blur3(raw_b), dim=1)

        h, w = raw_a.shape[2:]
        hidden = raw_a.new_zeros(1, self.middle_channels, h, w)
        sequence = []
        local_corr = None
        for it in range(self.refine_iters):
            # a wider first search absorbs coarse quantization error; later
            # iterations polish at the configured radius
            rr = self.refine_radius * 2 if it == 0 else self.refine_radius
            warped = self._warp(fb, flow)
            local_corr = self._correlate_padded(fa, warped, rr)
            delta = self._refine_delta(local_corr, rr)
            flow = flow + delta
            flow = self._blur3(flow)
            gru_in = torch.cat([self._local_corr_fixed(local_corr, rr), flow * 0.1], dim=1)
            hidden = torch.tanh(F.conv2d(gru_in, self._params["gru_wx"])
                                + F.conv2d(hidden, self._params["gru_wh"]))
            sequence.append(flow)
        assert local_corr is not None
        return flow, sequence, self._local_corr_fixed(local_corr, self.refine_radius), hidden

    def _local_corr_fixed(self, corr: torch.Tensor, radius: int) -> torch.Tensor:
        """Crop a (2r+1)^2 correlation volume to the configured radius."""
        rr = self.refine_radius
        if radius == rr:
            return corr
        side = 2 * radius + 1
        _, _, h, w = corr.shape
        vol = corr.reshape(1, side, side, h, w)
        lo, hi = radius - rr, radius + rr + 1
        return vol[:, lo:hi, lo:hi].reshape(1, (2 * rr + 1) ** 2, h, w)

    # -- public api ---------------------------------------------------------

    def compute_flow_features(self, a: Frame, b: Frame) -> FlowBackboneOutput:
        if a.pixels.shape != b.pixels.shape:
            raise FrameSizeMismatchError(
                f"frame size mismatch: {tuple(a.pixels.shape)} vs {tuple(b.pixels.shape)}")
        with torch.no_grad():
            fa = self._features(a.pixels)
            fb = self._features(b.pixels)
            fwd, seq, local_corr, hidden = self._estimate(fa, fb)
            bwd, _, _, _ = self._estimate(fb, fa)

            cost = F.conv2d(local_corr, self._params["cost_proj"])
            ctx = F.conv2d(a.pixels.permute(2, 0, 1).unsqueeze(0),
                           self._params["ctx_w1"], padding=1).relu()
            ctx = F.conv2d(ctx, self._params["ctx_w2"], padding=1)
            mag = fwd.pow(2).sum(dim=1, keepdim=True).sqrt()
            motion = torch.tanh(F.conv2d(torch.cat([fwd * 0.2, mag * 0.2], dim=1),
                                         self._params["motion_proj"]))

        def to_hwc(t: torch.Tensor) -> torch.Tensor:
            return t.squeeze(0).permute(1, 2, 0).contiguous()

        middles = MiddleFeatureSet(
            cost_volume=to_hwc(cost),
            hidden_state=to_hwc(hidden),
            context=to_hwc(ctx),
            motion=to_hwc(motion),
        )
        seq_fields = [
            FlowField(to_hwc(f), source_index=a.index, target_index=b.index)
            for f in seq[:-1]
        ]
        forward_field = FlowField(to_hwc(fwd), source_index=a.index,
                                  target_index=b.index)
        seq_fields.append(forward_field)
        backward_field = FlowField(to_hwc(bwd), source_index=b.index,
                                   target_index=a.index)
        return FlowBackboneOutput(
            forward_flow=forward_field,
            backward_flow=backward_field,
            middles=middles,
            refinement_sequence=seq_fields,
        )


@dataclass
class SemanticEmbedding:
    features: torch.Tensor  # HxWxC at frame resolution


class ToySemanticEmbedder:
    """Fixed random linear projection over non-overlapping patches."""

    def __init__(self, seed: int = 0, patch: int = 8, channels: int = 64):
        self.seed = seed
        self.patch = patch
        self.channels = channels
        gen = torch.Generator().manual_seed(seed)
        dim = patch * patch * 3
        self.projection = _seeded_tensor(gen, dim, channels, scale=dim ** -0.5)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.projection.numpy().tobytes())
        return digest.hexdigest()

    def embed_semantic(self, a: Frame) -> SemanticEmbedding:
        with torch.no_grad():
            h, w = a.height, a.width
            p = self.patch
            pad_h = (-h) % p
            pad_w = (-w) % p
            x = a.pixels.permute(2, 0, 1).unsqueeze(0)
            if pad_h or pad_w:
                x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
            patches = F.unfold(x, kernel_size=p, stride=p)  # 1 x (3*p*p) x n
            gh, gw = x.shape[2] // p, x.shape[3] // p
            feats = patches.squeeze(0).t() @ self.projection  # n x C
            grid = feats.t().reshape(1, self.channels, gh, gw)
            up = F.interpolate(grid, scale_factor=p, mode="bilinear",
                               align_corners=False)
            up = up[:, :, :h, :w]
        return SemanticEmbedding(features=up.squeeze(0).permute(1, 2, 0).contiguous())


# ---------------------------------------------------------------------------
# backend selection seam
# ---------------------------------------------------------------------------

_FLOW_BACKENDS = {"toy": ToyFlowBackbone}
_EMBEDDER_BACKENDS = {"toy": ToySemanticEmbedder}


def register_flow_backend(kind: str, factory) -> None:
    _FLOW_BACKENDS[kind] = factory


def register_embedder_backend(kind: str, factory) -> None:
    _EMBEDDER_BACKENDS[kind] = factory


def make_flow_backbone(kind: str = "toy", **kwargs) -> ToyFlowBackbone:
    if kind not in _FLOW_BACKENDS:
        raise EndoTtapError(
            f"unknown flow backbone kind {kind!r}; registered: {sorted(_FLOW_BACKENDS)}")
    return _FLOW_BACKENDS[kind](**kwargs)


def make_semantic_embedder(kind: str = "toy", **kwargs) -> ToySemanticEmbedder:
    if kind not in _EMBEDDER_BACKENDS:
        raise EndoTtapError(
            f"unknown embedder kind {kind!r}; registered: {sorted(_EMBEDDER_BACKENDS)}")
    return _EMBEDDER_BACKENDS[kind](**kwargs)
