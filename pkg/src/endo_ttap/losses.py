"""Training losses for both curriculum stages.

Stage one (supervised on synthetic flow): an uncertainty loss whose optimum
log-variance equals the log of the robust flow error, a binary cross-entropy
occlusion loss, and a geometrically weighted sequence loss over the
backbone's refinement iterates.  Stage two: an unsupervised flow loss
(masked photometric plus edge-aware smoothness), a pseudo/ground-truth point
tracking loss, a trajectory-consistency calibration loss, and their weighted
combinations.

Point-level losses take predictions as ``frame -> {point_id: (x, y)}``
mappings (tensors or floats; see :func:`endo_ttap.core.tracks_to_frame_map`),
so trainer-produced positions keep their autograd graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .core import Frame, FlowField, OcclusionMap, UncertaintyMap, warp_with_flow
from .errors import NonFiniteInputError, ShapeMismatchError, UnmatchedLabelError

_CHARBONNIER_EPS = 1e-6
_CHARBONNIER_EXP = 0.45


@dataclass(frozen=True)
class LossWeights:
    eps1: float = 10.0       # stage-1 occlusion weight
    eps2: float = 1.2        # stage-2 tracking weight
    eps3: float = 10.0       # stage-2 occlusion weight
    omega: float = 0.6       # pseudo-label vs ground-truth balance
    gamma_seq: float = 0.8   # refinement sequence decay
    huber_delta: float = 1.0
    d_cons: float = 8.0      # consistency radius, px
    lambda_smooth: float = 0.05

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3", "omega", "gamma_seq",
                     "huber_delta", "d_cons", "lambda_smooth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"loss weight {name} must be positive")


def huber(r, delta: float = 1.0):
    """Quadratic-near-zero, linear-in-the-tail penalty of a residual r >= 0."""
    r = torch.as_tensor(r)
    return torch.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _vectors(flow) -> torch.Tensor:
    return flow.vectors if isinstance(flow, FlowField) else torch.as_tensor(flow)


def _pixels(frame) -> torch.Tensor:
    return frame.pixels if isinstance(frame, Frame) else torch.as_tensor(frame)


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteInputError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------

def loss_unc_stage1(flow, flow_gt, unc, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Aleatoric flow-error loss: huber residual over 2*variance plus
    0.5*log-variance, averaged over pixels."""
    x = _vectors(flow)
    x_star = _vectors(flow_gt)
    log_var = unc.log_variance if isinstance(unc, UncertaintyMap) else torch.as_tensor(unc)
    if x.shape != x_star.shape or x.shape[:2] != log_var.shape:
        raise ShapeMismatchError(
            f"loss_unc_stage1 shapes: flow {tuple(x.shape)}, gt {tuple(x_star.shape)}, "
            f"log_var {tuple(log_var.shape)}")
    for name, t in (("flow", x), ("flow_gt", x_star), ("log_variance", log_var)):
        _check_finite(name, t)
    residual = (x - x_star).pow(2).sum(dim=-1).sqrt()
    per_pixel = 0.5 * torch.exp(-log_var) * huber(residual, weights.huber_delta) \
        + 0.5 * log_var
    return per_pixel.mean()


def loss_occ_bce(occ, occ_gt) -> torch.Tensor:
    """Mean binary cross entropy between sigmoid(logits) and a 0/1 target."""
    logits = occ.logits if isinstance(occ, OcclusionMap) else torch.as_tensor(occ)
    target = torch.as_tensor(occ_gt, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ShapeMismatchError(
            f"loss_occ_bce shapes: logits {tuple(logits.shape)} vs target "
            f"{tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, target)


def loss_flow_stage1(seq, flow_gt, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Sequence loss over refinement iterates, late estimates weighted most.

    Per-pixel error is the L1 norm of the flow difference; estimate k of K
    carries weight gamma^(K-k).
    """
    if not seq:
        raise ValueError("refinement sequence must be non-empty")
    gt = _vectors(flow_gt)
    total = gt.new_zeros(())
    k_total = len(seq)
    for k, estimate in enumerate(seq, start=1):
        est = _vectors(estimate)
        if est.shape != gt.shape:
            raise ShapeMismatchError(
                f"sequence estimate {k} shape {tuple(est.shape)} != gt {tuple(gt.shape)}")
        l1 = (est - gt).abs().sum(dim=-1).mean()
        total = total + weights.gamma_seq ** (k_total - k) * l1
    return total


def loss_total_stage1(occ, unc, flow, weights: LossWeights = LossWeights()):
    """Stage-one combination: eps1 * occlusion + uncertainty + flow."""
    return weights.eps1 * occ + unc + flow


# ---------------------------------------------------------------------------
# stage two: unsupervised flow
# ---------------------------------------------------------------------------

def charbonnier(diff: torch.Tensor) -> torch.Tensor:
    """Robust photometric penalty, shifted so a zero residual scores zero."""
    offset = _CHARBONNIER_EPS ** _CHARBONNIER_EXP
    return (diff * diff + _CHARBONNIER_EPS) ** _CHARBONNIER_EXP - offset


def fb_occlusion_mask(fwd: torch.Tensor, bwd: torch.Tensor) -> torch.Tensor:
    """Forward-backward consistency occlusion mask (True = occluded)."""
    warped_bwd = warp_with_flow(bwd, fwd)
    lhs = (fwd + warped_bwd).pow(2).sum(dim=-1).sqrt()
    rhs = 0.05 * (fwd.pow(2).sum(dim=-1) + warped_bwd.pow(2).sum(dim=-1)) + 0.5
    return (lhs > rhs).detach()


def photometric_residual(a, b, fwd, bwd) -> torch.Tensor:
    """Per-pixel occlusion-masked reconstruction penalty (HxW)."""
    pa = _pixels(a)
    pb = _pixels(b)
    fv = _vectors(fwd)
    reconstructed = warp_with_flow(pb, fv)
    mask = 1.0 - fb_occlusion_mask(fv, _vectors(bwd)).to(pa.dtype)
    return charbonnier(pa - reconstructed).mean(dim=-1) * mask


def smoothness_loss(flow: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """First-order flow smoothness, downweighted across image edges."""
    img_dx = (image[:, 1:] - image[:, :-1]).abs().mean(dim=-1)
    img_dy = (image[1:] - image[:-1]).abs().mean(dim=-1)
    w_x = torch.exp(-10.0 * img_dx)
    w_y = torch.exp(-10.0 * img_dy)
    flow_dx = (flow[:, 1:] - flow[:, :-1]).abs().sum(dim=-1)
    flow_dy = (flow[1:] - flow[:-1]).abs().sum(dim=-1)
    return (w_x * flow_dx).mean() + (w_y * flow_dy).mean()


def loss_uflow_stage2(a, b, fwd, bwd, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Photometric term on the forward flow plus smoothness on both flows."""
    pa = _pixels(a)
    pb = _pixels(b)
    fv = _vectors(fwd)
    bv = _vectors(bwd)
    if pa.shape != pb.shape or fv.shape[:2] != pa.shape[:2] or bv.shape != fv.shape:
        raise ShapeMismatchError(
            f"loss_uflow_stage2 shapes: a {tuple(pa.shape)}, b {tuple(pb.shape)}, "
            f"fwd {tuple(fv.shape)}, bwd {tuple(bv.shape)}")

    reconstructed = warp_with_flow(pb, fv)
    mask = 1.0 - fb_occlusion_mask(fv, bv).to(pa.dtype)
    l_ph = (charbonnier(pa - reconstructed) * mask.unsqueeze(-1)).mean()
    l_sm = weights.lambda_smooth * (smoothness_loss(fv, pa) + smoothness_loss(bv, pb))
    return l_ph + l_sm


# ---------------------------------------------------------------------------
# stage two: point supervision
# ---------------------------------------------------------------------------

PositionMap = Mapping[int, Mapping[int, object]]  # frame -> {pid: (x, y)}


def _as_position(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.tensor([float(value[0]), float(value[1])], dtype=torch.float64)


def _point_distance(pred_pos, label_pos) -> torch.Tensor:
    p = _as_position(pred_pos)
    q = _as_position(label_pos).to(p.dtype)
    return (p - q).pow(2).sum().sqrt()


def _labels_of(pseudo) -> Mapping[int, Mapping[int, tuple[float, float]]]:
    return pseudo.labels if hasattr(pseudo, "labels") else pseudo


def _lookup(pred: PositionMap, frame: int, pid: int, what: str):
    try:
        return pred[frame][pid]
    except KeyError as exc:
        raise UnmatchedLabelError(
            f"unmatched label: no {what} for point {pid} at frame {frame}") from exc


def loss_track_stage2(
    pred: PositionMap,
    pseudo,
    gt_last: tuple[int, Mapping[int, tuple[float, float]]],
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Huber tracking loss: omega-weighted pseudo-label term over the labeled
    intermediate frames plus a ground-truth term at the last frame.

    Each term is a mean over the frames/points actually labeled; a frame set
    or point set that is empty contributes zero.
    """
    labels = _labels_of(pseudo)
    last_frame, last_labels = gt_last

    frame_means = []
    for frame in sorted(labels):
        if frame == last_frame or not labels[frame]:
            continue
        dists = [
            huber(_point_distance(_lookup(pred, frame, pid, "prediction"), pos),
                  weights.huber_delta)
            for pid, pos in sorted(labels[frame].items())
        ]
        frame_means.append(torch.stack(dists).mean())
    first = torch.stack(frame_means).mean() if frame_means else torch.tensor(0.0)

    if last_labels:
        last_terms = [
            huber(_point_distance(_lookup(pred, last_frame, pid, "prediction"), pos),
                  weights.huber_delta)
            for pid, pos in sorted(last_labels.items())
        ]
        second = torch.stack(last_terms).mean()
    else:
        second = torch.tensor(0.0)
    return weights.omega * first + second


def loss_cons_stage2(
    pred: PositionMap,
    pred_logits: PositionMap,
    pseudo,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Trajectory-consistency calibration: cross entropy between the
    sigmoided per-point uncertainty score and the strict within-radius
    indicator of the prediction against its pseudo-label."""
    labels = _labels_of(pseudo)
    frame_means = []
    for frame in sorted(labels):
        if not labels[frame]:
            continue
        terms = []
        for pid, pos in sorted(labels[frame].items()):
            dist = _point_distance(_lookup(pred, frame, pid, "prediction"), pos)
            indicator = 1.0 if float(dist) < weights.d_cons else 0.0
            logit = _lookup(pred_logits, frame, pid, "uncertainty score")
            logit = logit if isinstance(logit, torch.Tensor) else torch.tensor(float(logit))
            terms.append(F.binary_cross_entropy_with_logits(
                logit, torch.tensor(indicator, dtype=logit.dtype)))
        frame_means.append(torch.stack(terms).mean())
    if not frame_means:
        return torch.tensor(0.0)
    return torch.stack(frame_means).mean()


def loss_point_stage2(track, occ, cons, weights: LossWeights = LossWeights()):
    """Stage-two point combination: eps2 * track + eps3 * occlusion + cons."""
    return weights.eps2 * track + weights.eps3 * occ + cons
