"""Self-supervision losses: photometric reprojection with automasking,
edge-aware smoothness, and the teacher->student consistency scheme.

Masks (warp validity, automask, motion exclusion, teacher/student
disagreement) are computed on raw values and enter the graph only as
constants, so no gradient ever flows through mask construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nnops import mean_pool3x3
from .tensor import Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
IDENTITY_TIE_BREAK = 1e-5  # warped errors win exact ties against identity errors
_MASK_BIG = 1e4


@dataclass(frozen=True)
class LossWeights:
    ssim_alpha: float = 0.85
    smoothness_lambda: float = 1e-3
    consistency_weight: float = 1.0

    def __post_init__(self):
        if not (0 <= self.ssim_alpha <= 1):
            raise ValueError("ssim_alpha must be in [0, 1]")
        if self.smoothness_lambda < 0:
            raise ValueError("smoothness_lambda must be >= 0")
        if not (0 <= self.consistency_weight <= 1):
            raise ValueError("consistency_weight must be in [0, 1]")


def _mean_pool3(x: Tensor) -> Tensor:
    return mean_pool3x3(x)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity over 3x3 mean-pooled local stats."""
    mu_a = _mean_pool3(a)
    mu_b = _mean_pool3(b)
    mu_ab = T.mul(mu_a, mu_b)
    sigma_a = T.sub(_mean_pool3(T.mul(a, a)), T.mul(mu_a, mu_a))
    sigma_b = T.sub(_mean_pool3(T.mul(b, b)), T.mul(mu_b, mu_b))
    sigma_ab = T.sub(_mean_pool3(T.mul(a, b)), mu_ab)
    num = T.mul(T.add(T.mul(mu_ab, 2.0), SSIM_C1), T.add(T.mul(sigma_ab, 2.0), SSIM_C2))
    den = T.mul(T.add(T.add(T.mul(mu_a, mu_a), T.mul(mu_b, mu_b)), SSIM_C1),
                T.add(T.add(sigma_a, sigma_b), SSIM_C2))
    return T.div(num, den)


def photometric_error(pred: Tensor, target: Tensor, alpha: float = 0.85) -> Tensor:
    """alpha/2 (1 - SSIM) + (1 - alpha) |pred - target|, channel-meaned to (B,1,H,W)."""
    l1 = T.abs_(T.sub(pred, target))
    err = T.mul(l1, 1.0 - alpha)
    if alpha > 0:
        dssim = T.mul(T.sub(Tensor(np.ones(1, dtype=pred.dtype)), ssim(pred, target)), alpha / 2.0)
        err = T.add(err, dssim)
    return T.reduce("mean", err, dim=1, keepdims=True)


def reprojection_loss(target: Tensor, warps, identity_errors, alpha: float = 0.85,
                      exclusion_mask: np.ndarray | None = None,
                      extra_mask: np.ndarray | None = None):
    """Per-pixel minimum reprojection with automasking.

    warps: list of (warped, valid) per source frame; identity_errors: list of
    (B,1,H,W) arrays of photometric error of the unwarped sources (no
    gradient). Pixels whose best identity error beats every warped error are
    dropped (automask); exclusion_mask (true = drop) removes e.g. moving
    objects; extra_mask (true = keep) restricts supervision further. Returns
    (scalar loss, per-pixel mask actually averaged over).
    """
    errs = []
    any_valid = None
    for warped, valid in warps:
        e = photometric_error(warped, target, alpha)
        e = T.add(e, Tensor((~valid).astype(e.dtype) * _MASK_BIG))
        errs.append(e)
        any_valid = valid if any_valid is None else (any_valid | valid)
    stacked = T.concat(errs, 1)
    best = T.reduce("min", stacked, dim=1, keepdims=True)
    id_best = np.minimum.reduce([ie for ie in identity_errors]) + IDENTITY_TIE_BREAK
    mask = (best.data < id_best) & any_valid
    if exclusion_mask is not None:
        mask = mask & ~exclusion_mask
    if extra_mask is not None:
        mask = mask & extra_mask
    supervisable = any_valid if exclusion_mask is None else (any_valid & ~exclusion_mask)
    if not supervisable.any():
        raise ValueError("reprojection_loss: no valid pixels to supervise")
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=target.dtype)), mask
    loss = T.div(T.reduce("sum", T.mul(best, Tensor(mask.astype(best.dtype)))), count)
    return loss, mask


def identity_reprojection_errors(target: Tensor, sources, alpha: float = 0.85):
    """Photometric error of each unwarped source against the target, as data."""
    out = []
    for src in sources:
        e = photometric_error(src.detach(), target.detach(), alpha)
        out.append(e.data)
    return out


def smoothness_loss(disp: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    B, _, H, W = disp.shape
    mean_disp = T.reduce("mean", disp, dim=(2, 3), keepdims=True)
    d = T.div(disp, T.add(mean_disp, 1e-7))
    dx = T.abs_(T.sub(T.narrow(d, 3, 1, W - 1), T.narrow(d, 3, 0, W - 1)))
    dy = T.abs_(T.sub(T.narrow(d, 2, 1, H - 1), T.narrow(d, 2, 0, H - 1)))
    ix = np.mean(np.abs(image.data[:, :, :, 1:] - image.data[:, :, :, :-1]), axis=1, keepdims=True)
    iy = np.mean(np.abs(image.data[:, :, 1:, :] - image.data[:, :, :-1, :]), axis=1, keepdims=True)
    wx = Tensor(np.exp(-ix).astype(disp.dtype))
    wy = Tensor(np.exp(-iy).astype(disp.dtype))
    return T.add(T.reduce("mean", T.mul(dx, wx)), T.reduce("mean", T.mul(dy, wy)))


def consistency_mask(depth_student: np.ndarray, depth_teacher: np.ndarray) -> np.ndarray:
    """True where the two depths disagree by more than a relative factor 2.

    max((Ds - Dt)/Dt, (Dt - Ds)/Ds) > 1; symmetric and scale-invariant.
    """
    if np.any(depth_student <= 0) or np.any(depth_teacher <= 0):
        raise ValueError("consistency_mask requires positive depths")
    r = np.maximum((depth_student - depth_teacher) / depth_teacher,
                   (depth_teacher - depth_student) / depth_student)
    return r > 1.0


def distillation_loss(depth_student: Tensor, depth_teacher: Tensor, mask: np.ndarray) -> Tensor:
    """Mean |D_s - D_t| over masked pixels, teacher side detached."""
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=depth_student.dtype))
    diff = T.abs_(T.sub(depth_student, depth_teacher.detach()))
    return T.div(T.reduce("sum", T.mul(diff, Tensor(mask.astype(diff.dtype)))), count)


def student_total_loss(target: Tensor, student_disp: Tensor, student_depth: Tensor,
                       teacher_depth: Tensor, warps, identity_errors,
                       weights: LossWeights, image_for_smoothness: Tensor,
                       exclusion_mask: np.ndarray | None = None):
    """Reprojection over reliable pixels, distillation over unreliable ones,
    plus weighted smoothness. Returns (total, parts dict)."""
    m = consistency_mask(student_depth.data, teacher_depth.data)
    reproj, _ = reprojection_loss(target, warps, identity_errors, weights.ssim_alpha,
                                  exclusion_mask=exclusion_mask, extra_mask=~m)
    distill = distillation_loss(student_depth, teacher_depth, m)
    smooth = smoothness_loss(student_disp, image_for_smoothness)
    total = T.add(T.add(reproj, T.mul(distill, weights.consistency_weight)),
                  T.mul(smooth, weights.smoothness_lambda))
    return total, {"reprojection": reproj.item(), "distillation": distill.item(),
                   "smoothness": smooth.item(), "mask_fraction": float(m.mean())}
