"""Central finite-difference verification of analytic gradients.

The numeric side perturbs raw numpy buffers in place, so the closure handed to
`numeric_gradient` must recompute the forward value from those buffers on every
call. Checks run in float64; relative error uses a floored denominator so that
near-zero gradient pairs compare by absolute error.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_EPS = 1e-4
_REL_FLOOR = 1e-6


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# -- the verification suite -------------------------------------------------------

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _check(build, leaves, eps=DEFAULT_EPS) -> float:
    """build() -> scalar loss Tensor over `leaves` (requires_grad tensors);
    returns the worst relative error across all leaf gradients."""
    from .tensor import Tensor

    for t in leaves:
        t.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(lambda: float(build().data.reshape(-1)[0]), t.data, eps)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    from .tensor import Tensor

    return Tensor(rng.uniform(lo, hi, shape), dtype=np.float64, requires_grad=True)


def run_suite(seed: int = 0, with_network: bool = True) -> dict:
    """Finite-difference-check every differentiable primitive plus the
    end-to-end loss pipeline; returns {check_name: max relative error}."""
    from . import nnops
    from . import tensor as T
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    report = {}

    def checked(name, op_fn, leaves):
        # fixed projection coefficients: the numeric oracle must see the same
        # scalar function on every evaluation
        co = Tensor(rng.normal(size=op_fn().shape), dtype=np.float64)
        report[name] = _check(lambda: T.reduce("sum", T.mul(op_fn(), co)), leaves)

    # elementwise, broadcasting included; inputs kept away from kinks
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4,), lo=0.5, hi=1.5)
    pos = _leaf(rng, (3, 4), lo=0.4, hi=2.0)
    checked("add", lambda: T.add(a, b), (a, b))
    checked("sub", lambda: T.sub(a, b), (a, b))
    checked("mul", lambda: T.mul(a, b), (a, b))
    checked("div", lambda: T.div(a, b), (a, b))
    checked("exp", lambda: T.exp(a), (a,))
    checked("log", lambda: T.log(pos), (pos,))
    checked("sqrt", lambda: T.sqrt(pos), (pos,))
    checked("sin", lambda: T.sin(a), (a,))
    checked("cos", lambda: T.cos(a), (a,))
    checked("sigmoid", lambda: T.sigmoid(a), (a,))
    checked("gelu", lambda: T.gelu(a), (a,))
    # kinked ops: sample away from the kink
    far = Tensor(np.where(np.abs(a.data) < 0.05, 0.3, a.data), dtype=np.float64, requires_grad=True)
    far2 = Tensor(far.data + np.where(rng.uniform(size=a.shape) < 0.5, 0.3, -0.3),
                  dtype=np.float64, requires_grad=True)
    checked("abs", lambda: T.abs_(far), (far,))
    checked("relu", lambda: T.relu(far), (far,))
    checked("min2", lambda: T.min2(far, far2), (far, far2))
    checked("max2", lambda: T.max2(far, far2), (far, far2))
    checked("clamp", lambda: T.clamp(far, lo=-0.8, hi=0.8), (far,))

    # reductions and structure
    checked("reduce_mean", lambda: T.reduce("mean", a, dim=1), (a,))
    checked("reduce_sum", lambda: T.reduce("sum", a, dim=0, keepdims=True), (a,))
    checked("reduce_min", lambda: T.reduce("min", far2, dim=1), (far2,))
    other = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    checked("reshape_narrow_concat",
            lambda: T.concat([T.narrow(T.reshape(a, (4, 3)), 0, 1, 2), other], 0), (a,))

    # conv: dense, strided, depthwise
    x = _leaf(rng, (2, 3, 8, 8))
    w = _leaf(rng, (4, 3, 3, 3))
    bias = _leaf(rng, (4,))
    checked("conv2d", lambda: nnops.conv2d(x, w, bias, 1, 1), (x, w, bias))
    checked("conv2d_stride2", lambda: nnops.conv2d(x, w, bias, 2, 1), (x, w, bias))
    xd = _leaf(rng, (2, 4, 6, 6))
    wd = _leaf(rng, (4, 1, 3, 3))
    checked("conv2d_depthwise", lambda: nnops.conv2d(xd, wd, None, 1, 1, groups=4), (xd, wd))

    # batch norm, both modes
    xb = _leaf(rng, (2, 4, 5, 5))
    state = nnops.BatchNormState(4, dtype=np.float64)
    state.gamma.data = rng.normal(1.0, 0.2, 4)
    state.beta.data = rng.normal(0.0, 0.2, 4)
    checked("batchnorm_train",
            lambda: nnops.batchnorm2d(xb, state, "train", update_running=False),
            (xb, state.gamma, state.beta))
    state.running_mean = rng.normal(0, 0.5, 4)
    state.running_var = rng.uniform(0.5, 2.0, 4)
    checked("batchnorm_eval", lambda: nnops.batchnorm2d(xb, state, "eval"),
            (xb, state.gamma, state.beta))

    # bilinear sampling: grid points kept off the pixel lattice and borders
    xs = _leaf(rng, (1, 2, 6, 6))
    px = np.floor(rng.uniform(0, 4.0, (1, 5, 5))) + rng.uniform(0.2, 0.8, (1, 5, 5))
    py = np.floor(rng.uniform(0, 4.0, (1, 5, 5))) + rng.uniform(0.2, 0.8, (1, 5, 5))
    grid = Tensor(np.stack([px / 5 * 2 - 1, py / 5 * 2 - 1], axis=-1),
                  dtype=np.float64, requires_grad=True)
    checked("grid_sample_border", lambda: nnops.grid_sample_bilinear(xs, grid, "border"), (xs, grid))
    checked("grid_sample_zeros", lambda: nnops.grid_sample_bilinear(xs, grid, "zeros"), (xs, grid))

    checked("upsample_bilinear", lambda: nnops.upsample_bilinear(xs, 9, 11), (xs,))
    checked("mean_pool3x3", lambda: nnops.mean_pool3x3(xs), (xs,))

    # pose map and the full loss pipeline on 8x8 frames
    report["pose_exp_map"] = _pose_check(rng)
    report["loss_pipeline_8x8"] = _pipeline_check(rng)
    if with_network:
        report["network_params_32x32"] = _network_check(rng)
    return report


def _pose_check(rng) -> float:
    from . import tensor as T
    from .geometry import pose_tensors_from_vector
    from .tensor import Tensor

    v = Tensor(rng.normal(0, 1.0, (2, 6)), dtype=np.float64, requires_grad=True)
    co = rng.normal(size=(2, 1, 1, 1))

    def build():
        p = pose_tensors_from_vector(v, invert=True)
        parts = [T.mul(e, Tensor(co, dtype=np.float64)) for row in p.r for e in row]
        parts += [T.mul(e, Tensor(co, dtype=np.float64)) for e in p.t]
        total = parts[0]
        for q in parts[1:]:
            total = T.add(total, q)
        return T.reduce("sum", total)

    return _check(build, (v,))


def _pipeline_check(rng) -> float:
    """Teacher-style loss (reprojection + smoothness + distillation) on 8x8
    inputs, differentiated w.r.t. disparity logits and the raw pose vector."""
    from . import losses as L
    from . import tensor as T
    from .geometry import Intrinsics, pose_tensors_from_vector, warp_image
    from .networks import disparity_to_depth
    from .tensor import Tensor

    H = W = 8
    K = Intrinsics(8.0, 8.0, (W - 1) / 2, (H - 1) / 2)
    imgs = [Tensor(rng.uniform(0.1, 0.9, (1, 3, H, W)), dtype=np.float64) for _ in range(3)]
    logits = Tensor(rng.normal(0, 0.5, (1, 1, H, W)), dtype=np.float64, requires_grad=True)
    vpose = Tensor(rng.normal(0, 1.0, (2, 6)), dtype=np.float64, requires_grad=True)
    teacher_depth = Tensor(rng.uniform(5, 15, (1, 1, H, W)), dtype=np.float64)
    weights = L.LossWeights()

    def build():
        disp, depth = disparity_to_depth(logits)
        p1 = pose_tensors_from_vector(T.narrow(vpose, 0, 0, 1), invert=True)
        p2 = pose_tensors_from_vector(T.narrow(vpose, 0, 1, 1))
        warps = [warp_image(imgs[0], depth, p1, K), warp_image(imgs[2], depth, p2, K)]
        id_errs = L.identity_reprojection_errors(imgs[1], [imgs[0], imgs[2]], weights.ssim_alpha)
        reproj, _ = L.reprojection_loss(imgs[1], warps, id_errs, weights.ssim_alpha)
        smooth = L.smoothness_loss(disp, imgs[1])
        mask = L.consistency_mask(depth.data, teacher_depth.data)
        distill = L.distillation_loss(depth, teacher_depth, mask)
        return T.add(T.add(reproj, T.mul(smooth, weights.smoothness_lambda)),
                     T.mul(distill, weights.consistency_weight))

    return _check(build, (logits, vpose))


def _network_check(rng, n_entries: int = 10) -> float:
    """Spot-check loss gradients w.r.t. sampled network parameters at 32x32
    (the smallest legal encoder input)."""
    from . import losses as L
    from . import tensor as T
    from .adapters import AdapterConfig
    from .geometry import Intrinsics, pose_tensors_from_vector, warp_image
    from .networks import EncoderConfig, build_model
    from .tensor import Tensor

    cfg = EncoderConfig(stage_channels=(4, 6, 8, 10))
    model = build_model(cfg, AdapterConfig(ratio=0.5), seed=7, dtype=np.float64)
    model.set_bn_updates(False)
    imgs = [Tensor(rng.uniform(0.1, 0.9, (1, 3, 32, 32)), dtype=np.float64) for _ in range(3)]
    K = Intrinsics(32.0, 32.0, 15.5, 15.5)
    weights = L.LossWeights()

    def build():
        v1 = model.pose.forward(imgs[0], imgs[1])
        v2 = model.pose.forward(imgs[1], imgs[2])
        out = model.teacher.forward(imgs[1])
        warps = [warp_image(imgs[0], out["depth"], pose_tensors_from_vector(v1, invert=True), K),
                 warp_image(imgs[2], out["depth"], pose_tensors_from_vector(v2), K)]
        id_errs = L.identity_reprojection_errors(imgs[1], [imgs[0], imgs[2]], weights.ssim_alpha)
        reproj, _ = L.reprojection_loss(imgs[1], warps, id_errs, weights.ssim_alpha)
        return T.add(reproj, T.mul(L.smoothness_loss(out["disp"], imgs[1]),
                                   weights.smoothness_lambda))

    params = [p for _, p in model.named_parameters()]
    loss = build()
    loss.backward()
    picks = rng.choice(len(params), size=min(n_entries, len(params)), replace=False)
    worst = 0.0
    for pi in picks:
        p = params[pi]
        flat_idx = int(rng.integers(p.tensor.size))
        analytic = (p.tensor.grad.reshape(-1)[flat_idx]
                    if p.tensor.grad is not None else 0.0)
        flat = p.tensor.data.reshape(-1)
        orig = flat[flat_idx]
        eps = DEFAULT_EPS
        flat[flat_idx] = orig + eps
        fp = float(build().data)
        flat[flat_idx] = orig - eps
        fm = float(build().data)
        flat[flat_idx] = orig
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, max_rel_error(np.array([analytic]), np.array([numeric])))
    return worst


def suite_passes(report: dict) -> bool:
    for name, err in report.items():
        tol = END_TO_END_TOL if name in ("loss_pipeline_8x8", "network_params_32x32") else PRIMITIVE_TOL
        if err >= tol:
            return False
    return True
