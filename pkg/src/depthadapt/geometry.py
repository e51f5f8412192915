"""Pinhole camera model, rigid transforms, pixel correspondence, and warping.

Pixel convention: p = (u, v) with u along width (array column) and v along
height (array row). A correspondence maps a target-frame pixel with known
depth into the source frame:

    p_src ~ K T_{tgt->src} D(p_tgt) K^-1 homog(p_tgt)

Warping is inverse: the target frame is reconstructed by bilinearly sampling
the source image at the corresponding locations. There are two parallel
implementations: plain numpy for ground-truth/constant-depth work (cost
volumes use a detached pose), and tensor ops when gradients must reach the
depth map and the pose-network output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nnops import grid_sample_bilinear
from .tensor import Tensor

POSE_SCALE = 0.01  # applied to raw 6-vector outputs so early warps stay near identity
MIN_PROJECTED_DEPTH = 1e-3


def _snap(a: np.ndarray) -> np.ndarray:
    # same near-integer snap as grid_sample, so validity tests agree with it
    r = np.rint(a)
    return np.where(np.abs(a - r) < 1e-6, r, a)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0, -self.cx / self.fx],
                         [0, 1.0 / self.fy, -self.cy / self.fy],
                         [0, 0, 1.0]])

    def scaled(self, s: float) -> "Intrinsics":
        """Intrinsics for a feature grid at `s` times the image resolution."""
        return Intrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s)


@dataclass
class Pose:
    """SE(3) rigid transform: x' = R x + t, translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def pose_from_axis_angle(v: np.ndarray, invert: bool = False, scale: float = POSE_SCALE) -> Pose:
    """Rodrigues exponential of the scaled axis-angle half, scaled translation."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,) or not np.all(np.isfinite(v)):
        raise ValueError("pose vector must be a finite 6-vector")
    w = v[:3] * scale
    t = v[3:] * scale
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        R = np.eye(3)
    else:
        n = w / theta
        K = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
        R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
    pose = Pose(R, t)
    return pose.inverse() if invert else pose


def correspond(p: np.ndarray, depth: float, K: Intrinsics, pose: Pose):
    """Project one pixel with known depth into the other frame.

    Returns (pixel, projected_depth, valid); valid is False when the point
    lands behind the camera.
    """
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(p[0]), float(p[1])
    ray = K.inverse_matrix() @ np.array([u, v, 1.0])
    pt = pose.apply((ray * depth)[None])[0]
    z = pt[2]
    if z <= 0:
        return np.array([np.nan, np.nan]), z, False
    return np.array([K.fx * pt[0] / z + K.cx, K.fy * pt[1] / z + K.cy]), z, True


# -- depth hypotheses ------------------------------------------------------------


@dataclass
class DepthBins:
    d_min: float
    d_max: float
    count: int
    values: np.ndarray


def build_depth_bins(d_min: float, d_max: float, count: int) -> DepthBins:
    """`count` depths spanning [d_min, d_max], uniform in log space."""
    if not (0 < d_min < d_max):
        raise ValueError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    values = np.exp(np.linspace(np.log(d_min), np.log(d_max), count))
    values[0] = d_min
    values[-1] = d_max
    return DepthBins(d_min, d_max, count, values)


# -- dense warping ------------------------------------------------------------------


def _pixel_rays(H: int, W: int, K: Intrinsics, dtype):
    u = np.arange(W, dtype=dtype)[None, None, None, :]
    v = np.arange(H, dtype=dtype)[None, None, :, None]
    xn = (u - K.cx) / K.fx * np.ones((1, 1, H, 1), dtype=dtype)
    yn = (v - K.cy) / K.fy * np.ones((1, 1, 1, W), dtype=dtype)
    return xn, yn  # (1,1,H,W) normalized ray components


def _pose_arrays(pose, B: int, dtype):
    poses = [pose] * B if isinstance(pose, Pose) else list(pose)
    if len(poses) != B:
        raise ValueError(f"need {B} poses, got {len(poses)}")
    R = np.stack([p.rotation for p in poses]).astype(dtype)  # (B,3,3)
    t = np.stack([p.translation for p in poses]).astype(dtype)  # (B,3)
    return R.reshape(B, 3, 3, 1, 1), t.reshape(B, 3, 1, 1)


def warp_grid(depth: np.ndarray, pose, K: Intrinsics):
    """Numpy correspondence field. depth (B,1,H,W) -> grid (B,H,W,2), valid (B,1,H,W).

    `pose` is a single Pose shared by the batch or a sequence of B poses.
    """
    B, _, H, W = depth.shape
    xn, yn = _pixel_rays(H, W, K, depth.dtype)
    X = (xn * depth)[:, 0]
    Y = (yn * depth)[:, 0]
    Z = depth[:, 0]
    R, t = _pose_arrays(pose, B, depth.dtype)
    Xp = (R[:, 0, 0] * X + R[:, 0, 1] * Y + R[:, 0, 2] * Z + t[:, 0])[:, None]
    Yp = (R[:, 1, 0] * X + R[:, 1, 1] * Y + R[:, 1, 2] * Z + t[:, 1])[:, None]
    Zp = (R[:, 2, 0] * X + R[:, 2, 1] * Y + R[:, 2, 2] * Z + t[:, 2])[:, None]
    front = Zp > MIN_PROJECTED_DEPTH
    Zs = np.maximum(Zp, MIN_PROJECTED_DEPTH)
    up = _snap(K.fx * Xp / Zs + K.cx)
    vp = _snap(K.fy * Yp / Zs + K.cy)
    valid = front & (up >= 0) & (up <= W - 1) & (vp >= 0) & (vp <= H - 1)
    gx = up / (W - 1) * 2.0 - 1.0
    gy = vp / (H - 1) * 2.0 - 1.0
    grid = np.concatenate([gx, gy], axis=1).transpose(0, 2, 3, 1)
    return grid.astype(depth.dtype), valid


class PoseTensors:
    """Differentiable rigid transform: nine rotation entries plus translation,
    each a (B,1,1,1) tensor ready to broadcast over feature maps."""

    def __init__(self, r_entries, t_entries):
        self.r = r_entries  # [ [r00, r01, r02], [r10, ...], ... ]
        self.t = t_entries  # [t0, t1, t2]

    def detach_poses(self) -> list[Pose]:
        B = self.t[0].shape[0]
        out = []
        for b in range(B):
            R = np.array([[float(self.r[i][j].data[b, 0, 0, 0]) for j in range(3)]
                          for i in range(3)], dtype=np.float64)
            t = np.array([float(self.t[i].data[b, 0, 0, 0]) for i in range(3)], dtype=np.float64)
            out.append(Pose(R, t))
        return out


def pose_tensors_from_vector(v: Tensor, invert: bool = False,
                             scale: float = POSE_SCALE) -> PoseTensors:
    """Tensor Rodrigues map from a raw (B, 6) pose-network output.

    Uses 1 - cos(theta) = 2 sin^2(theta/2) so the quadratic term survives
    float32, and floors theta^2 so the zero vector maps to the identity with
    finite gradients.
    """
    B = v.shape[0]
    w = T.mul(T.narrow(v, 1, 0, 3), scale)
    t = T.mul(T.narrow(v, 1, 3, 3), scale)
    wx, wy, wz = (T.reshape(T.narrow(w, 1, i, 1), (B, 1, 1, 1)) for i in range(3))
    theta2 = T.add(T.reduce("sum", T.mul(w, w), dim=1, keepdims=True), 1e-24)
    theta = T.sqrt(theta2)
    A = T.reshape(T.div(T.sin(theta), theta), (B, 1, 1, 1))
    half_sin = T.sin(T.mul(theta, 0.5))
    Bc = T.reshape(T.div(T.mul(T.mul(half_sin, half_sin), 2.0), theta2), (B, 1, 1, 1))
    # R = I + A [w]x + Bc (w w^T - theta^2 I), assembled entry by entry
    th2 = T.reshape(theta2, (B, 1, 1, 1))
    one = Tensor(np.ones((1, 1, 1, 1), dtype=v.dtype))
    r00 = T.add(one, T.mul(Bc, T.sub(T.mul(wx, wx), th2)))
    r11 = T.add(one, T.mul(Bc, T.sub(T.mul(wy, wy), th2)))
    r22 = T.add(one, T.mul(Bc, T.sub(T.mul(wz, wz), th2)))
    r01 = T.add(T.mul(A, T.mul(wz, -1.0)), T.mul(Bc, T.mul(wx, wy)))
    r10 = T.add(T.mul(A, wz), T.mul(Bc, T.mul(wx, wy)))
    r02 = T.add(T.mul(A, wy), T.mul(Bc, T.mul(wx, wz)))
    r20 = T.add(T.mul(A, T.mul(wy, -1.0)), T.mul(Bc, T.mul(wx, wz)))
    r12 = T.add(T.mul(A, T.mul(wx, -1.0)), T.mul(Bc, T.mul(wy, wz)))
    r21 = T.add(T.mul(A, wx), T.mul(Bc, T.mul(wy, wz)))
    r = [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]]
    tv = [T.reshape(T.narrow(t, 1, i, 1), (B, 1, 1, 1)) for i in range(3)]
    if not invert:
        return PoseTensors(r, tv)
    rt = [[r[j][i] for j in range(3)] for i in range(3)]
    tinv = [T.mul(T.add(T.add(T.mul(rt[i][0], tv[0]), T.mul(rt[i][1], tv[1])),
                        T.mul(rt[i][2], tv[2])), -1.0)
            for i in range(3)]
    return PoseTensors(rt, tinv)


def warp_image(src: Tensor, depth: Tensor, pose: PoseTensors, K: Intrinsics,
               padding: str = "border"):
    """Reconstruct the target frame from `src` via depth + pose.

    Differentiable w.r.t. src, depth, and the pose tensors. Returns
    (warped (B,C,H,W), valid (B,1,H,W) bool array): valid marks in-bounds,
    in-front samples.
    """
    B, _, H, W = depth.shape
    xn, yn = _pixel_rays(H, W, K, depth.dtype)
    xn_t, yn_t = Tensor(xn), Tensor(yn)
    X = T.mul(xn_t, depth)
    Y = T.mul(yn_t, depth)
    Z = depth
    r, t = pose.r, pose.t
    Xp = T.add(T.add(T.mul(r[0][0], X), T.mul(r[0][1], Y)), T.add(T.mul(r[0][2], Z), t[0]))
    Yp = T.add(T.add(T.mul(r[1][0], X), T.mul(r[1][1], Y)), T.add(T.mul(r[1][2], Z), t[1]))
    Zp = T.add(T.add(T.mul(r[2][0], X), T.mul(r[2][1], Y)), T.add(T.mul(r[2][2], Z), t[2]))
    Zs = T.clamp(Zp, lo=MIN_PROJECTED_DEPTH)
    up = T.add(T.mul(T.div(Xp, Zs), K.fx), K.cx)
    vp = T.add(T.mul(T.div(Yp, Zs), K.fy), K.cy)
    gx = T.sub(T.mul(up, 2.0 / (W - 1)), 1.0)
    gy = T.sub(T.mul(vp, 2.0 / (H - 1)), 1.0)
    grid = T.concat([T.reshape(gx, (B, H, W, 1)), T.reshape(gy, (B, H, W, 1))], 3)
    warped = grid_sample_bilinear(src, grid, padding)
    ud, vd = _snap(up.data), _snap(vp.data)
    valid = ((Zp.data > MIN_PROJECTED_DEPTH)
             & (ud >= 0) & (ud <= W - 1)
             & (vd >= 0) & (vd <= H - 1))
    return warped, valid


def build_cost_volume(f0_t: Tensor, f0_tm1: Tensor, pose, K_quarter: Intrinsics,
                      bins: DepthBins) -> Tensor:
    """Plane-sweep matching cost between current and warped previous features.

    For each hypothesis depth the previous-frame features are warped into the
    current frame (border padding, detached pose) and compared with a
    channel-mean L1 difference; costs stack on the channel dim.
    """
    B, C, h, w = f0_t.shape
    costs = []
    for d in bins.values:
        depth_plane = np.full((B, 1, h, w), d, dtype=f0_t.data.dtype)
        grid, _ = warp_grid(depth_plane, pose, K_quarter)
        warped = grid_sample_bilinear(f0_tm1, Tensor(grid), "border")
        diff = T.abs_(T.sub(warped, f0_t))
        costs.append(T.reduce("mean", diff, dim=1, keepdims=True))
    return T.concat(costs, 1)
