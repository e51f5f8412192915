"""Deterministic synthetic monocular video: a billboard world.

Each scene is a textured far plane plus fronto-parallel textured rectangles at
fixed metric depths, rasterized through the pinhole model with painter's
occlusion. The camera translates (no rotation), which keeps every billboard an
axis-aligned image rectangle with exact analytic depth. Dynamic objects
translate laterally between frames, violating the camera-only correspondence
exactly on their pixels; textures are anchored to each object so static
content satisfies it.

Directory layout: <root>/<variant>/<index>/{tm1.ppm, t.ppm, tp1.ppm,
depth.pfm, motion.pfm, meta.json} with a manifest.json per variant.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose
from .imageio import read_pfm, read_ppm, write_pfm, write_ppm

GENERATOR_VERSION = "1"
DEPTH_FLOOR, DEPTH_CEILING = 0.5, 80.0  # all content lives strictly inside
MIN_TEXTURE_CELL_PX = 6.0


def worker_count() -> int:
    cap = os.environ.get("PPEA_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


@dataclass
class Billboard:
    center_x: float  # world meters at the billboard's depth plane
    center_y: float
    half_w: float
    half_h: float
    depth: float  # world z (camera starts at z = 0)
    tex_seed: int
    velocity_px: float = 0.0  # lateral motion, pixels per frame at this depth


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    intrinsics: Intrinsics
    bg_depth_range: tuple
    bg_depth: float
    bg_tex_seed: int
    objects: list = field(default_factory=list)
    cam_positions: np.ndarray = None  # (3, 3): frames t-1, t, t+1

    def frame_pose(self, k: int) -> Pose:
        """World -> camera-k transform (camera never rotates)."""
        return Pose(np.eye(3), -self.cam_positions[k])

    def relative_pose(self, k_from: int, k_to: int) -> Pose:
        """Maps camera-frame points of k_from into camera k_to."""
        return Pose(np.eye(3), self.cam_positions[k_from] - self.cam_positions[k_to])


def _hash32(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _lattice_values(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    # integer hash -> [0, 1); vectorized, platform-independent
    seed_term = np.uint64((seed * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF)
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
         ^ seed_term)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xD6E8FEB86659FD93)
    h ^= h >> np.uint64(27)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x: np.ndarray, y: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1]; C1, so bilinear
    resampling of the rendered image stays accurate."""
    gx = x / cell
    gy = y / cell
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    v00 = _lattice_values(ix, iy, seed)
    v10 = _lattice_values(ix + 1, iy, seed)
    v01 = _lattice_values(ix, iy + 1, seed)
    v11 = _lattice_values(ix + 1, iy + 1, seed)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def _texture(x: np.ndarray, y: np.ndarray, depth: float, fx: float, seed: int) -> np.ndarray:
    """RGB texture sampled at world coords; cell size scales with depth so the
    projected pattern stays band-limited (>= MIN_TEXTURE_CELL_PX pixels)."""
    cell = MIN_TEXTURE_CELL_PX * depth / fx
    base = _lattice_values(np.array([seed]), np.array([7]), 11)[0] * 0.4 + 0.3
    out = np.empty(x.shape + (3,), dtype=np.float64)
    for c in range(3):
        n1 = _value_noise(x, y, cell, _hash32(seed, c, 0))
        n2 = _value_noise(x, y, cell * 2.7, _hash32(seed, c, 1))
        chan_off = (_lattice_values(np.array([seed]), np.array([c + 13]), 5)[0] - 0.5) * 0.25
        out[..., c] = base + chan_off + (0.55 * n1 + 0.45 * n2 - 0.5) * 0.6
    return np.clip(out, 0.02, 0.98)


def random_scene(seed: int, variant: str, height: int, width: int,
                 intrinsics: Intrinsics | None = None, object_count: int | None = None) -> SceneSpec:
    """Deterministic scene sample. Static variant: zero velocities; dynamic:
    at least 30% of objects move laterally."""
    if variant not in ("static", "dynamic"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    K = intrinsics or default_intrinsics(height, width)
    # shallow scenes, small camera steps, and a dataset-consistent motion
    # direction (a rig convention, as in driving data): true pixel shifts stay
    # within the few-pixel reach of bilinear photometric gradients and the
    # pose network does not have to disambiguate direction per scene early on
    bg_range = (15.0, 30.0)
    bg_depth = float(rng.uniform(*bg_range))
    n_obj = object_count if object_count is not None else int(rng.integers(4, 9))
    step = np.array([rng.uniform(0.05, 0.1), rng.uniform(-0.015, 0.015), rng.uniform(0.0, 0.06)])
    cam = np.stack([step * (k - 1) for k in range(3)])
    objects = []
    n_moving = max(1, int(np.ceil(0.3 * n_obj))) if variant == "dynamic" else 0
    for i in range(n_obj):
        depth = float(rng.uniform(3.5, 12.0))
        size_px = rng.uniform(22, 70)
        half_w = float(size_px * depth / K.fx / 2)
        half_h = float(rng.uniform(18, 50) * depth / K.fy / 2)
        u = rng.uniform(0.12 * width, 0.88 * width)
        v = rng.uniform(0.15 * height, 0.85 * height)
        cx_w = (u - K.cx) / K.fx * depth
        cy_w = (v - K.cy) / K.fy * depth
        vel = 0.0
        if i < n_moving:
            vel = float(rng.uniform(1.5, 4.0) * (1 if rng.uniform() < 0.5 else -1))
        objects.append(Billboard(cx_w, cy_w, half_w, half_h, depth, _hash32(seed, "obj", i), vel))
    return SceneSpec(seed, height, width, K, bg_range, bg_depth, _hash32(seed, "bg"),
                     objects, cam)


def default_intrinsics(height: int, width: int) -> Intrinsics:
    f = 0.58 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def render_scene(spec: SceneSpec, frame_index: int):
    """Rasterize one frame: (image (H,W,3) in [0,1], depth (H,W), motion (H,W) bool)."""
    H, W, K = spec.height, spec.width, spec.intrinsics
    if H < 1 or W < 1:
        raise ValueError("degenerate image size")
    cam = spec.cam_positions[frame_index]
    u = np.arange(W, dtype=np.float64)[None, :]
    v = np.arange(H, dtype=np.float64)[:, None]

    z_bg = spec.bg_depth - cam[2]
    xw = (u - K.cx) / K.fx * z_bg + cam[0] + np.zeros((H, 1))
    yw = (v - K.cy) / K.fy * z_bg + cam[1] + np.zeros((1, W))
    image = _texture(xw, yw, spec.bg_depth, K.fx, spec.bg_tex_seed)
    depth = np.full((H, W), z_bg, dtype=np.float64)
    motion = np.zeros((H, W), dtype=bool)

    dt = frame_index - 1
    for obj in sorted(spec.objects, key=lambda o: o.depth, reverse=True):
        z = obj.depth - cam[2]
        if z <= DEPTH_FLOOR / 2:
            continue
        ox = obj.center_x + obj.velocity_px * obj.depth / K.fx * dt
        u0 = K.fx * (ox - obj.half_w - cam[0]) / z + K.cx
        u1 = K.fx * (ox + obj.half_w - cam[0]) / z + K.cx
        v0 = K.fy * (obj.center_y - obj.half_h - cam[1]) / z + K.cy
        v1 = K.fy * (obj.center_y + obj.half_h - cam[1]) / z + K.cy
        ua, ub = max(0, int(np.ceil(u0))), min(W - 1, int(np.floor(u1)))
        va, vb = max(0, int(np.ceil(v0))), min(H - 1, int(np.floor(v1)))
        if ua > ub or va > vb:
            continue
        uu = np.arange(ua, ub + 1, dtype=np.float64)[None, :]
        vv = np.arange(va, vb + 1, dtype=np.float64)[:, None]
        # texture anchored to the object so it travels with it
        x_loc = (uu - K.cx) / K.fx * z + cam[0] - ox + np.zeros((vb - va + 1, 1))
        y_loc = (vv - K.cy) / K.fy * z + cam[1] - obj.center_y + np.zeros((1, ub - ua + 1))
        image[va:vb + 1, ua:ub + 1] = _texture(x_loc, y_loc, obj.depth, K.fx, obj.tex_seed)
        depth[va:vb + 1, ua:ub + 1] = z
        motion[va:vb + 1, ua:ub + 1] = obj.velocity_px != 0.0
    return image, depth, motion


@dataclass
class FrameTriplet:
    images: list  # three (3, H, W) float32 arrays in [0, 1]: t-1, t, t+1
    gt_depth: np.ndarray  # (H, W) of frame t
    motion_mask: np.ndarray  # (H, W) bool of frame t
    pose_t_to_tm1: Pose
    pose_t_to_tp1: Pose
    intrinsics: Intrinsics


def render_triplet(spec: SceneSpec) -> FrameTriplet:
    frames = [render_scene(spec, k) for k in range(3)]
    images = [f[0].transpose(2, 0, 1).astype(np.float32) for f in frames]
    return FrameTriplet(images, frames[1][1].astype(np.float32), frames[1][2],
                        spec.relative_pose(1, 0), spec.relative_pose(1, 2), spec.intrinsics)


# -- dataset generation and I/O ------------------------------------------------------


def _write_triplet(root: Path, index: int, spec: SceneSpec) -> dict:
    d = root / str(index)
    d.mkdir(parents=True, exist_ok=True)
    names = ["tm1.ppm", "t.ppm", "tp1.ppm"]
    frames = [render_scene(spec, k) for k in range(3)]
    for name, (img, _, _) in zip(names, frames):
        write_ppm(d / name, img)
    write_pfm(d / "depth.pfm", frames[1][1].astype(np.float32))
    write_pfm(d / "motion.pfm", frames[1][2].astype(np.float32))
    meta = {
        "seed": spec.seed,
        "bg_depth": spec.bg_depth,
        "cam_positions": spec.cam_positions.tolist(),
        "objects": [{"depth": o.depth, "velocity_px": o.velocity_px} for o in spec.objects],
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return {"dir": str(index)}


def generate_dataset(out_root, variant: str, count: int, seed: int,
                     height: int = 64, width: int = 192) -> Path:
    """Write `count` triplets plus a manifest; deterministic from `seed`.

    Triplets are independent (each derives its own seed), so generation runs
    on a thread pool capped by PPEA_THREADS.
    """
    root = Path(out_root) / variant
    root.mkdir(parents=True, exist_ok=True)
    K = default_intrinsics(height, width)

    def job(i):
        spec = random_scene(_hash32(seed, variant, i), variant, height, width, K)
        return _write_triplet(root, i, spec)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(job, range(count)))
    else:
        entries = [job(i) for i in range(count)]
    manifest = {
        "variant": variant,
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
        "image_size": [height, width],
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy},
        "triplets": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


class Dataset:
    """Manifest-backed triplet loader."""

    def __init__(self, manifest_path):
        self.root = Path(manifest_path).parent
        m = json.loads(Path(manifest_path).read_text())
        self.variant = m["variant"]
        self.height, self.width = m["image_size"]
        ki = m["intrinsics"]
        self.intrinsics = Intrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"])
        self.entries = m["triplets"]
        for e in self.entries:
            d = self.root / e["dir"]
            for fname in ("tm1.ppm", "t.ppm", "tp1.ppm", "depth.pfm", "motion.pfm", "meta.json"):
                if not (d / fname).exists():
                    raise FileNotFoundError(f"manifest references missing file {d / fname}")

    def __len__(self):
        return len(self.entries)

    def load(self, i: int) -> FrameTriplet:
        d = self.root / self.entries[i]["dir"]
        images = [read_ppm(d / n).transpose(2, 0, 1) for n in ("tm1.ppm", "t.ppm", "tp1.ppm")]
        depth = read_pfm(d / "depth.pfm")
        motion = read_pfm(d / "motion.pfm") > 0.5
        meta = json.loads((d / "meta.json").read_text())
        cams = np.asarray(meta["cam_positions"])
        return FrameTriplet(
            images, depth, motion,
            Pose(np.eye(3), cams[1] - cams[0]),
            Pose(np.eye(3), cams[1] - cams[2]),
            self.intrinsics,
        )
