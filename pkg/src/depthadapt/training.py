"""Two-stage progressive-adaptation training: freeze plans, Adam, the joint
teacher/student step, and stage orchestration.

Stage 1 trains on the (primarily static) set with every encoder weight frozen;
adapters, all BatchNorm parameters, the decoder, the student's reduce conv and
the pose network update. Stage 2 loads the stage-1 checkpoint, attaches a
fresh zero-init decoder adapter, freezes the decoder too, and tunes adapters +
BN (+ pose, switchable). Frozen parameters are hash-verified before/after.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import Checkpoint, apply_checkpoint, checkpoint_from_model, load_checkpoint, save_checkpoint
from .datasynth import Dataset
from .geometry import Intrinsics, pose_tensors_from_vector, warp_image
from .metrics import evaluate_frames
from .networks import StudentState, build_model, update_depth_range
from .tensor import Tensor, no_grad


# -- freeze plans ---------------------------------------------------------------


@dataclass
class FreezePlan:
    """Glob rules over dotted parameter names.

    frozen_patterns are evaluated first, trainable_patterns after; the last
    matching pattern wins, so trainable patterns carve exceptions out of
    frozen ones. Every parameter must match at least one pattern.
    """

    frozen_patterns: list = field(default_factory=list)
    trainable_patterns: list = field(default_factory=list)

    def decide(self, name: str):
        verdict = None
        for pat in self.frozen_patterns:
            if fnmatch.fnmatchcase(name, pat):
                verdict = False
        for pat in self.trainable_patterns:
            if fnmatch.fnmatchcase(name, pat):
                verdict = True
        return verdict

    def apply(self, model) -> None:
        for name, p in model.named_parameters():
            verdict = self.decide(name)
            if verdict is None:
                raise ValueError(f"freeze plan does not cover parameter {name}")
            p.trainable = verdict
            p.tensor.requires_grad = verdict


ADAPTIVE_PATTERNS = ["*.adapter.*", "*bn*", "student.reduce.*"]


def build_freeze_plan(stage: int, freeze_pose: bool = False, plan: str = "stage") -> FreezePlan:
    """stage plans per the protocol; `plan` overrides for baselines:
    "full_finetune" (everything trainable) or "frozen" (encoder frozen,
    decoder+pose trainable, no adapters assumed)."""
    if plan == "full_finetune":
        return FreezePlan([], ["*"])
    if plan == "frozen":
        return FreezePlan(["*"], ["*bn*", "teacher.decoder.*", "student.decoder.*",
                                  "student.reduce.*", "pose.*"])
    if plan != "stage":
        raise ValueError(f"unknown plan {plan!r}")
    if stage == 1:
        trainable = ADAPTIVE_PATTERNS + ["teacher.decoder.*", "student.decoder.*", "pose.*"]
        return FreezePlan(["*"], trainable)
    if stage == 2:
        trainable = list(ADAPTIVE_PATTERNS)
        if not freeze_pose:
            trainable.append("pose.*")
        return FreezePlan(["*"], trainable)
    raise ValueError(f"unknown stage {stage}")


def param_hashes(model, frozen_only: bool = True) -> dict:
    out = {}
    for name, p in model.named_parameters():
        if frozen_only and p.trainable:
            continue
        out[name] = hashlib.sha256(p.tensor.data.tobytes()).hexdigest()
    return out


def integrity_check(model, pre_hashes: dict) -> dict:
    """Recompute hashes; any changed frozen parameter is a violation."""
    post = param_hashes(model, frozen_only=False)
    violations = [n for n, h in pre_hashes.items() if post.get(n) != h]
    return {"checked": len(pre_hashes), "violations": violations, "ok": not violations}


# -- optimizer ------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over trainable parameters only."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params:
            if p.tensor.grad is not None:
                total += float(np.sum(p.tensor.grad.astype(np.float64) ** 2))
        norm = float(np.sqrt(total))
        if max_norm and norm > max_norm:
            scale = max_norm / norm
            for p in self.params:
                if p.tensor.grad is not None:
                    p.tensor.grad = p.tensor.grad * scale
        return norm

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.data = p.tensor.data - (lr * update).astype(p.tensor.dtype)

    def state_entries(self):
        for p, m, v in zip(self.params, self.m, self.v):
            yield p.name, m, v


def effective_lr(schedule, epoch: int) -> float:
    """Last schedule entry with epoch <= the current one."""
    lr = schedule[0][1]
    for e, v in schedule:
        if epoch >= e:
            lr = v
    return lr


# -- stage configuration -----------------------------------------------------------


@dataclass
class StageConfig:
    stage: int
    dataset: str
    eval_dataset: str
    epochs: int = 10
    batch_size: int = 4
    lr_schedule: list = field(default_factory=lambda: [(0, 1e-4), (6, 1e-5)])
    init_from: str | None = None
    seed: int = 0
    exclude_motion: bool = False
    freeze_pose: bool = False
    update_bn_stats: bool = True
    plan: str = "stage"
    grad_clip: float = 10.0
    eval_limit: int | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and self.plan == "stage" and not self.init_from:
            raise ValueError("stage 2 requires init_from")
        epochs = [e for e, _ in self.lr_schedule]
        if epochs != sorted(set(epochs)):
            raise ValueError("lr_schedule epochs must be strictly increasing")


# -- batching ------------------------------------------------------------------------


class _Cache:
    """Whole dataset in memory; images kept uint8 (their on-disk precision)."""

    def __init__(self, ds: Dataset):
        self.intrinsics = ds.intrinsics
        self.items = []
        for i in range(len(ds)):
            t = ds.load(i)
            imgs = [np.clip(np.rint(im * 255.0), 0, 255).astype(np.uint8) for im in t.images]
            self.items.append((imgs, t.gt_depth, t.motion_mask,
                               t.pose_t_to_tm1, t.pose_t_to_tp1))

    def __len__(self):
        return len(self.items)

    def batch(self, idx, dtype=np.float32):
        sel = [self.items[i] for i in idx]
        stack = lambda k: np.stack([s[0][k] for s in sel]).astype(dtype) / 255.0
        imgs = [stack(0), stack(1), stack(2)]
        depth = np.stack([s[1] for s in sel])[:, None]
        motion = np.stack([s[2] for s in sel])[:, None]
        return imgs, depth, motion


# -- the joint step -------------------------------------------------------------------


def train_step(model, state: StudentState, batch, K: Intrinsics, weights: L.LossWeights,
               adam: Adam, lr: float, exclude_motion: bool = False,
               grad_clip: float = 10.0, dtype=np.float32) -> dict:
    """One joint teacher+student update on a batch of triplets."""
    imgs, _, motion = batch
    i_tm1, i_t, i_tp1 = (Tensor(a) for a in imgs)
    exclusion = motion.astype(bool) if exclude_motion else None

    v_prev = model.pose.forward(i_tm1, i_t)
    v_next = model.pose.forward(i_t, i_tp1)
    pose_to_tm1 = pose_tensors_from_vector(v_prev, invert=True)
    pose_to_tp1 = pose_tensors_from_vector(v_next, invert=False)

    t_out = model.teacher.forward(i_t)
    id_errs = L.identity_reprojection_errors(i_t, [i_tm1, i_tp1], weights.ssim_alpha)

    def make_warps(depth):
        return [warp_image(i_tm1, depth, pose_to_tm1, K),
                warp_image(i_tp1, depth, pose_to_tp1, K)]

    t_reproj, _ = L.reprojection_loss(i_t, make_warps(t_out["depth"]), id_errs,
                                      weights.ssim_alpha, exclusion_mask=exclusion)
    t_smooth = L.smoothness_loss(t_out["disp"], i_t)
    teacher_loss = T.add(t_reproj, T.mul(t_smooth, weights.smoothness_lambda))

    cv_poses = pose_to_tm1.detach_poses()
    s_out = model.student.forward_pair(i_t, i_tm1, cv_poses, K.scaled(0.25), state)
    student_loss, s_parts = L.student_total_loss(
        i_t, s_out["disp"], s_out["depth"], t_out["depth"], make_warps(s_out["depth"]),
        id_errs, weights, i_t, exclusion_mask=exclusion)

    total = T.add(teacher_loss, student_loss)
    if not np.isfinite(total.data).all():
        raise RuntimeError(f"non-finite loss: teacher={teacher_loss.data} parts={s_parts}")

    adam.zero_grad()
    total.backward()
    grad_norm = adam.clip_global_norm(grad_clip)
    adam.step(lr)
    update_depth_range(state, s_out["depth"].data)
    return {"total": total.item(), "teacher": teacher_loss.item(),
            "student": student_loss.item(), "teacher_reproj": t_reproj.item(),
            "grad_norm": grad_norm, **{f"student_{k}": v for k, v in s_parts.items()}}


# -- evaluation -----------------------------------------------------------------------


def evaluate_model(model, ds_or_cache, network: str = "teacher", state: StudentState | None = None,
                   limit: int | None = None, batch_size: int = 8, clamp_range=(0.1, 80.0)):
    """Median-scaled metrics over a dataset; teacher uses the current frame
    only, student consumes (t-1, t) through the pose network."""
    cache = ds_or_cache if isinstance(ds_or_cache, _Cache) else _Cache(ds_or_cache)
    K = cache.intrinsics
    n = len(cache) if limit is None else min(limit, len(cache))
    model.set_mode("eval")
    frames = []
    try:
        with no_grad():
            for start in range(0, n, batch_size):
                idx = list(range(start, min(start + batch_size, n)))
                imgs, depth, _ = cache.batch(idx)
                i_tm1, i_t = Tensor(imgs[0]), Tensor(imgs[1])
                if network == "teacher":
                    pred = model.teacher.forward(i_t)["depth"].data
                elif network == "student":
                    if state is None:
                        raise ValueError("student evaluation needs a StudentState")
                    v = model.pose.forward(i_tm1, i_t)
                    poses = pose_tensors_from_vector(v, invert=True).detach_poses()
                    pred = model.student.forward_pair(i_t, i_tm1, poses, K.scaled(0.25),
                                                      state)["depth"].data
                else:
                    raise ValueError(f"unknown network {network!r}")
                for b in range(len(idx)):
                    valid = depth[b, 0] > 0
                    frames.append((pred[b, 0].astype(np.float64),
                                   depth[b, 0].astype(np.float64), valid))
    finally:
        model.set_mode("train")
    return evaluate_frames(frames, clamp_range)


# -- stage runner ---------------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint_path: Path
    history: list
    integrity: dict
    log_path: Path


def run_stage(cfg: StageConfig, model_cfg=None, adapter_cfg=None, loss_weights=None,
              out_dir=".", bin_count: int = 16, model=None, quiet: bool = False) -> StageResult:
    """Run one training stage end to end and write its artifacts.

    Stage 2 attaches a fresh decoder adapter before loading the stage-1
    weights (the adapter stays at its zero init). Per-epoch metrics for both
    networks are recorded against the eval dataset, including an epoch-0
    evaluation before any update.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = loss_weights or L.LossWeights()
    train_cache = _Cache(Dataset(cfg.dataset))
    eval_cache = _Cache(Dataset(cfg.eval_dataset))
    K = train_cache.intrinsics

    if model is None:
        model = build_model(model_cfg, adapter_cfg, decoder_adapter=cfg.stage == 2,
                            bin_count=bin_count, seed=cfg.seed)
    state = StudentState(bin_count)
    if cfg.init_from:
        report = apply_checkpoint(load_checkpoint(cfg.init_from), model, state)
        missing_real = [m for m in report.missing if ".adapter." not in m]
        if missing_real:
            raise ValueError(f"checkpoint is missing non-adapter entries: {missing_real[:5]}")

    plan = build_freeze_plan(cfg.stage, cfg.freeze_pose, cfg.plan)
    plan.apply(model)
    model.set_bn_updates(cfg.update_bn_stats)
    pre_hashes = param_hashes(model, frozen_only=True)
    adam = Adam([p for _, p in model.named_parameters()])

    rng = np.random.default_rng(cfg.seed)
    history = []
    log_path = out / "training_log.jsonl"
    t_start = time.time()
    with open(log_path, "w") as log:
        def eval_epoch(epoch):
            teacher, _ = evaluate_model(model, eval_cache, "teacher", state, cfg.eval_limit)
            student, _ = evaluate_model(model, eval_cache, "student", state, cfg.eval_limit)
            rec = {"epoch": epoch, "teacher": teacher.row(), "student": student.row()}
            history.append(rec)
            if not quiet:
                print(f"[stage {cfg.stage}] epoch {epoch}: teacher abs_rel={teacher.abs_rel:.4f} "
                      f"student abs_rel={student.abs_rel:.4f} ({time.time() - t_start:.0f}s)")

        eval_epoch(0)
        step = 0
        for epoch in range(cfg.epochs):
            lr = effective_lr(cfg.lr_schedule, epoch)
            order = rng.permutation(len(train_cache))
            for s0 in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                idx = order[s0:s0 + cfg.batch_size]
                batch = train_cache.batch(idx)
                parts = train_step(model, state, batch, K, weights, adam, lr,
                                   cfg.exclude_motion, cfg.grad_clip)
                log.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, **parts}) + "\n")
                step += 1
            state.rebuild_bins()
            eval_epoch(epoch + 1)

    integrity = integrity_check(model, pre_hashes)
    ckpt_path = out / f"stage{cfg.stage}.ckpt"
    save_checkpoint(ckpt_path, checkpoint_from_model(model, state, cfg.stage, adam))
    (out / "eval_history.json").write_text(json.dumps(history, indent=1))
    (out / "integrity.json").write_text(json.dumps(integrity, indent=1))
    if not integrity["ok"]:
        raise RuntimeError(f"frozen parameters changed: {integrity['violations'][:5]}")
    return StageResult(ckpt_path, history, integrity, log_path)
