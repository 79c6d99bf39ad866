"""End-to-end distillation objective, SGD schedule, training loop, and the
gradient-based receptive-field analyzer.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import engine as E
from .engine import (ContractError, NumericError, Tensor, matmul, mse,
                     softmax_rows, transpose, tsum)
from .facegeom import MODE_NONE, LandmarkSet
from .models import Student, Teacher, ArcFaceConfig, arcface_loss
from .urfm import (AlignmentHead, LocalCenters, URFMBranch,
                   attention_alignment_loss, feature_alignment_loss,
                   urfm_attention)

# how pixel features are aligned when URFM is disabled
FEAT_FITNET = "fitnet"   # plain MSE between pixel features
FEAT_PIXEL = "pixel"     # shared-head MSA outputs on pixel features
FEAT_URFM = "urfm"       # shared-head MSA outputs on URFM local features


@dataclass
class DistillObjective:
    lambda_cls: float = 1.0
    lambda_attn: float = 1.0
    lambda_feat: float = 1.0
    use_urfm: bool = True
    feature_mode: str = FEAT_URFM


@dataclass
class OptimizerSchedule:
    peak_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 4
    total_epochs: int = 20
    steps_per_epoch: int = 1
    clip_norm: float = 5.0  # global gradient-norm clip; <= 0 disables

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: OptimizerSchedule, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    if not 0 <= step < schedule.total_steps:
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps})"
        )
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / max(
        1, schedule.total_steps - schedule.warmup_steps
    )
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class DistillRecord:
    step: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_attn: float
    loss_feat: float
    grad_norms: dict

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "lr": self.lr, "loss_total": self.loss_total,
            "loss_cls": self.loss_cls, "loss_attn": self.loss_attn,
            "loss_feat": self.loss_feat, "grad_norms": self.grad_norms,
        })


class SGD:
    """SGD with momentum and decoupled-from-nothing (classic) weight decay."""

    def __init__(self, params: Sequence[tuple[str, Tensor]],
                 schedule: OptimizerSchedule):
        self.params = list(params)
        self.schedule = schedule
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grads(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, step_index: int) -> float:
        lr = lr_at(self.schedule, step_index)
        m = self.schedule.momentum
        wd = self.schedule.weight_decay
        scale = 1.0
        if self.schedule.clip_norm > 0:
            sq = sum(float((p.grad ** 2).sum())
                     for _, p in self.params if p.grad is not None)
            norm = math.sqrt(sq)
            if norm > self.schedule.clip_norm:
                scale = self.schedule.clip_norm / norm
        for name, p in self.params:
            g = p.grad * scale if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= m
            v += g + wd * p.data
            if lr != 0.0:
                p.data -= lr * v
        return lr


def pixel_self_attention_map(features: Tensor) -> Tensor:
    """Parameter-free row-softmax self-similarity map of pixel features."""
    d = features.shape[-1]
    logits = matmul(features, transpose(features, (0, 2, 1))) \
        * Tensor(1.0 / math.sqrt(d))
    return softmax_rows(logits)


class DistillModel:
    """All the pieces the distillation objective ties together."""

    def __init__(self, teacher: Teacher, student: Student,
                 centers: LocalCenters, teacher_branch: URFMBranch,
                 student_branch: URFMBranch, buckets, head: AlignmentHead,
                 arcface: ArcFaceConfig):
        self.teacher = teacher
        self.student = student
        self.centers = centers
        self.teacher_branch = teacher_branch
        self.student_branch = student_branch
        self.buckets = buckets
        self.head = head
        self.arcface = arcface

    @classmethod
    def create(cls, teacher: Teacher, student: Student, l_count: int,
               buckets, arcface: ArcFaceConfig, rng,
               head_heads: int = 2) -> "DistillModel":
        d = student.config.dim
        centers = LocalCenters.create(l_count, d, student.config.image_size, rng)
        return cls(
            teacher=teacher, student=student, centers=centers,
            teacher_branch=URFMBranch(d, rng, "urfm_t"),
            student_branch=URFMBranch(d, rng, "urfm_s"),
            buckets=buckets, head=AlignmentHead(d, rng, heads=head_heads),
            arcface=arcface,
        )

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        """Everything SGD may touch; the frozen teacher backbone is excluded
        by its trainable flags."""
        out: list[tuple[str, Tensor]] = []
        for name, p in self.student.registry.items():
            out.append(("student." + name, p))
        for name, p in self.teacher.registry.trainable_items():
            out.append(("teacher." + name, p))
        for name, p in self.teacher.prompt_bank.registry.trainable_items():
            out.append(("teacher." + name, p))
        out.append(("urfm.centers", self.centers.tensor))
        for name, p in self.teacher_branch.registry.items():
            out.append(("urfm_t." + name, p))
        for name, p in self.student_branch.registry.items():
            out.append(("urfm_s." + name, p))
        out.append(("pe.table", self.buckets.table))
        for name, p in self.head.registry.items():
            out.append(("align_head." + name, p))
        return out

    def all_params(self) -> list[tuple[str, Tensor]]:
        out = self.trainable_params()
        names = {n for n, _ in out}
        for name, p in self.teacher.registry.items():
            if "teacher." + name not in names:
                out.append(("teacher." + name, p))
        return out


def total_loss(model: DistillModel, images: Tensor, labels: np.ndarray,
               landmarks: Sequence[Optional[LandmarkSet]],
               objective: DistillObjective):
    """Weighted sum of classification and alignment losses, with breakdown."""
    f_t = model.teacher.forward(images)
    f_s = model.student.forward(images)
    emb_s = model.student.embed(f_s)
    l_cls = arcface_loss(emb_s, labels, model.arcface,
                         model.student.registry["head.classes"])

    zero = Tensor(0.0)
    l_attn, l_feat = zero, zero
    if objective.use_urfm:
        lms = landmarks if model.buckets.mode != MODE_NONE else [None] * images.shape[0]
        h_t, attn_t = urfm_attention(f_t, model.centers, model.teacher_branch,
                                     model.buckets, lms)
        h_s, attn_s = urfm_attention(f_s, model.centers, model.student_branch,
                                     model.buckets, lms)
        if objective.lambda_attn != 0.0:
            l_attn = attention_alignment_loss(attn_t, attn_s)
        if objective.lambda_feat != 0.0:
            l_feat = feature_alignment_loss(h_t, h_s, model.head)
    else:
        if objective.lambda_attn != 0.0:
            l_attn = attention_alignment_loss(
                pixel_self_attention_map(f_t), pixel_self_attention_map(f_s)
            )
        if objective.lambda_feat != 0.0:
            if objective.feature_mode == FEAT_FITNET:
                l_feat = mse(f_t, f_s)
            else:
                l_feat = feature_alignment_loss(f_t, f_s, model.head)

    breakdown = {"cls": l_cls.item(), "attn": l_attn.item(),
                 "feat": l_feat.item()}
    for name, value in breakdown.items():
        if not math.isfinite(value):
            raise NumericError(f"loss component {name!r} is non-finite: {value}")
    total = (Tensor(objective.lambda_cls) * l_cls
             + Tensor(objective.lambda_attn) * l_attn
             + Tensor(objective.lambda_feat) * l_feat)
    breakdown["total"] = total.item()
    return total, breakdown


class DistillTrainer:
    """One training loop owning all trainable state."""

    def __init__(self, model: DistillModel, objective: DistillObjective,
                 schedule: OptimizerSchedule):
        self.model = model
        self.objective = objective
        self.schedule = schedule
        self.optimizer = SGD(model.trainable_params(), schedule)

    def train_step(self, images: Tensor, labels: np.ndarray,
                   landmarks, step: int) -> DistillRecord:
        self.optimizer.zero_grads()
        loss, breakdown = total_loss(self.model, images, labels, landmarks,
                                     self.objective)
        if not math.isfinite(loss.item()):
            raise NumericError(
                f"NaN/Inf loss at step {step}: {breakdown}; aborting"
            )
        loss.backward()
        lr = self.optimizer.step(step)
        grad_norms = _group_grad_norms(self.optimizer.params)
        return DistillRecord(
            step=step, lr=lr, loss_total=breakdown["total"],
            loss_cls=breakdown["cls"], loss_attn=breakdown["attn"],
            loss_feat=breakdown["feat"], grad_norms=grad_norms,
        )


def _group_grad_norms(params) -> dict:
    groups: dict[str, float] = {}
    for name, p in params:
        group = name.split(".", 1)[0]
        g = p.grad
        if g is not None:
            groups[group] = groups.get(group, 0.0) + float((g ** 2).sum())
    return {k: math.sqrt(v) for k, v in groups.items()}


def run_distillation(trainer: DistillTrainer, images: np.ndarray,
                     labels: np.ndarray, landmarks: Sequence,
                     batch_size: int, seed: int = 0,
                     metrics_path=None,
                     on_record: Optional[Callable] = None) -> list[DistillRecord]:
    """Drive the full warmup + cosine schedule over the dataset."""
    n = len(labels)
    rng = np.random.default_rng(seed)
    records: list[DistillRecord] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        step = 0
        for _epoch in range(trainer.schedule.total_epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                batch_images = Tensor(images[idx])
                batch_landmarks = [landmarks[i] for i in idx]
                rec = trainer.train_step(batch_images, labels[idx],
                                         batch_landmarks, step)
                records.append(rec)
                if sink:
                    sink.write(rec.to_json() + "\n")
                if on_record:
                    on_record(rec)
                step += 1
    finally:
        if sink:
            sink.close()
    return records


# -- receptive-field analysis ------------------------------------------------

@dataclass
class PERFMap:
    values: np.ndarray        # (H, W), nonnegative
    probe: str
    sample_count: int


def compute_perf(forward: Callable[[Tensor], Tensor], images: np.ndarray,
                 probe_index: int, probe_name: str = "") -> PERFMap:
    """Average absolute input-gradient of one feature row.

    `forward` maps a (1, 3, H, W) input to (1, N, d) features; the gradient
    of the probed row's channel sum is taken to the input, absolute-valued,
    and averaged over input channels and images.
    """
    if images.ndim != 4:
        raise ContractError(f"expected (B, 3, H, W) images, got {images.shape}")
    h, w = images.shape[2], images.shape[3]
    acc = np.zeros((h, w))
    for img in images:
        x = Tensor(img[None], requires_grad=True)
        feats = forward(x)
        if not 0 <= probe_index < feats.shape[1]:
            raise ContractError(
                f"probe index {probe_index} outside [0, {feats.shape[1]})"
            )
        tsum(feats[:, probe_index, :]).backward()
        grad = x.grad[0] if x.grad is not None else np.zeros_like(img)
        acc += np.abs(grad).mean(axis=0)
    acc /= len(images)
    return PERFMap(values=acc, probe=probe_name or f"feature[{probe_index}]",
                   sample_count=len(images))


def perf_alignment_score(a: PERFMap, b: PERFMap) -> float:
    """1 - cosine similarity of the L1-normalized maps; 0 means identically
    shaped receptive fields."""
    if a.values.shape != b.values.shape:
        raise ContractError(
            f"PERF shapes disagree: {a.values.shape} vs {b.values.shape}"
        )
    va, vb = a.values.ravel(), b.values.ravel()
    sa, sb = va.sum(), vb.sum()
    if sa == 0.0 and sb == 0.0:
        warnings.warn("both PERF maps are all-zero; score defined as 0")
        return 0.0
    if sa == 0.0 or sb == 0.0:
        return 1.0
    va, vb = va / sa, vb / sb
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    return float(1.0 - np.dot(va, vb) / (na * nb))


def write_perf_csv(path, perf: PERFMap) -> None:
    np.savetxt(path, perf.values, delimiter=",")
