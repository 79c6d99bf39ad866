"""Build models from config, pretrain the teacher, run distillation,
evaluate checkpoints, analyze receptive fields, and sweep ablation grids.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from . import distill as D
from .checkpoint import load_checkpoint, restore_registry, save_checkpoint
from .config import UsageError, strides_of
from .data import FaceDataset, SynthFaceSpec
from .engine import ParamRegistry, Tensor
from .facegeom import MODE_NONE, CellGrid, PEBuckets
from .models import (ArcFaceConfig, Student, StudentConfig, Teacher,
                     TeacherConfig)
from .urfm import urfm_attention

METHODS = ("baseline", "asa", "apt", "full")


def face_spec(cfg: dict) -> SynthFaceSpec:
    return SynthFaceSpec(
        image_size=cfg["data.image_size"],
        identities=cfg["data.identities"],
        samples_per_identity=cfg["data.samples_per_identity"],
        flip_prob=cfg["data.flip_prob"],
        dense_landmarks=cfg["data.dense_landmarks"],
        seed=cfg["data.seed"],
    )


def method_objective(cfg: dict):
    """Resolve the method preset into (teacher prompts, frozen, objective)."""
    method = cfg["method"]
    lam_c = cfg["loss.lambda_cls"]
    lam_a = cfg["loss.lambda_attn"]
    lam_f = cfg["loss.lambda_feat"]
    if method == "baseline":
        return 0, True, D.DistillObjective(lam_c, 0.0, lam_f,
                                           use_urfm=False,
                                           feature_mode=D.FEAT_FITNET)
    if method == "asa":
        return 0, True, D.DistillObjective(lam_c, lam_a, lam_f,
                                           use_urfm=False,
                                           feature_mode=D.FEAT_PIXEL)
    if method == "apt":
        return cfg["teacher.t"], cfg["teacher.frozen"], D.DistillObjective(
            lam_c, lam_a, lam_f, use_urfm=False, feature_mode=D.FEAT_PIXEL)
    if method == "full":
        return cfg["teacher.t"], cfg["teacher.frozen"], D.DistillObjective(
            lam_c, lam_a, lam_f, use_urfm=True, feature_mode=D.FEAT_URFM)
    raise UsageError(f"unknown method {method!r}; expected one of {METHODS}")


def teacher_config(cfg: dict, prompts: int, frozen: bool) -> TeacherConfig:
    return TeacherConfig(
        image_size=cfg["data.image_size"],
        patch_size=cfg["teacher.patch"],
        dim=cfg["model.dim"],
        layers=cfg["teacher.layers"],
        window=cfg["teacher.window"],
        heads=cfg["teacher.heads"],
        prompts=prompts,
        keep_final_prompts=cfg["teacher.keep_final_prompts"],
        frozen_backbone=frozen,
        merge_after=tuple(1 + i for i in range(cfg["teacher.merges"])),
        num_classes=cfg["data.identities"],
    )


def student_config(cfg: dict) -> StudentConfig:
    return StudentConfig(
        image_size=cfg["data.image_size"],
        dim=cfg["model.dim"],
        strides=strides_of(cfg),
        num_classes=cfg["data.identities"],
    )


def build_model(cfg: dict, seed_offset: int = 0) -> tuple[D.DistillModel,
                                                          D.DistillObjective]:
    prompts, frozen, objective = method_objective(cfg)
    seed = cfg["seed"] + seed_offset
    teacher = Teacher(teacher_config(cfg, prompts, frozen),
                      np.random.default_rng([seed, 1]))
    student = Student(student_config(cfg), np.random.default_rng([seed, 2]))
    side = math.isqrt(cfg["urfm.L"])
    grid = CellGrid(side, cfg["data.image_size"], cfg["data.image_size"])
    gamma = cfg["pe.gamma"]
    buckets = PEBuckets.create(
        grid, mode=cfg["pe.mode"], alpha=cfg["pe.alpha"], beta=cfg["pe.beta"],
        gamma=None if gamma < 0 else gamma,
    )
    arcface = ArcFaceConfig(scale=cfg["loss.scale"], margin=cfg["loss.margin"],
                            num_classes=cfg["data.identities"])
    model = D.DistillModel.create(
        teacher, student, l_count=cfg["urfm.L"], buckets=buckets,
        arcface=arcface, rng=np.random.default_rng([seed, 3]),
        head_heads=cfg["urfm.head_heads"],
    )
    return model, objective


def model_registries(model: D.DistillModel) -> dict:
    regs = {
        "teacher": model.teacher.registry,
        "prompts": model.teacher.prompt_bank.registry,
        "student": model.student.registry,
        "urfm_t": model.teacher_branch.registry,
        "urfm_s": model.student_branch.registry,
        "head": model.head.registry,
    }
    extra = ParamRegistry()
    extra.register("centers", model.centers.tensor)
    extra.register("pe_table", model.buckets.table)
    regs["shared"] = extra
    return regs



def restore_model(model: D.DistillModel, params: dict) -> None:
    for prefix, reg in model_registries(model).items():
        restore_registry(reg, params, prefix)


# -- teacher pretraining -----------------------------------------------------

def pretrain_teacher(cfg: dict, dataset: FaceDataset,
                     ckpt_path=None) -> Teacher:
    """Train a prompt-free, fully learnable teacher with the margin loss."""
    from .models import arcface_loss

    teacher = Teacher(teacher_config(cfg, prompts=0, frozen=False),
                      np.random.default_rng([cfg["seed"], 1]))
    batch = cfg["opt.batch_size"]
    n = len(dataset)
    steps_per_epoch = max(1, (n + batch - 1) // batch)
    sched = D.OptimizerSchedule(
        peak_lr=cfg["pretrain.peak_lr"], momentum=cfg["opt.momentum"],
        weight_decay=cfg["opt.weight_decay"],
        warmup_epochs=cfg["pretrain.warmup_epochs"],
        total_epochs=cfg["pretrain.total_epochs"],
        steps_per_epoch=steps_per_epoch,
        clip_norm=cfg["opt.clip_norm"],
    )
    arcface = ArcFaceConfig(scale=cfg["loss.scale"], margin=cfg["loss.margin"],
                            num_classes=cfg["data.identities"])
    opt = D.SGD(list(teacher.registry.items()), sched)
    rng = np.random.default_rng([cfg["seed"], 11])
    step = 0
    for _epoch in range(sched.total_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            opt.zero_grads()
            feats = teacher.forward(Tensor(dataset.images[idx]))
            loss = arcface_loss(teacher.embed(feats), dataset.labels[idx],
                                arcface, teacher.registry["head.classes"])
            loss.backward()
            opt.step(step)
            step += 1
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, cfg, {"teacher": teacher.registry})
    return teacher


def load_teacher_backbone(model: D.DistillModel, ckpt_path) -> None:
    """Copy pretrained backbone weights into the distillation teacher."""
    _cfg, params = load_checkpoint(ckpt_path)
    restore_registry(model.teacher.registry, params, "teacher")


# -- distillation ------------------------------------------------------------

def distill_run(cfg: dict, dataset: FaceDataset, teacher_ckpt=None,
                ckpt_path=None, metrics_path=None):
    model, objective = build_model(cfg)
    if teacher_ckpt is not None:
        load_teacher_backbone(model, teacher_ckpt)
    batch = cfg["opt.batch_size"]
    steps_per_epoch = max(1, (len(dataset) + batch - 1) // batch)
    sched = D.OptimizerSchedule(
        peak_lr=cfg["opt.peak_lr"], momentum=cfg["opt.momentum"],
        weight_decay=cfg["opt.weight_decay"],
        warmup_epochs=cfg["opt.warmup_epochs"],
        total_epochs=cfg["opt.total_epochs"],
        steps_per_epoch=steps_per_epoch,
        clip_norm=cfg["opt.clip_norm"],
    )
    trainer = D.DistillTrainer(model, objective, sched)
    records = D.run_distillation(
        trainer, dataset.images, dataset.labels, dataset.landmarks,
        batch_size=batch, seed=cfg["seed"], metrics_path=metrics_path,
    )
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, cfg, model_registries(model))
    return model, records


# -- evaluation --------------------------------------------------------------

def _embed_all(embed_fn, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch):
        out.append(embed_fn(Tensor(images[lo:lo + batch])).data)
    emb = np.concatenate(out, axis=0)
    return emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-30)


def classification_accuracy(embeddings: np.ndarray, labels: np.ndarray,
                            class_weights: np.ndarray) -> float:
    w = class_weights / np.maximum(
        np.linalg.norm(class_weights, axis=1, keepdims=True), 1e-30)
    pred = (embeddings @ w.T).argmax(axis=1)
    return float((pred == labels).mean())


def make_verification_pairs(labels: np.ndarray, n_pairs: int, seed: int):
    """Balanced same/different index pairs, deterministic per seed."""
    rng = np.random.default_rng([seed, 42])
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(int(lab), []).append(i)
    labs = [l for l in by_label if len(by_label[l]) >= 2]
    pairs, truth = [], []
    for _ in range(n_pairs // 2):
        lab = labs[rng.integers(len(labs))]
        i, j = rng.choice(by_label[lab], size=2, replace=False)
        pairs.append((i, j))
        truth.append(True)
        la, lb = rng.choice(list(by_label), size=2, replace=False)
        pairs.append((rng.choice(by_label[la]), rng.choice(by_label[lb])))
        truth.append(False)
    return np.array(pairs), np.array(truth)


def verification_accuracy(embeddings: np.ndarray, labels: np.ndarray,
                          n_pairs: int = 1000, seed: int = 0) -> float:
    """Threshold is fit on one half of the pairs, accuracy reported on the
    other half (keeps a random embedding at chance level)."""
    pairs, truth = make_verification_pairs(labels, n_pairs, seed)
    sims = np.einsum("ij,ij->i", embeddings[pairs[:, 0]],
                     embeddings[pairs[:, 1]])
    half = len(sims) // 2
    fit_s, fit_t = sims[:half], truth[:half]
    ev_s, ev_t = sims[half:], truth[half:]
    candidates = np.unique(fit_s)
    best_thr, best_acc = 0.0, -1.0
    for thr in candidates:
        acc = ((fit_s >= thr) == fit_t).mean()
        if acc > best_acc:
            best_acc, best_thr = acc, thr
    return float(((ev_s >= best_thr) == ev_t).mean())


def evaluate(model: D.DistillModel, eval_ds: FaceDataset,
             seed: int = 0) -> dict:
    """Held-out metrics for both branches."""
    def student_embed(x):
        return model.student.embed(model.student.forward(x))

    def teacher_embed(x):
        return model.teacher.embed(model.teacher.forward(x))

    emb_s = _embed_all(student_embed, eval_ds.images)
    emb_t = _embed_all(teacher_embed, eval_ds.images)
    return {
        "student_classification_accuracy": classification_accuracy(
            emb_s, eval_ds.labels, model.student.registry["head.classes"].data),
        "student_verification_accuracy": verification_accuracy(
            emb_s, eval_ds.labels, seed=seed),
        "teacher_classification_accuracy": classification_accuracy(
            emb_t, eval_ds.labels, model.teacher.registry["head.classes"].data),
        "teacher_verification_accuracy": verification_accuracy(
            emb_t, eval_ds.labels, seed=seed),
    }


def load_model_from_checkpoint(ckpt_path):
    cfg, params = load_checkpoint(ckpt_path)
    model, objective = build_model(cfg)
    restore_model(model, params)
    return cfg, model, objective


# -- receptive-field analysis ------------------------------------------------

def perf_maps(model: D.DistillModel, images: np.ndarray, landmarks,
              probe_index=None):
    """PERF of the probed URFM local feature for both branches."""
    if probe_index is None:
        probe_index = model.centers.count // 2  # the anchor center

    def branch_forward(backbone, branch):
        def forward(x):
            f = backbone(x)
            lm = [landmarks[forward.i]] \
                if model.buckets.mode != MODE_NONE else [None]
            h, _ = urfm_attention(f, model.centers, branch, model.buckets, lm)
            return h
        forward.i = 0
        return forward

    ft = branch_forward(model.teacher.forward, model.teacher_branch)
    fs = branch_forward(model.student.forward, model.student_branch)

    def run(forward):
        acc = np.zeros(images.shape[2:])
        for i in range(len(images)):
            forward.i = i
            pm = D.compute_perf(forward, images[i:i + 1], probe_index)
            acc += pm.values
        return D.PERFMap(values=acc / len(images),
                         probe=f"local[{probe_index}]",
                         sample_count=len(images))

    return run(ft), run(fs)


# -- ablation sweeps ---------------------------------------------------------

PROMPT_SWEEP = ("frozen", "5", "25", "50", "all")


def sweep(cfg: dict, dataset: FaceDataset, eval_ds: FaceDataset, axis: str,
          teacher_ckpt, out_csv=None) -> list[dict]:
    """Grid over prompt count, local-center count, or facial-distance mode."""
    rows = []
    if axis == "prompts":
        variants = []
        for tag in PROMPT_SWEEP:
            c = dict(cfg)
            c["method"] = "full"
            if tag == "frozen":
                c["teacher.t"], c["teacher.frozen"] = 0, True
            elif tag == "all":
                c["teacher.t"], c["teacher.frozen"] = 0, False
            else:
                c["teacher.t"], c["teacher.frozen"] = int(tag), True
            variants.append((tag, c))
    elif axis == "centers":
        variants = []
        for l_count in (9, 25, 49):
            c = dict(cfg)
            c["method"] = "full"
            c["urfm.L"] = l_count
            variants.append((f"L={l_count}", c))
    elif axis == "facial":
        variants = []
        for mode in ("none", "RD", "SD"):
            c = dict(cfg)
            c["method"] = "full"
            c["pe.mode"] = mode
            variants.append((mode, c))
    else:
        raise UsageError(f"unknown sweep axis {axis!r}")

    for tag, c in variants:
        model, _records = distill_run(c, dataset, teacher_ckpt=teacher_ckpt)
        metrics = evaluate(model, eval_ds, seed=c["seed"])
        row = {"variant": tag, **metrics}
        rows.append(row)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
