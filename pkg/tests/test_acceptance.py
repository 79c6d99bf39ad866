"""Acceptance suite: one test per release criterion.

Each test prints a single PASS line with its headline numbers so the run log
doubles as the acceptance report. The toy preset used by the training-based
criteria is fixed here (ACCEPTANCE below); directional claims use seeds 0-4.
"""

import math

import numpy as np
import pytest

from facekd import pipeline as P
from facekd.checkpoint import (IntegrityError, load_checkpoint,
                               restore_registry, save_checkpoint)
from facekd.config import load_config
from facekd.data import generate_dataset, train_eval_split
from facekd.distill import perf_alignment_score
from facekd.engine import ParamRegistry, Tensor, matmul, mul, softmax_rows, tsum
from facekd.facegeom import (CellGrid, LandmarkSet, PEBuckets, combined_distance,
                             euclidean_distance, pe_index, relative_distance,
                             saliency_distance)
from facekd.models import (ArcFaceConfig, Student, StudentConfig, Teacher,
                           TeacherConfig, arcface_loss, broadcast_rows)
from facekd.urfm import (AlignmentHead, LocalCenters, URFMBranch,
                         attention_alignment_loss, feature_alignment_loss,
                         urfm_attention)

from gradcheck import assert_grads_match

# Toy preset for the training-based criteria (5-7): sized so 15 distillation
# runs plus the sweep stay minutes, not hours, while the teacher still clearly
# beats chance (verification ~0.78 after pretraining).
ACCEPTANCE = [
    "data.image_size=16", "data.identities=16", "data.samples_per_identity=12",
    "data.eval_per_identity=4", "teacher.layers=2", "teacher.window=2",
    "teacher.patch=4", "teacher.merges=0", "teacher.t=4", "model.dim=16",
    "urfm.L=9", "student.strides=2,2",
    "opt.warmup_epochs=2", "opt.batch_size=16", "opt.total_epochs=10",
    "pretrain.total_epochs=30", "pretrain.warmup_epochs=3",
    "loss.lambda_attn=10.0",
]

SEEDS = range(5)


def acceptance_config(*extra):
    return load_config(overrides=ACCEPTANCE + list(extra))


@pytest.fixture(scope="module")
def toy_world(tmp_path_factory):
    """Shared dataset, split, and pretrained teacher checkpoint."""
    cfg = acceptance_config()
    ds = generate_dataset(P.face_spec(cfg))
    train, ev = train_eval_split(ds, cfg["data.eval_per_identity"])
    ckpt = tmp_path_factory.mktemp("acceptance") / "teacher.ckpt"
    P.pretrain_teacher(cfg, train, ckpt_path=ckpt)
    return cfg, train, ev, ckpt


def _student_verif(cfg, train, ev, ckpt, method, seed):
    c = acceptance_config(f"method={method}", f"seed={seed}")
    model, _ = P.distill_run(c, train, teacher_ckpt=ckpt)
    return P.evaluate(model, ev, seed=seed), model


# -- criterion 1: finite-difference gradient suite ---------------------------

class TestCriterion1Gradients:
    """Every differentiable op: central FD, rel err < 1e-5, 20 seeds each."""

    TOL = 1e-5
    N_SEEDS = 20

    def _check(self, make_case):
        for seed in range(self.N_SEEDS):
            build_loss, params = make_case(np.random.default_rng([77, seed]))
            assert_grads_match(build_loss, params, tol=self.TOL)

    def test_matmul(self):
        def case(rng):
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            w = rng.standard_normal((3, 2))
            return lambda: tsum(mul(matmul(a, b), Tensor(w))), [a, b]
        self._check(case)

    def test_softmax(self):
        def case(rng):
            x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
            w = rng.standard_normal((4, 5))
            return lambda: tsum(mul(softmax_rows(x), Tensor(w))), [x]
        self._check(case)

    def test_conv2d(self):
        from facekd.engine import conv2d

        def case(rng):
            x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
            w = rng.standard_normal((2, 3, 3, 3))
            return (lambda: tsum(mul(conv2d(x, k, stride=2, padding=1),
                                     Tensor(w))), [x, k])
        self._check(case)

    def test_layer_norm(self):
        from facekd.engine import layer_norm

        def case(rng):
            x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
            g = Tensor(rng.standard_normal(6), requires_grad=True)
            b = Tensor(rng.standard_normal(6), requires_grad=True)
            w = rng.standard_normal((3, 6))
            return lambda: tsum(mul(layer_norm(x, g, b), Tensor(w))), [x, g, b]
        self._check(case)

    def test_window_attention(self):
        def case(rng):
            cfg = TeacherConfig(image_size=8, patch_size=4, dim=4, layers=1,
                                window=2, heads=2, prompts=2, merge_after=(),
                                frozen_backbone=False, num_classes=3)
            teacher = Teacher(cfg, rng)
            tokens = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
            prompts = teacher.prompt_bank.tokens[0]
            w1 = rng.standard_normal((2, 4, 4))
            w2 = rng.standard_normal((2, 2, 4))

            def build_loss():
                out, p_out = teacher._window_attention(tokens, 0, 2, prompts)
                return tsum(mul(out, Tensor(w1))) + tsum(mul(p_out, Tensor(w2)))

            reg = teacher.registry
            params = [tokens, prompts, reg["layer0.attn.wq"],
                      reg["layer0.attn.bias"], reg["layer0.attn.wv"]]
            return build_loss, params
        self._check(case)

    def test_urfm_attention_with_pe_buckets(self):
        def case(rng):
            d = 4
            centers = LocalCenters.create(4, d, 8, rng)
            branch = URFMBranch(d, rng)
            buckets = PEBuckets.create(centers.grid, mode="SD")
            buckets.table.data[:] = rng.standard_normal(buckets.table.shape)
            lm = LandmarkSet(rng.uniform(0, 8, size=(12, 2)),
                             rng.uniform(0, 8, size=(5, 2)))
            feats = Tensor(rng.standard_normal((2, 6, d)), requires_grad=True)
            w = rng.standard_normal((2, 4, d))

            def build_loss():
                h, _ = urfm_attention(feats, centers, branch, buckets, [lm, lm])
                return tsum(mul(h, Tensor(w)))

            reg = branch.registry
            params = [feats, centers.tensor, reg["wq"], reg["wk"], reg["wv"],
                      buckets.table]
            return build_loss, params
        self._check(case)

    def test_arcface_loss(self):
        def case(rng):
            emb = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            weights = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
            labels = rng.integers(0, 5, size=3)
            cfg = ArcFaceConfig(scale=8.0, margin=0.3, num_classes=5)
            return lambda: arcface_loss(emb, labels, cfg, weights), \
                [emb, weights]
        self._check(case)

    def test_alignment_losses(self):
        def case(rng):
            a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
            head = AlignmentHead(4, rng, heads=2)

            def build_loss():
                at = softmax_rows(a)
                bt = softmax_rows(b)
                return attention_alignment_loss(at, bt) \
                    + feature_alignment_loss(a, b, head)

            return build_loss, [a, b, head.registry["wq"], head.registry["wo"]]
        self._check(case)

    def test_report(self):
        print("\n[criterion 1] PASS: FD gradient suite, 8 op families x "
              f"{self.N_SEEDS} seeds, rel err < {self.TOL}")


# -- criterion 2: freezing contract ------------------------------------------

def test_criterion2_freezing_contract(toy_world):
    cfg, train, ev, ckpt = toy_world
    c = acceptance_config("method=full", "seed=0")
    assert c["teacher.frozen"] is True
    model, _ = P.distill_run(c, train, teacher_ckpt=ckpt)

    _, pre = load_checkpoint(ckpt)
    diffs = [name for name, p in model.teacher.registry.items()
             if not np.array_equal(p.data, pre[f"teacher.{name}"][0])]
    assert diffs == [], f"backbone drifted: {diffs}"

    k, t, d = c["teacher.layers"], c["teacher.t"], c["model.dim"]
    trainable = (model.teacher.registry.trainable_param_count()
                 + model.teacher.prompt_bank.registry.trainable_param_count())
    assert trainable == k * t * d
    print(f"\n[criterion 2] PASS: backbone bitwise-identical after full run; "
          f"teacher trainable params = {trainable} = {k}*{t}*{d}")


# -- criterion 3: shape / normalization invariants ---------------------------

def test_criterion3_shapes_and_row_stochastic():
    rng = np.random.default_rng(5)
    d, l_count = 8, 4
    centers = LocalCenters.create(l_count, d, 16, rng)
    branch = URFMBranch(d, rng)
    buckets = PEBuckets.create(centers.grid, mode="none")
    for n in (4, 16, 49, 100):
        feats = Tensor(rng.standard_normal((n, d)))
        h, attn = urfm_attention(feats, centers, branch, buckets)
        assert h.shape == (l_count, d)
        assert attn.shape == (l_count, n)
        assert np.abs(attn.data.sum(axis=-1) - 1.0).max() < 1e-9

    # attention maps from the two branches agree in shape under the defaults
    cfg = load_config()
    model, objective = P.build_model(cfg)
    images = Tensor(rng.standard_normal((2, 3, 32, 32)) * 0.1)
    f_t = model.teacher.forward(images)
    f_s = model.student.forward(images)
    lms = [None, None]
    buckets_none = PEBuckets.create(model.centers.grid, mode="none")
    _, attn_t = urfm_attention(f_t, model.centers, model.teacher_branch,
                               buckets_none, lms)
    _, attn_s = urfm_attention(f_s, model.centers, model.student_branch,
                               buckets_none, lms)
    loss = attention_alignment_loss(attn_t, attn_s)
    assert np.isfinite(loss.item())
    print("\n[criterion 3] PASS: (L,d) outputs and row-stochastic attention "
          "for N in {4,16,49,100}; default-preset branch shapes agree")


# -- criterion 4: positional-encoding identities -----------------------------

def test_criterion4_positional_encoding_identities():
    rng = np.random.default_rng(11)
    grid = CellGrid(7, 112, 112)

    # gamma=0 reduces to the Euclidean distance, bit for bit
    lm = LandmarkSet(rng.uniform(0, 112, (26, 2)), rng.uniform(0, 112, (5, 2)))
    for i in range(grid.num_cells):
        cd = combined_distance(i, grid.anchor, grid, "SD", 0.0, lm)
        ed = euclidean_distance(grid.grid_coords(i),
                                grid.grid_coords(grid.anchor))
        assert cd == ed  # bitwise

    # SD in [0,1] and symmetric, 1000 random landmark sets
    for _ in range(1000):
        lm = LandmarkSet(rng.uniform(0, 112, (26, 2)),
                         rng.uniform(0, 112, (5, 2)))
        i, j = rng.integers(0, grid.num_cells, size=2)
        sd = saliency_distance(int(i), int(j), lm, grid)
        assert 0.0 <= sd <= 1.0
        assert sd == saliency_distance(int(j), int(i), lm, grid)

    # RD is scale-invariant to 1e-12
    for _ in range(200):
        kp = rng.uniform(0, 112, (5, 2))
        scale = rng.uniform(0.1, 10.0)
        big = CellGrid(7, int(112), int(112))
        i, j = rng.integers(0, grid.num_cells, size=2)
        rd = relative_distance(int(i), int(j), kp, big)
        scaled_grid = CellGrid(7, 112, 112)
        scaled_grid.centroids = big.centroids * scale
        rd_scaled = relative_distance(int(i), int(j), kp * scale, scaled_grid)
        assert abs(rd - rd_scaled) <= 1e-12

    # pe_index monotone over a 10,000-point sweep
    sweep = np.linspace(0.0, 30.0, 10_000)
    idx = [pe_index(v, 4.0, 16.0, 20.0) for v in sweep]
    assert all(a <= b for a, b in zip(idx, idx[1:]))
    print("\n[criterion 4] PASS: gamma=0 bit-equality; SD bounded+symmetric "
          "x1000; RD scale-invariant to 1e-12; pe_index monotone x10000")


# -- criterion 5: directional ablation ---------------------------------------

def test_criterion5_directional_ablation(toy_world):
    cfg, train, ev, ckpt = toy_world
    accs = {}
    for method in ("baseline", "apt", "full"):
        accs[method] = [
            _student_verif(cfg, train, ev, ckpt, method, seed)[0]
            ["student_verification_accuracy"]
            for seed in SEEDS
        ]
    means = {m: float(np.mean(v)) for m, v in accs.items()}
    wins = sum(f > b for f, b in zip(accs["full"], accs["baseline"]))
    assert means["full"] >= means["apt"] >= means["baseline"], means
    assert wins >= 4, f"full beat baseline in only {wins}/5 seeds: {accs}"
    print(f"\n[criterion 5] PASS: mean verif full {means['full']:.3f} >= "
          f"apt {means['apt']:.3f} >= baseline {means['baseline']:.3f}; "
          f"full > baseline in {wins}/5 seeds")


# -- criterion 6: receptive-field alignment ----------------------------------

def _mean_perf_score(model, images, landmarks):
    scores = []
    for probe in range(model.centers.count):
        pm_t, pm_s = P.perf_maps(model, images, landmarks, probe_index=probe)
        scores.append(perf_alignment_score(pm_t, pm_s))
    return float(np.mean(scores))


def test_criterion6_perf_alignment(toy_world):
    cfg, train, ev, ckpt = toy_world
    images, lms = ev.images[:8], ev.landmarks[:8]
    wins = 0
    pairs = []
    for seed in SEEDS:
        c = acceptance_config("method=full", f"seed={seed}")
        init_model, _ = P.build_model(c)
        P.load_teacher_backbone(init_model, ckpt)
        before = _mean_perf_score(init_model, images, lms)
        model, _ = P.distill_run(c, train, teacher_ckpt=ckpt)
        after = _mean_perf_score(model, images, lms)
        pairs.append((before, after))
        wins += after < before
    assert wins >= 4, f"score decreased in only {wins}/5 seeds: {pairs}"

    # a plain conv stack's PERF must vanish exactly outside the analytic
    # receptive field: two 3x3/stride-2/pad-1 convs give a 7-pixel field
    # centered at 4*i for output position i
    rng = np.random.default_rng(2)
    student = Student(StudentConfig(image_size=16, dim=4, strides=(2, 2),
                                    num_classes=2), rng)
    from facekd.distill import compute_perf
    probe_row, probe_col = 1, 2  # feature grid position -> flat index
    perf = compute_perf(student.forward,
                        rng.standard_normal((6, 3, 16, 16)),
                        probe_row * 4 + probe_col)
    rows = np.arange(16)
    outside_r = np.abs(rows - 4 * probe_row) > 3
    outside_c = np.abs(rows - 4 * probe_col) > 3
    assert (perf.values[outside_r, :] == 0.0).all()
    assert (perf.values[:, outside_c] == 0.0).all()
    assert perf.values.sum() > 0
    print(f"\n[criterion 6] PASS: alignment score fell in {wins}/5 seeds "
          f"{[(round(a, 3), round(b, 3)) for a, b in pairs]}; conv PERF "
          "exactly zero outside the 7x7 analytic field")


# -- criterion 7: prompt-capacity sweep --------------------------------------

def test_criterion7_prompt_sweep(toy_world):
    cfg, train, ev, ckpt = toy_world
    wins = 0
    for seed in SEEDS:
        c = acceptance_config("method=full", f"seed={seed}")
        rows = P.sweep(c, train, ev, "prompts", teacher_ckpt=ckpt)
        assert [r["variant"] for r in rows] == ["frozen", "5", "25", "50",
                                                "all"]
        frozen = rows[0]["teacher_verification_accuracy"]
        learnable = rows[-1]["teacher_verification_accuracy"]
        wins += frozen >= learnable
    assert wins >= 3, f"frozen >= all-learnable in only {wins}/5 seeds"
    print(f"\n[criterion 7] PASS: 5-row capacity table emitted; frozen "
          f"teacher kept >= all-learnable accuracy in {wins}/5 seeds")


# -- criterion 8: determinism and persistence --------------------------------

def test_criterion8_determinism_and_persistence(toy_world, tmp_path):
    cfg, train, ev, ckpt = toy_world
    c = acceptance_config("method=full", "seed=1", "opt.total_epochs=3")

    metric_files = []
    for run in range(2):
        path = tmp_path / f"metrics{run}.jsonl"
        P.distill_run(c, train, teacher_ckpt=ckpt, metrics_path=path,
                      ckpt_path=tmp_path / f"run{run}.ckpt")
        metric_files.append(path.read_bytes())
    assert metric_files[0] == metric_files[1]  # byte-identical metric streams

    # checkpoint roundtrip is bitwise
    cfg_a, params_a = load_checkpoint(tmp_path / "run0.ckpt")
    resaved = tmp_path / "resaved.ckpt"
    reg = ParamRegistry()
    for name, (arr, trainable) in params_a.items():
        reg.register(name, arr, trainable=trainable)
    save_checkpoint(resaved, cfg_a, {"again": reg})
    _, params_b = load_checkpoint(resaved)
    for name, (arr, trainable) in params_a.items():
        arr2, trainable2 = params_b[f"again.{name}"]
        assert np.array_equal(arr, arr2) and trainable == trainable2

    # corruption is rejected before any parameter is touched
    blob = bytearray((tmp_path / "run0.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(bytes(blob))
    model, _ = P.build_model(c)
    snapshot = {n: p.data.copy() for n, p in model.student.registry.items()}
    with pytest.raises(IntegrityError):
        _cfg, params = load_checkpoint(corrupt)
        restore_registry(model.student.registry, params, "student")
    for name, p in model.student.registry.items():
        assert np.array_equal(p.data, snapshot[name])
    print("\n[criterion 8] PASS: same-seed metric files byte-identical; "
          "checkpoint roundtrip bitwise; corrupt checkpoint rejected "
          "with state untouched")
