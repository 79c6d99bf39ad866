"""Synthetic face-like images with ground-truth landmarks.

Each identity gets a latent describing its face geometry and coloring; each
sample jitters that latent slightly and may be mirrored. Rendering is a pure
function of (seed, identity, sample), so datasets are bitwise reproducible
and generation is parallelizable per image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .facegeom import LandmarkSet, write_landmark_file


@dataclass
class SynthFaceSpec:
    image_size: int = 32
    identities: int = 20
    samples_per_identity: int = 50
    flip_prob: float = 0.5
    dense_landmarks: int = 26
    seed: int = 0


@dataclass
class FaceDataset:
    images: np.ndarray          # (N, 3, S, S) float64, normalized
    labels: np.ndarray          # (N,) int64
    landmarks: list             # list[LandmarkSet], aligned with images
    ids: list                   # record ids ("identity_sample")
    spec: SynthFaceSpec

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "FaceDataset":
        idx = np.asarray(idx)
        return FaceDataset(self.images[idx], self.labels[idx],
                           [self.landmarks[i] for i in idx],
                           [self.ids[i] for i in idx], self.spec)


def _identity_latent(spec: SynthFaceSpec, identity: int) -> dict:
    rng = np.random.default_rng([spec.seed, 101, identity])
    s = spec.image_size
    return {
        "cx": s / 2 + rng.uniform(-1.5, 1.5),
        "cy": s / 2 + rng.uniform(-1.0, 1.0),
        "ax": s * rng.uniform(0.30, 0.38),   # face half-width
        "ay": s * rng.uniform(0.38, 0.45),   # face half-height
        "skin": rng.uniform(0.55, 0.9, size=3),
        "eye_dx": s * rng.uniform(0.12, 0.19),
        "eye_dy": -s * rng.uniform(0.08, 0.16),
        "eye_r": s * rng.uniform(0.03, 0.06),
        "eye_tone": rng.uniform(0.0, 0.25, size=3),
        "nose_len": s * rng.uniform(0.08, 0.16),
        "nose_w": s * rng.uniform(0.02, 0.05),
        "mouth_dy": s * rng.uniform(0.16, 0.25),
        "mouth_w": s * rng.uniform(0.10, 0.18),
        "mouth_h": s * rng.uniform(0.015, 0.045),
        "mouth_tone": rng.uniform(0.1, 0.45, size=3),
        "brow_dy": -s * rng.uniform(0.17, 0.24),
    }


def _ellipse_mask(xx, yy, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def render_sample(spec: SynthFaceSpec, identity: int,
                  sample: int) -> tuple[np.ndarray, LandmarkSet, bool]:
    """Render one face; returns (image [3,S,S] in [0,1], landmarks, flipped)."""
    rng = np.random.default_rng([spec.seed, 202, identity, sample])
    lat = _identity_latent(spec, identity)
    s = spec.image_size
    jx, jy = rng.uniform(-1.0, 1.0, size=2)
    bright = rng.uniform(-0.06, 0.06)
    cx, cy = lat["cx"] + jx, lat["cy"] + jy

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((3, s, s), 0.12)  # dark background
    face = _ellipse_mask(xx, yy, cx, cy, lat["ax"], lat["ay"])
    for c in range(3):
        img[c][face] = lat["skin"][c]

    eye_l = (cx - lat["eye_dx"], cy + lat["eye_dy"])
    eye_r = (cx + lat["eye_dx"], cy + lat["eye_dy"])
    for ex, ey in (eye_l, eye_r):
        m = _ellipse_mask(xx, yy, ex, ey, lat["eye_r"], lat["eye_r"] * 0.7)
        for c in range(3):
            img[c][m] = lat["eye_tone"][c]

    nose_tip = (cx, cy + lat["nose_len"] * 0.5)
    nose = (np.abs(xx - cx) <= lat["nose_w"]) & \
        (yy >= cy - lat["nose_len"] * 0.5) & (yy <= nose_tip[1])
    for c in range(3):
        img[c][nose] = lat["skin"][c] * 0.7

    mouth_c = (cx, cy + lat["mouth_dy"])
    mouth = _ellipse_mask(xx, yy, mouth_c[0], mouth_c[1],
                          lat["mouth_w"], lat["mouth_h"])
    for c in range(3):
        img[c][mouth] = lat["mouth_tone"][c]

    img += bright
    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    def clamp(p):
        # [0, s-1] stays in range under the mirror map x -> (s-1) - x
        return (float(np.clip(p[0], 0.0, s - 1.0)),
                float(np.clip(p[1], 0.0, s - 1.0)))

    # dense landmarks: face contour + eye corners + nose + mouth samples
    n_contour = spec.dense_landmarks - 10
    angles = np.linspace(0.0, 2 * np.pi, n_contour, endpoint=False)
    dense = [clamp((cx + lat["ax"] * np.cos(a), cy + lat["ay"] * np.sin(a)))
             for a in angles]
    for ex, ey in (eye_l, eye_r):
        dense.append(clamp((ex - lat["eye_r"], ey)))
        dense.append(clamp((ex + lat["eye_r"], ey)))
    dense.append(clamp((cx, cy - lat["nose_len"] * 0.5)))
    dense.append(clamp(nose_tip))
    dense.append(clamp((mouth_c[0] - lat["mouth_w"], mouth_c[1])))
    dense.append(clamp((mouth_c[0] + lat["mouth_w"], mouth_c[1])))
    dense.append(clamp((mouth_c[0], mouth_c[1] - lat["mouth_h"])))
    dense.append(clamp((mouth_c[0], mouth_c[1] + lat["mouth_h"])))

    sparse = [clamp(eye_l), clamp(eye_r), clamp(nose_tip),
              clamp((mouth_c[0] - lat["mouth_w"], mouth_c[1])),
              clamp((mouth_c[0] + lat["mouth_w"], mouth_c[1]))]
    lm = LandmarkSet(np.array(dense), np.array(sparse))

    flipped = bool(rng.random() < spec.flip_prob)
    if flipped:
        img = img[:, :, ::-1].copy()
        lm = lm.flipped_horizontal(s)
    return img, lm, flipped


def generate_dataset(spec: SynthFaceSpec) -> FaceDataset:
    """Render the whole dataset in memory, normalized for training."""
    images, labels, landmarks, ids = [], [], [], []
    for identity in range(spec.identities):
        for sample in range(spec.samples_per_identity):
            img, lm, _ = render_sample(spec, identity, sample)
            images.append((img * 255.0 - 127.5) / 128.0)
            labels.append(identity)
            landmarks.append(lm)
            ids.append(f"id{identity:03d}_s{sample:03d}")
    return FaceDataset(np.stack(images), np.array(labels, dtype=np.int64),
                       landmarks, ids, spec)


def write_dataset(spec: SynthFaceSpec, out_dir) -> FaceDataset:
    """Render to disk: PNG images, a landmark file, and a label index."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(spec)
    records = []
    with open(out / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label"])
        for i, rec_id in enumerate(ds.ids):
            raw = ((ds.images[i] * 128.0 + 127.5) / 255.0)
            arr = np.clip(np.round(raw * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(
                out / "images" / f"{rec_id}.png"
            )
            writer.writerow([rec_id, int(ds.labels[i])])
            records.append((rec_id, ds.landmarks[i]))
    write_landmark_file(out / "landmarks.jsonl", records)
    return ds


def load_dataset(data_dir, spec: SynthFaceSpec) -> FaceDataset:
    """Load a written dataset back; images are re-normalized for training."""
    from .facegeom import read_landmark_file

    data = Path(data_dir)
    lms = read_landmark_file(data / "landmarks.jsonl")
    images, labels, landmarks, ids = [], [], [], []
    with open(data / "labels.csv") as f:
        for row in csv.DictReader(f):
            rec_id = row["id"]
            arr = np.asarray(
                Image.open(data / "images" / f"{rec_id}.png"), dtype=np.float64
            ).transpose(2, 0, 1)
            images.append((arr - 127.5) / 128.0)
            labels.append(int(row["label"]))
            landmarks.append(lms[rec_id])
            ids.append(rec_id)
    return FaceDataset(np.stack(images), np.array(labels, dtype=np.int64),
                       landmarks, ids, spec)


def train_eval_split(ds: FaceDataset, eval_per_identity: int = 10):
    """Hold out the last samples of every identity for evaluation."""
    train_idx, eval_idx = [], []
    per_id: dict[int, list[int]] = {}
    for i, lab in enumerate(ds.labels):
        per_id.setdefault(int(lab), []).append(i)
    for lab, idxs in per_id.items():
        cut = max(1, len(idxs) - eval_per_identity)
        train_idx.extend(idxs[:cut])
        eval_idx.extend(idxs[cut:])
    return ds.subset(train_idx), ds.subset(eval_idx)
