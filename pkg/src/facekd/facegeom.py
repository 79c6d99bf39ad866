"""Patch/center coordinate frames, landmark distances and positional buckets.

Implements the three inter-cell distances used to index the positional
encoding table: plain Euclidean distance on the cell grid, a saliency
distance driven by dense-landmark counts, and a relative distance driven by
cosine dissimilarity of per-cell keypoint distance profiles.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .engine import ContractError, Tensor, gather

MODE_NONE = "none"
MODE_SD = "SD"
MODE_RD = "RD"
FACIAL_MODES = (MODE_NONE, MODE_SD, MODE_RD)

# Maximum value each facial-structure distance can take; used to size the
# index function's clipping range.
_FACE_DIST_MAX = {MODE_NONE: 0.0, MODE_SD: 1.0, MODE_RD: 2.0}


@dataclass
class LandmarkSet:
    """Dense landmarks (saliency mode) and 5 sparse keypoints (relative mode).

    Sparse order: left eye, right eye, nose tip, left mouth corner,
    right mouth corner. Coordinates are pixels, top-left origin.
    """

    dense: np.ndarray
    sparse: np.ndarray

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=np.float64).reshape(-1, 2)
        self.sparse = np.asarray(self.sparse, dtype=np.float64).reshape(-1, 2)

    def validate(self, width: int, height: int, dense_count: Optional[int] = None):
        if self.sparse.shape[0] != 5:
            raise ContractError(
                f"expected 5 sparse keypoints, got {self.sparse.shape[0]}"
            )
        if dense_count is not None and self.dense.shape[0] != dense_count:
            raise ContractError(
                f"expected {dense_count} dense landmarks, got {self.dense.shape[0]}"
            )
        for name, pts in (("dense", self.dense), ("sparse", self.sparse)):
            if pts.size and (
                pts[:, 0].min() < 0 or pts[:, 0].max() >= width
                or pts[:, 1].min() < 0 or pts[:, 1].max() >= height
            ):
                raise ContractError(f"{name} landmarks out of image bounds")

    def flipped_horizontal(self, width: int) -> "LandmarkSet":
        """Mirror around the vertical axis, swapping left/right keypoints."""
        dense = self.dense.copy()
        dense[:, 0] = width - 1 - dense[:, 0]
        sparse = self.sparse.copy()
        sparse[:, 0] = width - 1 - sparse[:, 0]
        sparse = sparse[[1, 0, 2, 4, 3]]
        return LandmarkSet(dense, sparse)


class CellGrid:
    """A g x g tiling of the image into half-open cells.

    Cell i has grid coordinates (x̂, ŷ) = (i % g, i // g); the anchor is the
    cell at (g // 2, g // 2). Cells are [x0, x1) x [y0, y1) so every
    in-bounds landmark lands in exactly one cell.
    """

    def __init__(self, side: int, width: int, height: int):
        if side < 1:
            raise ContractError(f"grid side must be >= 1, got {side}")
        self.side = side
        self.width = width
        self.height = height
        self.cell_w = width / side
        self.cell_h = height / side
        cols, rows = np.meshgrid(np.arange(side), np.arange(side))
        # raster order: index i = row * side + col
        self.grid_x = cols.reshape(-1).astype(np.float64)
        self.grid_y = rows.reshape(-1).astype(np.float64)
        self.centroids = np.stack(
            [(self.grid_x + 0.5) * self.cell_w, (self.grid_y + 0.5) * self.cell_h],
            axis=1,
        )
        self.anchor = (side // 2) * side + (side // 2)

    @property
    def num_cells(self) -> int:
        return self.side * self.side

    def grid_coords(self, i: int) -> tuple[float, float]:
        return float(self.grid_x[i]), float(self.grid_y[i])

    def cell_of(self, x: float, y: float) -> int:
        col = min(self.side - 1, int(x / self.cell_w))
        row = min(self.side - 1, int(y / self.cell_h))
        return row * self.side + col

    def landmark_counts(self, landmarks: LandmarkSet) -> np.ndarray:
        """Per-cell dense-landmark counts, raster order."""
        counts = np.zeros(self.num_cells, dtype=np.int64)
        for x, y in landmarks.dense:
            if 0 <= x < self.width and 0 <= y < self.height:
                counts[self.cell_of(x, y)] += 1
        return counts

    @property
    def diagonal(self) -> float:
        """Largest Euclidean distance between two grid coordinates."""
        return math.sqrt(2.0) * (self.side - 1)


def euclidean_distance(cell: tuple[float, float],
                       anchor: tuple[float, float]) -> float:
    return math.sqrt((cell[0] - anchor[0]) ** 2 + (cell[1] - anchor[1]) ** 2)


def saliency_count(landmarks: LandmarkSet, grid: CellGrid, cell: int) -> int:
    if not 0 <= cell < grid.num_cells:
        raise ContractError(f"cell index {cell} out of range")
    return int(grid.landmark_counts(landmarks)[cell])


def saliency_distance(i: int, anchor: int, landmarks: LandmarkSet,
                      grid: CellGrid) -> float:
    """|l_i - l_anchor| / l_max over per-cell dense-landmark counts."""
    counts = grid.landmark_counts(landmarks)
    l_max = counts.max()
    if l_max == 0:
        warnings.warn("all cells empty of landmarks; saliency distance is 0")
        return 0.0
    return abs(int(counts[i]) - int(counts[anchor])) / float(l_max)


def relative_distance_vector(centroid: tuple[float, float],
                             keypoints: np.ndarray) -> np.ndarray:
    """Euclidean distances from a cell centroid to each of the 5 keypoints."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    d = np.hypot(kp[:, 0] - centroid[0], kp[:, 1] - centroid[1])
    return d


def relative_distance(i: int, anchor: int, keypoints: np.ndarray,
                      grid: CellGrid) -> float:
    """1 - cosine similarity between the two cells' keypoint distance profiles."""
    d_i = relative_distance_vector(tuple(grid.centroids[i]), keypoints)
    d_a = relative_distance_vector(tuple(grid.centroids[anchor]), keypoints)
    ni, na = np.linalg.norm(d_i), np.linalg.norm(d_a)
    if ni == 0.0 or na == 0.0:
        warnings.warn("cell centroid coincides with every keypoint; "
                      "relative distance is 0")
        return 0.0
    # clamp guards against tiny negative values from fp rounding
    return float(max(0.0, 1.0 - np.dot(d_i, d_a) / (ni * na)))


def facial_distance(i: int, anchor: int, mode: str,
                    landmarks: Optional[LandmarkSet], grid: CellGrid) -> float:
    if mode == MODE_NONE:
        return 0.0
    if landmarks is None:
        raise ContractError(f"facial mode {mode} requires landmarks")
    if mode == MODE_SD:
        return saliency_distance(i, anchor, landmarks, grid)
    if mode == MODE_RD:
        return relative_distance(i, anchor, landmarks.sparse, grid)
    raise ContractError(f"unknown facial mode: {mode!r}")


def combined_distance(i: int, anchor: int, grid: CellGrid, mode: str,
                      gamma: float,
                      landmarks: Optional[LandmarkSet] = None) -> float:
    """Euclidean grid distance plus gamma-scaled facial structure distance."""
    if gamma < 0:
        raise ContractError(f"gamma must be nonnegative, got {gamma}")
    spatial = euclidean_distance(grid.grid_coords(i), grid.grid_coords(anchor))
    if mode == MODE_NONE or gamma == 0.0:
        return spatial
    return spatial + gamma * facial_distance(i, anchor, mode, landmarks, grid)


def pe_index(d: float, alpha: float, beta: float, dmax: float) -> int:
    """Piecewise index function: linear near zero, logarithmic far, clipped.

    Monotone non-decreasing and total on [0, inf).
    """
    if d < 0:
        raise ContractError(f"distance must be nonnegative, got {d}")
    if alpha < 1 or beta <= alpha:
        raise ContractError(f"require alpha >= 1 and beta > alpha, "
                            f"got alpha={alpha}, beta={beta}")
    if dmax <= alpha:
        raise ContractError(f"require dmax > alpha, got dmax={dmax}")
    if d <= alpha:
        return int(round(d))
    if d >= dmax:
        return int(beta)
    val = alpha + math.log(d / alpha) / math.log(dmax / alpha) * (beta - alpha)
    return min(int(beta), int(round(val)))


def pe_index_array(d: np.ndarray, alpha: float, beta: float,
                   dmax: float) -> np.ndarray:
    """Vectorized pe_index over a nonnegative distance array."""
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        raise ContractError("distances must be nonnegative")
    out = np.empty(d.shape, dtype=np.int64)
    near = d <= alpha
    out[near] = np.round(d[near]).astype(np.int64)
    far = ~near
    dd = np.clip(d[far], alpha, dmax)
    val = alpha + np.log(dd / alpha) / math.log(dmax / alpha) * (beta - alpha)
    out[far] = np.minimum(int(beta), np.round(val).astype(np.int64))
    out[d >= dmax] = int(beta)
    return out


@dataclass
class PEBuckets:
    """Learnable positional-encoding bucket table plus its index parameters."""

    table: Tensor
    alpha: float
    beta: float
    gamma: float
    mode: str
    dmax: float

    @classmethod
    def create(cls, grid: CellGrid, mode: str = MODE_NONE,
               alpha: float = 4.0, beta: float = 16.0,
               gamma: Optional[float] = None) -> "PEBuckets":
        if mode not in FACIAL_MODES:
            raise ContractError(f"unknown facial mode: {mode!r}")
        if gamma is None:
            # put the [0, ~1] facial distance on the spatial scale
            gamma = grid.diagonal / 2.0
        dmax = grid.diagonal + gamma * _FACE_DIST_MAX[mode]
        dmax = max(dmax, alpha + 1e-9)
        # zero init keeps training PE-neutral at the start
        table = Tensor(np.zeros((int(beta) + 1, 1)), requires_grad=True)
        return cls(table=table, alpha=alpha, beta=beta, gamma=gamma,
                   mode=mode, dmax=dmax)

    def index_of(self, i: int, anchor: int, grid: CellGrid,
                 landmarks: Optional[LandmarkSet] = None) -> int:
        d = combined_distance(i, anchor, grid, self.mode, self.gamma, landmarks)
        return pe_index(d, self.alpha, self.beta, self.dmax)

    def indices_for_grid(self, grid: CellGrid,
                         landmarks: Optional[LandmarkSet] = None) -> np.ndarray:
        """Bucket index of every cell relative to the anchor, raster order."""
        dx = grid.grid_x - grid.grid_x[grid.anchor]
        dy = grid.grid_y - grid.grid_y[grid.anchor]
        spatial = np.hypot(dx, dy)
        if self.mode == MODE_NONE or self.gamma == 0.0:
            d = spatial
        elif self.mode == MODE_SD:
            if landmarks is None:
                raise ContractError("SD mode requires landmarks")
            counts = grid.landmark_counts(landmarks)
            l_max = counts.max()
            if l_max == 0:
                warnings.warn("all cells empty of landmarks; "
                              "saliency distance is 0")
                face = np.zeros(grid.num_cells)
            else:
                face = np.abs(counts - counts[grid.anchor]) / float(l_max)
            d = spatial + self.gamma * face
        else:  # RD
            if landmarks is None:
                raise ContractError("RD mode requires landmarks")
            kp = landmarks.sparse
            vecs = np.hypot(
                grid.centroids[:, 0:1] - kp[None, :, 0],
                grid.centroids[:, 1:2] - kp[None, :, 1],
            )  # (cells, 5)
            norms = np.linalg.norm(vecs, axis=1)
            va = vecs[grid.anchor]
            na = norms[grid.anchor]
            face = np.zeros(grid.num_cells)
            ok = (norms > 0) & (na > 0)
            if na > 0:
                face[ok] = 1.0 - vecs[ok] @ va / (norms[ok] * na)
            d = spatial + self.gamma * np.maximum(face, 0.0)
        return pe_index_array(d, self.alpha, self.beta, self.dmax)


def pe_lookup(buckets: PEBuckets, grid: CellGrid, i: int, anchor: int,
              landmarks: Optional[LandmarkSet] = None) -> Tensor:
    """Bucket value for cell i relative to `anchor`; gradient flows into
    exactly that bucket of the table."""
    d = combined_distance(i, anchor, grid, buckets.mode, buckets.gamma, landmarks)
    idx = pe_index(d, buckets.alpha, buckets.beta, buckets.dmax)
    return gather(buckets.table, np.array([idx]))


def pe_bias_batch(buckets: PEBuckets, grid: CellGrid,
                  landmarks: Iterable[Optional[LandmarkSet]]) -> Tensor:
    """Per-sample, per-cell bucket values: Tensor of shape (B, cells, 1)."""
    idx = np.stack([buckets.indices_for_grid(grid, lm) for lm in landmarks])
    return gather(buckets.table, idx)


# -- landmark file format ---------------------------------------------------

def write_landmark_file(path, records: Iterable[tuple[str, LandmarkSet]]) -> None:
    """One JSON object per line: {"id", "dense": [[x,y],...], "sparse": ...}."""
    with open(path, "w") as f:
        for rec_id, lm in records:
            obj = {
                "id": rec_id,
                "dense": [[float(x), float(y)] for x, y in lm.dense],
                "sparse": [[float(x), float(y)] for x, y in lm.sparse],
            }
            f.write(json.dumps(obj) + "\n")


def read_landmark_file(path) -> dict[str, LandmarkSet]:
    out: dict[str, LandmarkSet] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out[obj["id"]] = LandmarkSet(np.array(obj["dense"]),
                                     np.array(obj["sparse"]))
    return out
