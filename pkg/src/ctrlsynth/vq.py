"""Stage one: patch codebook that maps images to grids of discrete codes and back.

A k-means codebook over flattened pixel patches stands in for a learned
convolutional quantizer. Each code indexes one patch-sized block, so a token
in the grid corresponds to exactly one image block.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"UFCV"
VERSION = 1


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, dim)
    history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("codebook needs a (K, dim) array with K >= 1")
        if not np.isfinite(self.centroids).all():
            raise ValueError("codebook centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        head = MAGIC + struct.pack("<III", VERSION, self.K, self.dim)
        Path(path).write_bytes(head + self.centroids.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        version, k, dim = struct.unpack_from("<III", raw, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if len(raw) != 16 + 4 * k * dim:
            raise ValueError(f"{path}: truncated codebook")
        data = np.frombuffer(raw, "<f4", k * dim, 16).reshape(k, dim)
        return cls(data.astype(np.float64))


def _sq_dists(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # exact pairwise squared distances; the expanded form loses ties to rounding
    out = np.empty((len(vectors), len(centroids)))
    for k, c in enumerate(centroids):
        diff = vectors - c
        out[:, k] = np.einsum("ij,ij->i", diff, diff)
    return out


def nearest_codes(vectors, codebook: Codebook) -> np.ndarray:
    """Index of the closest centroid for every row; ties go to the lowest index."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != codebook.dim:
        raise ValueError(f"vector dim {vectors.shape[1]} != codebook dim {codebook.dim}")
    return _sq_dists(vectors, codebook.centroids).argmin(axis=1)


def nearest_code(vector, codebook: Codebook) -> int:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise ValueError("expected a single vector")
    return int(nearest_codes(vector[None], codebook)[0])


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    closest = ((points - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return np.array(centers)


def fit_codebook(patches, K: int, max_iters: int = 50, seed: int = 0, tol: float = 1e-6) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    ``Codebook.history`` holds the sum of squared distances after every
    assignment step. Empty clusters are reseeded at the point farthest from
    its centroid.
    """
    points = np.asarray(patches, dtype=np.float64)
    if len(points) < K:
        raise ValueError(f"need at least K={K} patches, got {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(points, K, rng)
    history: list[float] = []
    for it in range(max_iters):
        d = _sq_dists(points, centroids)
        labels = d.argmin(1)
        best = d[np.arange(len(points)), labels]
        objective = float(best.sum())
        history.append(objective)
        log.debug("kmeans iter %d objective %.6f", it, objective)

        counts = np.bincount(labels, minlength=K)
        new = np.zeros_like(centroids)
        np.add.at(new, labels, points)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        # keep the previous centroid for empty clusters, then move it to a far point
        new[~filled] = centroids[~filled]
        if (~filled).any():
            far = np.argsort(-best)
            for slot, idx in zip(np.flatnonzero(~filled), far):
                new[slot] = points[idx]
        centroids = new

        if len(history) >= 2:
            prev = history[-2]
            if prev == 0 or (prev - objective) / prev < tol:
                break
    # final assignment objective for the returned centroids
    history.append(float(_sq_dists(points, centroids).min(1).sum()))
    return Codebook(centroids, history)


def image_to_patches(image: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    H, W, C = image.shape
    if H % patch_h or W % patch_w:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch_h}x{patch_w}")
    h, w = H // patch_h, W // patch_w
    blocks = image.reshape(h, patch_h, w, patch_w, C).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(h * w, patch_h * patch_w * C)


def encode_image(image, codebook: Codebook, patch_h: int = 4, patch_w: int = 4) -> np.ndarray:
    """Quantize ``image`` into an (H/patch_h, W/patch_w) grid of code indices."""
    H, W = np.shape(image)[:2]
    patches = image_to_patches(image, patch_h, patch_w)
    return nearest_codes(patches, codebook).reshape(H // patch_h, W // patch_w)


def decode_tokens(grid, codebook: Codebook, patch_h: int = 4, patch_w: int = 4) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size and (grid.min() < 0 or grid.max() >= codebook.K):
        raise IndexError(f"code out of range [0, {codebook.K})")
    h, w = grid.shape
    channels = codebook.dim // (patch_h * patch_w)
    if channels * patch_h * patch_w != codebook.dim:
        raise ValueError("patch size does not match codebook dim")
    blocks = codebook.centroids[grid.reshape(-1)].reshape(h, w, patch_h, patch_w, channels)
    image = blocks.transpose(0, 2, 1, 3, 4).reshape(h * patch_h, w * patch_w, channels)
    return np.clip(image, 0.0, 1.0)


def reconstruction_psnr(original, reconstruction) -> float:
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10 * np.log10(1.0 / mse)
