"""Serialize images and point clouds into token sequences.

Images are cut into a row-major grid of ``Q x Q`` patches. Point clouds are
grouped around farthest-point-sampled centers; each group holds the ``k``
nearest neighbours of its center, expressed relative to that center.

Distances are compared as squared Euclidean values and every tie is broken
toward the lowest point index, which keeps the output bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class ImagePatchSequence:
    patches: np.ndarray  # [M, Q*Q*C]
    height: int
    width: int
    channels: int
    patch: int

    @property
    def length(self) -> int:
        return self.patches.shape[0]


@dataclass
class PointPatchSequence:
    patches: np.ndarray  # [G, k*C]
    centers: np.ndarray  # [G, C]
    center_indices: np.ndarray
    neighbor_indices: np.ndarray  # [G, k]

    @property
    def length(self) -> int:
        return self.patches.shape[0]


def patchify_image(image: np.ndarray, patch: int) -> ImagePatchSequence:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be [H, W, C], got shape {image.shape}")
    h, w, c = image.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image size {h}x{w}")
    gh, gw = h // patch, w // patch
    rows = (image.reshape(gh, patch, gw, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * c))
    return ImagePatchSequence(rows, h, w, c, patch)


def unpatchify_image(seq: ImagePatchSequence) -> np.ndarray:
    q, c = seq.patch, seq.channels
    gh, gw = seq.height // q, seq.width // q
    return (seq.patches.reshape(gh, gw, q, q, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(seq.height, seq.width, c))


def patchify_images(images: np.ndarray, patch: int) -> np.ndarray:
    """Batched :func:`patchify_image`: ``[B, H, W, C] -> [B, M, Q*Q*C]``."""
    b, h, w, c = images.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image size {h}x{w}")
    gh, gw = h // patch, w // patch
    return (images.reshape(b, gh, patch, gw, patch, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, gh * gw, patch * patch * c))


def _sqdist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    d = points - center
    return np.einsum("ij,ij->i", d, d)


def farthest_point_sample(points: np.ndarray, num_centers: int, rng=None,
                          start: int | None = None) -> np.ndarray:
    """Greedy max-min selection of ``num_centers`` point indices.

    The first index comes from ``rng`` (uniform) unless ``start`` pins it.
    """
    points = np.asarray(points)
    n = points.shape[0]
    if num_centers < 1:
        raise ParameterError(f"need at least one center, got G={num_centers}")
    if num_centers > n:
        raise ParameterError(f"cannot sample G={num_centers} centers from {n} points")
    if start is None:
        if rng is None:
            raise ParameterError("farthest_point_sample needs an rng or an explicit start index")
        start = int(rng.integers(n))
    idx = np.empty(num_centers, dtype=np.int64)
    idx[0] = start
    mind = _sqdist(points, points[start])
    for i in range(1, num_centers):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(mind))
        idx[i] = nxt
        np.minimum(mind, _sqdist(points, points[nxt]), out=mind)
    return idx


def knn_group(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points per center, ascending, lowest index on ties."""
    points = np.asarray(points)
    centers = np.asarray(centers)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ParameterError(f"k={k} must lie in [1, {n}]")
    diff = centers[:, None, :] - points[None, :, :]
    d2 = np.einsum("gnc,gnc->gn", diff, diff)
    if k == n:
        # stable sort keeps equal distances in index order
        return np.argsort(d2, axis=1, kind="stable")
    # partial selection, then an exact ordering of the k survivors by (distance, index)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    cut = np.take_along_axis(d2, part, axis=1).max(axis=1, keepdims=True)
    out = np.empty((d2.shape[0], k), dtype=np.int64)
    # rows where more than k points sit at or below the cut have a tie at the boundary
    tied = np.count_nonzero(d2 <= cut, axis=1) > k
    for g in np.nonzero(tied)[0]:
        out[g] = np.argsort(d2[g], kind="stable")[:k]
    for g in np.nonzero(~tied)[0]:
        cand = part[g]
        out[g] = cand[np.lexsort((cand, d2[g, cand]))]
    return out


def build_point_patches(points: np.ndarray, num_centers: int, k: int, rng=None,
                        start: int | None = None) -> PointPatchSequence:
    points = np.asarray(points)
    if points.ndim != 2:
        raise ShapeError(f"point cloud must be [N, C], got shape {points.shape}")
    n, c = points.shape
    if k > n:
        raise ParameterError(f"k={k} exceeds cloud size {n}")
    cidx = farthest_point_sample(points, num_centers, rng, start=start)
    centers = points[cidx]
    nidx = knn_group(points, centers, k)
    patches = (points[nidx] - centers[:, None, :]).reshape(num_centers, k * c)
    return PointPatchSequence(patches, centers, cidx, nidx)


def build_point_patches_batch(clouds, num_centers: int, k: int, rngs, workers: int = 1):
    """Tokenize a batch of clouds; returns ``(patches [B,G,k*C], centers [B,G,C])``.

    ``rngs`` supplies one stream per cloud so the result does not depend on
    worker scheduling.
    """
    def one(i):
        return build_point_patches(clouds[i], num_centers, k, rngs[i])

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            seqs = list(pool.map(one, range(len(clouds))))
    else:
        seqs = [one(i) for i in range(len(clouds))]
    return (np.stack([s.patches for s in seqs]), np.stack([s.centers for s in seqs]))
