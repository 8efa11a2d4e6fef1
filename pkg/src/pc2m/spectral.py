"""Unsupervised image-level pseudo labels from spectral patch clustering.

Per image: a patch affinity graph from encoder features, the low end of its
normalized Laplacian spectrum, and k-means on the eigenvector rows to get
regions. Region bounding boxes are cropped, re-encoded, pooled, and clustered
over the whole dataset; each image is labeled with the clusters of its crops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .network import EncoderConfig, crop_resize, encode

log = logging.getLogger(__name__)

DEGREE_FLOOR = 1e-12


@dataclass
class AffinityGraph:
    a: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    isolated: bool = False


@dataclass
class EigenBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass
class RegionSet:
    labels: np.ndarray
    boxes: list[tuple[int, int, int, int]]
    flagged: bool = False

    @property
    def count(self) -> int:
        return len(self.boxes)


def normalized_laplacian(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    degree = a.sum(axis=1)
    isolated = bool(np.any(degree < DEGREE_FLOOR))
    d_isqrt = 1.0 / np.sqrt(np.maximum(degree, DEGREE_FLOOR))
    lap = np.diag(degree) - a
    lap = d_isqrt[:, None] * lap * d_isqrt[None, :]
    return 0.5 * (lap + lap.T), degree, isolated


def patch_affinity(features) -> AffinityGraph:
    """Cosine affinities with negative weights clipped to zero."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    zero_rows = norms[:, 0] == 0
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    a = np.maximum(unit @ unit.T, 0.0)
    a = 0.5 * (a + a.T)
    lap, degree, isolated = normalized_laplacian(a)
    if isolated or np.any(zero_rows):
        log.warning("affinity graph has isolated vertices; degree floor applied")
    return AffinityGraph(a, degree, lap, isolated or bool(np.any(zero_rows)))


def graph_from_affinity(a) -> AffinityGraph:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T) or np.any(a < 0):
        raise ValueError("affinity must be square, symmetric and nonnegative")
    lap, degree, isolated = normalized_laplacian(a)
    return AffinityGraph(a, degree, lap, isolated)


def eigendecompose(g: AffinityGraph | np.ndarray, k_e: int) -> EigenBasis:
    """The ``k_e`` smallest eigenpairs of the Laplacian, ascending.

    Lanczos (ARPACK) on ``2I - L``, whose top eigenpairs are the bottom ones
    of ``L`` since the spectrum lies in [0, 2]. When ``k_e`` is too close to
    the vertex count for Lanczos, a dense solve is used instead.
    """
    lap = g.laplacian if isinstance(g, AffinityGraph) else np.asarray(g, dtype=np.float64)
    n = lap.shape[0]
    if not 1 <= k_e <= n:
        raise ValueError(f"k_e must lie in 1..{n}")
    if k_e >= n - 1:
        vals, vecs = np.linalg.eigh(lap)
        vals, vecs = vals[:k_e], vecs[:, :k_e]
    else:
        shifted = 2.0 * np.eye(n) - lap
        try:
            top, vecs = eigsh(shifted, k=k_e, which="LA", tol=0, v0=np.ones(n), maxiter=50 * n)
        except ArpackNoConvergence as exc:
            resid = _residual(lap, 2.0 - exc.eigenvalues, exc.eigenvectors) if len(exc.eigenvalues) else np.inf
            raise RuntimeError(f"eigensolver did not converge, residual {resid:.3e}") from exc
        vals = 2.0 - top
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
    if isinstance(g, AffinityGraph) and not g.isolated:
        vecs = _pin_trivial(vals, vecs, np.sqrt(g.degree))
    vecs = _fix_signs(vecs)
    resid = _residual(lap, vals, vecs)
    if resid > 1e-6:
        raise RuntimeError(f"eigenpairs inaccurate, residual {resid:.3e}")
    return EigenBasis(vals, vecs)


def _pin_trivial(vals, vecs, root_degree, tol: float = 1e-8):
    """Rotate the near-null eigenspace so its first column is D^{1/2} 1.

    With several components the null space is degenerate and the solver may
    return any basis of it; dropping "the first column" is only meaningful
    once that column is the trivial vector.
    """
    null = np.flatnonzero(np.abs(vals - vals[0]) <= tol)
    if len(null) < 2:
        return vecs
    t = root_degree / np.linalg.norm(root_degree)
    span = vecs[:, null]
    rest = span - np.outer(t, t @ span)
    u, _, _ = np.linalg.svd(rest, full_matrices=False)
    out = vecs.copy()
    out[:, null[0]] = t
    out[:, null[1:]] = u[:, : len(null) - 1]
    return out


def _residual(lap, vals, vecs):
    return float(np.max(np.abs(lap @ vecs - vecs * vals[None, :])))


def _fix_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs[None, :]


def kmeans(x, k: int, seed: int = 0, iters: int = 50, decimals: int = 8, restarts: int = 10):
    """k-means++ seeded k-means returning ``(labels, centers, flagged)``.

    Rows are put in a canonical (lexicographic) order before seeding so that
    the partition does not depend on row order. ``restarts`` seedings are
    drawn from ``seed`` and the lowest-inertia run is kept (first on ties).
    When fewer than ``k`` distinct rows exist only that many clusters are
    formed and ``flagged`` is set. Ties go to the lowest cluster index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rounded = np.round(x, decimals)
    order = np.lexsort(rounded.T[::-1])
    xs = x[order]
    distinct = np.unique(rounded, axis=0).shape[0]
    k_eff = min(k, distinct)

    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        labels, centers = _lloyd(xs, k_eff, np.random.default_rng(child), iters)
        inertia = float(np.sum((xs - centers[labels]) ** 2))
        if best is None or inertia < best[0] - 1e-12 * max(1.0, best[0]):
            best = (inertia, labels, centers)
    _, labels, centers = best

    # renumber clusters by first appearance in canonical order, drop empties
    remap = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    labels = np.array([remap[int(l)] for l in labels], dtype=np.int64)
    centers = centers[sorted(remap, key=remap.get)]
    out = np.empty_like(labels)
    out[order] = labels
    return out, centers, distinct < k or len(remap) < k


def _lloyd(xs, k, rng, iters):
    centers = [xs[int(rng.integers(len(xs)))]]
    d2 = np.sum((xs - centers[0]) ** 2, axis=1)
    while len(centers) < k:
        if d2.sum() <= 0:
            break
        nxt = xs[int(rng.choice(len(xs), p=d2 / d2.sum()))]
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((xs - nxt) ** 2, axis=1))
    centers = np.array(centers)

    labels = np.zeros(len(xs), dtype=np.int64)
    for it in range(iters):
        dist = np.sum((xs[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = dist.argmin(axis=1)
        for c in range(len(centers)):
            members = xs[new == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
    return new, centers


def cluster_eigenvectors(basis: EigenBasis, n_regions: int, seed: int = 0, grid: int | None = None) -> RegionSet:
    """Regions from k-means on eigenvector rows, skipping the trivial first one."""
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    vecs = basis.eigenvectors
    rows = vecs[:, 1:] if vecs.shape[1] > 1 else vecs
    labels, _, flagged = kmeans(rows, n_regions, seed)
    if flagged:
        log.info("fewer distinct eigenvector rows than requested regions")
    n_v = len(labels)
    if grid is None:
        side = int(round(np.sqrt(n_v)))
        grid = side if side * side == n_v else (1, n_v)
    return RegionSet(labels, region_boxes(labels, grid), flagged)


def region_boxes(labels, grid) -> list[tuple[int, int, int, int]]:
    """Bounding boxes ``(row0, col0, row1, col1)`` in patch units, end-exclusive.

    ``grid`` is a side length or a ``(rows, cols)`` pair.
    """
    shape = (grid, grid) if np.isscalar(grid) else tuple(grid)
    labels = np.asarray(labels).reshape(shape)
    boxes = []
    for r in range(int(labels.max()) + 1):
        ys, xs = np.nonzero(labels == r)
        boxes.append((int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1))
    return boxes


@dataclass
class SpectralConfig:
    k_e: int = 3
    n_regions: int = 3
    seed: int = 0
    encoder_seed: int = 1234
    kmeans_iters: int = 50
    per_image: bool = True


def image_regions(features, cfg: SpectralConfig, grid: int) -> RegionSet:
    g = patch_affinity(features)
    basis = eigendecompose(g, min(cfg.k_e, len(features)))
    return cluster_eigenvectors(basis, cfg.n_regions, cfg.seed, grid)


def dataset_regions(features_list, cfg: SpectralConfig, grid: int) -> list[RegionSet]:
    """One graph over every patch of every image; regions split per image."""
    k = len(features_list[0])
    g = patch_affinity(np.concatenate(features_list))
    basis = eigendecompose(g, min(cfg.k_e, k * len(features_list)))
    labels, _, flagged = kmeans(basis.eigenvectors[:, 1:], cfg.n_regions, cfg.seed)
    out = []
    for i in range(len(features_list)):
        lab = labels[i * k:(i + 1) * k]
        _, lab = np.unique(lab, return_inverse=True)
        out.append(RegionSet(lab, region_boxes(lab, grid), flagged))
    return out


def crop_features(image, regions: RegionSet, params, enc: EncoderConfig) -> np.ndarray:
    """Pooled, normalized encoder feature of every region crop of one image."""
    d = enc.patch_size
    feats = []
    for r0, c0, r1, c1 in regions.boxes:
        crop = (c0 * d, r0 * d, (c1 - c0) * d, (r1 - r0) * d)
        view = crop_resize(np.asarray(image, dtype=np.float64), crop, enc.image_size)
        f = encode(view, params, enc).mean(axis=0)
        feats.append(f / max(np.linalg.norm(f), 1e-12))
    return np.array(feats)


def crops_and_global_kmeans(images, regions: list[RegionSet], params, enc: EncoderConfig, k: int, seed: int = 0):
    """Cluster every region crop in the dataset; label images by crop clusters.

    Returns ``(label_sets, crop_clusters, crop_owner)``.
    """
    feats, owner = [], []
    for i, (img, reg) in enumerate(zip(images, regions)):
        if reg.count < 1:
            raise ValueError(f"image {i} has no regions")
        f = crop_features(img, reg, params, enc)
        feats.append(f)
        owner.extend([i] * len(f))
    feats = np.concatenate(feats)
    if k > len(feats):
        raise ValueError(f"k={k} exceeds the number of crops ({len(feats)})")
    clusters, _, _ = kmeans(feats, k, seed)
    owner = np.array(owner)
    label_sets = [frozenset(int(c) for c in clusters[owner == i]) for i in range(len(images))]
    return label_sets, clusters, owner


def pseudo_labels(images, params, enc: EncoderConfig, cfg: SpectralConfig, k: int):
    """Full unsupervised pipeline for a list of images."""
    feats = [encode(np.asarray(img, dtype=np.float64), params, enc) for img in images]
    if cfg.per_image:
        regions = [image_regions(f, cfg, enc.grid) for f in feats]
    else:
        regions = dataset_regions(feats, cfg, enc.grid)
    label_sets, clusters, owner = crops_and_global_kmeans(images, regions, params, enc, k, cfg.seed)
    return label_sets, regions


def write_pseudo_labels(path, ids, label_sets) -> None:
    """One line per image: ``<image_id> <cluster_id> ...`` (0-based ids)."""
    with open(path, "w") as fh:
        fh.write("# image_id cluster_ids...\n")
        for i, labels in zip(ids, label_sets):
            fh.write(" ".join([str(int(i))] + [str(c) for c in sorted(labels)]) + "\n")


def read_pseudo_labels(path) -> tuple[list[int], list[frozenset[int]]]:
    ids, sets = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            ids.append(int(parts[0]))
            sets.append(frozenset(int(c) for c in parts[1:]))
    return ids, sets
