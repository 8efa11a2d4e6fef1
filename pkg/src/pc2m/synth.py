"""Deterministic synthetic segmentation data with known class areas.

Each image is a noisy background (class 0) carrying one to three
non-overlapping rectangles or ellipses, each of a distinct foreground class.
Every class has a fixed color signature, some with a faint stripe texture.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .ot import check_measure

PALETTE = np.array(
    [
        [0.25, 0.30, 0.35],
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.90, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.05, 0.05, 0.05],
        [0.98, 0.98, 0.98],
    ]
)
MIN_COLOR_DISTANCE = 0.3
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class DatasetSpec:
    seed: int = 0
    image_count: int = 200
    class_count: int = 5
    image_size: int = 48
    patch_size: int = 8
    shapes_per_image: tuple[int, int] = (1, 3)
    shape_size: tuple[float, float] = (0.45, 0.7)
    class_weights: tuple[float, ...] | None = None
    noise: float = 0.05
    stripes: bool = True

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need background plus at least one foreground class")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError("shapes_per_image must satisfy 1 <= lo <= hi")
        if self.image_count < 1:
            raise ValueError("image_count must be >= 1")

    def weights(self) -> np.ndarray:
        """Sampling weights over foreground classes 1..|C|-1."""
        n_fg = self.class_count - 1
        if self.class_weights is None:
            return np.full(n_fg, 1.0 / n_fg)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (n_fg,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"class_weights must be {n_fg} nonnegative values")
        return w / w.sum()


@dataclass
class LabeledImage:
    image: np.ndarray
    mask: np.ndarray
    labels: frozenset[int]
    index: int = 0


def class_colors(class_count: int, seed: int = 0) -> np.ndarray:
    """Palette colors, extended by rejection sampling for large class counts."""
    colors = [c for c in PALETTE[:class_count]]
    rng = np.random.default_rng(seed)
    while len(colors) < class_count:
        cand = rng.uniform(0.05, 0.95, size=3)
        if min(np.linalg.norm(cand - c) for c in colors) >= MIN_COLOR_DISTANCE:
            colors.append(cand)
    return np.array(colors)


def _texture(cls: int, n: int, stripes: bool) -> np.ndarray:
    if not stripes or cls == 0 or cls % 2:
        return np.zeros((n, n))
    period = 4 + cls % 3
    yy, xx = np.mgrid[0:n, 0:n]
    direction = xx if (cls // 2) % 2 else yy
    return 0.08 * np.sin(2 * np.pi * direction / period)


def _shape_mask(rng, n, size, kind):
    h = w = max(3, int(round(size * n)))
    w = max(3, int(round(w * rng.uniform(0.75, 1.25))))
    w = min(w, n - 2)
    h = min(h, n - 2)
    y0 = int(rng.integers(1, n - h))
    x0 = int(rng.integers(1, n - w))
    m = np.zeros((n, n), dtype=bool)
    if kind == 0:
        m[y0:y0 + h, x0:x0 + w] = True
    else:
        yy, xx = np.mgrid[0:n, 0:n]
        cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
        m = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    return m


def _draw_classes(rng, weights: np.ndarray, k: int) -> list[int]:
    """Sequential weighted draws without replacement (foreground ids start at 1)."""
    w = weights.copy()
    chosen = []
    for _ in range(min(k, int(np.count_nonzero(w)))):
        c = int(rng.choice(w.size, p=w / w.sum()))
        chosen.append(c + 1)
        w[c] = 0.0
    return chosen


def image_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def gen_image(spec: DatasetSpec, index: int, colors: np.ndarray | None = None) -> LabeledImage:
    rng = np.random.default_rng(image_seed(spec.seed, index))
    n = spec.image_size
    colors = class_colors(spec.class_count, spec.seed) if colors is None else colors
    lo, hi = spec.shapes_per_image
    k = int(rng.integers(lo, hi + 1))
    classes = _draw_classes(rng, spec.weights(), k)

    mask = np.zeros((n, n), dtype=np.int64)
    occupied = np.zeros((n, n), dtype=bool)
    for cls in classes:
        size = rng.uniform(*spec.shape_size)
        kind = int(rng.integers(0, 2))
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            m = _shape_mask(rng, n, size, kind)
            grown = m.copy()
            grown[1:, :] |= m[:-1, :]
            grown[:-1, :] |= m[1:, :]
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            if not np.any(grown & occupied):
                break
            size *= 0.9
        else:
            raise RuntimeError(f"image {index}: could not place shape of class {cls}")
        mask[m] = cls
        occupied |= m

    img = np.empty((n, n, 3))
    for cls in np.unique(mask):
        sel = mask == cls
        tex = _texture(int(cls), n, spec.stripes)
        img[sel] = colors[cls][None, :] + tex[sel][:, None]
    img += rng.normal(0.0, spec.noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return LabeledImage(img, mask, frozenset(int(c) for c in np.unique(mask)), index)


def gen_dataset(spec: DatasetSpec) -> list[LabeledImage]:
    colors = class_colors(spec.class_count, spec.seed)
    return [gen_image(spec, i, colors) for i in range(spec.image_count)]


def ground_truth_area(masks, class_count: int) -> np.ndarray:
    """Mean per-image class area fractions, normalized to a measure."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape[0] == 0:
        raise ValueError("empty dataset")
    areas = np.zeros(class_count)
    for m in masks:
        areas += np.bincount(m.ravel(), minlength=class_count)[:class_count] / m.size
    areas /= masks.shape[0]
    return areas / areas.sum()


def patch_labels(mask, patch_size: int) -> np.ndarray:
    """Majority class per patch (ties to the lowest class id), row-major order."""
    mask = np.asarray(mask)
    n = mask.shape[0]
    g = n // patch_size
    blocks = mask.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3).reshape(g * g, -1)
    k = int(mask.max()) + 1
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(k)], axis=1)
    return counts.argmax(axis=1)


def presence_probabilities(spec: DatasetSpec) -> np.ndarray:
    """Exact probability that each class appears in an image.

    Enumerates every ordered draw sequence of the sampler; background is
    always present.
    """
    w = spec.weights()
    lo, hi = spec.shapes_per_image
    n_fg = w.size
    probs = np.zeros(spec.class_count)
    probs[0] = 1.0
    support = int(np.count_nonzero(w))
    for k in range(lo, hi + 1):
        pk = 1.0 / (hi - lo + 1)
        draws = min(k, support)
        for seq in itertools.permutations(range(n_fg), draws):
            p, remaining = 1.0, 1.0
            for c in seq:
                if remaining <= 0 or w[c] == 0:
                    p = 0.0
                    break
                p *= w[c] / remaining
                remaining -= w[c]
            if p:
                for c in seq:
                    probs[c + 1] += pk * p
    return probs


def induced_frequencies(spec: DatasetSpec) -> np.ndarray:
    probs = presence_probabilities(spec)
    return probs / probs.sum()


def save_dataset(directory: str | os.PathLike, data: list[LabeledImage]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrayio.save(d / "images.bin", {"images": np.stack([x.image for x in data])})
    arrayio.save(d / "masks.bin", {"masks": np.stack([x.mask for x in data])})
    with open(d / "index.txt", "w") as fh:
        fh.write("# image_id labels...\n")
        for x in data:
            fh.write(" ".join([str(x.index)] + [str(c) for c in sorted(x.labels)]) + "\n")


def load_dataset(directory: str | os.PathLike) -> list[LabeledImage]:
    d = Path(directory)
    images = arrayio.load(d / "images.bin")["images"]
    masks = arrayio.load(d / "masks.bin")["masks"]
    out = []
    with open(d / "index.txt") as fh:
        rows = [line.split() for line in fh if line.strip() and not line.startswith("#")]
    if len(rows) != images.shape[0]:
        raise ValueError("index.txt and images.bin disagree on image count")
    for row, img, m in zip(rows, images, masks):
        out.append(LabeledImage(img, m, frozenset(int(c) for c in row[1:]), int(row[0])))
    return out


def split_indices(count: int, seed: int, holdout: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Fixed train / held-out split; returns sorted index arrays."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    perm = rng.permutation(count)
    n_val = int(round(holdout * count))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def alpha_star(data: list[LabeledImage], class_count: int) -> np.ndarray:
    return check_measure(ground_truth_area([x.mask for x in data], class_count), "alpha*")
