"""Two-view augmentation, a small patch encoder and the cosine classifier.

The encoder is a stand-in for a pretrained vision transformer: a linear patch
embedding with positional embeddings followed by two residual self-attention
mixing blocks with layer scales. Both branches run the same parameter dict.
Forward and backward passes are written out by hand in float64 so every
gradient can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

# ---------------------------------------------------------------------------
# views


@dataclass
class ViewConfig:
    global_scale: tuple[float, float] = (0.9, 1.0)
    local_area: tuple[float, float] = (0.2, 0.6)
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    jitter: float = 0.1

    def __post_init__(self):
        for name in ("global_scale", "local_area"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi <= 1):
                raise ValueError(f"{name} must lie in (0, 1], got {(lo, hi)}")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


@dataclass
class ViewPair:
    global_view: np.ndarray
    local_view: np.ndarray
    global_crop: tuple[float, float, float, float]
    local_crop: tuple[float, float, float, float]
    seed: int | tuple = 0


def crop_resize(image: np.ndarray, crop, out_size: int) -> np.ndarray:
    """Bilinear resample of ``crop = (x, y, w, h)`` to ``out_size`` pixels square."""
    x0, y0, w, h = crop
    n = image.shape[0]
    if (x0, y0, w, h) == (0, 0, n, n) and out_size == n:
        return image.copy()
    t = (np.arange(out_size) + 0.5) / out_size
    ys = y0 + t * h - 0.5
    xs = x0 + t * w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((out_size, out_size, image.shape[2]))
    for ch in range(image.shape[2]):
        out[..., ch] = map_coordinates(image[..., ch], [yy, xx], order=1, mode="nearest")
    return out


def _jitter(rng, img, strength):
    if strength == 0:
        return img
    brightness = rng.uniform(-strength, strength)
    contrast = rng.uniform(1 - strength, 1 + strength)
    mean = img.mean()
    return np.clip((img - mean) * contrast + mean + brightness, 0.0, 1.0)


def make_views(image: np.ndarray, seed, cfg: ViewConfig | None = None) -> ViewPair:
    """Global near-full view and a random local crop, both at full resolution."""
    cfg = cfg or ViewConfig()
    image = np.asarray(image, dtype=np.float64)
    n = image.shape[0]
    rng = np.random.default_rng(seed)

    s = rng.uniform(*cfg.global_scale)
    gw = s * n
    gcrop = (rng.uniform(0, n - gw), rng.uniform(0, n - gw), gw, gw)

    area = rng.uniform(*cfg.local_area) * n * n
    log_r = rng.uniform(np.log(cfg.aspect[0]), np.log(cfg.aspect[1]))
    lw = min(np.sqrt(area * np.exp(log_r)), n)
    lh = min(np.sqrt(area / np.exp(log_r)), n)
    lcrop = (rng.uniform(0, n - lw), rng.uniform(0, n - lh), lw, lh)

    g = _jitter(rng, crop_resize(image, gcrop, n), cfg.jitter)
    loc = _jitter(rng, crop_resize(image, lcrop, n), cfg.jitter)
    return ViewPair(g, loc, gcrop, lcrop, seed)


@dataclass
class PatchAlignment:
    mapping: np.ndarray
    valid: np.ndarray


def align_patches(pair: ViewPair, patch_size: int, image_size: int | None = None) -> PatchAlignment:
    """Map each local patch to the global patch whose cell holds its center."""
    n = image_size or pair.local_view.shape[0]
    g = n // patch_size
    centers = (np.arange(g) + 0.5) * patch_size
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    lx0, ly0, lw, lh = pair.local_crop
    ox = lx0 + cx.ravel() / n * lw
    oy = ly0 + cy.ravel() / n * lh
    gx0, gy0, gw, gh = pair.global_crop
    gx = (ox - gx0) / gw * n
    gy = (oy - gy0) / gh * n
    valid = (gx >= 0) & (gx < n) & (gy >= 0) & (gy < n)
    col = np.clip(np.floor(gx / patch_size), 0, g - 1).astype(np.int64)
    row = np.clip(np.floor(gy / patch_size), 0, g - 1).astype(np.int64)
    return PatchAlignment(row * g + col, valid)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderConfig:
    image_size: int = 48
    patch_size: int = 8
    embed_dim: int = 64
    blocks: int = 2
    classes: int = 5
    temperature: float = 0.1
    layer_scale: float = 0.1

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


BLOCK_KEYS = ("wq", "wk", "wv", "scale")
NORM_FLOOR = 1e-12


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic parameters; the projection ``proj`` is the shared classifier."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE5C]))
    e = cfg.embed_dim
    params = {
        "embed": rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), size=(cfg.patch_dim, e)),
        "embed_bias": np.zeros(e),
        "pos": rng.normal(0.0, 0.02, size=(cfg.n_patches, e)),
    }
    for b in range(cfg.blocks):
        params[f"block{b}.wq"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, e))
        params[f"block{b}.wk"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, e))
        params[f"block{b}.wv"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, e))
        params[f"block{b}.scale"] = np.full(e, cfg.layer_scale)
    params["proj"] = rng.normal(0.0, 0.01, size=(e, cfg.classes))
    return params


def patchify(views: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, n, n, 3) images to (B, K, d*d*3) rows in row-major patch order."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 3:
        views = views[None]
    b, n, _, ch = views.shape
    g = n // patch_size
    x = views.reshape(b, g, patch_size, g, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * ch)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ForwardCache:
    patches: np.ndarray
    blocks: list = field(default_factory=list)
    features: np.ndarray | None = None
    feat_norm: np.ndarray | None = None
    feat_unit: np.ndarray | None = None
    w_norm: np.ndarray | None = None
    w_unit: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


def encode(views, params, cfg: EncoderConfig, cache: ForwardCache | None = None) -> np.ndarray:
    """Patch features ``(B, K, e)`` for a batch of views (or one view)."""
    views = np.asarray(views, dtype=np.float64)
    single = views.ndim == 3
    if views.shape[-3:-1] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} views, got {views.shape}")
    x = patchify(views, cfg.patch_size) - 0.5
    h = x @ params["embed"] + params["embed_bias"] + params["pos"]
    if cache is not None:
        cache.patches = x
    scale = 1.0 / np.sqrt(cfg.embed_dim)
    for b in range(cfg.blocks):
        wq, wk, wv, s = (params[f"block{b}.{k}"] for k in BLOCK_KEYS)
        q, k, v = h @ wq, h @ wk, h @ wv
        att = _softmax(q @ k.transpose(0, 2, 1) * scale)
        o = att @ v
        if cache is not None:
            cache.blocks.append((h, q, k, v, att, o))
        h = h + s * o
    if cache is not None:
        cache.features = h
    return h[0] if single else h


def predict(features, w, temperature: float, cache: ForwardCache | None = None) -> np.ndarray:
    """Row-softmax of cosine similarities between patch features and class weights."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    f = np.asarray(features, dtype=np.float64)
    # zero rows or columns stay zero, giving uniform rows
    fn = np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), NORM_FLOOR)
    fu = f / fn
    wn = np.maximum(np.linalg.norm(w, axis=0, keepdims=True), NORM_FLOOR)
    wu = w / wn
    logits = fu @ wu / temperature
    p = _softmax(logits)
    if cache is not None:
        cache.feat_norm, cache.feat_unit = fn, fu
        cache.w_norm, cache.w_unit = wn, wu
        cache.logits, cache.probs = logits, p
    return p


def forward(views, params, cfg: EncoderConfig) -> tuple[np.ndarray, ForwardCache]:
    cache = ForwardCache(patches=None)
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 3:
        views = views[None]
    feats = encode(views, params, cfg, cache)
    p = predict(feats, params["proj"], cfg.temperature, cache)
    return p, cache


def backward(d_logits, cache: ForwardCache, params, cfg: EncoderConfig, trainable=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the logits."""
    trainable = set(params) if trainable is None else set(trainable)
    grads = {}
    t = cfg.temperature
    d_cos = d_logits / t
    fu, wu = cache.feat_unit, cache.w_unit

    if "proj" in trainable:
        d_wu = np.einsum("bke,bkc->ec", fu, d_cos)
        grads["proj"] = (d_wu - wu * np.sum(d_wu * wu, axis=0, keepdims=True)) / cache.w_norm

    needs_encoder = any(not name == "proj" for name in trainable)
    if not needs_encoder:
        return grads

    d_fu = d_cos @ wu.T
    dh = (d_fu - fu * np.sum(d_fu * fu, axis=-1, keepdims=True)) / cache.feat_norm
    scale = 1.0 / np.sqrt(cfg.embed_dim)
    for b in reversed(range(cfg.blocks)):
        h, q, k, v, att, o = cache.blocks[b]
        wq, wk, wv, s = (params[f"block{b}.{key}"] for key in BLOCK_KEYS)
        grads[f"block{b}.scale"] = np.sum(dh * o, axis=(0, 1))
        do = dh * s
        d_att = do @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (d_att - np.sum(d_att * att, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        grads[f"block{b}.wq"] = np.einsum("bki,bkj->ij", h, dq)
        grads[f"block{b}.wk"] = np.einsum("bki,bkj->ij", h, dk)
        grads[f"block{b}.wv"] = np.einsum("bki,bkj->ij", h, dv)
        dh = dh + dq @ wq.T + dk @ wk.T + dv @ wv.T

    grads["embed"] = np.einsum("bkp,bke->pe", cache.patches, dh)
    grads["embed_bias"] = dh.sum(axis=(0, 1))
    grads["pos"] = dh.sum(axis=0)
    return {k: v for k, v in grads.items() if k in trainable}


def softmax_backward(d_probs, probs):
    """Gradient w.r.t. logits from a gradient w.r.t. row-softmax outputs."""
    return probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))


def pool_image_scores(p_image) -> np.ndarray:
    """Global max pooling over patches: one score per class."""
    p = np.asarray(p_image, dtype=np.float64)
    return p.max(axis=-2)


def pool_backward(d_scores, probs):
    """Route pooled-score gradients to the arg-max patch (first on ties)."""
    probs = np.asarray(probs)
    d_probs = np.zeros_like(probs)
    idx = probs.argmax(axis=-2)
    if probs.ndim == 2:
        d_probs[idx, np.arange(probs.shape[1])] = d_scores
    else:
        bi, ci = np.meshgrid(np.arange(probs.shape[0]), np.arange(probs.shape[2]), indexing="ij")
        d_probs[bi, idx, ci] = d_scores
    return d_probs


def trainable_names(params, warmup: bool) -> list[str]:
    """Classifier only during warm-up, then the classifier plus both mixing blocks."""
    if warmup:
        return ["proj"]
    return ["proj"] + [k for k in params if k.startswith("block")]
