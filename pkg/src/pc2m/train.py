"""Training loop, evaluation and experiment drivers."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .area import (
    AreaState,
    area_entropy,
    batch_frequencies,
    batch_rescale,
    class_frequencies,
    ema_update,
    image_density,
    init_area,
    js_divergence,
    mean_density,
    presence_matrix,
)
from .config import ConfigError, RunConfig
from .losses import argmax_coupling, batch_alignment, match_loss, mce_loss
from .metrics import beta_mix, confusion_matrix, f1_scores, match_clusters, miou
from .network import (
    EncoderConfig,
    ViewConfig,
    align_patches,
    backward,
    forward,
    init_params,
    make_views,
    pool_backward,
    pool_image_scores,
    softmax_backward,
    trainable_names,
)
from .ot import epsilon_at, gibbs_kernel, make_patch_marginal, sinkhorn
from .synth import (
    DatasetSpec,
    LabeledImage,
    alpha_star,
    gen_dataset,
    load_dataset,
    patch_labels,
    split_indices,
)

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class EpochRecord:
    epoch: int
    match: float
    mce: float
    total: float
    miou: float
    area_entropy: float
    js_prev: float
    js_star: float
    wall_time: float
    a_tilde: list[float] = field(default_factory=list)


@dataclass
class StepRecord:
    step: int
    match: float
    mce: float
    total: float
    grad_norm: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    area: AreaState
    epochs: list[EpochRecord]
    steps: list[StepRecord]
    encoder: EncoderConfig
    alpha_star: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    labels: list[frozenset]
    area_history: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        embed_dim=cfg.embed_dim,
        classes=cfg.class_count,
        temperature=cfg.temperature,
    )


def dataset_spec(cfg: RunConfig) -> DatasetSpec:
    return DatasetSpec(
        seed=cfg.data_seed,
        image_count=cfg.image_count,
        class_count=cfg.class_count,
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
    )


def load_data(cfg: RunConfig) -> list[LabeledImage]:
    if cfg.data_dir:
        try:
            data = load_dataset(cfg.data_dir)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
        n = data[0].image.shape[0]
        if n != cfg.image_size:
            raise ConfigError(f"dataset images are {n}px but image_size is {cfg.image_size}")
        return data
    return gen_dataset(dataset_spec(cfg))


def predict_images(images, params, enc: EncoderConfig, chunk: int = 64) -> np.ndarray:
    """Patch predictions ``(T, K, C)`` for unaugmented images."""
    out = []
    for s in range(0, len(images), chunk):
        p, _ = forward(np.stack(images[s:s + chunk]), params, enc)
        out.append(p)
    return np.concatenate(out)


def evaluate(params, data: list[LabeledImage], enc: EncoderConfig, include_background: bool = True) -> dict:
    """Per-patch arg-max against patch-majority ground truth."""
    if params["proj"].shape[1] != enc.classes:
        raise ValueError("checkpoint class count does not match the encoder")
    if any(int(x.mask.max()) >= enc.classes for x in data):
        raise ValueError("dataset has more classes than the checkpoint")
    probs = predict_images([x.image for x in data], params, enc)
    return score_predictions(probs.argmax(axis=2), data, enc.patch_size, enc.classes, include_background)


def score_predictions(pred, data: list[LabeledImage], patch_size: int, class_count: int,
                      include_background: bool = True) -> dict:
    """mIoU of per-patch class predictions ``(T, K)``."""
    gt = np.stack([patch_labels(x.mask, patch_size) for x in data])
    cm = confusion_matrix(gt, np.asarray(pred), class_count)
    score, per_class = miou(cm, include_background)
    return {"miou": score, "iou": per_class, "confusion": cm}


def dataset_densities(images, params, enc: EncoderConfig) -> np.ndarray:
    probs = predict_images(images, params, enc)
    return mean_density(image_density(p) for p in probs)


def training_labels(cfg: RunConfig, data, train_idx, pseudo=None) -> list[frozenset]:
    """Label sets fed to the class frequencies and the BCE loss."""
    gt = [data[i].labels for i in train_idx]
    if cfg.mode == "weak":
        return list(gt)
    if pseudo is None:
        raise ValueError(f"mode {cfg.mode!r} needs pseudo labels")
    pseudo = [pseudo[j] for j in range(len(train_idx))]
    if cfg.mode == "unsupervised":
        return pseudo
    mixed, _ = beta_mix(gt, pseudo, cfg.beta, cfg.seed)
    return mixed


def _ot_couplings(p, alpha, eps, cfg: RunConfig, per_image_alphas=None, k=None):
    """Sinkhorn coupling for one branch over the flattened batch."""
    if per_image_alphas is None:
        res = sinkhorn(gibbs_kernel(p, eps), make_patch_marginal(p.shape[0]), alpha,
                       cfg.sinkhorn_tol, cfg.sinkhorn_max_iter)
        return res.coupling
    b = len(per_image_alphas)
    q = np.empty_like(p)
    for i, a in enumerate(per_image_alphas):
        rows = slice(i * k, (i + 1) * k)
        res = sinkhorn(gibbs_kernel(p[rows], eps), make_patch_marginal(k), a,
                       cfg.sinkhorn_tol, cfg.sinkhorn_max_iter)
        q[rows] = res.coupling / b
    return q


def train(cfg: RunConfig, data: list[LabeledImage] | None = None, pseudo=None,
          step_log: bool = False) -> TrainResult:
    """Warm-up on the BCE loss, then the full objective with epoch-end area updates.

    ``pseudo`` holds class-id label sets for the training split (already mapped
    to class ids); it replaces ground truth in the unsupervised and mixing modes.
    """
    data = load_data(cfg) if data is None else data
    enc = encoder_config(cfg)
    train_idx, val_idx = split_indices(len(data), cfg.data_seed, cfg.holdout)
    train_set = [data[i] for i in train_idx]
    val_set = [data[i] for i in val_idx]
    labels = training_labels(cfg, data, train_idx, pseudo)
    y_all = presence_matrix(labels, cfg.class_count)
    nu_d = class_frequencies(labels, cfg.class_count)
    a_star = alpha_star(train_set, cfg.class_count)
    images = [x.image for x in train_set]

    params = init_params(enc, cfg.seed)
    state = init_area(nu_d, cfg.gamma)
    history = [state.a_tilde.copy()]
    view_cfg = ViewConfig()
    k = enc.n_patches
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2)
    records: list[EpochRecord] = []
    steps: list[StepRecord] = []
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        warm = epoch <= cfg.warmup_epochs
        opt.lr = cfg.lr if warm else cfg.lr * cfg.lr_decay
        names = trainable_names(params, warm)
        eps = epsilon_at(epoch - cfg.warmup_epochs, cfg.epochs - cfg.warmup_epochs, cfg.epsilon_schedule) \
            if cfg.epsilon_schedule else cfg.epsilon
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x0DE])).permutation(len(train_idx))
        sums = np.zeros(3)
        n_batches = 0
        running = []
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            b = len(batch)
            pairs = [make_views(images[j], np.random.SeedSequence([cfg.seed, epoch, int(train_idx[j])]), view_cfg)
                     for j in batch]
            views = np.stack([p.global_view for p in pairs] + [p.local_view for p in pairs])
            probs, cache = forward(views, params, enc)
            p_g, p_l = probs[:b], probs[b:]
            y = y_all[batch]

            pooled = pool_image_scores(p_g)
            mce = mce_loss(pooled, y)
            d_logits = np.zeros_like(probs)
            d_logits[:b] += softmax_backward(pool_backward(mce.grad, p_g), p_g)
            match_value = 0.0
            if not warm:
                flat_g = p_g.reshape(b * k, -1)
                flat_l = p_l.reshape(b * k, -1)
                if cfg.use_ot:
                    batch_labels = [labels[j] for j in batch]
                    if cfg.per_image_ot:
                        alphas = [batch_rescale(state.a_tilde, batch_frequencies([lab], cfg.class_count,
                                                                               cfg.nu_b_indicator), nu_d)
                                  for lab in batch_labels]
                        q_g = _ot_couplings(flat_g, None, eps, cfg, alphas, k)
                        q_l = _ot_couplings(flat_l, None, eps, cfg, alphas, k)
                    else:
                        nu_b = batch_frequencies(batch_labels, cfg.class_count, cfg.nu_b_indicator)
                        alpha = batch_rescale(state.a_tilde, nu_b, nu_d)
                        q_g = _ot_couplings(flat_g, alpha, eps, cfg)
                        q_l = _ot_couplings(flat_l, alpha, eps, cfg)
                else:
                    q_g, q_l = argmax_coupling(flat_g), argmax_coupling(flat_l)
                aligns = [align_patches(p, enc.patch_size) for p in pairs]
                mapping, valid = batch_alignment([a.mapping for a in aligns], [a.valid for a in aligns], k)
                m = match_loss(flat_g, flat_l, q_g, q_l, mapping, valid, cfg.match_mode)
                match_value = m.value
                d_logits[:b] += m.grad_global.reshape(b, k, -1)
                d_logits[b:] += m.grad_local.reshape(b, k, -1)

            grads = backward(d_logits, cache, params, enc, names)
            gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
            total = match_value + mce.value
            if not np.isfinite(total) or not np.isfinite(gnorm):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    {"batch": np.asarray(train_idx[batch]), "probs": probs, "match": match_value, "mce": mce.value},
                )
            opt.step(params, grads)
            if cfg.strict_density is False:
                running.extend(image_density(p) for p in p_g)
            sums += (match_value, mce.value, total)
            n_batches += 1
            step += 1
            if step_log:
                steps.append(StepRecord(step, match_value, mce.value, total, gnorm))

        prev = state.a_tilde.copy()
        dens = dataset_densities(images, params, enc) if cfg.strict_density else mean_density(running)
        state = ema_update(state, dens, cfg.gamma)
        history.append(state.a_tilde.copy())
        ev = evaluate(params, val_set, enc)
        means = sums / max(n_batches, 1)
        records.append(EpochRecord(
            epoch=epoch,
            match=float(means[0]),
            mce=float(means[1]),
            total=float(means[2]),
            miou=ev["miou"],
            area_entropy=area_entropy(state.a_tilde),
            js_prev=js_divergence(state.a_tilde, prev),
            js_star=js_divergence(a_star, state.a_tilde),
            wall_time=time.perf_counter() - t0,
            a_tilde=[float(x) for x in state.a_tilde],
        ))
        log.info("epoch %d miou=%.4f js*=%.4f H=%.4f", epoch, ev["miou"], records[-1].js_star,
                 records[-1].area_entropy)

    return TrainResult(params, state, records, steps, enc, a_star, train_idx, val_idx, labels, history)


def frozen_objective(cfg: RunConfig, data: list[LabeledImage], batch=(0, 1), epoch: int = 2, names=None):
    """Full batch objective as a function of the parameters, couplings held fixed.

    The couplings are computed once from ``params`` at construction, which is
    what stop-gradient means for a finite-difference check. Returns
    ``(loss_fn, params)`` where ``loss_fn(params) -> (value, grads)``.
    Gradients cover the post-warm-up trainable set unless ``names`` is given.
    """
    enc = encoder_config(cfg)
    params = init_params(enc, cfg.seed)
    labels = [data[i].labels for i in batch]
    y = presence_matrix(labels, cfg.class_count)
    nu_d = class_frequencies([x.labels for x in data], cfg.class_count)
    pairs = [make_views(data[i].image, np.random.SeedSequence([cfg.seed, epoch, int(i)])) for i in batch]
    views = np.stack([p.global_view for p in pairs] + [p.local_view for p in pairs])
    b, k = len(batch), enc.n_patches
    aligns = [align_patches(p, enc.patch_size) for p in pairs]
    mapping, valid = batch_alignment([a.mapping for a in aligns], [a.valid for a in aligns], k)
    probs, _ = forward(views, params, enc)
    alpha = batch_rescale(nu_d, batch_frequencies(labels, cfg.class_count, cfg.nu_b_indicator), nu_d)
    q_g = _ot_couplings(probs[:b].reshape(b * k, -1), alpha, cfg.epsilon, cfg)
    q_l = _ot_couplings(probs[b:].reshape(b * k, -1), alpha, cfg.epsilon, cfg)
    names = trainable_names(params, warmup=False) if names is None else list(names)

    def loss_fn(prm):
        pr, cache = forward(views, prm, enc)
        p_g, p_l = pr[:b], pr[b:]
        mce = mce_loss(pool_image_scores(p_g), y)
        m = match_loss(p_g.reshape(b * k, -1), p_l.reshape(b * k, -1), q_g, q_l, mapping, valid, cfg.match_mode)
        d = np.zeros_like(pr)
        d[:b] += softmax_backward(pool_backward(mce.grad, p_g), p_g)
        d[:b] += m.grad_global.reshape(b, k, -1)
        d[b:] += m.grad_local.reshape(b, k, -1)
        return m.value + mce.value, backward(d, cache, prm, enc, names)

    return loss_fn, params


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, result_or_params, enc: EncoderConfig, area: AreaState | None = None) -> None:
    params = result_or_params.params if isinstance(result_or_params, TrainResult) else result_or_params
    area = result_or_params.area if isinstance(result_or_params, TrainResult) else area
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays["meta/encoder"] = np.array([enc.image_size, enc.patch_size, enc.embed_dim, enc.blocks,
                                       enc.classes, enc.temperature, enc.layer_scale], dtype=np.float64)
    if area is not None:
        arrays["area/a_tilde"] = area.a_tilde
        arrays["area/meta"] = np.array([area.epoch, area.gamma], dtype=np.float64)
    arrayio.save(path, arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], EncoderConfig, AreaState | None]:
    arrays = arrayio.load(path)
    meta = arrays["meta/encoder"]
    enc = EncoderConfig(
        image_size=int(meta[0]), patch_size=int(meta[1]), embed_dim=int(meta[2]), blocks=int(meta[3]),
        classes=int(meta[4]), temperature=float(meta[5]), layer_scale=float(meta[6]),
    )
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    area = None
    if "area/a_tilde" in arrays:
        epoch, gamma = arrays["area/meta"]
        area = AreaState(arrays["area/a_tilde"], int(epoch), float(gamma))
    return params, enc, area


EPOCH_COLUMNS = ["epoch", "match", "mce", "total", "miou", "area_entropy", "js_prev", "js_star", "wall_time"]


def write_epochs_csv(path, records: list[EpochRecord], class_count: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_COLUMNS + [f"a_tilde_{c}" for c in range(class_count)])
        for r in records:
            row = asdict(r)
            w.writerow([_fmt(row[c]) for c in EPOCH_COLUMNS] + [_fmt(x) for x in r.a_tilde])


def write_steps_csv(path, steps: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_match", "L_MCE", "L_PC2M", "grad_norm"])
        for s in steps:
            w.writerow([s.step, _fmt(s.match), _fmt(s.mce), _fmt(s.total), _fmt(s.grad_norm)])


def write_report_csv(path, ev: dict, f1: tuple[float, float] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for c, v in enumerate(ev["iou"]):
            w.writerow([f"iou_{c}", _fmt(v)])
        w.writerow(["miou", _fmt(ev["miou"])])
        if f1 is not None:
            w.writerow(["f1_micro", _fmt(f1[0])])
            w.writerow(["f1_macro", _fmt(f1[1])])


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# unsupervised labels and sweeps


def make_pseudo_labels(cfg: RunConfig, data: list[LabeledImage], idx=None):
    """Spectral pseudo labels for ``data[idx]``, mapped to class ids by Hungarian matching.

    Returns ``(cluster_sets, class_sets, f1)`` where ``f1`` compares the
    mapped sets with ground truth (evaluation only).
    """
    from .spectral import SpectralConfig, pseudo_labels

    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    enc = encoder_config(cfg)
    sp = SpectralConfig(k_e=cfg.spectral_k_e, n_regions=cfg.spectral_regions, seed=cfg.spectral_seed)
    params = init_params(enc, sp.encoder_seed)
    images = [data[i].image for i in idx]
    clusters, _ = pseudo_labels(images, params, enc, sp, cfg.class_count)
    gt = [data[i].labels for i in idx]
    mapping = map_cluster_sets(clusters, gt, cfg.class_count)
    mapped = [frozenset(int(mapping[c]) for c in s if mapping[c] >= 0) for s in clusters]
    return clusters, mapped, f1_scores(mapped, gt)


def map_cluster_sets(cluster_sets, gt_sets, class_count: int) -> np.ndarray:
    ids_a, ids_b = [], []
    for cs, gs in zip(cluster_sets, gt_sets):
        for a in cs:
            for b in gs:
                ids_a.append(a)
                ids_b.append(b)
    return match_clusters(ids_a, ids_b, class_count, class_count)


@dataclass
class SweepRow:
    parameter: str
    value: float
    miou: float
    area_entropy: float
    js_star: float
    f1_micro: float
    f1_macro: float


def sweep(cfg: RunConfig, parameter: str, values, data=None) -> list[SweepRow]:
    """One training run per value with shared seeds."""
    if parameter not in ("gamma", "beta"):
        raise ValueError("sweep parameter must be gamma or beta")
    if len(values) < 2:
        raise ValueError("a sweep needs at least two values")
    data = load_data(cfg) if data is None else data
    pseudo = None
    if parameter == "beta" or cfg.mode != "weak":
        train_idx, _ = split_indices(len(data), cfg.data_seed, cfg.holdout)
        _, pseudo, _ = make_pseudo_labels(cfg, data, train_idx)
    rows = []
    for v in values:
        if parameter == "gamma":
            run_cfg = cfg.replace(gamma=float(v))
        else:
            run_cfg = cfg.replace(beta=float(v), mode="beta-mix")
        res = train(run_cfg, data, pseudo)
        gt = [data[i].labels for i in res.train_idx]
        f1 = f1_scores(res.labels, gt)
        last = res.epochs[-1]
        rows.append(SweepRow(parameter, float(v), last.miou, last.area_entropy, last.js_star, f1[0], f1[1]))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value", "miou", "area_entropy", "js_star", "f1_micro", "f1_macro"])
        for r in rows:
            w.writerow([r.parameter, _fmt(r.value), _fmt(r.miou), _fmt(r.area_entropy), _fmt(r.js_star),
                        _fmt(r.f1_micro), _fmt(r.f1_macro)])


def save_outputs(out_dir, result: TrainResult, step_log: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", result, result.encoder)
    write_epochs_csv(out / "epochs.csv", result.epochs, result.encoder.classes)
    if step_log and result.steps:
        write_steps_csv(out / "steps.csv", result.steps)
    return out
