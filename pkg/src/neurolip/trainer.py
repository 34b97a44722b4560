"""AdamW with warmup + cosine schedule, stratified splits, the training loop,
zero-shot scoring and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numeric as nm
from .connectome import Subject, sensitive_group
from .encoders import EncoderConfig, encode_images, encode_text, init_centers, init_params
from .losses import (DEFAULT_BETA, LossBundle, attention_disentangle_loss, attribute_signs,
                     calt_labels, calt_loss, global_siglip_loss, total_loss)
from .metrics import metric_report
from .numeric import Graph
from .phenotext import ATTRIBUTES, ATTR_POS, encode_records
from .ttca import pairwise_ttca

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ["epoch", "global", "calt_dx", "calt_sex", "calt_age", "calt_srs", "attn", "total"]


class SplitError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 64
    warmup_ratio: float = 0.03
    beta: float = DEFAULT_BETA
    folds: int = 5
    seed: int = 0
    sensitive: str | None = "sex"
    attn_loss: bool = True
    neg_grad: bool = True
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    printed_form: bool = False
    attrs: tuple = ATTRIBUTES
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        for name in ("lr", "batch_size", "epochs", "folds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.beta < 0:
            raise ValueError("weight_decay and beta must be non-negative")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attrs"] = list(self.attrs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["attrs"] = tuple(d.get("attrs", ATTRIBUTES))
        return cls(**d)


# optimisation -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place AdamW update with bias correction and decoupled decay p -= lr * wd * p."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup over ceil(ratio * total) steps, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    frac = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grads(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# splits -------------------------------------------------------------------------

def _labels(subjects) -> np.ndarray:
    return np.array([int(s.record.dx_positive) for s in subjects])


def stratified_kfold(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """k (train, val) index pairs; each class is shuffled then dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=int)
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise SplitError(f"class {cls!r} has {len(idx)} members, fewer than k={k}")
        idx = rng.permutation(idx)
        fold_of[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    all_idx = np.arange(len(labels))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def stratified_holdout(labels, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, test) indices with each class's test share rounded to the nearest integer."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    test = []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test].tolist())
    test = np.sort(np.array(test, dtype=int))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


# model ----------------------------------------------------------------------------

class NeuroLIP:
    """Parameters plus the forward passes needed for training and inference."""

    def __init__(self, cfg: EncoderConfig, graph: Graph | None = None):
        self.cfg = cfg
        self.graph = graph if graph is not None else init_params(cfg)

    @property
    def heads(self) -> int:
        return self.cfg.heads

    def temperature(self):
        return nm.exp(self.graph["loss.log_t"])

    def encode_images(self, matrices):
        return encode_images(self.graph, np.asarray(matrices), self.heads)

    def encode_text(self, token_ids):
        return encode_text(self.graph, token_ids, self.heads)

    def forward(self, matrices, records, cfg: TrainConfig) -> LossBundle:
        g = self.graph
        img = self.encode_images(matrices)
        t_loc, t_g = self.encode_text(encode_records(records))
        v_ttca, a_ttca = pairwise_ttca(g, t_loc, img["v_loc"], self.heads)
        t, b = self.temperature(), g["loss.bias"]
        glob = global_siglip_loss(img["v_g"], t_g, t, b, cfg.printed_form)
        calt = {a: calt_loss(v_ttca, t_loc, calt_labels(records, a), ATTR_POS[a], t, b,
                             cfg.printed_form)
                for a in cfg.attrs}
        attn = None
        if cfg.attn_loss and cfg.sensitive:
            attn = attention_disentangle_loss(a_ttca, ATTR_POS["dx_group"], ATTR_POS[cfg.sensitive])
        signs = attribute_signs(cfg.attrs, cfg.sensitive, cfg.neg_grad)
        beta = cfg.beta if attn is not None else 0.0
        total = total_loss(glob, calt, attn, signs, beta)
        return LossBundle(glob, calt, attn, total, signs, beta)

    def attention_stack(self, matrix, record):
        """(a_ttca S x (M+1), a_loc M x N) for one subject's image and own text."""
        from .ttca import ttca_forward
        with nm.no_grad():
            img = self.encode_images(np.asarray(matrix)[None])
            t_loc, _ = self.encode_text(encode_records([record]))
            _, a_ttca = ttca_forward(self.graph, t_loc, img["v_loc"], self.heads)
        return a_ttca.data[0], img["a_loc"].data[0]


# training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: NeuroLIP
    opt: AdamState
    config: TrainConfig
    loss_log: list
    rng_state: dict


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train_fold(subjects: list[Subject], cfg: TrainConfig, progress: bool = False) -> TrainResult:
    if not subjects:
        raise ValueError("empty training set")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    model = NeuroLIP(cfg.encoder)
    mats = np.stack([s.matrix for s in subjects])
    recs = [s.record for s in subjects]
    first = rng.permutation(len(subjects))[: cfg.batch_size]
    init_centers(model.graph, mats[first], rng)
    steps_per_epoch = len(_batches(len(subjects), cfg.batch_size, np.random.default_rng(0)))
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamState()
    params = model.graph.params
    loss_log = []
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        batches = _batches(len(subjects), cfg.batch_size, rng)
        for idx in batches:
            bundle = model.forward(mats[idx], [recs[i] for i in idx], cfg)
            vals = bundle.values()
            if not np.isfinite(vals["total"]):
                raise DivergenceError(f"non-finite total loss at epoch {epoch}, step {opt.step}: {vals}")
            grads = nm.backward(model.graph, bundle.total)
            clip_grads(grads, cfg.grad_clip)
            lr = lr_schedule(opt.step + 1, total_steps, cfg.lr, cfg.warmup_ratio)
            adamw_step(params, grads, opt, lr, cfg.weight_decay,
                       cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch}
        row.update({k: v / len(batches) for k, v in sums.items()})
        loss_log.append(row)
        if progress:
            log.info("epoch %d total %.5f", epoch, row["total"])
    return TrainResult(model, opt, cfg, loss_log, rng.bit_generator.state)


# inference --------------------------------------------------------------------------

def candidate_logits(model: NeuroLIP, matrices, records) -> tuple[np.ndarray, np.ndarray]:
    """Logits t cos(v_g, t_g) + b against the positive and the control rendering of each record."""
    with nm.no_grad():
        v_g = model.encode_images(np.asarray(matrices))["v_g"]
        ids_pos = encode_records([r.with_dx(True) for r in records])
        ids_neg = encode_records([r.with_dx(False) for r in records])
        _, tg_pos = model.encode_text(ids_pos)
        _, tg_neg = model.encode_text(ids_neg)
        t, b = model.temperature().data, model.graph["loss.bias"].data
        cos_pos = nm.cosine_similarity(v_g, tg_pos).data
        cos_neg = nm.cosine_similarity(v_g, tg_neg).data
    return t * cos_pos + b, t * cos_neg + b


def two_way_softmax(logit_pos, logit_neg) -> np.ndarray:
    from scipy.special import expit
    return expit(np.asarray(logit_pos) - np.asarray(logit_neg))


def zero_shot_scores(model: NeuroLIP, subjects) -> np.ndarray:
    mats = np.stack([s.matrix for s in subjects])
    lp, ln = candidate_logits(model, mats, [s.record for s in subjects])
    return two_way_softmax(lp, ln)


def zero_shot_classify(model: NeuroLIP, subject: Subject) -> float:
    return float(zero_shot_scores(model, [subject])[0])


def evaluate(model: NeuroLIP, subjects, sensitive: str) -> dict:
    scores = zero_shot_scores(model, subjects)
    labels = _labels(subjects)
    groups = np.array([sensitive_group(s.record, sensitive) for s in subjects])
    return metric_report(scores, labels, groups)
