"""Sigmoid contrastive losses (global and per-attribute localized), attention
disentanglement, and the combined objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import Tensor

DEFAULT_BETA = 1e-3
LOG_NAMES = {"dx_group": "dx"}


def calt_labels(records, attr: str) -> np.ndarray:
    """+1 where two subjects share the rendered value of ``attr``, else -1."""
    vals = [r.value(attr) for r in records]
    same = np.array([[a == b for b in vals] for a in vals])
    return np.where(same, 1.0, -1.0)


def _pair_loss(y, logits, printed_form: bool) -> Tensor:
    if printed_form:
        return nm.sigmoid(logits * y)
    return -nm.log_sigmoid(logits * y)


def calt_loss(v_ttca, t_loc, labels, s: int, t, b, printed_form: bool = False) -> Tensor:
    """Mean over all ordered pairs (i, j) of -log sigmoid(y_ij (t cos(v_ttca[i,j,s], t_loc[j,s]) + b)).

    v_ttca: (B, B, S, E) with [i, j] = image i conditioned on text j; t_loc: (B, S, E).
    ``printed_form`` swaps in sigmoid(y t cos) per pair (kept for comparison only).
    """
    v = nm.tensor(v_ttca)[:, :, s, :]
    tl = nm.tensor(t_loc)[:, s, :]
    cos = nm.cosine_similarity(v, nm.reshape(tl, (1,) + tl.shape))
    if printed_form:
        return nm.mean(_pair_loss(labels, cos * t, True))
    return nm.mean(_pair_loss(labels, cos * t + b, False))


def global_siglip_loss(v_g, t_g, t, b, printed_form: bool = False) -> Tensor:
    """Sigmoid loss over the B x B global image/text cosine matrix; matches on the diagonal."""
    v_g, t_g = nm.tensor(v_g), nm.tensor(t_g)
    n = v_g.shape[0]
    cos = nm.cosine_similarity(nm.reshape(v_g, (n, 1, v_g.shape[-1])),
                               nm.reshape(t_g, (1,) + t_g.shape))
    z = 2.0 * np.eye(n) - 1.0
    if printed_form:
        return nm.mean(_pair_loss(z, cos * t, True))
    return nm.mean(_pair_loss(z, cos * t + b, False))


def attention_disentangle_loss(a_ttca, s_disease: int, s_sensitive: int) -> Tensor:
    """Euclidean distance between two full rows of the TTCA weights, averaged over leading axes."""
    a = nm.tensor(a_ttca)
    S = a.shape[-2]
    for s in (s_disease, s_sensitive):
        if not 0 <= s < S:
            raise IndexError(f"token index {s} outside [0, {S})")
    diff = a[..., s_disease, :] - a[..., s_sensitive, :]
    return nm.mean(nm.l2_norm(diff, axis=-1))


@dataclass
class LossBundle:
    global_: Tensor
    calt: dict = field(default_factory=dict)
    attn: Tensor | None = None
    total: Tensor | None = None
    signs: dict = field(default_factory=dict)
    beta: float = 0.0

    def values(self) -> dict:
        out = {"global": float(self.global_.data)}
        out.update({f"calt_{LOG_NAMES.get(a, a)}": float(v.data) for a, v in self.calt.items()})
        out["attn"] = float(self.attn.data) if self.attn is not None else 0.0
        out["total"] = float(self.total.data)
        return out


def attribute_signs(attrs, sensitive: str | None, neg_grad: bool) -> dict:
    return {a: (-1.0 if neg_grad and a == sensitive else 1.0) for a in attrs}


def total_loss(global_, calt: dict, attn, signs: dict, beta: float = DEFAULT_BETA) -> Tensor:
    """global + sum_a sign(a) calt_a - beta attn."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    total = global_
    for a, term in calt.items():
        total = total + term * signs.get(a, 1.0)
    if attn is not None and beta:
        total = total - attn * beta
    return total
