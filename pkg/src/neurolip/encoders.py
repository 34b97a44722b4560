"""Image and text encoders.

Image path: connectivity rows -> shared node MLP -> Student-t soft clustering (DEC
pooling) -> cross-attention from cluster tokens to node embeddings (local image
tokens, attention map ``a_loc``). Text path: token + position embeddings through
pre-norm transformer blocks. Both accept leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import numeric as nm
from .numeric import Graph, Tensor
from .phenotext import VOCAB, SEQ_LEN, TOKEN_ID, PAD


@dataclass
class EncoderConfig:
    n_rois: int = 32
    n_clusters: int = 8
    embed_dim: int | None = None  # defaults to n_rois
    vocab_size: int = len(VOCAB)
    seq_len: int = SEQ_LEN
    text_layers: int = 2
    heads: int = 4
    node_hidden: int | None = None  # defaults to embed_dim
    text_hidden: int | None = None  # defaults to 2 * embed_dim
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.n_rois
        if self.node_hidden is None:
            self.node_hidden = self.embed_dim
        if self.text_hidden is None:
            self.text_hidden = 2 * self.embed_dim
        if not 1 <= self.n_clusters < self.n_rois:
            raise ValueError("need 1 <= n_clusters < n_rois")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingBundle:
    v_loc: Tensor  # (..., M, E)
    v_g: Tensor  # (..., E)
    t_loc: Tensor  # (..., S, E)
    t_g: Tensor  # (..., E)
    a_loc: Tensor  # (..., M, N)


def _dense(g: Graph, rng, name: str, n_in: int, n_out: int, bias: bool = True):
    g.param(f"{name}.w", rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
    if bias:
        g.param(f"{name}.b", np.zeros(n_out))


def _norm(g: Graph, name: str, dim: int):
    g.param(f"{name}.gamma", np.ones(dim))
    g.param(f"{name}.beta", np.zeros(dim))


def _attn_params(g: Graph, rng, name: str, dim: int):
    for k in ("q", "k", "v", "o"):
        _dense(g, rng, f"{name}.{k}", dim, dim, bias=False)


def init_params(cfg: EncoderConfig) -> Graph:
    """All trainable parameters of the model, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    g = Graph()
    n, e = cfg.n_rois, cfg.embed_dim
    _norm(g, "node.ln", n)
    _dense(g, rng, "node.fc1", n, cfg.node_hidden)
    _dense(g, rng, "node.fc2", cfg.node_hidden, e)
    g.param("dec.centers", rng.standard_normal((cfg.n_clusters, e)))
    _attn_params(g, rng, "img_attn", e)
    _norm(g, "img_attn.ln", e)
    g.param("text.tok_emb", 0.5 * rng.standard_normal((cfg.vocab_size, e)))
    g.param("text.pos_emb", 0.1 * rng.standard_normal((cfg.seq_len, e)))
    for layer in range(cfg.text_layers):
        p = f"text.block{layer}"
        _norm(g, f"{p}.ln1", e)
        _attn_params(g, rng, f"{p}.attn", e)
        _norm(g, f"{p}.ln2", e)
        _dense(g, rng, f"{p}.fc1", e, cfg.text_hidden)
        _dense(g, rng, f"{p}.fc2", cfg.text_hidden, e)
    _norm(g, "text.ln_f", e)
    _attn_params(g, rng, "ttca", e)
    g.param("ttca.null", 0.1 * rng.standard_normal((1, e)))
    g.param("loss.log_t", np.array(np.log(10.0)))
    g.param("loss.bias", np.array(-10.0))
    return g


def linear(g: Graph, name: str, x):
    y = x @ g[f"{name}.w"]
    return y + g[f"{name}.b"] if f"{name}.b" in g else y


def norm(g: Graph, name: str, x):
    return nm.layer_norm(x, g[f"{name}.gamma"], g[f"{name}.beta"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = x.reshape(tuple(lead) + (length, heads, dim // heads))
    return x.swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-2, -3)
    *lead, length, heads, dh = x.shape
    return x.reshape(tuple(lead) + (length, heads * dh))


def multi_head_attention(g: Graph, name: str, q_in, kv_in, heads: int,
                         kv_extra: Tensor | None = None):
    """Scaled dot-product attention with per-head key dimension E/heads.

    ``kv_extra`` (1 x E) is appended to the key/value sequence after broadcasting to the
    batch shape. Returns the output (..., Lq, E) and the head-averaged weights (..., Lq, Lk).
    """
    q_in, kv_in = nm.tensor(q_in), nm.tensor(kv_in)
    if kv_extra is not None:
        extra = nm.broadcast_to(kv_extra, kv_in.shape[:-2] + kv_extra.shape)
        kv_in = nm.concat([kv_in, extra], axis=-2)
    dim = q_in.shape[-1]
    dh = dim // heads
    q = _split_heads(q_in @ g[f"{name}.q.w"], heads)
    k = _split_heads(kv_in @ g[f"{name}.k.w"], heads)
    v = _split_heads(kv_in @ g[f"{name}.v.w"], heads)
    weights = nm.softmax_rows((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)))
    out = _merge_heads(weights @ v) @ g[f"{name}.o.w"]
    return out, weights.mean(axis=-3)


def encode_nodes(g: Graph, conn) -> Tensor:
    """Shared row-wise MLP over each node's connectivity profile: (..., N, N) -> (..., N, E)."""
    x = norm(g, "node.ln", nm.tensor(conn))
    return linear(g, "node.fc2", nm.tanh(linear(g, "node.fc1", x)))


def dec_pool(node_emb, centers):
    """Student-t soft assignment Q (..., N, M) and cluster tokens (..., M, E).

    Cluster tokens are Q-weighted means of node embeddings (columns of Q normalised).
    """
    node_emb, centers = nm.tensor(node_emb), nm.tensor(centers)
    diff = nm.reshape(node_emb, node_emb.shape[:-1] + (1, node_emb.shape[-1])) - centers
    kernel = nm.reciprocal(1.0 + (diff * diff).sum(axis=-1))
    q = kernel / kernel.sum(axis=-1, keepdims=True)
    col = q / q.sum(axis=-2, keepdims=True)
    return q, col.swapaxes(-1, -2) @ node_emb


def local_image_tokens(g: Graph, clusters, node_emb, heads: int):
    """Cluster tokens query node embeddings; residual + layer norm. Returns (v_loc, a_loc)."""
    attn_out, a_loc = multi_head_attention(g, "img_attn", clusters, node_emb, heads)
    return norm(g, "img_attn.ln", clusters + attn_out), a_loc


def pool_global_image(clusters) -> Tensor:
    return nm.mean(clusters, axis=-2)


def encode_text(g: Graph, token_ids, heads: int):
    """(..., S) token ids -> local tokens (..., S, E) and the mean over non-pad tokens (..., E)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    vocab = g["text.tok_emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    x = g["text.tok_emb"][ids] + g["text.pos_emb"][: ids.shape[-1]]
    layer = 0
    while f"text.block{layer}.ln1.gamma" in g:
        p = f"text.block{layer}"
        h = norm(g, f"{p}.ln1", x)
        x = x + multi_head_attention(g, f"{p}.attn", h, h, heads)[0]
        h = norm(g, f"{p}.ln2", x)
        x = x + linear(g, f"{p}.fc2", nm.tanh(linear(g, f"{p}.fc1", h)))
        layer += 1
    t_loc = norm(g, "text.ln_f", x)
    mask = (ids != TOKEN_ID[PAD]).astype(np.float64)[..., None]
    t_g = (t_loc * mask).sum(axis=-2) / mask.sum(axis=-2)
    return t_loc, t_g


def encode_images(g: Graph, conn, heads: int) -> dict:
    node_emb = encode_nodes(g, conn)
    q, clusters = dec_pool(node_emb, g["dec.centers"])
    v_loc, a_loc = local_image_tokens(g, clusters, node_emb, heads)
    return {"node_emb": node_emb, "assign": q, "clusters": clusters,
            "v_loc": v_loc, "a_loc": a_loc, "v_g": pool_global_image(clusters)}


def init_centers(g: Graph, conn, rng) -> None:
    """Seed DEC centers with randomly chosen node embeddings from a batch of matrices."""
    with nm.no_grad():
        emb = encode_nodes(g, conn).data.reshape(-1, g["dec.centers"].shape[-1])
    pick = rng.choice(emb.shape[0], size=g["dec.centers"].shape[0], replace=False)
    g["dec.centers"].data = emb[np.sort(pick)].copy()


def encode_all(g: Graph, conn, token_ids, heads: int) -> EmbeddingBundle:
    img = encode_images(g, conn, heads)
    t_loc, t_g = encode_text(g, token_ids, heads)
    return EmbeddingBundle(img["v_loc"], img["v_g"], t_loc, t_g, img["a_loc"])
