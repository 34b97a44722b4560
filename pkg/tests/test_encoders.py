import numpy as np
import pytest

from neurolip import numeric as nm
from neurolip.connectome import SynthConfig, synth_cohort
from neurolip.encoders import (EncoderConfig, dec_pool, encode_images, encode_nodes, encode_text,
                               init_params, local_image_tokens, pool_global_image)
from neurolip.phenotext import encode_records

TINY = EncoderConfig(n_rois=8, n_clusters=3, heads=2, text_layers=1, seed=3)


@pytest.fixture(scope="module")
def cohort():
    return synth_cohort(SynthConfig(n_rois=8, n_subjects=3, block_size=2, sensitive_block_start=2, seed=2))


def test_shapes(cohort):
    g = init_params(TINY)
    mats = np.stack([s.matrix for s in cohort])
    out = encode_images(g, mats, TINY.heads)
    assert out["node_emb"].shape == (3, 8, 8)
    assert out["v_loc"].shape == (3, 3, 8)
    assert out["a_loc"].shape == (3, 3, 8)
    assert out["v_g"].shape == (3, 8)
    t_loc, t_g = encode_text(g, encode_records([s.record for s in cohort]), TINY.heads)
    assert t_loc.shape == (3, 9, 8) and t_g.shape == (3, 8)
    np.testing.assert_allclose(out["a_loc"].data.sum(-1), 1.0, atol=1e-12)


def test_node_permutation_equivariance(cohort):
    # reordering the node profiles (rows) reorders the embeddings the same way
    g = init_params(TINY)
    m = cohort[0].matrix
    perm = np.random.default_rng(0).permutation(8)
    np.testing.assert_allclose(encode_nodes(g, m[perm]).data, encode_nodes(g, m).data[perm],
                               rtol=0, atol=1e-12)


def test_dec_uniform_and_normalised():
    centers = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    q, _ = dec_pool(np.zeros((1, 2)), centers)
    np.testing.assert_allclose(q.data, 0.25, atol=1e-15)
    rng = np.random.default_rng(1)
    q, tok = dec_pool(rng.normal(size=(10, 3)), rng.normal(size=(4, 3)))
    np.testing.assert_allclose(q.data.sum(-1), 1.0, atol=1e-12)
    assert tok.shape == (4, 3)


def test_dec_coincident_center():
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    q, _ = dec_pool(np.zeros((1, 2)), centers)
    # Student-t: 1 / (1 + 1/101 + 1/101) ~ 0.9806
    assert q.data[0, 0] == pytest.approx(1 / (1 + 2 / 101))
    q, _ = dec_pool(np.zeros((1, 2)), centers * 2)
    assert q.data[0, 0] > 0.99


def test_cluster_tokens_are_weighted_means():
    rng = np.random.default_rng(2)
    x, c = rng.normal(size=(6, 3)), rng.normal(size=(2, 3))
    q, tok = dec_pool(x, c)
    w = q.data / q.data.sum(0)
    np.testing.assert_allclose(tok.data, w.T @ x, atol=1e-14)


def test_single_key_attention():
    cfg = EncoderConfig(n_rois=4, n_clusters=2, heads=2, seed=0)
    g = init_params(cfg)
    rng = np.random.default_rng(3)
    _, a_loc = local_image_tokens(g, rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), 2)
    np.testing.assert_array_equal(a_loc.data, np.ones((2, 1)))


def test_global_pool():
    c = np.tile(np.array([1.0, -2.0, 3.0]), (4, 1))
    np.testing.assert_array_equal(pool_global_image(c).data, c[0])
    one = np.array([[0.5, 0.25]])
    np.testing.assert_array_equal(pool_global_image(one).data, one[0])
    x = np.random.default_rng(4).normal(size=(5, 3))
    np.testing.assert_allclose(pool_global_image(x).data, [sum(r[k] for r in x) / 5 for k in range(3)])


def test_text_determinism_and_range(cohort):
    g = init_params(TINY)
    ids = encode_records([cohort[0].record])
    a, _ = encode_text(g, ids, TINY.heads)
    b, _ = encode_text(g, ids, TINY.heads)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(IndexError):
        encode_text(g, np.array([[0, 99999]]), TINY.heads)


def _check(g, loss_fn, prefixes):
    names = [n for n in g.names() if n.startswith(prefixes)]
    return nm.grad_check(g, loss_fn, eps=1e-5, names=names)


def test_gradcheck_image_path(cohort):
    g = init_params(TINY)
    mats = np.stack([s.matrix for s in cohort[:2]])
    w = np.random.default_rng(5).normal(size=(2, 3, 8))

    def loss():
        out = encode_images(g, mats, TINY.heads)
        return (out["v_loc"] * w).sum() + (out["v_g"] ** 2).sum() + (out["a_loc"] * w).sum()

    assert _check(g, loss, ("node.", "dec.", "img_attn.")) < 1e-4


def test_gradcheck_text_path(cohort):
    g = init_params(TINY)
    ids = encode_records([s.record for s in cohort[:2]])
    w = np.random.default_rng(6).normal(size=(2, 9, 8))

    def loss():
        t_loc, t_g = encode_text(g, ids, TINY.heads)
        return (t_loc * w).sum() + (t_g ** 2).sum()

    assert _check(g, loss, ("text.",)) < 1e-4
