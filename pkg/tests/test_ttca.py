import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurolip import numeric as nm
from neurolip.encoders import EncoderConfig, init_params
from neurolip.numeric import DimensionError
from neurolip.ttca import (AttentionStack, activation_map, compose_maps, export_map, heatmap_svg,
                           pairwise_ttca, read_map_csv, ttca_forward)

CFG = EncoderConfig(n_rois=8, n_clusters=3, heads=2, text_layers=1, seed=1)


def _rand_stack(rng, s=9, m=3, n=8):
    a = rng.random((s, m + 1))
    a /= a.sum(-1, keepdims=True)
    loc = rng.random((m, n))
    loc /= loc.sum(-1, keepdims=True)
    return a, loc


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rows_are_distributions(seed):
    g = init_params(CFG)
    rng = np.random.default_rng(seed)
    _, a = ttca_forward(g, rng.normal(size=(2, 9, 8)) * 3, rng.normal(size=(2, 3, 8)) * 3, CFG.heads)
    assert a.shape == (2, 9, 4)
    assert np.all(a.data >= 0)
    np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)


def test_zero_query_is_uniform():
    g = init_params(CFG)
    v = np.random.default_rng(0).normal(size=(3, 8))
    _, a = ttca_forward(g, np.zeros((9, 8)), v, CFG.heads)
    np.testing.assert_allclose(a.data, 0.25, atol=1e-15)


def test_null_token_absorbs_unrelated_query():
    g = init_params(EncoderConfig(n_rois=8, n_clusters=3, heads=1, text_layers=1))
    eye = np.eye(8)
    for p in ("q", "k", "v", "o"):
        g.params[f"ttca.{p}.w"].data[...] = eye
    g.params["ttca.null"].data[...] = 10 * eye[0]
    text = np.tile(10 * eye[0], (9, 1))
    image = np.random.default_rng(1).normal(size=(3, 8))
    image[:, 0] = 0.0  # keys orthogonal to every query
    _, a = ttca_forward(g, text, image, 1)
    assert np.all(a.data[:, -1] > 0.99)
    np.testing.assert_allclose(AttentionStack.build(a.data, np.full((3, 8), 1 / 8)).null_mass,
                               a.data[:, -1])


def test_pairwise_layout():
    g = init_params(CFG)
    rng = np.random.default_rng(2)
    t, v = rng.normal(size=(3, 9, 8)), rng.normal(size=(2, 3, 8))
    out, a = pairwise_ttca(g, nm.tensor(t), nm.tensor(v), CFG.heads)
    assert out.shape == (2, 3, 9, 8) and a.shape == (2, 3, 9, 4)
    single, a_single = ttca_forward(g, t[2], v[1], CFG.heads)
    np.testing.assert_allclose(out.data[1, 2], single.data, atol=1e-13)
    np.testing.assert_allclose(a.data[1, 2], a_single.data, atol=1e-13)


def test_compose_examples():
    loc = np.array([[0.5, 0.5, 0.0], [0.0, 0.2, 0.8]])
    onehot = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(compose_maps(onehot, loc), loc[[1]])
    np.testing.assert_array_equal(compose_maps(np.array([[0.0, 0.0, 1.0]]), loc), np.zeros((1, 3)))
    with pytest.raises(DimensionError):
        compose_maps(np.ones((9, 3)), np.ones((3, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composed_mass_is_non_null_mass(seed):
    a, loc = _rand_stack(np.random.default_rng(seed))
    comp = compose_maps(a, loc)
    assert np.all(comp >= 0)
    np.testing.assert_allclose(comp.sum(-1), 1 - a[:, -1], atol=1e-12)


def test_activation_map():
    a, loc = _rand_stack(np.random.default_rng(3))
    comp = compose_maps(a, loc)
    m = activation_map(comp, 4)
    assert m.shape == (8,) and np.all((m >= 0) & (m <= 1))
    np.testing.assert_array_equal(m, comp[4])
    with pytest.raises(IndexError):
        activation_map(comp, 9)


def test_csv_roundtrip_exact(tmp_path):
    vals = np.random.default_rng(4).random(32) / 7
    export_map(vals, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == "node_index,weight"
    np.testing.assert_array_equal(read_map_csv(tmp_path / "m.csv"), vals)


def test_svg(tmp_path):
    vals = np.linspace(0, 1, 16)
    export_map(vals, tmp_path / "m.svg", "svg")
    svg = (tmp_path / "m.svg").read_text()
    assert svg.count('class="cell"') == 16
    flat = heatmap_svg(np.zeros(5))
    fills = set(re.findall(r'fill="(#[0-9a-f]{6})"', flat))
    assert len(fills) == 1
    with pytest.raises(ValueError):
        export_map(vals, tmp_path / "m.png", "png")


def test_gradcheck_ttca_params():
    g = init_params(CFG)
    rng = np.random.default_rng(5)
    t, v = rng.normal(size=(2, 9, 8)), rng.normal(size=(2, 3, 8))
    w, wa = rng.normal(size=(2, 2, 9, 8)), rng.normal(size=(2, 2, 9, 4))

    def loss():
        out, a = pairwise_ttca(g, nm.tensor(t), nm.tensor(v), CFG.heads)
        return (out * w).sum() + (a * wa).sum()

    names = [n for n in g.names() if n.startswith("ttca.")]
    assert nm.grad_check(g, loss, names=names) < 1e-4
