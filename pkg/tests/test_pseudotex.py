import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texnerf.errors import MissingMaterialError, ValidationError
from texnerf.pseudotex import (
    HsvImage,
    MappingMetadata,
    build_palette,
    cyclic_distance,
    hsv_to_rgb,
    hsv_to_tex,
    metadata_for,
    nearest_material,
    rgb_to_hsv,
    tex_to_hsv,
)
from texnerf.texdecomp import MaterialMask, TeXImage


def meta3():
    return MappingMetadata(290.0, 340.0, 10.0, 30.0, build_palette(["wood", "metal", "plaster"]))


def tex_image(T, X, labels, legend):
    T = np.asarray(T, float)
    return TeXImage(T=T, material=MaterialMask(np.asarray(labels), legend), X=np.asarray(X, float), v0=np.ones_like(T))


def test_palette_examples():
    assert build_palette(["steel"]) == {"steel": 0.0}
    assert build_palette(["b", "a"]) == {"a": 0.0, "b": 0.5}
    p = build_palette([f"m{i}" for i in range(10)])
    hues = sorted(p.values())
    np.testing.assert_allclose(hues, np.arange(10) / 10)
    assert min(np.diff(hues)) == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        build_palette(["a", "a"])
    with pytest.raises(ValidationError):
        build_palette([])


def test_metadata_validation_and_json(tmp_path):
    with pytest.raises(ValidationError):
        MappingMetadata(300.0, 300.0, 0.0, 1.0, {})
    with pytest.raises(ValidationError):
        MappingMetadata(290.0, 300.0, 1.0, 0.0, {})
    with pytest.raises(ValidationError):
        MappingMetadata(290.0, 300.0, 0.0, 1.0, {"a": 0.2, "b": 0.2})
    m = meta3()
    p = tmp_path / "x.meta.json"
    m.save(p)
    import json

    raw = json.loads(p.read_text())
    assert set(raw) == {"t_min_K", "t_max_K", "x_min", "x_max", "palette"}
    assert MappingMetadata.load(p) == m
    assert m.materials == ["metal", "plaster", "wood"]


def test_hsv_image_range_check():
    with pytest.raises(ValidationError):
        HsvImage(np.zeros((2, 2)), np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        HsvImage(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


def test_tex_to_hsv_endpoints_and_midpoint():
    m = meta3()
    img = tex_to_hsv(tex_image([[290.0, 340.0]], [[20.0, 20.0]], [[0, 1]], {0: "wood", 1: "metal"}), m)
    np.testing.assert_array_equal(img.s, [[0.0, 1.0]])
    np.testing.assert_array_equal(img.v, [[0.5, 0.5]])
    np.testing.assert_allclose(img.h, [[2 / 3, 0.0]])


def test_tex_to_hsv_nan_and_unknown():
    m = meta3()
    img = tex_to_hsv(tex_image([[np.nan, 300.0]], [[20.0, 20.0]], [[0, 0]], {0: "wood"}), m)
    assert img.s[0, 0] == 0.0 and img.invalid.tolist() == [[True, False]]
    with pytest.raises(MissingMaterialError):
        tex_to_hsv(tex_image([[300.0]], [[20.0]], [[0]], {0: "glass"}), m)


def test_round_trip_on_synthetic_image():
    m = meta3()
    rng = np.random.default_rng(2)
    T = rng.uniform(280, 350, (32, 32))
    X = rng.uniform(5, 35, (32, 32))
    labels = rng.integers(0, 3, (32, 32))
    legend = {0: "metal", 1: "plaster", 2: "wood"}
    tex = tex_image(T, X, labels, legend)
    T2, mask2, X2 = hsv_to_tex(tex_to_hsv(tex, m), m)
    inside_T = (T > m.t_min) & (T < m.t_max)
    inside_X = (X > m.x_min) & (X < m.x_max)
    np.testing.assert_allclose(T2[inside_T], T[inside_T], rtol=1e-13)
    np.testing.assert_allclose(X2[inside_X], X[inside_X], rtol=1e-13)
    assert (mask2.material_names() == tex.material.material_names()).all()


def test_hsv_to_tex_examples():
    m = MappingMetadata(290.0, 340.0, 0.0, 1.0, {"a": 0.0, "b": 0.5})
    T, mask, _ = hsv_to_tex(HsvImage([[0.49, 0.99]], [[0.0, 1.0]], [[0.0, 0.0]]), m)
    assert T[0, 0] == 290.0 and T[0, 1] == 340.0
    assert mask.labels.tolist() == [[1, 0]]


def test_cyclic_distance():
    assert cyclic_distance(0.95, 0.05) == pytest.approx(0.1)
    assert cyclic_distance(0.0, 0.5) == pytest.approx(0.5)
    assert cyclic_distance(1.25, 0.25) == pytest.approx(0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 11), st.floats(-0.999, 0.999))
def test_nearest_material_tolerates_small_noise(M, i, u):
    i = i % M
    m = MappingMetadata(0.0, 1.0, 0.0, 1.0, build_palette([f"m{k:02d}" for k in range(M)]))
    h = (i / M + u * 0.5 / M) % 1.0
    assert nearest_material(np.array(h), m) == i


def test_hsv_to_rgb_examples():
    np.testing.assert_allclose(hsv_to_rgb(np.array([0.0, 1.0, 1.0])), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(hsv_to_rgb(np.array([0.37, 0.0, 0.6])), [0.6, 0.6, 0.6])


def test_hsv_rgb_against_colorsys_and_round_trip():
    rng = np.random.default_rng(0)
    hsv = rng.uniform(0, 1, (1000, 3))
    rgb = hsv_to_rgb(hsv)
    want = np.array([colorsys.hsv_to_rgb(*t) for t in hsv])
    np.testing.assert_allclose(rgb, want, atol=1e-12)
    back = hsv_to_rgb(rgb_to_hsv(rgb))
    np.testing.assert_allclose(back, rgb, atol=1e-6)
    np.testing.assert_allclose(rgb_to_hsv(rgb)[:, 1:], hsv[:, 1:], atol=1e-12)


def test_metadata_for_percentiles_and_flat():
    T = np.linspace(280.0, 380.0, 101)
    m = metadata_for(T, np.full(101, 4.0), {"a": 0.0})
    assert m.t_min == pytest.approx(282.0) and m.t_max == pytest.approx(378.0)
    assert m.x_min == pytest.approx(2.0) and m.x_max == pytest.approx(6.0)
    m2 = metadata_for(T, T, {"a": 0.0}, t_range=(250.0, 400.0), x_range=(0.0, 1.0))
    assert (m2.t_min, m2.t_max, m2.x_min, m2.x_max) == (250.0, 400.0, 0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=4, max_size=4))
def test_channels_always_in_unit_interval(vals):
    m = meta3()
    img = tex_to_hsv(tex_image([vals[:2]], [vals[2:]], [[0, 1]], {0: "wood", 1: "metal"}), m)
    for c in (img.h, img.s, img.v):
        assert np.all((c >= 0) & (c <= 1))
