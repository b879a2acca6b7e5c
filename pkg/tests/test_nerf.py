import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texnerf.errors import NonFiniteError, ValidationError
from texnerf.nerf import (
    EncodingConfig,
    FieldConfig,
    RadianceField,
    RaySampleBatch,
    backward,
    deltas_from_t,
    encoded_size,
    field_backward,
    field_forward,
    hue_loss,
    hue_loss_grad,
    loss_only,
    midpoint_samples,
    positional_encoding,
    positional_encoding_backward,
    stratified_sample,
    total_loss,
    total_loss_grad,
    volume_render_backward,
    volume_render_hsv,
)


def tiny_config(**kw):
    base = dict(encoding=EncodingConfig(l_pos=2, l_dir=1), depth=2, width=8, hue_layer=1, sv_width=8)
    base.update(kw)
    return FieldConfig(**base)


def randomized(config, seed):
    """float64 model with nonzero biases, so no ReLU sits exactly on its kink."""
    m = RadianceField.initialize(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for n, p in m.params.items():
        if n.endswith(".bias"):
            p[...] = rng.normal(0, 0.3, p.shape)
    return m


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_batch(rng, R=32, N=8, target=True):
    o = rng.normal(0, 0.2, (R, 3)) + [0, 0, 2.0]
    d = unit(rng.normal(0, 0.3, (R, 3)) + [0, 0, -1.0])
    t = stratified_sample(0.5, 3.5, N, rng, n_rays=R)
    tgt = rng.uniform(0.05, 0.95, (R, 3)) if target else None
    return RaySampleBatch(o, d, t, deltas_from_t(t, 3.5), tgt)


# positional encoding


def test_encoding_trivial():
    x = np.zeros(3)
    out = positional_encoding(x, 2)
    assert out.shape == (15,)
    np.testing.assert_array_equal(out[3:6], 0.0)
    np.testing.assert_array_equal(out[6:9], 1.0)
    np.testing.assert_array_equal(out[9:12], 0.0)
    np.testing.assert_array_equal(out[12:15], 1.0)
    assert positional_encoding(np.zeros((5, 3)), 10).shape == (5, 63)
    assert encoded_size(10) == 63 and encoded_size(4, False) == 24
    assert positional_encoding(np.zeros((2, 3)), 0, include_input=False).shape == (2, 0)
    with pytest.raises(ValidationError):
        EncodingConfig(l_pos=-1)


def test_encoding_values():
    x = np.array([0.1, -0.3, 0.7])
    out = positional_encoding(x, 3)
    for j in range(3):
        np.testing.assert_allclose(out[3 + 6 * j : 6 + 6 * j], np.sin(2**j * np.pi * x), rtol=1e-15)
        np.testing.assert_allclose(out[6 + 6 * j : 9 + 6 * j], np.cos(2**j * np.pi * x), rtol=1e-15)


@pytest.mark.parametrize("include", [True, False])
def test_encoding_gradient_fd(include):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (4, 3))
    L = 4
    g_out = rng.normal(size=(4, encoded_size(L, include)))
    g = positional_encoding_backward(x, g_out, L, include)
    h = 1e-6
    fd = np.zeros_like(x)
    for i in range(4):
        for k in range(3):
            e = np.zeros_like(x)
            e[i, k] = h
            fd[i, k] = np.sum(g_out * (positional_encoding(x + e, L, include) - positional_encoding(x - e, L, include))) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


# field


def test_zero_heads_trivial_outputs():
    m = RadianceField.initialize(FieldConfig(), seed=3).zero_heads()
    rng = np.random.default_rng(1)
    out = field_forward(m, rng.normal(size=(10, 3)), unit(rng.normal(size=(10, 3))))
    np.testing.assert_allclose(out.h, 0.5)
    np.testing.assert_allclose(out.s, 0.5)
    np.testing.assert_allclose(out.v, 0.5)
    np.testing.assert_allclose(out.sigma, math.log(2), rtol=1e-6)


def test_default_architecture_and_bias():
    m = RadianceField.initialize(FieldConfig(density_bias=2.0), seed=0)
    assert m.params["trunk.0.weight"].shape == (63, 128)
    assert m.params["sv.0.dir.weight"].shape == (27, 64)
    assert "sv.0.dir.bias" not in m.params
    assert m.params["density.bias"][0] == 2.0
    assert m.params["hue.bias"][0] == 0.0
    shapes = FieldConfig().layer_shapes()
    n = sum(i * o + (0 if name == "sv.0.dir" else o) for name, i, o in shapes)
    assert m.parameter_count() == n
    with pytest.raises(ValidationError):
        FieldConfig(depth=2, hue_layer=3)
    with pytest.raises(ValidationError):
        RadianceField(FieldConfig(), {})


def test_hue_independent_of_direction_and_ranges():
    m = randomized(tiny_config(), 5)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3))
    a = field_forward(m, x, unit(rng.normal(size=(50, 3))))
    b = field_forward(m, x, unit(rng.normal(size=(50, 3))))
    assert np.array_equal(a.h, b.h)
    assert not np.allclose(a.s, b.s)
    for o in (a, b):
        assert np.all(o.sigma >= 0)
        for c in (o.h, o.s, o.v):
            assert np.all((c > 0) & (c < 1))


def test_ray_index_matches_expanded_directions():
    m = randomized(tiny_config(), 6)
    rng = np.random.default_rng(3)
    d = unit(rng.normal(size=(4, 3)))
    idx = np.repeat(np.arange(4), 5)
    x = rng.normal(size=(20, 3))
    a = field_forward(m, x, d, ray_index=idx)
    b = field_forward(m, x, d[idx])
    np.testing.assert_allclose(a.s, b.s, rtol=1e-14)
    np.testing.assert_allclose(a.sigma, b.sigma, rtol=1e-14)


def test_non_finite_parameter():
    m = randomized(tiny_config(), 0)
    m.params["hue.weight"][0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="hue.weight"):
        m.check_finite()


def test_field_vjp_matches_fd():
    # ~1e3 parameters; a random cotangent on all four outputs probes the full Jacobian
    cfg = tiny_config(encoding=EncodingConfig(l_pos=4, l_dir=2), width=16, depth=3, hue_layer=2)
    m = randomized(cfg, 7)
    assert 500 < m.parameter_count() < 2000
    rng = np.random.default_rng(4)
    x = rng.normal(0, 0.5, (6, 3))
    d = unit(rng.normal(size=(6, 3)))
    cot = rng.normal(size=(4, 6))

    def f(model):
        o = field_forward(model, x, d)
        return sum(float(np.dot(c, v)) for c, v in zip(cot, (o.sigma, o.h, o.s, o.v)))

    out = field_forward(m, x, d, keep_cache=True)
    grads = field_backward(m, out, *cot)
    h = 1e-6
    for name, p in m.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + h
            up = f(m)
            p[i] = keep - h
            dn = f(m)
            p[i] = keep
            fd[i] = (up - dn) / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-6)
        assert np.max(np.abs(grads[name] - fd)) / scale < 1e-5, name


# sampling


def test_stratified_within_bins_and_deterministic():
    for seed in range(20):
        t = stratified_sample(1.0, 4.0, 16, np.random.default_rng(seed), n_rays=8)
        lo = 1.0 + 3.0 * np.arange(16) / 16
        assert np.all(t >= lo) and np.all(t < lo + 3.0 / 16)
        assert np.all(np.diff(t, axis=1) > 0)
        t2 = stratified_sample(1.0, 4.0, 16, np.random.default_rng(seed), n_rays=8)
        np.testing.assert_array_equal(t, t2)
    t1 = stratified_sample(0.0, 2.0, 1, np.random.default_rng(0))
    assert t1.shape == (1,) and 0.0 <= t1[0] < 2.0
    for bad in ((2.0, 1.0, 4), (-1.0, 1.0, 4), (0.0, 1.0, 0)):
        with pytest.raises(ValidationError):
            stratified_sample(*bad, np.random.default_rng(0))


def test_stratified_bin_means():
    n, draws, near, far = 8, 100_000, 2.0, 6.0
    t = stratified_sample(near, far, n, np.random.default_rng(9), n_rays=draws)
    width = (far - near) / n
    centers = near + width * (np.arange(n) + 0.5)
    sigma = width / math.sqrt(12 * draws)
    assert np.all(np.abs(t.mean(axis=0) - centers) < 3 * sigma)


def test_midpoints_and_deltas():
    t = midpoint_samples(0.0, 1.0, 4)
    np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(deltas_from_t(t, 1.0), [0.25, 0.25, 0.25, 0.125])
    assert midpoint_samples(0.0, 1.0, 4, n_rays=3).shape == (3, 4)


# volume rendering


def test_render_empty_space():
    r = volume_render_hsv(np.zeros(5), np.full((5, 3), 0.7), np.full(5, 0.1))
    np.testing.assert_array_equal(r.hsv, 0.0)
    assert r.opacity == 0.0 and r.transmittance[-1] == 1.0


def test_render_half_opacity():
    r = volume_render_hsv(np.array([math.log(2)]), np.array([[0.8, 0.6, 0.4]]), np.array([1.0]))
    assert r.weights[0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(r.hsv, [0.4, 0.3, 0.2], atol=1e-15)


def _brute_force(sigma, hsv, delta):
    out = [0.0, 0.0, 0.0]
    for i in range(len(sigma)):
        acc = 0.0
        for j in range(i):
            acc += sigma[j] * delta[j]
        w = math.exp(-acc) * (1.0 - math.exp(-sigma[i] * delta[i]))
        for c in range(3):
            out[c] += w * hsv[i][c]
    return out


def test_render_vs_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s, c, dl = rng.uniform(0, 5, 4), rng.uniform(0, 1, (4, 3)), rng.uniform(0.01, 1, 4)
        np.testing.assert_allclose(volume_render_hsv(s, c, dl).hsv, _brute_force(s, c, dl), atol=1e-12)


def test_render_partition_of_unity_and_range():
    rng = np.random.default_rng(1)
    R, N = 10_000, 16
    sigma = rng.exponential(3.0, (R, N)) * (rng.uniform(size=(R, N)) > 0.3)
    r = volume_render_hsv(sigma, rng.uniform(0, 1, (R, N, 3)), rng.uniform(0.001, 0.5, (R, N)))
    np.testing.assert_allclose(r.weights.sum(-1) + r.transmittance[:, -1], 1.0, atol=1e-6)
    assert np.all(r.weights >= 0)
    assert np.all((r.hsv >= 0) & (r.hsv <= 1))


def test_render_refinement_consistency():
    rng = np.random.default_rng(2)
    for _ in range(100):
        N = 6
        s, c, dl = rng.uniform(0, 4, N), rng.uniform(0, 1, (N, 3)), rng.uniform(0.05, 0.5, N)
        k = rng.integers(N)
        s2 = np.insert(s, k, s[k])
        c2 = np.insert(c, k, c[k], axis=0)
        dl2 = np.insert(dl, k, dl[k] / 2)
        dl2[k + 1] = dl[k] / 2
        np.testing.assert_allclose(volume_render_hsv(s2, c2, dl2).hsv, volume_render_hsv(s, c, dl).hsv, atol=1e-9)


def test_render_backward_fd():
    rng = np.random.default_rng(3)
    R, N = 3, 5
    sigma, hsv, dl = rng.uniform(0, 3, (R, N)), rng.uniform(0, 1, (R, N, 3)), rng.uniform(0.1, 0.4, (R, N))
    g_color = rng.normal(size=(R, 3))
    r = volume_render_hsv(sigma, hsv, dl)
    g_sigma, g_hsv = volume_render_backward(r, hsv, dl, g_color)

    def f(s, c):
        return float(np.sum(volume_render_hsv(s, c, dl).hsv * g_color))

    h = 1e-6
    for idx in np.ndindex(R, N):
        e = np.zeros_like(sigma)
        e[idx] = h
        assert g_sigma[idx] == pytest.approx((f(sigma + e, hsv) - f(sigma - e, hsv)) / (2 * h), rel=1e-6, abs=1e-9)
    for idx in np.ndindex(R, N, 3):
        e = np.zeros_like(hsv)
        e[idx] = h
        assert g_hsv[idx] == pytest.approx((f(sigma, hsv + e) - f(sigma, hsv - e)) / (2 * h), rel=1e-6, abs=1e-9)


# losses


def test_hue_loss_examples():
    assert hue_loss(0.3, 0.3) == 0.0
    assert hue_loss(0.95, 0.05) == pytest.approx(0.1)
    assert hue_loss(0.0, 0.5) == 0.5


def test_hue_loss_symmetry_and_shift():
    rng = np.random.default_rng(4)
    a, b, k = rng.uniform(size=(3, 10_000))
    la = hue_loss(a, b)
    np.testing.assert_array_equal(la, hue_loss(b, a))
    np.testing.assert_allclose(hue_loss((a + k) % 1, (b + k) % 1), la, atol=1e-12)
    assert la.max() <= 0.5 and la.min() >= 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_hue_loss_bounds(a, b):
    v = hue_loss(a, b)
    assert 0 <= v <= 0.5


def test_hue_loss_grad_branches():
    # d/d h_gt is the negative of d/d h_pred
    assert -hue_loss_grad(0.6, 0.3) == -1.0
    assert -hue_loss_grad(0.8, 0.1) == 1.0
    assert hue_loss_grad(0.5, 0.0) == 1.0  # tie stays on the unwrapped branch
    assert hue_loss_grad(0.0, 0.5) == -1.0
    assert hue_loss_grad(0.2, 0.9) == 1.0


def test_total_loss_examples():
    gt = np.array([[0.2, 0.5, 0.5]])
    assert total_loss(gt, gt)[0] == 0.0
    loss, terms = total_loss([[0.2, 0.6, 0.7]], gt)
    assert loss == pytest.approx(0.05, abs=1e-15)
    assert terms["s"] == pytest.approx(0.01) and terms["v"] == pytest.approx(0.04) and terms["h"] == 0.0


def test_total_loss_vs_loop():
    rng = np.random.default_rng(5)
    pred, gt = rng.uniform(size=(7, 3)), rng.uniform(size=(7, 3))
    acc = 0.0
    for p, g in zip(pred, gt):
        d = abs(p[0] - g[0])
        acc += min(d, 1 - d) + (p[1] - g[1]) ** 2 + (p[2] - g[2]) ** 2
    assert total_loss(pred, gt)[0] == pytest.approx(acc / 7, abs=1e-12)
    g = total_loss_grad(pred, gt)
    h = 1e-7
    for i in range(7):
        for c in range(3):
            e = np.zeros_like(pred)
            e[i, c] = h
            fd = (total_loss(pred + e, gt)[0] - total_loss(pred - e, gt)[0]) / (2 * h)
            assert g[i, c] == pytest.approx(fd, rel=1e-6)


# end-to-end gradients


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_fd(seed):
    m = randomized(tiny_config(), seed)
    batch = random_batch(np.random.default_rng(seed), R=32, N=8)
    _, _, grads = backward(m, batch)
    h = 1e-6
    worst = 0.0
    for name, p in m.params.items():
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + h
            up = loss_only(m, batch)
            p[i] = keep - h
            dn = loss_only(m, batch)
            p[i] = keep
            fd = (up - dn) / (2 * h)
            err = abs(grads[name][i] - fd) / max(abs(fd), abs(grads[name][i]), 1e-6)
            worst = max(worst, err)
    assert worst < 1e-3


def test_zero_loss_gives_zero_gradient():
    m = randomized(tiny_config(), 1)
    batch = random_batch(np.random.default_rng(1))
    from texnerf.nerf import render_batch

    batch.target = render_batch(m, batch)[0].hsv.copy()
    loss, _, grads = backward(m, batch)
    assert loss == 0.0
    # the hue term's subgradient at zero is sign(0) = 0
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_backward_requires_target_and_flags_nan():
    m = randomized(tiny_config(), 2)
    with pytest.raises(ValidationError):
        backward(m, random_batch(np.random.default_rng(0), target=False))
    batch = random_batch(np.random.default_rng(0))
    batch.target[0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        backward(m, batch)
