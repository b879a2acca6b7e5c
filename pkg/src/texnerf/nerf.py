"""HSV radiance field with hand-written reverse-mode gradients.

Network layout (all dense layers store ``weight`` as (fan_in, fan_out))::

    enc(x) -> trunk.0 -> ReLU -> ... -> trunk.{depth-1} -> ReLU -> h_last
                           |
              trunk.{hue_layer-1} output -> hue -> sigmoid        (H, position only)
    h_last -> density -> softplus                                 (sigma)
    [h_last, enc(d)] -> sv.0 -> ReLU -> sv.1 -> sigmoid           (S, V)

The first sv layer is split into a trunk part and a direction part so the
direction features are computed once per ray rather than once per sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ValidationError


@dataclass
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.l_pos < 0 or self.l_dir < 0:
            raise ValidationError("encoding frequency counts must be >= 0")


def encoded_size(L, include_input=True):
    return 3 * (int(include_input) + 2 * L)


def positional_encoding(x, L, include_input=True):
    """``[x, sin(2^j pi x), cos(2^j pi x) for j < L]`` along the last axis.

    Output layout for one frequency block is (sin x0, sin x1, sin x2,
    cos x0, cos x1, cos x2).
    """
    x = np.asarray(x)
    parts = [x] if include_input else []
    for j in range(L):
        arg = (2.0**j * math.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1) if parts else np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)


def positional_encoding_backward(x, grad_out, L, include_input=True):
    """Vector-Jacobian product of :func:`positional_encoding` with respect to ``x``."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    g = np.zeros_like(x, dtype=grad_out.dtype)
    col = 0
    if include_input:
        g = g + grad_out[..., 0:3]
        col = 3
    for j in range(L):
        freq = 2.0**j * math.pi
        arg = freq * x
        g = g + grad_out[..., col : col + 3] * (freq * np.cos(arg))
        g = g - grad_out[..., col + 3 : col + 6] * (freq * np.sin(arg))
        col += 6
    return g


@dataclass
class FieldConfig:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    depth: int = 4
    width: int = 128
    hue_layer: int = 2
    sv_width: int = 64
    scene_scale: float = 1.0  # positions are divided by this before encoding
    density_bias: float = 0.0  # initial density-head bias

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = EncodingConfig(**self.encoding)
        if self.depth < 1 or self.width < 1 or self.sv_width < 1:
            raise ValidationError("depth, width and sv_width must be >= 1")
        if not 1 <= self.hue_layer <= self.depth:
            raise ValidationError(f"hue_layer must be in [1, depth={self.depth}]")
        if self.scene_scale <= 0:
            raise ValidationError("scene_scale must be > 0")

    def to_dict(self):
        return asdict(self)

    @property
    def pos_dim(self):
        return encoded_size(self.encoding.l_pos, self.encoding.include_input)

    @property
    def dir_dim(self):
        return encoded_size(self.encoding.l_dir, self.encoding.include_input)

    def layer_shapes(self):
        """Ordered (name, fan_in, fan_out) for every dense layer."""
        shapes = [("trunk.0", self.pos_dim, self.width)]
        shapes += [(f"trunk.{i}", self.width, self.width) for i in range(1, self.depth)]
        shapes += [
            ("hue", self.width, 1),
            ("density", self.width, 1),
            ("sv.0.trunk", self.width, self.sv_width),
            ("sv.0.dir", self.dir_dim, self.sv_width),
            ("sv.1", self.sv_width, 2),
        ]
        return shapes


class RadianceField:
    """Parameters plus configuration; parameters are a flat ordered name -> array dict."""

    def __init__(self, config, params):
        self.config = config
        expected = []
        for name, fan_in, fan_out in config.layer_shapes():
            expected.append((f"{name}.weight", (fan_in, fan_out)))
            if name != "sv.0.dir":
                expected.append((f"{name}.bias", (fan_out,)))
        missing = [n for n, _ in expected if n not in params]
        if missing:
            raise ValidationError(f"missing parameters: {missing}")
        for n, shape in expected:
            if params[n].shape != shape:
                raise ValidationError(f"parameter {n} has shape {params[n].shape}, expected {shape}")
        self.params = {n: params[n] for n, _ in expected}

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        """Weights uniform in +-sqrt(6 / fan_in); biases zero except the density head's."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, fan_in, fan_out in config.layer_shapes():
            bound = math.sqrt(6.0 / fan_in)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            if name != "sv.0.dir":
                params[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)
        params["density.bias"][...] = config.density_bias
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["trunk.0.weight"].dtype

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_heads(self):
        """Zero the output layers: H = S = V = 0.5 and sigma = ln 2 everywhere."""
        for name in ("hue", "density", "sv.1"):
            self.params[f"{name}.weight"][...] = 0
            self.params[f"{name}.bias"][...] = 0
        return self

    def copy(self):
        return RadianceField(self.config, {n: p.copy() for n, p in self.params.items()})

    def astype(self, dtype):
        return RadianceField(self.config, {n: p.astype(dtype) for n, p in self.params.items()})

    def check_finite(self):
        for n, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise NonFiniteError("non-finite parameter values", name=n)


def softplus(z):
    return np.logaddexp(0.0, z).astype(z.dtype, copy=False)


@dataclass
class FieldOutput:
    sigma: np.ndarray
    h: np.ndarray
    s: np.ndarray
    v: np.ndarray
    cache: dict | None = None


def encode_directions(model, d):
    enc = model.config.encoding
    return positional_encoding(np.asarray(d, dtype=model.dtype), enc.l_dir, enc.include_input)


def field_forward(model, x, d, ray_index=None, keep_cache=False):
    """Evaluate the field at positions ``x`` (P, 3).

    ``d`` is either (P, 3) unit directions, or (R, 3) per-ray directions with
    ``ray_index`` (P,) mapping each position to its ray.
    """
    p = model.params
    cfg = model.config
    dt = model.dtype
    x = np.asarray(x, dtype=dt)
    ex = positional_encoding(x / dt.type(cfg.scene_scale), cfg.encoding.l_pos, cfg.encoding.include_input)
    ed = encode_directions(model, d)

    pre = []
    acts = [ex]
    a = ex
    hue_in = None
    for i in range(cfg.depth):
        z = a @ p[f"trunk.{i}.weight"] + p[f"trunk.{i}.bias"]
        a = np.maximum(z, 0)
        pre.append(z)
        acts.append(a)
        if i + 1 == cfg.hue_layer:
            hue_in = a
    z_h = hue_in @ p["hue.weight"] + p["hue.bias"]
    z_sigma = a @ p["density.weight"] + p["density.bias"]
    dir_feat = ed @ p["sv.0.dir.weight"]
    if ray_index is not None:
        dir_feat = dir_feat[ray_index]
    z_sv0 = a @ p["sv.0.trunk.weight"] + p["sv.0.trunk.bias"] + dir_feat
    a_sv0 = np.maximum(z_sv0, 0)
    z_sv1 = a_sv0 @ p["sv.1.weight"] + p["sv.1.bias"]

    h = expit(z_h[:, 0])
    sv = expit(z_sv1)
    sigma = softplus(z_sigma[:, 0])
    cache = None
    if keep_cache:
        cache = dict(
            acts=acts, pre=pre, hue_in=hue_in, ed=ed, ray_index=ray_index,
            z_sigma=z_sigma[:, 0], a_sv0=a_sv0, z_sv0=z_sv0, h=h, sv=sv,
        )
    return FieldOutput(sigma, h, sv[:, 0], sv[:, 1], cache)


def field_backward(model, out, g_sigma, g_h, g_s, g_v):
    """Parameter gradients given upstream gradients on the four outputs."""
    p = model.params
    cfg = model.config
    c = out.cache
    if c is None:
        raise ValidationError("field_backward needs a forward pass with keep_cache=True")
    dt = model.dtype
    grads = {}

    dz_h = (np.asarray(g_h, dt) * c["h"] * (1 - c["h"]))[:, None]
    dz_sv1 = np.stack([g_s, g_v], axis=-1).astype(dt) * c["sv"] * (1 - c["sv"])
    dz_sigma = (np.asarray(g_sigma, dt) * expit(c["z_sigma"]))[:, None]

    grads["sv.1.weight"] = c["a_sv0"].T @ dz_sv1
    grads["sv.1.bias"] = dz_sv1.sum(axis=0)
    da_sv0 = dz_sv1 @ p["sv.1.weight"].T
    dz_sv0 = da_sv0 * (c["z_sv0"] > 0)
    a_last = c["acts"][-1]
    grads["sv.0.trunk.weight"] = a_last.T @ dz_sv0
    grads["sv.0.trunk.bias"] = dz_sv0.sum(axis=0)
    if c["ray_index"] is not None:
        ri = c["ray_index"]
        per_ray = np.zeros((c["ed"].shape[0], dz_sv0.shape[1]), dtype=dt)
        if ri.size and np.all(ri[1:] >= ri[:-1]):
            starts = np.flatnonzero(np.r_[True, ri[1:] != ri[:-1]])
            per_ray[ri[starts]] = np.add.reduceat(dz_sv0, starts, axis=0)
        else:
            np.add.at(per_ray, ri, dz_sv0)
        grads["sv.0.dir.weight"] = c["ed"].T @ per_ray
    else:
        grads["sv.0.dir.weight"] = c["ed"].T @ dz_sv0

    grads["density.weight"] = a_last.T @ dz_sigma
    grads["density.bias"] = dz_sigma.sum(axis=0)
    grads["hue.weight"] = c["hue_in"].T @ dz_h
    grads["hue.bias"] = dz_h.sum(axis=0)

    da = dz_sv0 @ p["sv.0.trunk.weight"].T + dz_sigma @ p["density.weight"].T
    for i in reversed(range(cfg.depth)):
        if i + 1 == cfg.hue_layer:
            da = da + dz_h @ p["hue.weight"].T
        dz = da * (c["pre"][i] > 0)
        grads[f"trunk.{i}.weight"] = c["acts"][i].T @ dz
        grads[f"trunk.{i}.bias"] = dz.sum(axis=0)
        if i > 0:
            da = dz @ p[f"trunk.{i}.weight"].T
    return {n: grads[n] for n in p}


def stratified_sample(near, far, n, rng, n_rays=None):
    """One uniform draw per bin ``[near + i/n (far-near), near + (i+1)/n (far-near))``.

    Returns (n,) or, with ``n_rays``, (n_rays, n).
    """
    if not 0 <= near < far:
        raise ValidationError("need 0 <= near < far")
    if n < 1:
        raise ValidationError("need at least one sample")
    shape = (n,) if n_rays is None else (n_rays, n)
    edges = near + (far - near) * np.arange(n) / n
    u = rng.random(shape)
    return edges + u * ((far - near) / n)


def midpoint_samples(near, far, n, n_rays=None):
    """Deterministic bin midpoints, the inference counterpart of :func:`stratified_sample`."""
    t = near + (far - near) * (np.arange(n) + 0.5) / n
    return t if n_rays is None else np.broadcast_to(t, (n_rays, n)).copy()


def deltas_from_t(t, far):
    """Spacing to the next sample; the last sample gets the residual to ``far``."""
    t = np.asarray(t, dtype=np.float64)
    return np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)


@dataclass
class RenderResult:
    hsv: np.ndarray  # (R, 3)
    weights: np.ndarray  # (R, N)
    transmittance: np.ndarray  # (R, N + 1); the last column is the escape probability
    opacity: np.ndarray  # (R,)


def volume_render_hsv(sigma, hsv, deltas):
    """Composite per-sample HSV along rays with zero background.

    ``T_i = exp(-sum_{j<i} sigma_j delta_j)``, ``w_i = T_i (1 - exp(-sigma_i delta_i))``,
    ``C = sum_i w_i (H_i, S_i, V_i)``. Accepts a single ray (N,) or a batch (R, N).
    """
    sigma = np.asarray(sigma)
    single = sigma.ndim == 1
    sigma = np.atleast_2d(sigma)
    deltas = np.atleast_2d(np.asarray(deltas))
    hsv = np.asarray(hsv).reshape(sigma.shape + (3,))
    tau = sigma * deltas
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(cum[:, :1]), cum], axis=-1))
    alpha = -np.expm1(-tau)
    w = trans[:, :-1] * alpha
    color = np.einsum("rn,rnc->rc", w, hsv)
    opacity = w.sum(axis=-1)
    if single:
        return RenderResult(color[0], w[0], trans[0], opacity[0])
    return RenderResult(color, w, trans, opacity)


def volume_render_backward(result, hsv, deltas, g_color):
    """Gradients of a scalar loss with respect to per-sample sigma and hsv.

    With ``g_i = dL/dC . c_i``: ``dL/dtau_k = g_k T_{k+1} - sum_{i>k} g_i w_i``.
    """
    w = result.weights
    trans = result.transmittance
    g_color = np.asarray(g_color)
    g_hsv = w[..., None] * g_color[:, None, :]
    g = np.einsum("rnc,rc->rn", hsv, g_color)
    gw = g * w
    suffix = np.cumsum(gw[:, ::-1], axis=-1)[:, ::-1]
    after = np.concatenate([suffix[:, 1:], np.zeros_like(suffix[:, :1])], axis=-1)
    g_tau = g * trans[:, 1:] - after
    return g_tau * deltas, g_hsv


def hue_loss(h_pred, h_gt):
    """Cyclic hue distance ``min(|dh|, 1 - |dh|)``, elementwise."""
    d = np.abs(np.asarray(h_pred, dtype=np.float64) - np.asarray(h_gt, dtype=np.float64))
    return np.minimum(d, 1.0 - d)


def hue_loss_grad(h_pred, h_gt):
    """d/d h_pred of :func:`hue_loss`; at ``|dh| = 0.5`` the unwrapped branch is used."""
    delta = np.asarray(h_pred) - np.asarray(h_gt)
    sign = np.sign(delta)
    return np.where(np.abs(delta) <= 0.5, sign, -sign)


def total_loss(pred, gt):
    """Mean over rays of hue distance plus squared S and V errors.

    Returns ``(loss, {"h": ..., "s": ..., "v": ...})`` with per-term means.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    lh = float(np.mean(hue_loss(pred[:, 0], gt[:, 0])))
    ls = float(np.mean((pred[:, 1] - gt[:, 1]) ** 2))
    lv = float(np.mean((pred[:, 2] - gt[:, 2]) ** 2))
    return lh + ls + lv, {"h": lh, "s": ls, "v": lv}


def total_loss_grad(pred, gt):
    pred = np.atleast_2d(pred)
    gt = np.atleast_2d(gt)
    n = pred.shape[0]
    g = np.empty_like(pred)
    g[:, 0] = hue_loss_grad(pred[:, 0], gt[:, 0]) / n
    g[:, 1:] = 2.0 * (pred[:, 1:] - gt[:, 1:]) / n
    return g


@dataclass
class RaySampleBatch:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    t_vals: np.ndarray  # (R, N)
    deltas: np.ndarray  # (R, N)
    target: np.ndarray | None = None  # (R, 3) ground-truth HSV
    ray_ids: np.ndarray | None = None  # pool indices the rays were drawn from

    @property
    def n_rays(self):
        return self.origins.shape[0]

    @property
    def n_samples(self):
        return self.t_vals.shape[1]

    def positions(self):
        return self.origins[:, None, :] + self.t_vals[..., None] * self.directions[:, None, :]


def render_batch(model, batch, keep_cache=False):
    """Field evaluation plus compositing for every ray in ``batch``."""
    R, N = batch.n_rays, batch.n_samples
    pts = batch.positions().reshape(-1, 3)
    ray_index = np.repeat(np.arange(R), N)
    out = field_forward(model, pts, batch.directions, ray_index=ray_index, keep_cache=keep_cache)
    hsv = np.stack([out.h, out.s, out.v], axis=-1).reshape(R, N, 3)
    deltas = batch.deltas.astype(model.dtype)
    result = volume_render_hsv(out.sigma.reshape(R, N), hsv, deltas)
    return result, out, hsv


def backward(model, batch):
    """Loss, per-term breakdown and exact parameter gradients for one batch."""
    if batch.target is None:
        raise ValidationError("batch has no ground truth")
    result, out, hsv = render_batch(model, batch, keep_cache=True)
    loss, terms = total_loss(result.hsv, batch.target)
    g_color = total_loss_grad(result.hsv.astype(np.float64), batch.target).astype(model.dtype)
    deltas = batch.deltas.astype(model.dtype)
    g_sigma, g_hsv = volume_render_backward(result, hsv, deltas, g_color)
    g_hsv = g_hsv.reshape(-1, 3)
    grads = field_backward(model, out, g_sigma.reshape(-1), g_hsv[:, 0], g_hsv[:, 1], g_hsv[:, 2])
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", name=n)
    return loss, terms, grads


def loss_only(model, batch):
    result, _, _ = render_batch(model, batch)
    return total_loss(result.hsv, batch.target)[0]
