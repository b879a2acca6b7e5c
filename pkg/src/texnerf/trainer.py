"""Training loop: ray pools, minibatches, Adam, metrics log and checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .camera import generate_rays, image_rays  # noqa: F401  (generate_rays re-exported)
from .errors import NonFiniteError, ValidationError
from .evaluate import psnr, render_rays
from .nerf import FieldConfig, RadianceField, RaySampleBatch, backward, deltas_from_t, stratified_sample
from .pseudotex import hsv_to_rgb

log = logging.getLogger(__name__)

DENSITY_BIAS = 3.0
METRICS_HEADER = ["iter", "loss", "loss_h", "loss_s", "loss_v", "psnr_holdout"]


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 1024
    samples_per_ray: int = 64
    near: float | None = None  # None: take from the dataset
    far: float | None = None
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    holdout_every: int = 8
    holdout_rays: int = 1024
    dtype: str = "float32"
    sampling: str = "epoch"  # "epoch": walk a shuffled permutation of all rays; "uniform": fresh draw per batch
    field: dict = field(default_factory=dict)  # FieldConfig overrides; scene_scale defaults to far

    def __post_init__(self):
        for name in ("batch_rays", "samples_per_ray", "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.near is not None and self.far is not None and not 0 <= self.near < self.far:
            raise ValidationError("need 0 <= near < far")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")
        if self.sampling not in ("epoch", "uniform"):
            raise ValidationError("sampling must be 'epoch' or 'uniform'")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown train config keys: {unknown}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    def lr_at(self, it):
        frac = it / max(self.iterations, 1)
        return self.lr * (self.lr_final / self.lr) ** frac


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params, grads, state, lr):
    """Bias-corrected adaptive-moment update of ``params`` in place; returns (params, state)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for n, p in params.items():
        g = grads[n]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {n} {p.shape}")
        m, v = state.m[n], state.v[n]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(update)):
            raise NonFiniteError("non-finite Adam update", name=n)
        p -= update.astype(p.dtype, copy=False)
    return params, state


@dataclass
class RayPool:
    origins: np.ndarray
    directions: np.ndarray
    targets: np.ndarray
    view_ids: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_dataset(cls, dataset, view_ids):
        os_, ds, ts, vs = [], [], [], []
        for i in view_ids:
            o, d = image_rays(dataset.cameras[i])
            os_.append(o)
            ds.append(d)
            ts.append(dataset.images[i].reshape(-1, 3))
            vs.append(np.full(o.shape[0], i))
        if not os_:
            raise ValidationError("ray pool needs at least one view")
        return cls(np.concatenate(os_), np.concatenate(ds), np.concatenate(ts), np.concatenate(vs))


def sample_batch(pool, cfg, rng, near, far, idx=None):
    """``batch_rays`` distinct (view, pixel) pairs drawn uniformly, with stratified depths.

    ``idx`` supplies the pool indices instead of a fresh draw.
    """
    if idx is None:
        n = min(cfg.batch_rays, len(pool))
        idx = rng.choice(len(pool), size=n, replace=False)
    t = stratified_sample(near, far, cfg.samples_per_ray, rng, n_rays=len(idx))
    return RaySampleBatch(pool.origins[idx], pool.directions[idx], t, deltas_from_t(t, far), pool.targets[idx], idx)


def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Owns the model, optimizer state and RNG between steps."""

    def __init__(self, dataset, cfg, out_dir):
        self.dataset = dataset
        self.cfg = cfg
        self.out = Path(out_dir)
        self.near = cfg.near if cfg.near is not None else dataset.near
        self.far = cfg.far if cfg.far is not None else dataset.far
        if not 0 <= self.near < self.far:
            raise ValidationError(f"bad near/far: {self.near}, {self.far}")
        fcfg = dict(cfg.field)
        fcfg.setdefault("scene_scale", self.far)
        # start opaque: a transparent start lets the S loss drain opacity, which drags the
        # composited hue to 0 where the cyclic loss keeps pushing it against the sigmoid floor
        fcfg.setdefault("density_bias", DENSITY_BIAS)
        self.field_config = FieldConfig(**fcfg)
        self.train_ids, self.holdout_ids = dataset.split(cfg.holdout_every)
        self.pool = RayPool.from_dataset(dataset, self.train_ids)
        self.holdout = self._holdout_rays()
        dtype = np.dtype(cfg.dtype)
        self.model = RadianceField.initialize(self.field_config, seed=cfg.seed, dtype=dtype)
        self.opt = OptimizerState.zeros_like(self.model.params)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.order = np.zeros(0, dtype=np.int64)  # current epoch's ray permutation
        self.cursor = 0
        self.window = np.zeros(4)
        self.window_count = 0
        self.rows = []

    def _holdout_rays(self):
        if not self.holdout_ids or self.cfg.holdout_rays < 1:
            return None
        pool = RayPool.from_dataset(self.dataset, self.holdout_ids)
        pick = np.random.default_rng([self.cfg.seed, 1]).choice(
            len(pool), size=min(self.cfg.holdout_rays, len(pool)), replace=False
        )
        pick.sort()
        return pool.origins[pick], pool.directions[pick], pool.targets[pick]

    def holdout_psnr(self):
        if self.holdout is None:
            return float("nan")
        o, d, target = self.holdout
        pred, _ = render_rays(self.model, o, d, self.near, self.far, self.cfg.samples_per_ray)
        return psnr(hsv_to_rgb(np.clip(pred, 0, 1))[:, None, :], hsv_to_rgb(target)[:, None, :])

    # checkpoints -----------------------------------------------------------------

    def state_tensors(self):
        tensors = {f"param/{n}": p for n, p in self.model.params.items()}
        tensors.update({f"adam_m/{n}": a for n, a in self.opt.m.items()})
        tensors.update({f"adam_v/{n}": a for n, a in self.opt.v.items()})
        tensors["sampler/order"] = self.order
        return tensors

    def state_meta(self):
        return {
            "format": "texnerf-radiance-field",
            "field_config": self.field_config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "near": self.near,
            "far": self.far,
            "iteration": self.iteration,
            "adam_step": self.opt.step,
            "rng_state": _rng_state(self.rng),
            "cursor": self.cursor,
            "window": [float(x) for x in self.window],
            "window_count": self.window_count,
        }

    def save(self, path):
        checkpoint.save(path, self.state_tensors(), self.state_meta())

    def restore(self, path):
        tensors, meta = checkpoint.load(path)
        self.field_config = FieldConfig(**meta["field_config"])
        params = {n[len("param/") :]: a for n, a in tensors.items() if n.startswith("param/")}
        self.model = RadianceField(self.field_config, params)
        self.opt = OptimizerState(
            {n[len("adam_m/") :]: a for n, a in tensors.items() if n.startswith("adam_m/")},
            {n[len("adam_v/") :]: a for n, a in tensors.items() if n.startswith("adam_v/")},
            step=int(meta["adam_step"]),
        )
        self.rng = _rng_from_state(meta["rng_state"])
        self.order = tensors.get("sampler/order", np.zeros(0, dtype=np.int64))
        self.cursor = int(meta.get("cursor", 0))
        self.iteration = int(meta["iteration"])
        self.window = np.array(meta["window"], dtype=np.float64)
        self.window_count = int(meta["window_count"])
        self.near, self.far = float(meta["near"]), float(meta["far"])
        metrics = self.out / "metrics.csv"
        if metrics.exists():
            with metrics.open(newline="") as fh:
                reader = csv.reader(fh)
                next(reader, None)
                self.rows = [r for r in reader if r and int(r[0]) <= self.iteration]

    # loop ------------------------------------------------------------------------

    def _write_metrics(self):
        with (self.out / "metrics.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(self.rows)

    def _next_indices(self):
        if self.cfg.sampling == "uniform":
            return None
        n = min(self.cfg.batch_rays, len(self.pool))
        if self.cursor + n > self.order.size:  # the short tail of an epoch is dropped
            self.order = self.rng.permutation(len(self.pool)).astype(np.int64)
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + n]
        self.cursor += n
        return idx

    def step(self):
        idx = self._next_indices()
        batch = sample_batch(self.pool, self.cfg, self.rng, self.near, self.far, idx=idx)
        loss, terms, grads = backward(self.model, batch)
        if not np.isfinite(loss):
            raise NonFiniteError(f"loss became {loss} at iteration {self.iteration}")
        adam_step(self.model.params, grads, self.opt, self.cfg.lr_at(self.iteration))
        self.iteration += 1
        self.window += [loss, terms["h"], terms["s"], terms["v"]]
        self.window_count += 1
        return loss, terms

    def run(self, progress=None):
        cfg = self.cfg
        ckpt_dir = self.out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        if self.iteration == 0:
            self.save(ckpt_dir / "step_000000.ckpt")
        t0 = time.perf_counter()
        while self.iteration < cfg.iterations:
            try:
                self.step()
            except NonFiniteError:
                log.error("aborting at iteration %d; last good checkpoint kept in %s", self.iteration, ckpt_dir)
                self._write_metrics()
                raise
            it = self.iteration
            if it % cfg.log_every == 0:
                mean = self.window / max(self.window_count, 1)
                ph = self.holdout_psnr()
                self.rows.append([it] + [repr(float(x)) for x in mean] + [repr(ph) if np.isfinite(ph) else ""])
                self.window[:] = 0
                self.window_count = 0
                self._write_metrics()
                elapsed = time.perf_counter() - t0
                log.info("iter %d loss %.5f holdout PSNR %.2f dB (%.1fs)", it, mean[0], ph, elapsed)
                if progress is not None:
                    progress(it, mean, ph)
            if it % cfg.checkpoint_every == 0:
                self.save(ckpt_dir / f"step_{it:06d}.ckpt")
        self._write_metrics()
        self.save(self.out / "model.ckpt")
        return self.model


def load_model(path):
    """Radiance field and render settings (near, far, samples) from a checkpoint."""
    tensors, meta = checkpoint.load(path)
    cfg = FieldConfig(**meta["field_config"])
    params = {n[len("param/") :]: a for n, a in tensors.items() if n.startswith("param/")}
    model = RadianceField(cfg, params)
    model.check_finite()
    return model, meta


def train(dataset, cfg, out_dir, resume_from=None, progress=None):
    """Run training and return the :class:`Trainer` (model, rows, paths)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(dataset, cfg, out)
    if resume_from is not None:
        trainer.restore(resume_from)
    trainer.run(progress=progress)
    return trainer


def read_metrics(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def window_decrease_fraction(losses):
    """Fraction of consecutive logged window means that decrease."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        return 1.0
    return float(np.mean(np.diff(losses) < 0))
