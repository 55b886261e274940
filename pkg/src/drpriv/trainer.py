"""Alternating four-phase adversarial training.

Each global iteration runs the reconstructor (R), discriminator (D),
classifier (C) and generator (G) phases in that order, each for its own
number of plain SGD steps on freshly drawn mini-batches. Training stops after
``global_iters`` iterations or once the largest parameter change over an
iteration falls below ``convergence_tol``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from . import objectives as obj
from .dataset import ImageDataset, mean_image
from .models import NETWORKS, ModelBundle, build_models, bundle_from_params
from .nn_core import DivergenceError
from .objectives import LossWeights

PHASES = ("R", "D", "C", "G")


@dataclass(frozen=True)
class TrainingConfig:
    lr_r: float = 0.01
    lr_d: float = 0.01
    lr_c: float = 0.01
    lr_g: float = 0.01
    steps_r: int = 300
    steps_d: int = 300
    steps_c: int = 300
    steps_g: int = 300
    global_iters: int = 1000
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    target_cov: float = 0.05
    seed: int = 0
    update_generator_in_r_phase: bool = True
    convergence_tol: float = 1e-6

    def __post_init__(self):
        for name in ("lr_r", "lr_d", "lr_c", "lr_g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("steps_r", "steps_d", "steps_c", "steps_g", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.global_iters < 0:
            raise ValueError("global_iters must be non-negative")
        if not self.target_cov > 0:
            raise ValueError("target_cov must be positive")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass(frozen=True)
class TargetSpec:
    mean: np.ndarray
    cov: float

    def __post_init__(self):
        if not self.cov > 0:
            raise ValueError("target covariance must be positive")


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    l_r: float
    l_d: float
    l_c: float
    l_g: float
    mean_distance: float
    max_param_delta: float


HISTORY_FIELDS = tuple(f.name for f in dataclasses.fields(HistoryRecord))


class TrainingDivergence(DivergenceError):
    def __init__(self, phase, iteration, detail=""):
        self.phase = phase
        self.iteration = iteration
        super().__init__(f"training diverged in phase {phase} at iteration {iteration}"
                         + (f": {detail}" if detail else ""))


def sample_target_batch(ts: TargetSpec, batch_size, rng):
    """Clamped isotropic Gaussian draws around the target mean, shape (batch, h, w)."""
    noise = rng.normal(scale=np.sqrt(ts.cov), size=(batch_size, *ts.mean.shape))
    return np.clip(ts.mean[None] + noise, 0.0, 1.0)


def batch_indices(n, batch_size, rng):
    """Uniform draw with replacement (no epoch structure)."""
    return rng.integers(0, n, size=batch_size)


def sample_data_batch(data: ImageDataset, batch_size, rng):
    idx = batch_indices(len(data), batch_size, rng)
    return data.images[idx], data.access_labels[idx]


# -- phase objectives ----------------------------------------------------------
#
# Each returns (loss, {network name: gradient ParamSet}) for the networks the
# phase owns. x: (B, h, w) images, y: (B,) labels, t: (B, h, w) target samples.

def reconstruction_objective(bundle: ModelBundle, x, with_generator=True):
    g, r = bundle.generator, bundle.reconstructor
    xb = x[:, None]
    codes, tg = nn.forward(g.spec, g.params, xb)
    xh, tr = nn.forward(r.spec, r.params, codes)
    loss = obj.reconstruction_loss(xb, xh)
    gcodes, gr = nn.backward(r.spec, r.params, tr, obj.reconstruction_loss_grad(xb, xh))
    grads = {"reconstructor": gr}
    if with_generator:
        grads["generator"] = nn.backward(g.spec, g.params, tg, gcodes)[1]
    return loss, grads


def _mixed_batch(t, xh):
    inp = np.concatenate([t[:, None] if t.ndim == 3 else t, xh])
    labels = np.concatenate([np.ones(len(t)), np.zeros(len(xh))])[:, None]
    return inp, labels


def discriminator_objective(bundle: ModelBundle, x, t):
    xh = bundle.reconstructor(bundle.generator(x[:, None]))
    inp, labels = _mixed_batch(t, xh)
    d = bundle.discriminator
    p, td = nn.forward(d.spec, d.params, inp)
    loss = obj.discriminator_loss(labels, p)
    _, gd = nn.backward(d.spec, d.params, td, obj.discriminator_loss_grad(labels, p))
    return loss, {"discriminator": gd}


def classifier_objective(bundle: ModelBundle, x, y):
    codes = bundle.generator(x[:, None])
    c = bundle.classifier
    p, tc = nn.forward(c.spec, c.params, codes)
    target = obj.one_hot(y, bundle.num_levels)
    loss = obj.classification_loss(target, p)
    _, gc = nn.backward(c.spec, c.params, tc, obj.classification_loss_grad(target, p))
    return loss, {"classifier": gc}


def generator_objective(bundle: ModelBundle, x, y, t, w: LossWeights, return_parts=False):
    g, r, d, c = bundle.generator, bundle.reconstructor, bundle.discriminator, bundle.classifier
    xb = x[:, None]
    codes, tg = nn.forward(g.spec, g.params, xb)
    probs, tc = nn.forward(c.spec, c.params, codes)
    xh, tr = nn.forward(r.spec, r.params, codes)
    inp, labels = _mixed_batch(t, xh)
    dp, td = nn.forward(d.spec, d.params, inp)

    target = obj.one_hot(y, bundle.num_levels)
    l_c = obj.classification_loss(target, probs)
    l_d = obj.discriminator_loss(labels, dp)
    l_r = obj.reconstruction_loss(xb, xh)
    dist = obj.per_pixel_distance(xb, xh)
    loss = obj.generator_objective(l_c, l_d, l_r, dist, w)

    gcodes = nn.backward(c.spec, c.params, tc, w.alpha * obj.classification_loss_grad(target, probs))[0]
    ginp = nn.backward(d.spec, d.params, td, -w.beta * obj.discriminator_loss_grad(labels, dp))[0]
    gxh = (ginp[len(t):] - w.gamma * obj.reconstruction_loss_grad(xb, xh)
           + obj.dr_penalty_grad(dist, w) * obj.per_pixel_distance_grad(xb, xh))
    gcodes = gcodes + nn.backward(r.spec, r.params, tr, gxh)[0]
    _, gg = nn.backward(g.spec, g.params, tg, gcodes)
    if return_parts:
        return loss, {"generator": gg}, {"l_c": l_c, "l_d": l_d, "l_r": l_r, "dist": dist}
    return loss, {"generator": gg}


def _apply(bundle, grads, lr):
    return bundle.with_params(**{name: nn.sgd_update(getattr(bundle, name).params, g, lr)
                                 for name, g in grads.items()})


def run_phase(phase, bundle: ModelBundle, train_data: ImageDataset, ts: TargetSpec,
              cfg: TrainingConfig, rng, iteration=0):
    """Run one phase; returns ``(bundle, per-step losses)``.

    Only the networks the phase owns change. Raises TrainingDivergence on a
    non-finite loss or gradient.
    """
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    steps = {"R": cfg.steps_r, "D": cfg.steps_d, "C": cfg.steps_c, "G": cfg.steps_g}[phase]
    lr = {"R": cfg.lr_r, "D": cfg.lr_d, "C": cfg.lr_c, "G": cfg.lr_g}[phase]
    B = cfg.batch_size
    losses = []
    for _ in range(steps):
        x, y = sample_data_batch(train_data, B, rng)
        if phase == "R":
            loss, grads = reconstruction_objective(bundle, x, cfg.update_generator_in_r_phase)
        elif phase == "D":
            t = sample_target_batch(ts, B, rng)
            loss, grads = discriminator_objective(bundle, x, t)
        elif phase == "C":
            loss, grads = classifier_objective(bundle, x, y)
        else:
            t = sample_target_batch(ts, B, rng)
            loss, grads = generator_objective(bundle, x, y, t, cfg.weights)
        if not np.isfinite(loss):
            raise TrainingDivergence(phase, iteration, "non-finite loss")
        try:
            bundle = _apply(bundle, grads, lr)
        except DivergenceError as exc:
            raise TrainingDivergence(phase, iteration, str(exc)) from None
        losses.append(loss)
    return bundle, losses


def max_param_delta(before: ModelBundle, after: ModelBundle):
    delta = 0.0
    for name in NETWORKS:
        pa, pb = getattr(before, name).params, getattr(after, name).params
        for key in pa:
            delta = max(delta, float(np.max(np.abs(pa[key] - pb[key]))))
    return delta


def convergence_check(history, tol):
    if not history:
        raise ValueError("convergence check needs at least one record")
    return history[-1].max_param_delta < tol


def in_loop_distance(bundle: ModelBundle, x):
    xh = bundle.reconstructor(bundle.generator(x[:, None]))
    return obj.per_pixel_distance(x[:, None], xh)


@dataclass
class Checkpoint:
    bundle: ModelBundle
    config: TrainingConfig
    history: list
    rng_state: bytes
    target_mean: np.ndarray
    format_version: int = 1


class Trainer:
    """Stateful driver; holds the bundle, history and generator state."""

    def __init__(self, train_data: ImageDataset, cfg: TrainingConfig, d_prime, m, widths=None,
                 _bundle=None, _history=None, _rng=None, _target_mean=None):
        if m != train_data.num_levels:
            raise ValueError(f"m={m} does not match dataset num_levels={train_data.num_levels}")
        self.data = train_data
        self.cfg = cfg
        self.bundle = _bundle or build_models(train_data.shape, d_prime, m, widths, seed=cfg.seed)
        self.history = list(_history or [])
        self.rng = _rng or np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        mean = mean_image(train_data) if _target_mean is None else _target_mean
        self.target = TargetSpec(np.asarray(mean, dtype=np.float64), cfg.target_cov)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_data: ImageDataset):
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(ckpt.rng_state.decode())
        return cls(train_data, ckpt.config, ckpt.bundle.d_prime, ckpt.bundle.num_levels,
                   _bundle=ckpt.bundle, _history=ckpt.history, _rng=rng, _target_mean=ckpt.target_mean)

    @property
    def done(self):
        if len(self.history) >= self.cfg.global_iters:
            return True
        return bool(self.history) and convergence_check(self.history, self.cfg.convergence_tol)

    def step(self):
        """One global iteration; appends and returns its HistoryRecord."""
        it = len(self.history)
        cfg = self.cfg
        probe_x, _ = sample_data_batch(self.data, cfg.batch_size, self.rng)
        sample_target_batch(self.target, cfg.batch_size, self.rng)
        start = self.bundle
        bundle = start
        means = {}
        for phase in PHASES:
            bundle, losses = run_phase(phase, bundle, self.data, self.target, cfg, self.rng, it)
            means[phase] = float(np.mean(losses))
        dist = in_loop_distance(bundle, probe_x)
        if not np.isfinite(dist):
            raise TrainingDivergence("G", it, "non-finite distance")
        rec = HistoryRecord(it, means["R"], means["D"], means["C"], means["G"], dist,
                            max_param_delta(start, bundle))
        self.bundle = bundle
        self.history.append(rec)
        return rec

    def run(self, max_iters=None, callback=None):
        """Train until done, or until ``max_iters`` more iterations have run."""
        count = 0
        while not self.done and (max_iters is None or count < max_iters):
            rec = self.step()
            count += 1
            if callback is not None:
                callback(rec)
        return self.bundle, self.history

    def checkpoint(self):
        state = json.dumps(self.rng.bit_generator.state, sort_keys=True).encode()
        return Checkpoint(self.bundle, self.cfg, list(self.history), state, self.target.mean.copy())


def train(train_data: ImageDataset, cfg: TrainingConfig, d_prime, m, widths=None, callback=None):
    """Train a bundle from scratch; returns ``(bundle, history)``."""
    return Trainer(train_data, cfg, d_prime, m, widths).run(callback=callback)


# -- checkpoint container -----------------------------------------------------------
#
# magic(8) | version u32 | n_tensors u32 | tensors | meta_len u64 | meta json | blake2b-64
# tensor: name_len u16 | name utf-8 | dtype tag u8 | ndim u8 | shape u64*ndim | payload f8 LE

MAGIC = b"DRPRIVCK"
FORMAT_VERSION = 1
_DTYPE_F8 = 1


class CheckpointError(ValueError):
    pass


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(ckpt: Checkpoint):
    tensors = [("target/mean", ckpt.target_mean)]
    for name in NETWORKS:
        params = getattr(ckpt.bundle, name).params
        tensors.extend((f"{name}/{key}", params[key]) for key in sorted(params))
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), _DTYPE_F8, arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = {
        "bundle": ckpt.bundle.meta(),
        "config": ckpt.config.to_dict(),
        "history": [dataclasses.asdict(r) for r in ckpt.history],
        "rng_state": ckpt.rng_state.decode(),
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<Q", len(blob)) + blob)
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(data: bytes):
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError("checkpoint truncated")
    body, check = data[:-8], data[-8:]
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if _checksum(body) != check:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt)")
    pos = 8
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    tensors = {}
    for _ in range(count):
        nlen, tag, ndim = struct.unpack_from("<HBB", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode()
        pos += nlen
        if tag != _DTYPE_F8:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    (mlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    meta = json.loads(body[pos:pos + mlen].decode())
    params = {name: {} for name in NETWORKS}
    for key, arr in tensors.items():
        net, _, pname = key.partition("/")
        if net in params:
            params[net][pname] = arr
    bundle = bundle_from_params(meta["bundle"], params)
    history = [HistoryRecord(**r) for r in meta["history"]]
    return Checkpoint(bundle, TrainingConfig.from_dict(meta["config"]), history,
                      meta["rng_state"].encode(), tensors["target/mean"], version)


def save_checkpoint(ckpt: Checkpoint, path):
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes())
