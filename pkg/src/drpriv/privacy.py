"""Reconstruction-distance privacy: attackers, the distance test, and a PCA baseline.

A transform satisfies the privacy requirement at level ``epsilon`` when the
expected per-pixel squared distance between an image and its reconstruction
by the adversary is at least ``epsilon``. The expectation is estimated by the
mean over a held-out test set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from . import objectives as obj
from .dataset import ImageDataset
from .models import ModelBundle, reconstructor_spec, resolve_widths
from .nn_core import Model, NetworkSpec
from .trainer import batch_indices


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 1000
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    attacker_widths: dict | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("attack steps must be at least 1")
        if not self.lr > 0:
            raise ValueError("attack lr must be positive")
        if self.batch_size < 1:
            raise ValueError("attack batch_size must be at least 1")


def default_attack_config(cfg):
    """Equal-compute attacker: as many steps as the in-loop reconstructor got."""
    return AttackConfig(steps=cfg.steps_r * max(cfg.global_iters, 1), lr=cfg.lr_r,
                        batch_size=cfg.batch_size, seed=cfg.seed)


@dataclass(frozen=True)
class PrivacyReport:
    mean_distance: float
    epsilon: float
    satisfied: bool
    attacker_kind: str
    n_test: int

    def to_record(self):
        return {"attacker_kind": self.attacker_kind, "mean_distance": self.mean_distance,
                "epsilon": self.epsilon, "satisfied": self.satisfied, "n_test": self.n_test}

    @classmethod
    def from_record(cls, r):
        return cls(float(r["mean_distance"]), float(r["epsilon"]), bool(r["satisfied"]),
                   str(r["attacker_kind"]), int(r["n_test"]))


@dataclass(frozen=True)
class Attacker:
    model: Model
    image_shape: tuple
    losses: list = field(default_factory=list, repr=False)

    def reconstruct(self, codes):
        out = self.model(np.asarray(codes, dtype=np.float64))
        return out.reshape(len(out), *self.image_shape)


def _as_transform(transform):
    return transform.transform if isinstance(transform, ModelBundle) else transform


def train_attacker(transform, train_data: ImageDataset, ac: AttackConfig, net: NetworkSpec | None = None):
    """Fit a fresh reconstructor on ``(transform(x), x)`` pairs from the training data.

    ``transform`` is a frozen map (a ModelBundle or any callable on image
    batches); it is evaluated once on the whole training set and never
    updated. ``net`` overrides the default architecture, which mirrors the
    in-loop reconstructor. Its output must have ``h * w`` entries per sample.
    """
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    codes = np.asarray(_as_transform(transform)(train_data.images), dtype=np.float64)
    if net is None:
        net = reconstructor_spec(train_data.shape, codes.shape[1], resolve_widths(ac.attacker_widths))
    if net.input_shape != codes.shape[1:]:
        raise nn.ShapeError(f"attacker input {net.input_shape} does not match codes {codes.shape[1:]}")
    if int(np.prod(net.output_shape)) != train_data.pixel_count:
        raise nn.ShapeError("attacker output size does not match the image size")
    seeds = np.random.SeedSequence([ac.seed, 11]).spawn(2)
    params = nn.init_params(net, seeds[0])
    rng = np.random.default_rng(seeds[1])
    targets = train_data.images.reshape(len(train_data), *net.output_shape)
    losses = []
    for step in range(ac.steps):
        idx = batch_indices(len(codes), ac.batch_size, rng)
        x = targets[idx]
        out, trace = nn.forward(net, params, codes[idx])
        loss = obj.reconstruction_loss(x, out)
        if not np.isfinite(loss):
            raise nn.DivergenceError(f"attacker diverged at step {step}")
        _, grads = nn.backward(net, params, trace, obj.reconstruction_loss_grad(x, out))
        params = nn.sgd_update(params, grads, ac.lr)
        losses.append(loss)
    return Attacker(Model(net, params), train_data.shape, losses)


def evaluate_epsilon_dr(transform, reconstruct, test_data: ImageDataset, epsilon, attacker_kind="in_loop"):
    """Mean per-pixel reconstruction distance on the test set, checked against ``epsilon``."""
    if len(test_data) == 0:
        raise ValueError("test set is empty")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = test_data.images
    xh = np.asarray(reconstruct(_as_transform(transform)(x)), dtype=np.float64).reshape(x.shape)
    dist = float(np.mean(obj.per_sample_distances(x, xh)))
    return PrivacyReport(dist, float(epsilon), dist >= epsilon, attacker_kind, len(test_data))


@dataclass(frozen=True)
class PrivacyAssessment:
    in_loop: PrivacyReport
    fresh: PrivacyReport

    @property
    def headline(self):
        """The stronger adversary's result (smaller distance)."""
        return self.fresh if self.fresh.mean_distance <= self.in_loop.mean_distance else self.in_loop


def assess_privacy(bundle: ModelBundle, train_data, test_data, epsilon, ac: AttackConfig):
    in_loop = evaluate_epsilon_dr(bundle, bundle.reconstruct, test_data, epsilon, "in_loop")
    # same architecture as the bundle's own reconstructor unless widths are overridden
    net = None if ac.attacker_widths else bundle.reconstructor.spec
    attacker = train_attacker(bundle, train_data, ac, net=net)
    fresh = evaluate_epsilon_dr(bundle, attacker.reconstruct, test_data, epsilon, "fresh")
    return PrivacyAssessment(in_loop, fresh)


# -- linear baseline -------------------------------------------------------------

@dataclass(frozen=True)
class LinearDR:
    mean: np.ndarray  # (h, w)
    basis: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray  # (d,), non-increasing

    @property
    def k(self):
        return self.basis.shape[0]

    def transform(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return (x - self.mean.reshape(-1)) @ self.basis.T

    def reconstruct(self, codes):
        x = np.asarray(codes) @ self.basis + self.mean.reshape(-1)
        return x.reshape(len(x), *self.mean.shape)


def pca_fit(train_data: ImageDataset, k):
    d = train_data.pixel_count
    if not 0 <= k <= d:
        raise ValueError(f"k={k} must lie in [0, {d}]")
    if len(train_data) < 2:
        raise ValueError("PCA needs at least two samples")
    x = train_data.images.reshape(len(train_data), -1)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    return LinearDR(mean.reshape(train_data.shape), vecs[:, :k].T.copy(), vals)


def pca_expected_residual(spectrum, k, pixel_count):
    """Expected per-pixel squared error of the top-``k`` projector: sum of the discarded eigenvalues / d."""
    lam = np.asarray(spectrum, dtype=np.float64)
    if np.any(np.diff(lam) > 0):
        raise ValueError("spectrum must be sorted non-increasing")
    if not 0 <= k <= len(lam):
        raise ValueError(f"k={k} must lie in [0, {len(lam)}]")
    return float(lam[k:].sum() / pixel_count)


def export_reconstruction_pairs(transform, reconstruct, test_data: ImageDataset, count):
    if not 0 <= count <= len(test_data):
        raise ValueError(f"count {count} exceeds test size {len(test_data)}")
    if count == 0:
        return []
    x = test_data.images[:count]
    xh = np.asarray(reconstruct(_as_transform(transform)(x))).reshape(x.shape)
    return [(x[i].copy(), xh[i].copy()) for i in range(count)]
