"""The four networks: generator, reconstructor, discriminator, classifier.

The generator is the deployable dimension-reduction map; images go in as
``(n, h, w)`` and codes in ``[-1, 1]^d'`` come out. The reconstructor is the
in-training adversary, the discriminator separates reconstructions from
target-distribution samples, and the classifier predicts access levels from
codes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import nn_core as nn
from .nn_core import Model, NetworkSpec

DEFAULT_WIDTHS = {
    "g_channels": (8, 16),
    "kernel": 5,
    "g_hidden": 128,
    "r_hidden": 128,
    "d_hidden": (256, 128, 64),
    "c_hidden": (64, 64, 32),
}

NETWORKS = ("generator", "reconstructor", "discriminator", "classifier")


def resolve_widths(widths=None):
    out = dict(DEFAULT_WIDTHS)
    for key, value in (widths or {}).items():
        if key not in DEFAULT_WIDTHS:
            raise KeyError(f"unknown width override {key!r}")
        out[key] = tuple(int(v) for v in value) if isinstance(value, (list, tuple)) else int(value)
    if len(out["g_channels"]) != 2 or len(out["d_hidden"]) != 3 or len(out["c_hidden"]) != 3:
        raise ValueError("g_channels needs 2 entries; d_hidden and c_hidden need 3")
    return out


def generator_spec(image_shape, d_prime, widths):
    c1, c2 = widths["g_channels"]
    k = widths["kernel"]
    return NetworkSpec.build((1, *image_shape), [
        nn.conv2d(c1, k, 2), nn.tanh(),
        nn.conv2d(c2, k, 2), nn.tanh(),
        nn.flatten(),
        nn.dense(widths["g_hidden"]), nn.tanh(),
        nn.dense(d_prime), nn.tanh(),
    ])


def reconstructor_spec(image_shape, d_prime, widths):
    """Mirror of the generator; spatial sizes follow the generator's convs exactly."""
    c1, c2 = widths["g_channels"]
    k = widths["kernel"]
    h, w = image_shape
    h1, w1 = -(-h // 2), -(-w // 2)
    h2, w2 = -(-h1 // 2), -(-w1 // 2)
    return NetworkSpec.build((d_prime,), [
        nn.dense(widths["r_hidden"]), nn.tanh(),
        nn.dense(c2 * h2 * w2), nn.tanh(),
        nn.reshape((c2, h2, w2)),
        nn.tconv2d(c1, k, 2, output_size=(h1, w1)), nn.tanh(),
        nn.tconv2d(1, k, 2, output_size=(h, w)), nn.sigmoid(),
    ])


def discriminator_spec(image_shape, widths):
    a, b, c = widths["d_hidden"]
    return NetworkSpec.build((1, *image_shape), [
        nn.flatten(),
        nn.dense(a), nn.tanh(), nn.dense(b), nn.tanh(), nn.dense(c), nn.tanh(),
        nn.dense(1), nn.sigmoid(),
    ])


def classifier_spec(d_prime, m, widths):
    a, b, c = widths["c_hidden"]
    return NetworkSpec.build((d_prime,), [
        nn.dense(a), nn.tanh(), nn.dense(b), nn.tanh(), nn.dense(c), nn.tanh(),
        nn.dense(m), nn.softmax(),
    ])


def build_specs(image_shape, d_prime, m, widths=None):
    image_shape = tuple(int(s) for s in image_shape)
    if d_prime < 1 or m < 1:
        raise ValueError("d_prime and m must be at least 1")
    if len(image_shape) != 2 or min(image_shape) < 8:
        raise nn.ShapeError(f"image shape {image_shape} must be (h, w) with both sides >= 8")
    w = resolve_widths(widths)
    return {
        "generator": generator_spec(image_shape, d_prime, w),
        "reconstructor": reconstructor_spec(image_shape, d_prime, w),
        "discriminator": discriminator_spec(image_shape, w),
        "classifier": classifier_spec(d_prime, m, w),
    }


def network_seeds(seed):
    ss = np.random.SeedSequence(int(seed))
    return dict(zip(NETWORKS, (int(c.generate_state(1)[0]) for c in ss.spawn(len(NETWORKS)))))


def _config_hash(meta):
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ModelBundle:
    generator: Model
    reconstructor: Model
    discriminator: Model
    classifier: Model
    d_prime: int
    image_shape: tuple[int, int]
    num_levels: int
    widths: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    @property
    def compression_ratio(self):
        return Fraction(self.image_shape[0] * self.image_shape[1], self.d_prime)

    def meta(self):
        return {
            "d_prime": self.d_prime,
            "image_shape": list(self.image_shape),
            "num_levels": self.num_levels,
            "widths": {k: list(v) if isinstance(v, tuple) else v for k, v in self.widths.items()},
            "seed": self.seed,
        }

    def params(self):
        return {name: getattr(self, name).params for name in NETWORKS}

    def with_params(self, **params):
        """Copy with the named networks' parameters replaced."""
        updates = {name: replace(getattr(self, name), params=p) for name, p in params.items()}
        return replace(self, **updates)

    def transform(self, images):
        return transform(self, images)

    def reconstruct(self, codes):
        return reconstruct(self, codes)

    def classify(self, codes):
        return self.classifier(codes)


def build_models(image_shape, d_prime, m, widths=None, seed=0):
    specs = build_specs(image_shape, d_prime, m, widths)
    seeds = network_seeds(seed)
    nets = {name: Model(spec, nn.init_params(spec, seeds[name])) for name, spec in specs.items()}
    w = resolve_widths(widths)
    bundle = ModelBundle(**nets, d_prime=int(d_prime), image_shape=tuple(int(s) for s in image_shape),
                         num_levels=int(m), widths=w, seed=int(seed))
    return replace(bundle, config_hash=_config_hash(bundle.meta()))


def bundle_from_params(meta, params):
    """Rebuild a bundle from :meth:`ModelBundle.meta` output and per-network parameters."""
    specs = build_specs(meta["image_shape"], meta["d_prime"], meta["num_levels"], meta["widths"])
    nets = {}
    for name, spec in specs.items():
        nn.check_params(spec, params[name])
        nets[name] = Model(spec, params[name])
    bundle = ModelBundle(**nets, d_prime=int(meta["d_prime"]),
                         image_shape=tuple(meta["image_shape"]), num_levels=int(meta["num_levels"]),
                         widths=resolve_widths(meta["widths"]), seed=int(meta["seed"]))
    return replace(bundle, config_hash=_config_hash(bundle.meta()))


def as_image_batch(images, image_shape):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != tuple(image_shape):
        raise nn.ShapeError(f"images of shape {x.shape[1:]} do not match model shape {tuple(image_shape)}")
    return x[:, None]


def transform(bundle: ModelBundle, images):
    """Codes for ``images`` (n, h, w) -> (n, d')."""
    return bundle.generator(as_image_batch(images, bundle.image_shape))


def reconstruct(bundle: ModelBundle, codes):
    """Images (n, h, w) reconstructed from codes (n, d')."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != bundle.d_prime:
        raise nn.ShapeError(f"codes of shape {codes.shape} do not match d_prime={bundle.d_prime}")
    return bundle.reconstructor(codes)[:, 0]
