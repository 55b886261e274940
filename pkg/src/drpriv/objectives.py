"""Scalar training objectives and their gradients.

Every loss is averaged over the batch axis. ``*_grad`` functions return the
gradient with respect to the prediction argument (``x_hat``, ``y_hat`` or
``t_hat``), ready to be fed to :func:`drpriv.nn_core.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # classifier term
    beta: float = 0.1  # discriminator term
    gamma: float = 0.01  # reconstruction term
    gamma_pen: float = 10.0  # penalty multiplier
    epsilon: float = 0.0  # distance target, per-pixel squared units
    penalty_direction: str = "cap"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "gamma_pen", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.penalty_direction not in ("cap", "floor"):
            raise ValueError("penalty_direction must be 'cap' or 'floor'")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def reconstruction_loss(x, x_hat):
    """Batch mean of per-sample summed squared error."""
    x, x_hat = _check(x, x_hat)
    r = (x - x_hat).reshape(len(x), -1)
    return float(np.mean(np.sum(r * r, axis=1)))


def reconstruction_loss_grad(x, x_hat):
    x, x_hat = _check(x, x_hat)
    return 2.0 * (x_hat - x) / len(x)


def per_pixel_distance(x, x_hat):
    """Batch mean of squared Euclidean distance divided by the pixel count."""
    x, x_hat = _check(x, x_hat)
    return reconstruction_loss(x, x_hat) / (x[0].size)


def per_pixel_distance_grad(x, x_hat):
    x, x_hat = _check(x, x_hat)
    return reconstruction_loss_grad(x, x_hat) / (x[0].size)


def per_sample_distances(x, x_hat):
    x, x_hat = _check(x, x_hat)
    r = (x - x_hat).reshape(len(x), -1)
    return np.mean(r * r, axis=1)


def classification_loss(y, y_hat):
    """Cross entropy of one-hot targets ``y`` against probabilities ``y_hat``."""
    y, y_hat = _check(y, y_hat)
    p = np.clip(y_hat, PROB_FLOOR, 1.0)
    return float(-np.mean(np.sum(y * np.log(p), axis=1)))


def classification_loss_grad(y, y_hat):
    y, y_hat = _check(y, y_hat)
    inside = (y_hat >= PROB_FLOOR) & (y_hat <= 1.0)
    p = np.clip(y_hat, PROB_FLOOR, 1.0)
    return np.where(inside, -y / p, 0.0) / len(y)


def _split_probs(t_hat):
    return np.clip(t_hat, PROB_FLOOR, 1.0 - PROB_FLOOR)


def discriminator_loss(t, t_hat):
    """Binary cross entropy averaged over the batch."""
    t, t_hat = _check(t, t_hat)
    p = _split_probs(t_hat)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def discriminator_loss_grad(t, t_hat):
    t, t_hat = _check(t, t_hat)
    inside = (t_hat >= PROB_FLOOR) & (t_hat <= 1.0 - PROB_FLOOR)
    p = _split_probs(t_hat)
    return np.where(inside, -(t / p) + (1.0 - t) / (1.0 - p), 0.0) / len(t)


def dr_penalty(dist, w: LossWeights):
    """Exterior penalty on the distance constraint."""
    if w.penalty_direction == "cap":
        return w.gamma_pen * max(0.0, dist - w.epsilon)
    return w.gamma_pen * max(0.0, w.epsilon - dist)


def dr_penalty_grad(dist, w: LossWeights):
    """Derivative of :func:`dr_penalty` in ``dist`` (zero on the inactive side and at the kink)."""
    if w.penalty_direction == "cap":
        return w.gamma_pen if dist > w.epsilon else 0.0
    return -w.gamma_pen if dist < w.epsilon else 0.0


def generator_objective(l_c, l_d, l_r, dist, w: LossWeights):
    return w.alpha * l_c - w.beta * l_d - w.gamma * l_r + dr_penalty(dist, w)


def one_hot(labels, m):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), m))
    out[np.arange(len(labels)), labels] = 1.0
    return out
