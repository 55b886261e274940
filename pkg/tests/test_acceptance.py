"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the summary section lists every
criterion. Criterion 8 needs the AT&T faces corpus at ``$DRPRIV_ATT_ROOT`` and
is skipped otherwise.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from drpriv import nn_core as nn
from drpriv import privacy as pv
from drpriv import trainer as tr
from drpriv import cli
from drpriv.dataset import (ImageDataset, SyntheticSpec, assign_access_levels, load_image_directory,
                            preprocess, split_train_test, synth_dataset)
from drpriv.models import NETWORKS, build_models
from drpriv.objectives import LossWeights
from drpriv.privacy import AttackConfig
from drpriv.trainer import Trainer, TrainingConfig
from drpriv.utility import accuracy, dimension_sweep, epsilon_sweep

# -- criterion 1: gradient suite ---------------------------------------------------

LAYER_NETS = {
    "dense": ([nn.dense(3)], (4,)),
    "tanh": ([nn.dense(4), nn.tanh(), nn.dense(2)], (3,)),
    "sigmoid": ([nn.dense(4), nn.sigmoid(), nn.dense(2)], (3,)),
    "softmax": ([nn.dense(4), nn.softmax(), nn.dense(2)], (3,)),
    "conv2d-same-s2": ([nn.conv2d(3, 3, 2, "same"), nn.tanh()], (2, 7, 6)),
    "conv2d-valid-s1": ([nn.conv2d(2, 3, 1, "valid"), nn.tanh()], (2, 6, 5)),
    "tconv2d-same-s2": ([nn.tconv2d(2, 3, 2, "same", output_size=(7, 6)), nn.tanh()], (3, 4, 3)),
    "tconv2d-valid-s1": ([nn.tconv2d(2, 3, 1, "valid"), nn.sigmoid()], (2, 4, 3)),
    "flatten": ([nn.conv2d(2, 3, 2), nn.flatten(), nn.dense(3)], (1, 5, 5)),
    "reshape": ([nn.dense(12), nn.reshape((3, 2, 2)), nn.tconv2d(1, 3, 2), nn.tanh()], (2,)),
}

GRAD_WIDTHS = {"g_channels": (3, 4), "kernel": 3, "g_hidden": 16, "r_hidden": 16,
               "d_hidden": (16, 12, 8), "c_hidden": (12, 10, 8)}
TOL = 1e-4
STEP = 1e-5


def _rel(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def bundle_fd_error(bundle, objective, owned):
    """Max relative error of ``objective(bundle) -> (loss, {net: grads})`` over every owned parameter."""
    _, grads = objective(bundle)
    assert set(grads) == set(owned)
    worst = 0.0
    for name in owned:
        params = {k: v.copy() for k, v in getattr(bundle, name).params.items()}
        for key, value in params.items():
            flat = value.reshape(-1)
            g = grads[name][key].reshape(-1)
            num = np.empty_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + STEP
                up = objective(bundle.with_params(**{name: params}))[0]
                flat[j] = orig - STEP
                down = objective(bundle.with_params(**{name: params}))[0]
                flat[j] = orig
                num[j] = (up - down) / (2 * STEP)
            worst = max(worst, float(_rel(g, num).max()))
    return worst


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    errors = {}
    for name, (layers, shape) in LAYER_NETS.items():
        net = nn.NetworkSpec.build(shape, layers)
        params = nn.init_params(net, 1)
        for k in params:
            if k.endswith("bias"):
                params[k] = np.random.default_rng(2).normal(scale=0.1, size=params[k].shape)
        x = np.random.default_rng(3).normal(size=(2, *shape))
        errors[name] = nn.finite_diff_check(net, params, x, tol=TOL, step=STEP)["max_rel_err"]

    rng = np.random.default_rng(0)
    shape = (9, 8)
    bundle = build_models(shape, 3, 3, widths=GRAD_WIDTHS, seed=4)
    assert sum(getattr(bundle, n).spec.num_params() for n in NETWORKS) <= 10_000
    x = np.clip(0.5 + 0.2 * rng.normal(size=(4, *shape)), 0, 1)
    t = np.clip(0.5 + 0.2 * rng.normal(size=(4, *shape)), 0, 1)
    y = np.array([0, 1, 2, 1])
    objectives = {
        "reconstruction(R+G)": (lambda b: tr.reconstruction_objective(b, x, True), ("reconstructor", "generator")),
        "reconstruction(R)": (lambda b: tr.reconstruction_objective(b, x, False), ("reconstructor",)),
        "discriminator": (lambda b: tr.discriminator_objective(b, x, t), ("discriminator",)),
        "classifier": (lambda b: tr.classifier_objective(b, x, y), ("classifier",)),
    }
    # penalty active in both directions: floor with a large target, cap with target 0
    for direction, eps in (("floor", 0.5), ("cap", 0.0)):
        w = LossWeights(alpha=1.0, beta=0.5, gamma=0.3, gamma_pen=2.0, epsilon=eps, penalty_direction=direction)
        objectives[f"generator({direction})"] = (lambda b, w=w: tr.generator_objective(b, x, y, t, w),
                                                 ("generator",))
    for name, (fn, owned) in objectives.items():
        errors[name] = bundle_fd_error(bundle, fn, owned)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < TOL for e in errors.values()) and elapsed < 60
    criterion("criterion 1 gradient suite", ok,
              f"worst {worst} rel err {errors[worst]:.2e} < {TOL:g}; {len(errors)} checks in {elapsed:.1f}s < 60s")
    assert ok, errors


# -- criterion 2: PCA oracle -----------------------------------------------------

def _gaussian(n, spectrum, basis, seed, shape):
    z = np.random.default_rng(seed).normal(size=(n, len(spectrum))) * np.sqrt(spectrum)
    x = 0.5 + z @ basis.T
    assert 0 < x.min() and x.max() < 1  # no clamping, so the covariance is exactly known
    return ImageDataset(x.reshape(n, *shape), np.zeros(n, dtype=int), np.zeros(n, dtype=int))


def test_criterion_2_pca_oracle(criterion):
    start = time.perf_counter()
    shape = (8, 8)
    d = 64
    spectrum = 0.003 * np.exp(-np.arange(d) / 40)
    basis, _ = np.linalg.qr(np.random.default_rng(99).normal(size=(d, d)))
    train = _gaussian(20_000, spectrum, basis, 0, shape)
    test = _gaussian(2_000, spectrum, basis, 100, shape)
    dist = {}
    for k in range(d + 1):
        lin = pv.pca_fit(train, k)
        dist[k] = pv.evaluate_epsilon_dr(lin.transform, lin.reconstruct, test, 0.0).mean_distance
    rel = {k: abs(dist[k] / pv.pca_expected_residual(spectrum, k, d) - 1) for k in (1, d // 4, d // 2)}
    exact_full = dist[d] < 1e-20 and pv.pca_expected_residual(spectrum, d, d) == 0
    monotone = all(dist[k + 1] <= dist[k] for k in range(d))
    elapsed = time.perf_counter() - start
    ok = max(rel.values()) < 0.02 and exact_full and monotone and elapsed < 120
    criterion("criterion 2 PCA oracle", ok,
              "rel err " + ", ".join(f"k={k}: {v:.4f}" for k, v in rel.items())
              + f", k=d distance {dist[d]:.1e}, monotone={monotone}, {elapsed:.1f}s < 120s")
    assert ok


# -- criterion 3: adjoint --------------------------------------------------------

def test_criterion_3_adjoint(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        c_in, c_out = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.integers(1, 4))
        padding = str(rng.choice(["same", "valid"]))
        h, w = rng.integers(k + 1, 13, size=2)
        conv = nn.NetworkSpec.build((c_in, h, w), [nn.conv2d(int(c_out), k, stride, padding)])
        _, ho, wo = conv.output_shape
        tconv = nn.NetworkSpec.build((c_out, ho, wo), [nn.tconv2d(int(c_in), k, stride, padding,
                                                                  output_size=(int(h), int(w)))])
        weight = rng.normal(size=(c_out, c_in, k, k))
        x = rng.normal(size=(2, c_in, h, w))
        y = rng.normal(size=(2, c_out, ho, wo))
        lhs = np.vdot(nn.forward(conv, {"0.weight": weight, "0.bias": np.zeros(c_out)}, x)[0], y)
        rhs = np.vdot(x, nn.forward(tconv, {"0.weight": weight, "0.bias": np.zeros(c_in)}, y)[0])
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    ok = worst < 1e-8
    criterion("criterion 3 adjoint", ok, f"max rel gap {worst:.1e} < 1e-8 over 100 instances")
    assert ok


# -- criterion 4: end-to-end desk run ---------------------------------------------

def desk_split():
    # 2 classes x 2 subjects, 63 images each: 50 train + 13 test per subject -> 200 / 52
    ds = synth_dataset(SyntheticSpec(num_subjects=4, images_per_subject=63, h=16, w=16, noise_std=0.1, seed=0))
    return split_train_test(assign_access_levels(ds, 2, 0), 0.2, 0)


def desk_config(**kw):
    base = dict(steps_r=20, steps_d=20, steps_c=20, steps_g=20, global_iters=50, batch_size=32,
                weights=LossWeights(epsilon=0.01, penalty_direction="floor"))
    base.update(kw)
    return TrainingConfig(**base)


def test_criterion_4_desk_run(criterion):
    start = time.perf_counter()
    split = desk_split()
    assert (len(split.train), len(split.test)) == (200, 52)
    cfg = desk_config()
    bundle, history = tr.train(split.train, cfg, 2, 2)
    util = accuracy(bundle.classify, bundle.transform, split.test)
    attacker = pv.train_attacker(bundle, split.train, pv.default_attack_config(cfg),
                                 net=bundle.reconstructor.spec)
    fresh = pv.evaluate_epsilon_dr(bundle, attacker.reconstruct, split.test, 0.01, "fresh")
    elapsed = time.perf_counter() - start
    ok = util.accuracy >= 0.95 and fresh.mean_distance >= 0.01 and fresh.satisfied and elapsed < 600
    criterion("criterion 4 desk run", ok,
              f"test accuracy {util.accuracy:.4f} >= 0.95, fresh distance {fresh.mean_distance:.5f} >= 0.01, "
              f"{elapsed:.0f}s < 600s")
    assert ok


# -- criterion 5: dimension trend ------------------------------------------------

def test_criterion_5_dimension_trend(criterion):
    ds = synth_dataset(SyntheticSpec(num_subjects=8, images_per_subject=40, h=16, w=16, noise_std=0.1, seed=1))
    split = split_train_test(assign_access_levels(ds, 4, 1), 0.2, 1)
    cfg = desk_config(global_iters=60, seed=3, weights=LossWeights(epsilon=0.0, penalty_direction="floor"))
    table = dimension_sweep(split.train, split.test, cfg, range(1, 8), 4, attack=AttackConfig(steps=300))
    acc = [r.utility.accuracy for r in table.rows]
    non_decreasing = all(b >= a - 0.02 for a, b in zip(acc, acc[1:]))
    gain = acc[-1] - acc[0]
    ok = non_decreasing and gain >= 0.05
    criterion("criterion 5 dimension trend", ok,
              "accuracy by d'=1..7: " + ", ".join(f"{a:.3f}" for a in acc) + f"; gain {gain:.3f} >= 0.05")
    assert ok


# -- criterion 6: epsilon saturation ----------------------------------------------

def test_criterion_6_epsilon_saturation(criterion):
    split = desk_split()
    cfg = desk_config(global_iters=30)
    table = epsilon_sweep(split.train, split.test, cfg, [0.0, 0.002, 0.004, 0.006], 2, 2,
                          attack=AttackConfig(steps=300))
    dist = [r.privacy.mean_distance for r in table.rows]
    spread = (max(dist) - min(dist)) / min(dist)
    ok = all(r.privacy.satisfied for r in table.rows) and spread < 0.25
    criterion("criterion 6 epsilon saturation", ok,
              "distances " + ", ".join(f"{v:.5f}" for v in dist) + f"; spread {spread:.1%} < 25%, all satisfied")
    assert ok


# -- criterion 7: determinism and persistence ---------------------------------------

def test_criterion_7_determinism_and_resume(tmp_path, criterion):
    split = desk_split()
    cfg = desk_config(global_iters=6, steps_r=5, steps_d=5, steps_c=5, steps_g=5, seed=11)
    blobs = []
    for run in ("a", "b"):
        _, history = tr.train(split.train, cfg, 2, 2)
        cli.write_history(tmp_path / f"history_{run}.csv", history)
        blobs.append((tmp_path / f"history_{run}.csv").read_bytes())
    identical_csv = blobs[0] == blobs[1]

    full = Trainer(split.train, cfg, 2, 2)
    full.run()
    part = Trainer(split.train, cfg, 2, 2)
    part.run(max_iters=3)
    tr.save_checkpoint(part.checkpoint(), tmp_path / "checkpoint.bin")
    resumed = Trainer.from_checkpoint(tr.load_checkpoint(tmp_path / "checkpoint.bin"), split.train)
    resumed.run()
    same_params = all(np.array_equal(getattr(full.bundle, n).params[k], getattr(resumed.bundle, n).params[k])
                      for n in NETWORKS for k in getattr(full.bundle, n).params)
    same_history = resumed.history == full.history
    ok = identical_csv and same_params and same_history
    criterion("criterion 7 determinism and resume", ok,
              f"history csv identical={identical_csv}, resumed params identical={same_params}, "
              f"resumed history identical={same_history}")
    assert ok


# -- criterion 8: AT&T corpus (optional) --------------------------------------------

ATT_ROOT = os.environ.get("DRPRIV_ATT_ROOT")


@pytest.mark.slow
@pytest.mark.skipif(not ATT_ROOT, reason="set DRPRIV_ATT_ROOT to the AT&T faces directory to run")
def test_criterion_8_att_corpus(criterion):
    # single-level access control: half of the subjects are valid, a binary classifier
    ds = preprocess(load_image_directory(ATT_ROOT), 92, 92)
    split = split_train_test(assign_access_levels(ds, 2, 0), 0.2, 0)
    cfg = TrainingConfig(weights=LossWeights(epsilon=0.0, penalty_direction="floor"))
    bundle, _ = tr.train(split.train, cfg, 7, 2)
    util = accuracy(bundle.classify, bundle.transform, split.test)
    dists = []
    for seed in range(3):
        ac = dataclasses.replace(pv.default_attack_config(cfg), seed=seed)
        att = pv.train_attacker(bundle, split.train, ac, net=bundle.reconstructor.spec)
        dists.append(pv.evaluate_epsilon_dr(bundle, att.reconstruct, split.test, 0.0, "fresh").mean_distance)
    cv = float(np.std(dists) / np.mean(dists))
    ok = util.accuracy >= 0.85 and cv < 0.2
    criterion("criterion 8 AT&T corpus", ok, f"accuracy {util.accuracy:.3f} >= 0.85, attacker distance CV {cv:.3f} < 0.2")
    assert ok


def test_criterion_8_reported_when_skipped(criterion):
    if ATT_ROOT:
        pytest.skip("corpus present; criterion 8 ran above")
    criterion("criterion 8 AT&T corpus", True, "corpus not present; optional, not CI-blocking", status="SKIP")
