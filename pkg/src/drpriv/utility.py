"""Utility measurement and the dimension / epsilon sweeps."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dataset import ImageDataset
from .privacy import AttackConfig, PrivacyReport, assess_privacy, default_attack_config
from .textio import read_csv, write_csv
from .trainer import TrainingConfig, train

SWEEP_HEADER = ("swept", "accuracy", "mean_distance", "epsilon", "satisfied", "d_prime", "m", "seed")


@dataclass(frozen=True)
class UtilityReport:
    accuracy: float
    num_levels: int
    d_prime: int
    compression_ratio: Fraction
    n_test: int

    def to_record(self):
        return dataclasses.asdict(self)


def accuracy(classifier, transform, test_data: ImageDataset):
    """Fraction of test images whose argmax class (ties -> lowest index) matches the access label."""
    if len(test_data) == 0:
        raise ValueError("test set is empty")
    codes = np.asarray(transform(test_data.images))
    probs = np.asarray(classifier(codes))
    if probs.shape != (len(test_data), test_data.num_levels):
        raise ValueError(f"classifier outputs {probs.shape[1:]} classes, test data has "
                         f"{test_data.num_levels}")
    pred = np.argmax(probs, axis=1)
    correct = int(np.count_nonzero(pred == test_data.access_labels))
    d_prime = codes.shape[1]
    return UtilityReport(correct / len(test_data), test_data.num_levels, d_prime,
                         Fraction(test_data.pixel_count, d_prime), len(test_data))


def derive_seed(seed, value):
    """Independent per-row seed for a swept integer value."""
    return int(np.random.SeedSequence([int(seed), int(value)]).generate_state(1)[0])


@dataclass(frozen=True)
class SweepRow:
    swept: float
    utility: UtilityReport
    privacy: PrivacyReport
    seed: int

    def csv_row(self):
        return (self.swept, self.utility.accuracy, self.privacy.mean_distance, self.privacy.epsilon,
                self.privacy.satisfied, self.utility.d_prime, self.utility.num_levels, self.seed)


@dataclass(frozen=True)
class SweepTable:
    kind: str  # "d_prime" or "epsilon"
    rows: tuple

    def __post_init__(self):
        values = [r.swept for r in self.rows]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("swept values must be strictly increasing")

    def write_csv(self, path):
        write_csv(path, SWEEP_HEADER, [r.csv_row() for r in self.rows])


def read_sweep_csv(path, kind="d_prime"):
    rows = []
    for r in read_csv(path):
        util = UtilityReport(float(r["accuracy"]), int(r["m"]), int(r["d_prime"]), Fraction(0), 0)
        priv = PrivacyReport(float(r["mean_distance"]), float(r["epsilon"]), bool(r["satisfied"]), "", 0)
        rows.append(SweepRow(r["swept"], util, priv, int(r["seed"])))
    return SweepTable(kind, tuple(rows))


def _strictly_increasing(values, what):
    if not values:
        raise ValueError(f"{what} list is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{what} values must be strictly increasing")


def evaluate_point(train_data, test_data, cfg, d_prime, m, widths=None, attack=None):
    bundle, history = train(train_data, cfg, d_prime, m, widths)
    util = accuracy(bundle.classify, bundle.transform, test_data)
    ac = attack or default_attack_config(cfg)
    privacy = assess_privacy(bundle, train_data, test_data, cfg.weights.epsilon, ac)
    return bundle, util, privacy


def dimension_sweep(train_data, test_data, cfg: TrainingConfig, dims, m, widths=None,
                    attack: AttackConfig | None = None):
    """One independently seeded model per code dimension."""
    dims = [int(d) for d in dims]
    _strictly_increasing(dims, "dimension")
    if dims[0] < 1:
        raise ValueError("dimensions must be at least 1")
    rows = []
    for d in dims:
        seed = derive_seed(cfg.seed, d)
        point_cfg = dataclasses.replace(cfg, seed=seed)
        point_attack = attack and dataclasses.replace(attack, seed=seed)
        try:
            _, util, priv = evaluate_point(train_data, test_data, point_cfg, d, m, widths, point_attack)
        except Exception as exc:
            raise RuntimeError(f"dimension sweep failed at d_prime={d}: {exc}") from exc
        rows.append(SweepRow(d, util, priv.headline, seed))
    return SweepTable("d_prime", tuple(rows))


def epsilon_sweep(train_data, test_data, cfg: TrainingConfig, eps_list, d_prime, m, widths=None,
                  attack: AttackConfig | None = None):
    """One model per epsilon; all rows share ``cfg.seed`` so only epsilon varies."""
    eps_list = [float(e) for e in eps_list]
    _strictly_increasing(eps_list, "epsilon")
    if eps_list[0] < 0:
        raise ValueError("epsilon values must be non-negative")
    rows = []
    for eps in eps_list:
        point_cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, epsilon=eps))
        try:
            _, util, priv = evaluate_point(train_data, test_data, point_cfg, d_prime, m, widths, attack)
        except Exception as exc:
            raise RuntimeError(f"epsilon sweep failed at epsilon={eps}: {exc}") from exc
        rows.append(SweepRow(eps, util, priv.headline, cfg.seed))
    return SweepTable("epsilon", tuple(rows))


@dataclass(frozen=True)
class DistanceMatch:
    band: tuple
    a_range: tuple | None
    b_range: tuple | None

    @property
    def status(self):
        return "ok" if self.a_range and self.b_range else "no rows in band"


def distance_matched_accuracy(table_a: SweepTable, table_b: SweepTable, band):
    """Accuracy ranges of the rows of each table whose distance lies in ``band`` (inclusive)."""
    lo, hi = band

    def select(table):
        acc = [r.utility.accuracy for r in table.rows if lo <= r.privacy.mean_distance <= hi]
        return (min(acc), max(acc)) if acc else None

    return DistanceMatch((lo, hi), select(table_a), select(table_b))
