"""Config-driven experiment runner: ``drpriv <command> --config <path>``.

Configs are flat ``section.key = value`` lines. Every key has a default, so a
config only lists what differs; ``--set section.key=value`` overrides a key
from the command line. Artifacts land in ``output.dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import privacy as pv
from . import trainer as tr
from .dataset import (SyntheticSpec, assign_access_levels, load_image_directory, load_manifest,
                      preprocess, read_pgm, split_train_test, synth_dataset, write_pgm)
from .models import DEFAULT_WIDTHS
from .objectives import LossWeights
from .privacy import AttackConfig, PrivacyReport
from .textio import dump_record, parse_record, read_csv, write_csv
from .utility import accuracy, dimension_sweep, epsilon_sweep

COMMANDS = ("train", "evaluate", "attack", "sweep-dims", "sweep-eps", "report")
HISTORY_HEADER = tuple(f.name for f in dataclasses.fields(tr.HistoryRecord))
PRIVACY_HEADER = ("attacker_kind", "mean_distance", "epsilon", "satisfied", "n_test")
UTILITY_HEADER = ("accuracy", "num_levels", "d_prime", "compression_ratio", "n_test")


class ConfigError(ValueError):
    pass


class CommandError(RuntimeError):
    pass


# -- schema ----------------------------------------------------------------------
#
# Each key maps to (kind, default, check). Kinds: int, float, bool, str,
# ints (comma list), floats (comma list). A default of None means "unset"; for
# width keys that falls back to DEFAULT_WIDTHS.

def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _at_least_one(v):
    return v >= 1


def _fraction(v):
    return 0 < v < 1


_T = tr.TrainingConfig()
_W = LossWeights()

SCHEMA = {
    "dataset": {
        "source": ("str", "synthetic", None),
        "pattern": ("str", "*.pgm", None),
        "crop_h": ("int", 0, _nonneg),
        "crop_w": ("int", 0, _nonneg),
        "num_levels": ("int", 2, _at_least_one),  # 2: valid vs invalid subjects
        "test_fraction": ("float", 0.2, _fraction),
        "seed": ("int", 0, None),
        "synth_subjects": ("int", 4, _at_least_one),
        "synth_images": ("int", 10, _at_least_one),
        "synth_h": ("int", 16, _at_least_one),
        "synth_w": ("int", 16, _at_least_one),
        "synth_noise": ("float", 0.1, _nonneg),
        "synth_seed": ("int", 0, None),
    },
    "model": {
        "d_prime": ("int", None, _at_least_one),
        "g_channels": ("ints", None, None),
        "kernel": ("int", None, _at_least_one),
        "g_hidden": ("int", None, _at_least_one),
        "r_hidden": ("int", None, _at_least_one),
        "d_hidden": ("ints", None, None),
        "c_hidden": ("ints", None, None),
    },
    "training": {
        **{k: ("float", getattr(_T, k), _positive) for k in ("lr_r", "lr_d", "lr_c", "lr_g")},
        **{k: ("int", getattr(_T, k), _at_least_one) for k in ("steps_r", "steps_d", "steps_c", "steps_g")},
        "global_iters": ("int", _T.global_iters, _nonneg),
        "batch_size": ("int", _T.batch_size, _at_least_one),
        "target_cov": ("float", _T.target_cov, _positive),
        "seed": ("int", _T.seed, None),
        "update_generator_in_r_phase": ("bool", _T.update_generator_in_r_phase, None),
        "convergence_tol": ("float", _T.convergence_tol, _nonneg),
        **{k: ("float", getattr(_W, k), _nonneg) for k in ("alpha", "beta", "gamma", "gamma_pen")},
        "penalty_direction": ("str", _W.penalty_direction, lambda v: v in ("cap", "floor")),
    },
    "privacy": {
        "epsilon": ("float", 0.0, _nonneg),
        "attack_steps": ("int", 0, _nonneg),  # 0: as many steps as the in-loop reconstructor got
        "attack_lr": ("float", 0.01, _positive),
        "attack_batch": ("int", 32, _at_least_one),
        "attack_seed": ("int", 0, None),
    },
    "output": {
        "dir": ("str", "out", None),
        "emit_grids": ("bool", True, None),
        "grid_count": ("int", 8, _at_least_one),
    },
    "sweep": {
        "dims": ("ints", (1, 2, 3, 4, 5, 6, 7), None),
        "epsilons": ("floats", (0.0,), None),
    },
}


def _parse_value(kind, text):
    text = text.strip()
    if kind == "str":
        return text
    if kind == "bool":
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return text.lower() == "true"
    if kind in ("ints", "floats"):
        item = int if kind == "ints" else float
        if not text:
            return None
        return tuple(item(t) for t in text.split(","))
    return int(text) if kind == "int" else float(text)


def _format_value(kind, value):
    if value is None:
        return ""
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind in ("ints", "floats"):
        return ",".join(repr(float(v)) if kind == "floats" else str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """All settings for one experiment, keyed ``section -> key -> value``."""

    values: dict

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    __hash__ = None

    def widths(self):
        out = {k: self.values["model"][k] for k in DEFAULT_WIDTHS if self.values["model"].get(k) is not None}
        return out or None

    def training_config(self):
        t = self.values["training"]
        weights = LossWeights(alpha=t["alpha"], beta=t["beta"], gamma=t["gamma"], gamma_pen=t["gamma_pen"],
                              epsilon=self["privacy.epsilon"], penalty_direction=t["penalty_direction"])
        plain = {k: v for k, v in t.items() if k not in ("alpha", "beta", "gamma", "gamma_pen",
                                                         "penalty_direction")}
        return tr.TrainingConfig(weights=weights, **plain)

    def attack_config(self):
        p = self.values["privacy"]
        steps = p["attack_steps"] or pv.default_attack_config(self.training_config()).steps
        return AttackConfig(steps=steps, lr=p["attack_lr"], batch_size=p["attack_batch"], seed=p["attack_seed"])


def _apply(values, dotted, raw, where):
    section, _, key = dotted.strip().partition(".")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {dotted.strip()!r}")
    kind, _, check = SCHEMA[section][key]
    try:
        value = _parse_value(kind, raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {section}.{key} expects {kind}: {exc}") from None
    if check is not None and value is not None and not all(check(v) for v in np.atleast_1d(value)):
        raise ConfigError(f"{where}: {section}.{key} = {raw.strip()} violates its constraint")
    values[section][key] = value


def _validate(values):
    if values["model"]["d_prime"] is None:
        raise ConfigError("model.d_prime is required")
    if (values["dataset"]["crop_h"] > 0) != (values["dataset"]["crop_w"] > 0):
        raise ConfigError("dataset.crop_h and dataset.crop_w must be set together")
    cfg = RunConfig(values)
    try:
        cfg.training_config()
        cfg.attack_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config_text(text, overrides=(), where="config"):
    """Parse config text plus ``section.key=value`` overrides into a RunConfig."""
    values = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{where} line {n}: expected 'section.key = value'")
        _apply(values, key, raw, f"{where} line {n}")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        _apply(values, key, raw, "--set")
    return _validate(values)


def parse_config(path, overrides=()):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), overrides, where=str(path))


def serialize_config(cfg: RunConfig):
    """Canonical text: every key, in schema order."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"# {section}")
        for key, (kind, _, _) in keys.items():
            lines.append(f"{section}.{key} = {_format_value(kind, cfg.values[section][key])}")
    return "\n".join(lines) + "\n"


# -- data ------------------------------------------------------------------------

def load_split(cfg: RunConfig):
    d = cfg.values["dataset"]
    if d["source"] == "synthetic":
        ds = synth_dataset(SyntheticSpec(num_subjects=d["synth_subjects"], images_per_subject=d["synth_images"],
                                         h=d["synth_h"], w=d["synth_w"], noise_std=d["synth_noise"],
                                         seed=d["synth_seed"]))
    elif d["source"].endswith(".csv"):
        ds = load_manifest(d["source"])
    else:
        ds = load_image_directory(d["source"], d["pattern"])
    if d["crop_h"] > 0:
        ds = preprocess(ds, d["crop_h"], d["crop_w"])
    ds = assign_access_levels(ds, d["num_levels"], d["seed"])
    return split_train_test(ds, d["test_fraction"], d["seed"])


# -- artifacts -------------------------------------------------------------------

def export_grid(pairs, path):
    """Originals on the top row, reconstructions below, quantized to 8 bits."""
    if not pairs:
        raise ValueError("no image pairs to export")
    shape = np.shape(pairs[0][0])
    if any(np.shape(a) != shape or np.shape(b) != shape for a, b in pairs):
        raise ValueError("all grid images must share one shape")
    top = np.concatenate([np.asarray(a) for a, _ in pairs], axis=1)
    bottom = np.concatenate([np.asarray(b) for _, b in pairs], axis=1)
    grid = np.rint(np.clip(np.concatenate([top, bottom], axis=0), 0.0, 1.0) * 255).astype(np.uint8)
    write_pgm(path, grid)


def read_grid(path):
    pixels, maxval = read_pgm(path)
    return pixels.astype(np.float64) / maxval


def write_history(path, history):
    write_csv(path, HISTORY_HEADER, [dataclasses.astuple(r) for r in history])


def read_history(path):
    return [tr.HistoryRecord(**{k: r[k] for k in HISTORY_HEADER}) for r in read_csv(path)]


def _write_privacy(out: Path, report: PrivacyReport):
    """privacy.csv keeps one row per attacker kind; the text record is per kind."""
    path = out / "privacy.csv"
    rows = {r["attacker_kind"]: r for r in read_csv(path)} if path.exists() else {}
    rows[report.attacker_kind] = report.to_record()
    order = [k for k in ("in_loop", "fresh") if k in rows]
    write_csv(path, PRIVACY_HEADER, [[rows[k][c] for c in PRIVACY_HEADER] for k in order])
    (out / f"privacy_{report.attacker_kind}.txt").write_text(dump_record(report.to_record(), "privacy report"))


def _write_utility(out: Path, util):
    rec = util.to_record()
    write_csv(out / "utility.csv", UTILITY_HEADER, [[rec[c] for c in UTILITY_HEADER]])
    (out / "utility.txt").write_text(dump_record(rec, "utility report"))


def _output_dir(cfg: RunConfig):
    out = Path(cfg["output.dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_checkpoint(out: Path):
    path = out / "checkpoint.bin"
    if not path.exists():
        raise CommandError(f"checkpoint not found: {path} (run 'train' first)")
    return tr.load_checkpoint(path)


# -- commands --------------------------------------------------------------------

def cmd_train(cfg: RunConfig, log):
    out = _output_dir(cfg)
    split = load_split(cfg)
    trainer = tr.Trainer(split.train, cfg.training_config(), cfg["model.d_prime"], cfg["dataset.num_levels"],
                         cfg.widths())
    trainer.run(callback=lambda r: log(f"iter {r.iteration}: l_g={r.l_g:.6g} dist={r.mean_distance:.6g}"))
    tr.save_checkpoint(trainer.checkpoint(), out / "checkpoint.bin")
    write_history(out / "history.csv", trainer.history)
    (out / "config.txt").write_text(serialize_config(cfg))
    log(f"trained {len(trainer.history)} iterations -> {out / 'checkpoint.bin'}")


def cmd_evaluate(cfg: RunConfig, log):
    out = _output_dir(cfg)
    ck = _load_checkpoint(out)
    split = load_split(cfg)
    util = accuracy(ck.bundle.classify, ck.bundle.transform, split.test)
    priv = pv.evaluate_epsilon_dr(ck.bundle, ck.bundle.reconstruct, split.test, cfg["privacy.epsilon"], "in_loop")
    _write_utility(out, util)
    _write_privacy(out, priv)
    log(f"accuracy {util.accuracy:.6g}; in-loop distance {priv.mean_distance:.6g} (satisfied={priv.satisfied})")


def cmd_attack(cfg: RunConfig, log):
    out = _output_dir(cfg)
    ck = _load_checkpoint(out)
    split = load_split(cfg)
    attacker = pv.train_attacker(ck.bundle, split.train, cfg.attack_config(), net=ck.bundle.reconstructor.spec)
    priv = pv.evaluate_epsilon_dr(ck.bundle, attacker.reconstruct, split.test, cfg["privacy.epsilon"], "fresh")
    _write_privacy(out, priv)
    log(f"fresh attacker distance {priv.mean_distance:.6g} (satisfied={priv.satisfied})")


def cmd_sweep_dims(cfg: RunConfig, log):
    out = _output_dir(cfg)
    split = load_split(cfg)
    table = dimension_sweep(split.train, split.test, cfg.training_config(), cfg["sweep.dims"],
                            cfg["dataset.num_levels"], cfg.widths(), _sweep_attack(cfg))
    table.write_csv(out / "sweep.csv")
    for r in table.rows:
        log(f"d_prime={r.swept}: accuracy {r.utility.accuracy:.6g}, distance {r.privacy.mean_distance:.6g}")


def cmd_sweep_eps(cfg: RunConfig, log):
    out = _output_dir(cfg)
    split = load_split(cfg)
    table = epsilon_sweep(split.train, split.test, cfg.training_config(), cfg["sweep.epsilons"],
                          cfg["model.d_prime"], cfg["dataset.num_levels"], cfg.widths(), _sweep_attack(cfg))
    table.write_csv(out / "sweep.csv")
    for r in table.rows:
        log(f"epsilon={r.swept}: distance {r.privacy.mean_distance:.6g}, satisfied={r.privacy.satisfied}")


def _sweep_attack(cfg):
    # explicit attack_steps applies to every point; otherwise each point gets the equal-compute default
    return cfg.attack_config() if cfg["privacy.attack_steps"] else None


def cmd_report(cfg: RunConfig, log):
    out = _output_dir(cfg)
    ck = _load_checkpoint(out)
    split = load_split(cfg)
    b = ck.bundle
    util = accuracy(b.classify, b.transform, split.test)
    assessment = pv.assess_privacy(b, split.train, split.test, cfg["privacy.epsilon"], cfg.attack_config())
    summary = {
        "config_hash": b.config_hash,
        "iterations": len(ck.history),
        "image_shape": list(b.image_shape),
        "d_prime": b.d_prime,
        "compression_ratio": b.compression_ratio,
        "num_levels": b.num_levels,
        "accuracy": util.accuracy,
        "n_test": util.n_test,
        "epsilon": cfg["privacy.epsilon"],
        "in_loop_distance": assessment.in_loop.mean_distance,
        "fresh_distance": assessment.fresh.mean_distance,
        "headline_attacker": assessment.headline.attacker_kind,
        "headline_distance": assessment.headline.mean_distance,
        "satisfied": assessment.headline.satisfied,
    }
    if ck.history:
        last = ck.history[-1]
        summary.update(final_l_r=last.l_r, final_l_d=last.l_d, final_l_c=last.l_c, final_l_g=last.l_g)
    if cfg["output.emit_grids"]:
        count = min(cfg["output.grid_count"], len(split.test))
        export_grid(pv.export_reconstruction_pairs(b, b.reconstruct, split.test, count), out / "grid.pgm")
        summary["grid"] = "grid.pgm"
    (out / "summary.txt").write_text(dump_record(summary, "experiment summary"))
    log((out / "summary.txt").read_text().rstrip())


HANDLERS = {"train": cmd_train, "evaluate": cmd_evaluate, "attack": cmd_attack, "sweep-dims": cmd_sweep_dims,
            "sweep-eps": cmd_sweep_eps, "report": cmd_report}


def run_command(cmd, cfg: RunConfig, log=print):
    """Run one command; returns the process exit status."""
    if cmd not in HANDLERS:
        raise ConfigError(f"unknown command {cmd!r}")
    HANDLERS[cmd](cfg, log)
    return 0


def read_summary(path):
    return parse_record(Path(path).read_text())


def build_parser():
    p = argparse.ArgumentParser(prog="drpriv", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat section.key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="training seed (overrides training.seed)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")

    def log(msg):
        if not args.quiet:
            print(msg)

    try:
        cfg = parse_config(args.config, overrides)
        return run_command(args.command, cfg, log)
    except (ConfigError, CommandError, tr.CheckpointError, tr.TrainingDivergence, ValueError, OSError) as exc:
        print(f"drpriv {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
