"""Experiment harness: config files, single runs, experiment matrices,
plot-ready CSV emission, and Gaussian MI calibration.

Config files are plain ``key = value`` text (``#`` comments allowed); the
full key table lives in :data:`CONFIG_KEYS` and is documented in the
README.  Every run directory contains::

    manifest.txt   key-value echo of the resolved config + hash + version
    rounds.csv     round, client_id, accuracy, reward, shapley, eo_<attr>...
    fairness.csv   round, f_j, f_g, f_r, f_o, F_t
    summary.csv    component, mean, var

Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import product

import numpy as np

from . import __version__, datagen, fairness, fl_engine
from .mi_losses import ESTIMATOR_KINDS, MILossConfig, mi_estimate, mi_loss
from .models import (
    CIFAR10_CLASSIFIER,
    CriticConfig,
    ModelBundle,
    PairCriticConfig,
    blob_classifier,
    init_pair_critic_params,
    pair_critic_scores,
)
from .ndmath import GradientTape, Tensor, adam_step, init_adam

logger = logging.getLogger(__name__)

SCENARIOS = {"cross-silo": (10, 1.0), "cross-device": (100, 0.05)}
DISTRIBUTIONS = ("iid", "label-skew")
STRATEGIES = ("fedavg", "qfedavg", "ditto")
DATASETS = ("blobs", "cifar10", "gaussian")

_TAG_VAL, _TAG_PARTITION, _TAG_SPLIT, _TAG_DATA, _TAG_CALIB = 20, 21, 22, 23, 24


class ConfigError(ValueError):
    """Raised for unknown keys, type errors, or constraint violations."""


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass
class _Key:
    parse: object
    default: object
    check: object = None
    help: str = ""


def _enum(*values):
    def parse(raw):
        if raw not in values:
            raise ValueError(f"must be one of {', '.join(values)}")
        return raw

    return parse


CONFIG_KEYS = {
    "scenario": _Key(_enum(*SCENARIOS), "cross-silo", help="client population preset"),
    "clients": _Key(int, None, lambda v: v >= 1, "override client count"),
    "participation": _Key(float, None, lambda v: 0 < v <= 1, "override participation rate"),
    "distribution": _Key(_enum(*DISTRIBUTIONS), "iid"),
    "concentration": _Key(float, 0.5, lambda v: v > 0, "label-skew Dirichlet concentration"),
    "strategy": _Key(_enum(*STRATEGIES), "fedavg"),
    "qfedavg_q": _Key(float, 1.0, lambda v: v >= 0),
    "qfedavg_step": _Key(float, None, lambda v: v > 0, "defaults to 1/lr"),
    "ditto_lambda": _Key(float, 0.1, lambda v: v >= 0),
    "ditto_personal_epochs": _Key(int, None, lambda v: v >= 0, "defaults to epochs"),
    "loss": _Key(_enum(*ESTIMATOR_KINDS), "ce"),
    "loss_alpha": _Key(float, 0.0),
    "loss_beta": _Key(float, 0.1, lambda v: v >= 0),
    "smile_tau": _Key(float, 5.0, lambda v: v > 0),
    "tuba_baseline": _Key(float, math.e, lambda v: v > 0),
    "critic_embed": _Key(int, 32, lambda v: v >= 1),
    "rounds": _Key(int, 30, lambda v: v >= 0),
    "epochs": _Key(int, 10, lambda v: v >= 0),
    "batch_size": _Key(int, 32, lambda v: v >= 1),
    "lr": _Key(float, 1e-3, lambda v: v > 0),
    "adam_beta1": _Key(float, 0.9, lambda v: 0 <= v < 1),
    "adam_beta2": _Key(float, 0.999, lambda v: 0 <= v < 1),
    "adam_eps": _Key(float, 1e-8, lambda v: v > 0),
    "dataset": _Key(_enum(*DATASETS), "blobs"),
    "cifar_dir": _Key(str, ""),
    "blob_classes": _Key(int, 4, lambda v: v >= 2),
    "blob_dims": _Key(int, 144, lambda v: v >= 4),
    "blob_per_class": _Key(int, 200, lambda v: v >= 1),
    "blob_spread": _Key(float, 1.0, lambda v: v > 0),
    "gauss_rho": _Key(float, 0.5, lambda v: abs(v) < 1),
    "gauss_dims": _Key(int, 1, lambda v: v >= 1),
    "gauss_n": _Key(int, 200_000, lambda v: v >= 2),
    "calib_steps": _Key(int, 3000, lambda v: v >= 1),
    "calib_hidden": _Key(int, 128, lambda v: v >= 1),
    "calib_tail": _Key(int, 500, lambda v: v >= 1, "steps averaged for the final estimate"),
    "split_ratio": _Key(float, 0.9, lambda v: 0 < v < 1),
    "val_fraction": _Key(float, 0.05, lambda v: 0 < v <= 0.5),
    "attributes_file": _Key(str, ""),
    "shapley_mode": _Key(_enum("auto", "exact", "mc"), "auto"),
    "shapley_samples": _Key(int, 0, lambda v: v >= 0),
    "workers": _Key(int, 1, lambda v: v >= 1),
    "seed": _Key(int, 0),
    "out": _Key(str, "runs"),
    "name": _Key(str, ""),
}

_MATRIX_KEYS = {
    "matrix_scenarios": "scenario",
    "matrix_distributions": "distribution",
    "matrix_strategies": "strategy",
    "matrix_losses": "loss",
}


@dataclass
class RunConfig:
    """A fully validated, default-filled configuration."""

    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def echo_lines(self):
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            lines.append(f"config.{key} = {value!r}" if isinstance(value, str) else f"config.{key} = {value}")
        return lines

    @property
    def config_hash(self):
        return hashlib.sha256("\n".join(self.echo_lines()).encode()).hexdigest()

    @property
    def run_name(self):
        if self.values["name"]:
            return self.values["name"]
        parts = (self.scenario, self.distribution, self.strategy, self.loss)
        return "_".join(p.replace("-", "") for p in parts)


def _read_kv_file(path):
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip(), f"{path}:{lineno}"))
    return pairs


def _apply_pairs(values, pairs, allow_matrix=False):
    matrix = {}
    for key, raw, where in pairs:
        if key in _MATRIX_KEYS:
            if not allow_matrix:
                raise ConfigError(f"{where}: key {key!r} is only valid for the matrix command")
            matrix[key] = [v.strip() for v in raw.split(",") if v.strip()]
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        spec = CONFIG_KEYS[key]
        try:
            value = spec.parse(raw) if spec.parse is not str else raw
        except ValueError as err:
            raise ConfigError(f"{where}: key {key!r}: {err}") from None
        values[key] = value
    return matrix


def _finalize(values):
    for key, spec in CONFIG_KEYS.items():
        value = values.get(key)
        if value is None:
            continue
        if spec.check is not None and not spec.check(value):
            raise ConfigError(f"key {key!r}: constraint violated by value {value}")
    if values["clients"] is None:
        values["clients"] = SCENARIOS[values["scenario"]][0]
    if values["participation"] is None:
        values["participation"] = SCENARIOS[values["scenario"]][1]
    if values["qfedavg_step"] is None:
        values["qfedavg_step"] = 1.0 / values["lr"]
    if values["ditto_personal_epochs"] is None:
        values["ditto_personal_epochs"] = values["epochs"]
    if values["dataset"] == "cifar10" and not os.path.isdir(values["cifar_dir"]):
        raise ConfigError(f"key 'cifar_dir': directory {values['cifar_dir']!r} does not exist")
    if values["attributes_file"] and not os.path.isfile(values["attributes_file"]):
        raise ConfigError(f"key 'attributes_file': file {values['attributes_file']!r} does not exist")
    if values["dataset"] == "blobs":
        side = math.isqrt(values["blob_dims"])
        if side * side != values["blob_dims"]:
            raise ConfigError(f"key 'blob_dims': must be a perfect square, got {values['blob_dims']}")
    return RunConfig(values=values)


def parse_config(path=None, overrides=(), seed=None, out=None, _allow_matrix=False):
    """Resolve a config from an optional file plus override flags.

    Precedence: defaults < file < --override pairs < --seed/--out flags.
    Unknown keys, type errors, and constraint violations are rejected
    with the offending key named.
    """
    values = {key: spec.default for key, spec in CONFIG_KEYS.items()}
    matrix = {}
    if path is not None:
        matrix = _apply_pairs(values, _read_kv_file(path), allow_matrix=_allow_matrix)
    override_pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        override_pairs.append((key.strip(), raw.strip(), f"--override {item!r}"))
    _apply_pairs(values, override_pairs, allow_matrix=False)
    if seed is not None:
        values["seed"] = int(seed)
    if out is not None:
        values["out"] = out
    cfg = _finalize(values)
    if _allow_matrix:
        return cfg, matrix
    return cfg


def _derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Assembling a simulation from a config
# ---------------------------------------------------------------------------

def _build_dataset(cfg):
    data_seed = _derive_seed(cfg.seed, _TAG_DATA)
    if cfg.dataset == "blobs":
        return datagen.synthetic_blobs(
            cfg.blob_classes, cfg.blob_dims, cfg.blob_per_class, cfg.blob_spread, data_seed
        )
    if cfg.dataset == "cifar10":
        return datagen.load_cifar10(cfg.cifar_dir)
    raise ConfigError(f"dataset {cfg.dataset!r} does not define a federated run")


def _build_bundle(cfg, n_classes):
    loss_cfg = MILossConfig(
        kind=cfg.loss,
        alpha=cfg.loss_alpha,
        beta=cfg.loss_beta,
        smile_tau=cfg.smile_tau,
        tuba_baseline=cfg.tuba_baseline,
    )
    if cfg.dataset == "cifar10":
        classifier = CIFAR10_CLASSIFIER
    else:
        classifier = blob_classifier(math.isqrt(cfg.blob_dims), n_classes)
    critic = CriticConfig(cfg.critic_embed, cfg.critic_embed)
    return ModelBundle(classifier, loss_cfg, critic)


def _build_strategy(cfg):
    if cfg.strategy == "qfedavg":
        return fl_engine.StrategyConfig(kind="qfedavg", q=cfg.qfedavg_q, step_l=cfg.qfedavg_step)
    if cfg.strategy == "ditto":
        return fl_engine.StrategyConfig(
            kind="ditto", lam=cfg.ditto_lambda, personal_epochs=cfg.ditto_personal_epochs
        )
    return fl_engine.StrategyConfig(kind="fedavg")


def build_simulation(cfg):
    """Dataset, splits, model, and engine spec for one federated run."""
    dataset = _build_dataset(cfg)
    n = len(dataset)
    rng_val = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_VAL]))
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx = np.sort(rng_val.choice(n, size=n_val, replace=False))
    remaining = np.setdiff1d(np.arange(n), val_idx)
    holdout = datagen.LabeledDataset(
        samples=dataset.samples, labels=dataset.labels, n_classes=dataset.n_classes
    )
    sub = _Subset(holdout, remaining)
    part_seed = _derive_seed(cfg.seed, _TAG_PARTITION)
    if cfg.distribution == "iid":
        plan = datagen.partition_iid(sub, cfg.clients, part_seed)
    else:
        plan = datagen.partition_label_skew(sub, cfg.clients, cfg.concentration, part_seed)
    clients = []
    for cid, local in enumerate(plan.client_indices):
        global_idx = remaining[local]
        train_idx, test_idx = datagen.split_local(
            global_idx, cfg.split_ratio, _derive_seed(cfg.seed, _TAG_SPLIT, cid)
        )
        clients.append(fl_engine.ClientState(cid, train_idx, test_idx))
    if cfg.attributes_file:
        attrs = datagen.load_attributes(cfg.attributes_file, dataset.n_classes)
    else:
        attrs = datagen.default_attributes(dataset.n_classes)
    bundle = _build_bundle(cfg, dataset.n_classes)
    spec = fl_engine.SimulationSpec(
        dataset=dataset,
        clients=clients,
        val_idx=val_idx,
        bundle=bundle,
        strategy=_build_strategy(cfg),
        optimizer=fl_engine.OptimizerConfig(
            lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps
        ),
        rounds=cfg.rounds,
        local_epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        participation=cfg.participation,
        seed=cfg.seed,
        attribute_map=attrs,
        shapley_mode=cfg.shapley_mode,
        shapley_samples=cfg.shapley_samples,
        workers=cfg.workers,
    )
    return spec


class _Subset:
    """Label view over a subset of a dataset, for the partitioners."""

    def __init__(self, dataset, indices):
        self.labels = dataset.labels[indices]
        self.n_classes = dataset.n_classes
        self._n = len(indices)

    def __len__(self):
        return self._n


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    """Atomic CSV write; floats are serialized with full round-trip repr."""
    text = ",".join(header) + "\n"
    for row in rows:
        text += ",".join(_fmt(v) for v in row) + "\n"
    _atomic_write(path, text)


def _atomic_write(path, text):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path):
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


@dataclass
class ResultsBundle:
    config: RunConfig
    records: list
    report: object
    directory: str
    status: str = "ok"


def _attr_names(records):
    names = set()
    for record in records:
        for per_client in record.eo_scores:
            names |= set(per_client)
    return sorted(names)


def _rounds_rows(records):
    attrs = _attr_names(records)
    header = ["round", "client_id", "accuracy", "reward", "shapley"] + [
        f"eo_{a}" for a in attrs
    ]
    rows = []
    for record in records:
        for i, cid in enumerate(record.client_ids):
            row = [
                record.round_index,
                cid,
                float(record.accuracy[i]),
                float(record.reward[i]),
                float(record.contribution[i]),
            ]
            row += [record.eo_scores[i].get(a) for a in attrs]
            rows.append(row)
    return header, rows


def _fairness_rows(report):
    header = ["round", "f_j", "f_g", "f_r", "f_o", "F_t"]
    rows = []
    for k, comp in enumerate(report.rounds):
        rows.append([k] + [comp.get(name) for name in header[1:]])
    return header, rows


def _summary_rows(report):
    header = ["component", "mean", "var"]
    stats = report.component_stats
    rows = [[name, stats[name][0], stats[name][1]] for name in ("f_j", "f_g", "f_r", "f_o", "F_t")]
    return header, rows


def _write_manifest(directory, cfg, status):
    lines = [
        "# mifl run manifest",
        f"version = {__version__}",
        f"created_utc = {datetime.now(timezone.utc).isoformat()}",
        f"config_hash = {cfg.config_hash}",
        f"status = {status}",
    ]
    lines += cfg.echo_lines()
    _atomic_write(os.path.join(directory, "manifest.txt"), "\n".join(lines) + "\n")


def load_manifest(directory):
    """Parse a manifest and verify its config hash; tampering is rejected."""
    path = os.path.join(directory, "manifest.txt")
    meta, config_lines = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = [part.strip() for part in line.split("=", 1)]
            if key.startswith("config."):
                config_lines.append(line)
            else:
                meta[key] = value
    digest = hashlib.sha256("\n".join(sorted(config_lines)).encode()).hexdigest()
    if digest != meta.get("config_hash"):
        raise ValueError(f"{path}: config hash mismatch; manifest or records were modified")
    config = {}
    for line in config_lines:
        key, value = [part.strip() for part in line.split("=", 1)]
        config[key[len("config.") :]] = value.strip("'\"")
    return meta, config


def run_experiment(cfg):
    """Run one simulation and persist its bundle under <out>/<name>/.

    A training failure flushes the rounds completed so far and marks the
    manifest failed; I/O failures clean up their temp files.
    """
    directory = os.path.join(cfg.out, cfg.run_name)
    os.makedirs(directory, exist_ok=True)
    if cfg.dataset == "gaussian":
        return _run_calibration(cfg, directory)
    spec = build_simulation(cfg)
    records = []
    status, failure = "ok", None
    try:
        for record in fl_engine.run_simulation(spec):
            records.append(record)
    except fl_engine.TrainingDivergedError as err:
        status, failure = f"failed: {err}", err
        logger.error("run %s aborted: %s", cfg.run_name, err)
    report = fairness.build_report(records)
    write_csv(os.path.join(directory, "rounds.csv"), *_rounds_rows(records))
    write_csv(os.path.join(directory, "fairness.csv"), *_fairness_rows(report))
    write_csv(os.path.join(directory, "summary.csv"), *_summary_rows(report))
    _write_manifest(directory, cfg, status)
    if failure is not None:
        raise failure
    return ResultsBundle(cfg, records, report, directory, status)


def run_matrix(path, overrides=(), seed=None, out=None):
    """Cartesian product over the matrix_* axes; cells fail independently.

    Returns (bundles, failures); writes <out>/matrix_summary.csv.
    """
    base_cfg, matrix = parse_config(path, overrides, seed=seed, out=out, _allow_matrix=True)
    axes = []
    for mkey, ckey in _MATRIX_KEYS.items():
        axis = matrix.get(mkey) or [base_cfg.values[ckey]]
        axes.append([(ckey, value) for value in axis])
    bundles, failures, rows = [], [], []
    for index, combo in enumerate(product(*axes)):
        values = dict(base_cfg.values)
        cell_pairs = [(k, str(v), f"matrix cell {index}") for k, v in combo]
        _apply_pairs(values, cell_pairs)
        values["seed"] = _derive_seed(base_cfg.seed, index)
        values["name"] = "_".join(str(v).replace("-", "") for _, v in combo)
        try:
            cfg = _finalize(values)
            bundles.append(run_experiment(cfg))
            rows.append([values["name"], "ok", ""])
        except Exception as err:  # cell isolation is the contract
            failures.append((values["name"], str(err)))
            rows.append([values["name"], "failed", str(err).replace(",", ";")])
            logger.error("matrix cell %s failed: %s", values["name"], err)
    os.makedirs(base_cfg.out, exist_ok=True)
    write_csv(
        os.path.join(base_cfg.out, "matrix_summary.csv"), ["cell", "status", "detail"], rows
    )
    return bundles, failures


# ---------------------------------------------------------------------------
# Plot-ready CSV emission
# ---------------------------------------------------------------------------

PLOT_KINDS = ("scatter", "components-bar", "components-timeseries")
_COMPONENTS = ("f_j", "f_g", "f_r", "f_o")


def _load_fairness_rounds(directory):
    header, rows = read_csv(os.path.join(directory, "fairness.csv"))
    parsed = []
    for row in rows:
        entry = {}
        for key, value in zip(header, row):
            if key == "round":
                entry[key] = int(value)
            else:
                entry[key] = float(value) if value else None
        parsed.append(entry)
    return parsed


def emit_plot_data(bundle_dirs, kind, out_path):
    """Flatten one or more run directories into a single plot-ready CSV."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"emit_plot_data: kind must be one of {PLOT_KINDS}, got {kind!r}")
    if not bundle_dirs:
        raise ValueError("emit_plot_data: need at least one bundle directory")
    rows = []
    for directory in bundle_dirs:
        meta, config = load_manifest(directory)
        cell = os.path.basename(os.path.normpath(directory))
        rounds = _load_fairness_rounds(directory)
        if kind == "scatter":
            ft = [r["F_t"] for r in rounds if r["F_t"] is not None]
            fo = [r["f_o"] for r in rounds if r["f_o"] is not None]
            rows.append(
                [
                    cell,
                    config.get("strategy", ""),
                    config.get("loss", ""),
                    float(np.mean(ft)) if ft else None,
                    float(np.mean(fo)) if fo else None,
                ]
            )
        elif kind == "components-bar":
            for comp in _COMPONENTS:
                vals = [r[comp] for r in rounds if r[comp] is not None]
                rows.append(
                    [
                        cell,
                        comp,
                        float(np.mean(vals)) if vals else None,
                        float(np.std(vals)) if vals else None,
                    ]
                )
        else:
            for r in rounds:
                rows.append([cell, r["round"]] + [r[c] for c in ("f_j", "f_g", "f_r", "f_o", "F_t")])
    headers = {
        "scatter": ["cell", "strategy", "loss", "general_fairness", "performance"],
        "components-bar": ["cell", "component", "mean", "std"],
        "components-timeseries": ["cell", "round", "f_j", "f_g", "f_r", "f_o", "F_t"],
    }
    write_csv(out_path, headers[kind], rows)
    return out_path


# ---------------------------------------------------------------------------
# Gaussian MI calibration
# ---------------------------------------------------------------------------

def train_mi_estimator(loss_cfg, rho, dims, n, steps, batch, lr, hidden, embed, seed):
    """Train a pair critic on correlated Gaussians; returns the per-step
    bound estimates (floats, in nats)."""
    x, y = datagen.correlated_gaussian_pairs(rho, dims, n, seed)
    critic_cfg = PairCriticConfig(in_dims=dims, hidden_width=hidden, embed_width=embed)
    rng_init = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_CALIB, 0]))
    params = init_pair_critic_params(critic_cfg, rng_init)
    state = init_adam(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_CALIB, 1]))
    estimates = []
    for _ in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        xb, yb = Tensor(x[idx]), Tensor(y[idx])
        tensors = [Tensor(p) for p in params]
        with GradientTape() as tape:
            scores = pair_critic_scores(critic_cfg, tensors, xb, yb)
            loss = mi_loss(loss_cfg, scores)
        grads = tape.gradient(loss, tensors)
        params, state = adam_step(params, grads, state)
        estimates.append(mi_estimate(loss_cfg, Tensor(scores.data)))
    return estimates


def _run_calibration(cfg, directory):
    loss_cfg = MILossConfig(
        kind=cfg.loss,
        alpha=cfg.loss_alpha,
        beta=cfg.loss_beta,
        smile_tau=cfg.smile_tau,
        tuba_baseline=cfg.tuba_baseline,
    )
    if loss_cfg.kind == "ce":
        raise ConfigError("gaussian calibration needs an MI estimator, not ce")
    estimates = train_mi_estimator(
        loss_cfg,
        cfg.gauss_rho,
        cfg.gauss_dims,
        cfg.gauss_n,
        cfg.calib_steps,
        cfg.batch_size,
        cfg.lr,
        cfg.calib_hidden,
        cfg.critic_embed,
        cfg.seed,
    )
    tail = estimates[-cfg.calib_tail :]
    true_mi = datagen.gaussian_pair_mi(cfg.gauss_rho, cfg.gauss_dims)
    write_csv(
        os.path.join(directory, "mi_steps.csv"),
        ["step", "estimate"],
        [[i, e] for i, e in enumerate(estimates)],
    )
    write_csv(
        os.path.join(directory, "summary.csv"),
        ["estimator", "rho", "true_mi", "estimate", "tail_steps"],
        [[cfg.loss, cfg.gauss_rho, true_mi, float(np.mean(tail)), len(tail)]],
    )
    _write_manifest(directory, cfg, "ok")
    return ResultsBundle(cfg, [], None, directory, "ok")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mifl",
        description="Federated-learning fairness benchmark with MI-based losses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configured experiment")
    _add_common(p_run)

    p_matrix = sub.add_parser("matrix", help="run a strategy/loss/distribution grid")
    _add_common(p_matrix)

    p_plot = sub.add_parser("plotdata", help="emit plot-ready CSV from run directories")
    p_plot.add_argument("bundles", nargs="+", help="run directories")
    p_plot.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p_plot.add_argument("--out", required=True, help="output CSV path")

    p_calib = sub.add_parser("calibrate-mi", help="train MI estimators on Gaussian pairs")
    _add_common(p_calib)
    p_calib.add_argument(
        "--estimators", default="infonce,smile,mine", help="comma list of estimator kinds"
    )
    p_calib.add_argument("--rho", type=float, default=0.5)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        cfg = parse_config(args.config, args.override, seed=args.seed, out=args.out)
        try:
            bundle = run_experiment(cfg)
        except fl_engine.TrainingDivergedError as err:
            print(f"run failed: {err}", file=sys.stderr)
            return 1
        print(f"wrote {bundle.directory}")
        return 0

    if args.command == "matrix":
        if not args.config:
            parser.error("matrix requires --config")
        bundles, failures = run_matrix(args.config, args.override, seed=args.seed, out=args.out)
        print(f"{len(bundles)} cells ok, {len(failures)} failed")
        for name, detail in failures:
            print(f"  failed {name}: {detail}", file=sys.stderr)
        return 1 if failures else 0

    if args.command == "plotdata":
        path = emit_plot_data(args.bundles, args.kind, args.out)
        print(f"wrote {path}")
        return 0

    if args.command == "calibrate-mi":
        failures = 0
        for kind in [k.strip() for k in args.estimators.split(",") if k.strip()]:
            overrides = list(args.override) + [
                "dataset=gaussian",
                f"loss={kind}",
                f"gauss_rho={args.rho}",
                "batch_size=64",
                f"name=calib_{kind}_rho{args.rho}",
            ]
            cfg = parse_config(args.config, overrides, seed=args.seed, out=args.out)
            bundle = run_experiment(cfg)
            header, rows = read_csv(os.path.join(bundle.directory, "summary.csv"))
            print(",".join(header))
            print(",".join(rows[0]))
        return 1 if failures else 0

    return 0


if __name__ == "__main__":
    sys.exit(main())
