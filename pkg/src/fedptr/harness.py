"""Experiment files, seeded runs, output directories and comparison suites.

An experiment file is a JSON object whose top-level keys mirror
:class:`~fedptr.federation.FedConfig`, plus ``dataset``, ``partition``,
``output_dir``, ``seed``/``seeds``/``repeats``. Every key has a default, and
unknown keys are rejected so that a typo never silently falls back to one.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import diffmodels as dm
from . import svgplot
from .data import (
    AuxiliaryDataset, ClientPartition, DataError, Dataset, dirichlet_partition, gen_synthetic_mixture, iid_partition,
    load_csv_dataset, train_test_split,
)
from .diagnostics import layer_norms, similarity_pair
from .diffmodels import ModelSpec
from .federation import (
    FedConfig, RoundMetrics, last5_accuracy, run_experiment, write_metrics_csv,
)
from .localsolver import SolverBudget
from .trajectory import MttConfig, meta_gradient, mtt_loss, save_auxiliary, unroll_inner

log = logging.getLogger(__name__)

SEED_ENV = "FEDPTR_SEED"


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


DATASET_DEFAULTS = {
    "source": "synthetic",
    "n_per_class": 600,
    "num_classes": 10,
    "dim": 20,
    "separation": 2.5,
    "data_seed": None,
    "path": None,
    "test_path": None,
    "test_fraction": 1 / 6,
}

PARTITION_DEFAULTS = {"kind": "dirichlet", "alpha": 0.01, "n_clients": 10}

RUN_DEFAULTS = {"output_dir": "runs/experiment", "seed": 0, "seeds": None, "repeats": 1}

_SECTION_TYPES = {"mtt": MttConfig, "solver": SolverBudget}
_FED_SKIP = {"n_clients", "seed", "mtt", "solver"}  # set from other sections


def _dataclass_defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _check_type(name: str, value, default):
    """Coerce ``value`` to the kind of ``default``; raise ConfigError on mismatch."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
            raise ConfigError(name, f"expected a list of positive integers, got {value!r}")
        return tuple(value)
    return value


def _merge(section: str, raw, defaults: dict) -> dict:
    if raw is None:
        return dict(defaults)
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected a JSON object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}" if section else unknown[0], "unknown key")
    out = dict(defaults)
    for key, value in raw.items():
        name = f"{section}.{key}" if section else key
        default = defaults[key]
        out[key] = value if default is None or value is None else _check_type(name, value, default)
    return out


@dataclass(frozen=True)
class ExperimentFile:
    """A parsed experiment: training config, data source, partition and run layout."""

    fed: FedConfig
    dataset: dict
    partition: dict
    output_dir: str
    seeds: tuple[int, ...]
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentFile":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected a JSON object")
        fed_defaults = {k: v for k, v in _dataclass_defaults(FedConfig).items() if k not in _FED_SKIP}
        allowed = set(fed_defaults) | set(_SECTION_TYPES) | {"dataset", "partition"} | set(RUN_DEFAULTS)
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")

        fed_kw = _merge("", {k: v for k, v in raw.items() if k in fed_defaults}, fed_defaults)
        for section, cls_ in _SECTION_TYPES.items():
            values = _merge(section, raw.get(section), _dataclass_defaults(cls_))
            try:
                fed_kw[section] = cls_(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(section, str(exc)) from None
        dataset = _merge("dataset", raw.get("dataset"), DATASET_DEFAULTS)
        if dataset["source"] not in ("synthetic", "csv"):
            raise ConfigError("dataset.source", "must be 'synthetic' or 'csv'")
        if dataset["source"] == "csv" and not dataset["path"]:
            raise ConfigError("dataset.path", "required when source is 'csv'")
        if not 0 < dataset["test_fraction"] < 1 and dataset["test_path"] is None:
            raise ConfigError("dataset.test_fraction", "must lie in (0, 1)")
        partition = _merge("partition", raw.get("partition"), PARTITION_DEFAULTS)
        if partition["kind"] not in ("dirichlet", "iid"):
            raise ConfigError("partition.kind", "must be 'dirichlet' or 'iid'")
        if partition["alpha"] <= 0:
            raise ConfigError("partition.alpha", "must be positive")

        run = _merge("", {k: raw[k] for k in RUN_DEFAULTS if k in raw}, RUN_DEFAULTS)
        if run["seeds"] is not None:
            if not isinstance(run["seeds"], list) or not run["seeds"] or not all(
                    isinstance(s, int) and not isinstance(s, bool) for s in run["seeds"]):
                raise ConfigError("seeds", "expected a nonempty list of integers")
            seeds = tuple(run["seeds"])
        else:
            if run["repeats"] < 1:
                raise ConfigError("repeats", "must be >= 1")
            seeds = tuple(run["seed"] + r for r in range(run["repeats"]))

        fed_kw["n_clients"] = partition["n_clients"]
        fed_kw["seed"] = seeds[0]
        try:
            fed = FedConfig(**fed_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
        return cls(fed, dataset, partition, run["output_dir"], seeds, Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentFile":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(str(path), "config file not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        """Canonical JSON-ready form; ``from_dict(to_dict())`` round-trips."""
        fed = dataclasses.asdict(self.fed)
        for k in ("n_clients", "seed"):
            fed.pop(k)
        fed["hidden_layers"] = list(fed["hidden_layers"])
        return {**fed, "dataset": dict(self.dataset), "partition": dict(self.partition),
                "output_dir": self.output_dir, "seeds": list(self.seeds)}

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentFile":
        seeds = tuple(int(s) for s in seeds)
        return dataclasses.replace(self, seeds=seeds, fed=self.fed.replace(seed=seeds[0]))

    def with_field(self, dotted: str, value) -> "ExperimentFile":
        """Copy with one (possibly nested, e.g. ``solver.lr``) field changed."""
        raw = self.to_dict()
        node, parts = raw, dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(dotted, "unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(dotted, "unknown field")
        node[parts[-1]] = value
        return ExperimentFile.from_dict(raw, self.base_dir)

    def resolve_seeds(self, cli_seed: int | None = None) -> tuple[int, ...]:
        """``--seed`` beats ``FEDPTR_SEED`` which beats the file's seeds."""
        if cli_seed is not None:
            return (int(cli_seed),)
        env = os.environ.get(SEED_ENV)
        if env not in (None, ""):
            try:
                return (int(env),)
            except ValueError:
                raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
        return self.seeds


def load_data(exp: ExperimentFile, seed: int) -> tuple[Dataset, Dataset, str]:
    """``(train, test, content hash of the input data)`` for one seed."""
    ds = exp.dataset
    if ds["source"] == "synthetic":
        data_seed = seed if ds["data_seed"] is None else ds["data_seed"]
        full = gen_synthetic_mixture(ds["n_per_class"], ds["num_classes"], ds["dim"],
                                     ds["separation"], data_seed)
    else:
        full = load_csv_dataset(exp.base_dir / ds["path"])
    if ds["test_path"] is not None:
        test = load_csv_dataset(exp.base_dir / ds["test_path"])
        if test.dim != full.dim:
            raise DataError("test set dimension differs from training set")
        k = max(full.num_classes, test.num_classes)
        full, test = Dataset(full.features, full.labels, k), Dataset(test.features, test.labels, k)
        digest = Dataset(np.vstack([full.features, test.features]),
                         np.concatenate([full.labels, test.labels]), k).content_hash()
        return full, test, digest
    train, test = train_test_split(full, ds["test_fraction"], seed)
    return train, test, full.content_hash()


def make_partition(exp: ExperimentFile, train: Dataset, seed: int) -> ClientPartition:
    p = exp.partition
    if p["kind"] == "iid":
        return iid_partition(train, p["n_clients"], seed)
    return dirichlet_partition(train, p["n_clients"], p["alpha"], seed)


@dataclass
class RunResult:
    seed: int
    history: list[RoundMetrics]
    summary: dict
    out_dir: Path | None


class _ProbeRecorder:
    """Collects per-client cosines and layer-wise target distances each round."""

    def __init__(self):
        self.similarity: list[tuple] = []
        self.layers: list[tuple] = []

    def __call__(self, state, metrics):
        rec = state.probe
        for i in sorted(rec.projected):
            cos_aux, cos_local = similarity_pair(rec, i)
            self.similarity.append((metrics.round, i, cos_aux, cos_local))
            for span, norm in zip(rec.w_prev.layer_map, layer_norms(rec.w_prev, rec.projected[i])):
                self.layers.append((metrics.round, i, span.layer_id, float(norm)))

    def write(self, out: Path):
        _write_rows(out / "similarity.csv", ("round", "client_id", "cos_aux", "cos_local"),
                    self.similarity)
        _write_rows(out / "layer_norms.csv", ("round", "client_id", "layer", "norm"), self.layers)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _progress(quiet: bool, label: str):
    def cb(state, m):
        if not quiet:
            log.info("%s round %d: loss=%.4f acc=%.4f", label, m.round, m.train_loss, m.test_acc)
    return cb


def run_single(exp: ExperimentFile, seed: int, out_dir=None, threads: int | None = None,
               quiet: bool = False) -> RunResult:
    """Run one seed; if ``out_dir`` is given, write the standard output layout there.

    Layout: ``metrics.csv``, ``summary.json``, ``aux_snapshots/`` (final
    auxiliary sets), ``plots/`` (SVG curves) and, in probe mode,
    ``similarity.csv`` and ``layer_norms.csv``.
    """
    cfg = exp.fed.replace(seed=seed, **({"threads": threads} if threads else {}))
    train, test, digest = load_data(exp, seed)
    partition = make_partition(exp, train, seed)
    for warning in partition.warnings:
        log.warning("seed %d: %s", seed, warning)
    recorder = _ProbeRecorder() if cfg.probe else None
    progress = _progress(quiet, f"[{cfg.algorithm} seed {seed}]")

    def callback(state, m):
        progress(state, m)
        if recorder is not None:
            recorder(state, m)

    history, state = run_experiment(cfg, train, partition, test, return_state=True, callback=callback)
    summary = {
        "experiment": exp.with_seeds([seed]).to_dict(),
        "seed": seed,
        "dataset_hash": digest,
        "rounds": len(history),
        "last5_acc": last5_accuracy(history),
        "final_test_acc": history[-1].test_acc,
        "client_mtt_updates": {str(k): v for k, v in sorted(state.client_mtt_updates.items())},
        "server_mtt_updates": state.server_mtt_updates,
        "partition_sizes": [int(s) for s in partition.sizes],
        "partition_warnings": list(partition.warnings),
    }
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "aux_snapshots").mkdir(parents=True, exist_ok=True)
        (out / "plots").mkdir(exist_ok=True)
        write_metrics_csv(history, out / "metrics.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for i, aux in sorted(state.client_aux.items()):
            save_auxiliary(aux, out / "aux_snapshots" / f"client_{i}", round=state.round)
        if state.server_aux is not None:
            save_auxiliary(state.server_aux, out / "aux_snapshots" / "server", round=state.round)
        plot_metrics(out / "metrics.csv", ["test_acc"], out / "plots" / "test_acc.svg")
        plot_metrics(out / "metrics.csv", ["train_loss"], out / "plots" / "train_loss.svg")
        if recorder is not None:
            recorder.write(out)
            plot_metrics(out / "metrics.csv", ["cos_aux", "cos_local"], out / "plots" / "similarity.svg")
            plot_layer_norms(out / "layer_norms.csv", out / "plots" / "layer_norms.svg")
    return RunResult(seed, history, summary, out)


def run_all(exp: ExperimentFile, seeds: Sequence[int], out_root=None, threads=None,
            quiet=False) -> list[RunResult]:
    """One run per seed. A single seed writes straight into ``out_root``;
    several seeds each get a ``seed_<s>`` subdirectory."""
    results = []
    for s in seeds:
        out = None
        if out_root is not None:
            out = Path(out_root) if len(seeds) == 1 else Path(out_root) / f"seed_{s}"
        results.append(run_single(exp, s, out, threads=threads, quiet=quiet))
    return results


def read_metrics_csv(path) -> dict[str, list[float]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty metrics file")
        cols = {name: [] for name in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields")
            for name, cell in zip(header, row):
                try:
                    cols[name].append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: bad number {cell!r}") from None
    return cols


def plot_metrics(metrics_csv, columns: Sequence[str], out_svg, title: str | None = None) -> Path:
    """SVG line chart with one polyline per requested column against ``round``."""
    cols = read_metrics_csv(metrics_csv)
    missing = [c for c in columns if c not in cols]
    if missing:
        raise DataError(f"column {missing[0]!r} not in {metrics_csv}")
    rounds = cols.get("round", list(range(len(next(iter(cols.values()))))))
    series = {c: (rounds, cols[c]) for c in columns}
    return svgplot.line_chart(series, out_svg, title=title or ", ".join(columns), ylabel="value")


def plot_layer_norms(layer_csv, out_svg) -> Path:
    """Bars of the mean per-layer distance to the projection target in the final probed round."""
    with open(layer_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return svgplot.bar_chart([], [], out_svg, title="layer-wise distance to target")
    last = max(int(r["round"]) for r in rows)
    by_layer: dict[str, list[float]] = {}
    for r in rows:
        if int(r["round"]) == last:
            by_layer.setdefault(r["layer"], []).append(float(r["norm"]))
    labels = list(by_layer)
    return svgplot.bar_chart(labels, [float(np.mean(by_layer[k])) for k in labels], out_svg,
                             title=f"layer-wise distance to target, round {last}", ylabel="L2 norm")


# ---- comparison suites ----

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class ComparisonRow:
    label: str
    sweep: dict
    mean: float
    std: float
    per_seed: list[float]


def compare_suite(experiments: Sequence[ExperimentFile], seeds: Sequence[int],
                  sweep: Sequence[str] = ("algorithm",), threads=None, quiet=True) -> list[ComparisonRow]:
    """Mean and sample standard deviation of last-5-round accuracy per experiment.

    Experiments may differ only in the declared ``sweep`` fields (dotted
    names for nested ones, e.g. ``solver.lr``). The standard deviation is NaN
    with a single seed.
    """
    if not experiments or not seeds:
        raise ValueError("need at least one experiment and one seed")
    ignore = set(sweep) | {"output_dir", "seeds"}
    flats = [_flatten(e.to_dict()) for e in experiments]
    unknown = [s for s in sweep if s not in flats[0]]
    if unknown:
        raise ConfigError(unknown[0], "unknown sweep field")
    ref = {k: v for k, v in flats[0].items() if k not in ignore}
    for flat in flats[1:]:
        for k, v in flat.items():
            if k not in ignore and ref.get(k) != v:
                raise ConfigError(k, "differs between experiments but is not a sweep field")
    rows = []
    for exp, flat in zip(experiments, flats):
        accs = [last5_accuracy(r.history) for r in run_all(exp, seeds, threads=threads, quiet=quiet)]
        values = {s: flat[s] for s in sweep}
        label = ",".join(f"{k}={v}" for k, v in values.items())
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else math.nan
        rows.append(ComparisonRow(label, values, float(np.mean(accs)), std, accs))
    return rows


def write_comparison_csv(rows: Sequence[ComparisonRow], path) -> None:
    sweep = list(rows[0].sweep) if rows else []
    _write_rows(Path(path), ("label", *sweep, "mean_last5_acc", "std_last5_acc", "n_seeds", "per_seed"),
                [(r.label, *[r.sweep[s] for s in sweep], r.mean, r.std, len(r.per_seed),
                  ";".join(repr(a) for a in r.per_seed)) for r in rows])


# ---- finite-difference self-check ----

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    instances: int


def _fd_grad(f, x: np.ndarray, eps: float) -> np.ndarray:
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        up = f(x)
        flat[k] = old - eps
        down = f(x)
        flat[k] = old
        g[k] = (up - down) / (2 * eps)
    return out


def _relative(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def _random_model(rng, max_dim=4, activations=("tanh", "softplus")):
    d = int(rng.integers(1, max_dim + 1))
    c = int(rng.integers(2, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 5, size=int(rng.integers(0, 3))))
    act = str(rng.choice(activations))
    return ModelSpec(d, hidden + (c,), act), d, c


def selftest(seed: int = 0, n_grad: int = 50, n_meta: int = 20) -> list[CheckResult]:
    """Finite-difference checks of gradients, Hessian-vector products and the
    trajectory-matching meta-gradient on random small instances."""
    rng = np.random.default_rng(seed)
    worst_g = worst_h = 0.0
    for _ in range(n_grad):
        spec, d, c = _random_model(rng)
        w = rng.normal(scale=0.8, size=spec.n_params)
        n = int(rng.integers(1, 6))
        x, y = rng.normal(size=(n, d)), rng.integers(0, c, size=n)
        g = dm.grad_raw(spec, w, x, y)
        worst_g = max(worst_g, _relative(g, _fd_grad(lambda v: dm.loss_raw(spec, v, x, y), w.copy(), 1e-5)))
        v = rng.normal(size=spec.n_params)
        hv = dm.hvp(spec, spec.wrap(w), dm.Batch(x, y), spec.wrap(v)).values
        fd_hv = (dm.grad_raw(spec, w + 1e-5 * v, x, y) - dm.grad_raw(spec, w - 1e-5 * v, x, y)) / 2e-5
        worst_h = max(worst_h, _relative(hv, fd_hv))

    worst_m = 0.0
    for _ in range(n_meta):
        spec, d, c = _random_model(rng, activations=("tanh",))
        s, R = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        aux = AuxiliaryDataset(rng.normal(size=(s, d)), rng.integers(0, c, size=s),
                               float(np.log(rng.uniform(0.05, 0.5))), c)
        ws = spec.wrap(rng.normal(scale=0.7, size=spec.n_params))
        we = spec.wrap(ws.values + rng.normal(scale=0.3, size=spec.n_params))
        d_x, d_b = meta_gradient(spec, aux, ws, we, R)

        def outer(feats, beta):
            return mtt_loss(unroll_inner(spec, aux.replace(features=feats, log_beta=math.log(beta)), ws, R),
                            ws, we)

        fd_x = _fd_grad(lambda f: outer(f, aux.beta), aux.features.copy(), 1e-5)
        fd_b = (outer(aux.features, aux.beta + 1e-6) - outer(aux.features, aux.beta - 1e-6)) / 2e-6
        worst_m = max(worst_m, _relative(np.append(d_x.ravel(), d_b), np.append(fd_x.ravel(), fd_b)))

    return [
        CheckResult("gradient", worst_g <= 1e-5, worst_g, 1e-5, n_grad),
        CheckResult("hessian-vector", worst_h <= 1e-4, worst_h, 1e-4, n_grad),
        CheckResult("meta-gradient", worst_m <= 1e-3, worst_m, 1e-3, n_meta),
    ]
