"""Experiment orchestration and CSV/JSON reporting.

Config files are flat ``key = value`` text; ``#`` starts a comment. See the
README for the full key list. Lists are comma separated.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .adaptation import LOSS_KINDS, TTAConfig, run_episode
from .benchgen import (
    LabeledSet,
    SyntheticTaskSpec,
    TargetStream,
    TrainConfig,
    gen_task,
    load_feature_csv,
    train_source,
)
from .losses import LossWeights
from .network import Architecture, Network, load_network

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "seed", "batches", "online_accuracy", "acc_mean", "acc_std", "ms_per_item")
STD_NOTE = "acc_std is the sample (n-1) standard deviation; absent for <2 seeds"

# ablation row label -> adaptation loss
ABLATION_ROWS = {
    "Baseline": "none",
    "A": "wcse_only",
    "B": "bcse_only",
    "C": "lsd_only",
    "D": "wcse+bcse",
    "E": "wcse+lsd",
    "F": "bcse+lsd",
    "G": "lscd",
}
SWEEP_PARAMS = ("alpha", "beta", "tau", "epsilon")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    source_csv: str | None = None
    target_csv: str | None = None
    source_checkpoint: str | None = None
    arch_hidden: tuple[int, ...] = (64, 64)
    eps_bn: float = 1e-5
    stats_momentum: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    methods: tuple[str, ...] = ("none", "lscd")
    seeds: tuple[int, ...] = (0,)
    sweep: tuple[tuple[str, tuple[float, ...]], ...] = ()
    out: str = "report.csv"
    format: str = "csv"
    record_timing: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in LOSS_KINDS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected names from {LOSS_KINDS}")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        if (self.source_csv is None) != (self.target_csv is None):
            raise ConfigError("source_csv and target_csv must be given together")

    @property
    def uses_csv(self) -> bool:
        return self.source_csv is not None

    def architecture(self, input_dim: int, num_classes: int) -> Architecture:
        return Architecture(input_dim, self.arch_hidden, num_classes, self.eps_bn, self.stats_momentum)

    def config_hash(self) -> str:
        """Digest of every field that can change results (paths to outputs excluded)."""
        payload = asdict(self)
        for key in ("out", "format", "record_timing"):
            payload.pop(key)
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- config file -----------------------------------------------------------

_TASK_KEYS = {
    "num_classes": int,
    "feature_dim": int,
    "samples_per_class_source": int,
    "target_stream_length": int,
    "rotation_angle": float,
    "mean_translation": float,
    "noise_sigma": float,
    "imbalance_exponent": float,
}
_TRAIN_KEYS = {
    "train_epochs": ("epochs", int),
    "train_lr": ("lr", float),
    "train_momentum": ("momentum", float),
    "train_batch_size": ("batch_size", int),
}
_TTA_KEYS = {
    "learning_rate": float,
    "momentum": float,
    "batch_size": int,
    "steps_per_batch": int,
    "prob_floor": float,
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str, kind=str) -> tuple:
    return tuple(kind(v.strip()) for v in text.split(",") if v.strip())


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_config(values: dict[str, str], origin: str = "<config>") -> ExperimentConfig:
    values = dict(values)
    task_kw, train_kw, tta_kw, weight_kw, kw = {}, {}, {}, {}, {}
    try:
        for key, kind in _TASK_KEYS.items():
            if key in values:
                task_kw[key] = kind(values.pop(key))
        if "scale_min" in values or "scale_max" in values:
            task_kw["scale_range"] = (
                float(values.pop("scale_min", 1.0)),
                float(values.pop("scale_max", 1.0)),
            )
        for key, (name, kind) in _TRAIN_KEYS.items():
            if key in values:
                train_kw[name] = kind(values.pop(key))
        for key, kind in _TTA_KEYS.items():
            if key in values:
                tta_kw[key] = kind(values.pop(key))
        for key in SWEEP_PARAMS:
            if key in values:
                weight_kw[key] = float(values.pop(key))
        if "detach_pseudo_labels" in values:
            tta_kw["detach_pseudo_labels"] = _bool(values.pop("detach_pseudo_labels"))
        sweep = []
        for key in SWEEP_PARAMS:
            if f"sweep_{key}" in values:
                sweep.append((key, _list(values.pop(f"sweep_{key}"), float)))
        kw["sweep"] = tuple(sweep)
        if "seeds" in values:
            kw["seeds"] = _list(values.pop("seeds"), int)
        if "methods" in values:
            kw["methods"] = _list(values.pop("methods"))
        if "hidden" in values:
            kw["arch_hidden"] = _list(values.pop("hidden"), int)
        for key in ("eps_bn", "stats_momentum"):
            if key in values:
                kw[key] = float(values.pop(key))
        for key in ("source_csv", "target_csv", "source_checkpoint", "out", "format"):
            if key in values:
                kw[key] = values.pop(key)
        if "record_timing" in values:
            kw["record_timing"] = _bool(values.pop("record_timing"))
        if values:
            raise ConfigError(f"{origin}: unknown config keys {sorted(values)}")
        return ExperimentConfig(
            task=SyntheticTaskSpec(**task_kw),
            train=TrainConfig(**train_kw),
            tta=TTAConfig(weights=LossWeights(**weight_kw), **tta_kw),
            **kw,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    cfg = build_config(parse_config_text(path.read_text(), str(path)), str(path))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


# -- running ---------------------------------------------------------------


@dataclass
class MetricsRecord:
    method: str
    seed: int | None
    batches: int
    online_accuracy: float | None = None
    acc_mean: float | None = None
    acc_std: float | None = None
    ms_per_item: float | None = None
    per_batch: list[float] = field(default_factory=list)
    class_accuracy: list[float] = field(default_factory=list)

    @property
    def is_aggregate(self) -> bool:
        return self.seed is None

    def row(self) -> dict:
        return {col: getattr(self, col) for col in REPORT_COLUMNS}


@dataclass
class ExperimentResult:
    config_hash: str
    records: list[MetricsRecord]
    failures: list[tuple[int, str]] = field(default_factory=list)

    def rows(self) -> list[MetricsRecord]:
        """Per-seed records followed by each method's aggregate, sorted by method then seed."""
        out = []
        for method in sorted({r.method for r in self.records}):
            mine = sorted((r for r in self.records if r.method == method), key=lambda r: r.seed)
            out.extend(mine)
            out.append(aggregate(method, mine))
        return out

    def accuracy(self, method: str) -> float:
        return aggregate(method, [r for r in self.records if r.method == method]).acc_mean


def aggregate(method: str, records: list[MetricsRecord]) -> MetricsRecord:
    accs = [r.online_accuracy for r in records]
    times = [r.ms_per_item for r in records if r.ms_per_item is not None]
    return MetricsRecord(
        method=method,
        seed=None,
        batches=sum(r.batches for r in records),
        acc_mean=statistics.fmean(accs) if accs else None,
        acc_std=statistics.stdev(accs) if len(accs) >= 2 else None,
        ms_per_item=statistics.fmean(times) if times else None,
    )


@dataclass
class SeedData:
    net: Network
    val_accuracy: float
    stream: TargetStream


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedData:
    """Load or generate the task for ``seed`` and obtain its source model."""
    if config.uses_csv:
        source = load_feature_csv(config.source_csv)
        target = load_feature_csv(config.target_csv)
        num_classes = int(max(source.labels.max(), target.labels.max())) + 1
        stream = TargetStream.from_labeled(target)
    else:
        source, stream = gen_task(replace(config.task, seed=seed))
        num_classes = config.task.num_classes
    arch = config.architecture(source.feature_dim, num_classes)
    if config.source_checkpoint:
        net = load_network(config.source_checkpoint.format(seed=seed))
        if net.arch.input_dim != source.feature_dim:
            raise ValueError("checkpoint input dimension does not match the task")
        val_acc = float("nan")
    else:
        net, val_acc = train_source(arch, source, replace(config.train, seed=seed))
    return SeedData(net, val_acc, stream)


def episode_record(method: str, seed: int, data: SeedData, tta: TTAConfig, timing: bool) -> MetricsRecord:
    res = run_episode(data.net, data.stream, tta)
    return MetricsRecord(
        method=method,
        seed=seed,
        batches=len(res.records),
        online_accuracy=res.accuracy,
        ms_per_item=res.ms_per_item if timing else None,
        per_batch=[r.accuracy for r in res.records],
        class_accuracy=[float(v) for v in res.class_accuracy],
    )


def _for_each_seed(config: ExperimentConfig, work) -> list[tuple[int, str]]:
    failures = []
    for seed in config.seeds:
        try:
            work(seed, prepare_seed(config, seed))
        except Exception as exc:  # one bad seed must not sink the rest
            msg = f"{type(exc).__name__}: {exc}"
            log.warning("seed %d aborted: %s", seed, msg)
            failures.append((seed, msg))
    return failures


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    records: list[MetricsRecord] = []

    def work(seed, data):
        for method in config.methods:
            tta = replace(config.tta, loss=method)
            records.append(episode_record(method, seed, data, tta, config.record_timing))

    failures = _for_each_seed(config, work)
    return ExperimentResult(config.config_hash(), records, failures)


@dataclass
class AblationTable:
    config_hash: str
    seeds: list[int]
    rows: list[dict]
    failures: list[tuple[int, str]] = field(default_factory=list)

    def average(self, label: str) -> float:
        return next(r["average"] for r in self.rows if r["method"] == label)


def run_ablation(config: ExperimentConfig) -> AblationTable:
    """Every ablation row (Baseline, A-G) on identical seeds and streams."""
    acc: dict[str, dict[int, float]] = {label: {} for label in ABLATION_ROWS}

    def work(seed, data):
        for label, loss in ABLATION_ROWS.items():
            tta = replace(config.tta, loss=loss)
            acc[label][seed] = episode_record(label, seed, data, tta, False).online_accuracy

    failures = _for_each_seed(config, work)
    done = [s for s in config.seeds if s not in {f[0] for f in failures}]
    rows = []
    for label, loss in ABLATION_ROWS.items():
        terms = {"wcse": False, "bcse": False, "lsd": False}
        if loss != "none":
            weights = replace(config.tta, loss=loss).effective_weights()
            terms = {"wcse": weights.alpha > 0, "bcse": weights.beta > 0, "lsd": weights.tau > 0}
        per_seed = {s: acc[label][s] for s in done}
        rows.append({
            "method": label,
            **terms,
            "per_seed": per_seed,
            "average": statistics.fmean(per_seed.values()) if per_seed else None,
        })
    return AblationTable(config.config_hash(), done, rows, failures)


@dataclass
class SweepPoint:
    sweep: str
    weights: LossWeights
    seed: int | None
    accuracy: float
    best: bool = False


def run_sensitivity(config: ExperimentConfig, grid=None) -> list[SweepPoint]:
    """One-at-a-time sweeps: each listed parameter varies with the others at their config values.

    Returns per-seed points followed by one aggregate point (``seed=None``)
    per grid value; within each sweep the aggregate with the highest mean
    accuracy is flagged ``best``.
    """
    grid = dict(grid if grid is not None else config.sweep)
    if not grid or not any(grid.values()):
        raise ConfigError("sensitivity grid is empty")
    unknown = set(grid) - set(SWEEP_PARAMS)
    if unknown:
        raise ConfigError(f"cannot sweep {sorted(unknown)}; choose from {SWEEP_PARAMS}")
    base = replace(config.tta, loss="lscd")
    cache: dict[tuple, float] = {}

    def work(seed, data):
        for name, values in grid.items():
            for v in values:
                w = replace(base.weights, **{name: float(v)})
                if (w, seed) not in cache:
                    cache[(w, seed)] = run_episode(data.net, data.stream, replace(base, weights=w)).accuracy

    failures = _for_each_seed(config, work)
    failed = {f[0] for f in failures}
    points = []
    for name, values in grid.items():
        aggregates = []
        for v in values:
            w = replace(base.weights, **{name: float(v)})
            accs = [cache[(w, s)] for s in config.seeds if s not in failed]
            points.extend(SweepPoint(name, w, s, cache[(w, s)]) for s in config.seeds if s not in failed)
            if accs:
                aggregates.append(SweepPoint(name, w, None, statistics.fmean(accs)))
        if aggregates:
            max(aggregates, key=lambda p: p.accuracy).best = True
        points.extend(aggregates)
    return points


# -- reports ---------------------------------------------------------------


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _header_lines(config_hash: str) -> list[str]:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return [f"# config_hash={config_hash} {STD_NOTE}", f"# timestamp={stamp}"]


def _write(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def emit_report(records: list[MetricsRecord], path, fmt: str = "csv", config_hash: str = "") -> Path:
    """Write records with the fixed column schema.

    CSV output starts with two ``#`` comment lines (config hash, then the
    timestamp); JSON carries the same information under ``"header"``.
    """
    if not records:
        log.warning("report %s has no records; writing header only", path)
    if fmt == "csv":
        lines = _header_lines(config_hash) + [",".join(REPORT_COLUMNS)]
        lines += [",".join(_fmt(r.row()[c]) for c in REPORT_COLUMNS) for r in records]
        _write(path, "\n".join(lines) + "\n")
    elif fmt == "json":
        stamp = _header_lines(config_hash)[1].split("=", 1)[1]
        doc = {
            "header": {"config_hash": config_hash, "note": STD_NOTE, "timestamp": stamp},
            "columns": list(REPORT_COLUMNS),
            "records": [r.row() for r in records],
        }
        _write(path, json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return Path(path)


def read_report_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        body = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(body))


def emit_ablation(table: AblationTable, path, fmt: str = "csv") -> Path:
    seed_cols = [f"seed_{s}" for s in table.seeds]
    cols = ["method", "wcse", "bcse", "lsd", *seed_cols, "average"]
    flat = []
    for row in table.rows:
        flat.append({
            "method": row["method"],
            "wcse": int(row["wcse"]),
            "bcse": int(row["bcse"]),
            "lsd": int(row["lsd"]),
            **{f"seed_{s}": row["per_seed"][s] for s in table.seeds},
            "average": row["average"],
        })
    if fmt == "json":
        doc = {"header": {"config_hash": table.config_hash}, "columns": cols, "rows": flat}
        _write(path, json.dumps(doc, indent=2) + "\n")
    else:
        lines = _header_lines(table.config_hash)[:1] + [",".join(cols)]
        lines += [",".join(_fmt(r[c]) for c in cols) for r in flat]
        _write(path, "\n".join(lines) + "\n")
    return Path(path)


def emit_sensitivity(points: list[SweepPoint], path, config_hash: str = "") -> Path:
    cols = ["sweep", "alpha", "beta", "tau", "epsilon", "seed", "accuracy", "best"]
    lines = _header_lines(config_hash)[:1] + [",".join(cols)]
    for p in points:
        w = p.weights
        seed = "mean" if p.seed is None else str(p.seed)
        best = "" if p.seed is not None else str(int(p.best))
        vals = [p.sweep, _fmt(w.alpha), _fmt(w.beta), _fmt(w.tau), _fmt(w.epsilon), seed,
                _fmt(p.accuracy), best]
        lines.append(",".join(vals))
    _write(path, "\n".join(lines) + "\n")
    return Path(path)


def dataset_for_seed(config: ExperimentConfig, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Source and target sets (target in stream order) for ``gen-data``."""
    if config.uses_csv:
        return load_feature_csv(config.source_csv), load_feature_csv(config.target_csv)
    source, stream = gen_task(replace(config.task, seed=seed))
    return source, stream.to_labeled()

