"""Experiment plumbing: configs, pretraining, adaptation runs, sweeps and reports.

A run is described by an :class:`ExperimentConfig`, which reads a flat
``key = value`` text file and accepts overrides.  Every result row carries
the fingerprint of the configuration that produced it, and the resolved
configuration is written next to the outputs so a row can be re-derived.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .adaptation import METHODS, VARIATION_SOURCES, AdaptConfig, canonical_points, run_stream
from .corruptions import CorruptionSpec, corrupt_all
from .data import Dataset, batch_iter, load_dataset, make_dataset
from .errors import ConfigError
from .geometry import mix_seed
from .model import (
    CROSS_ENTROPY,
    ModelState,
    PointNetLiteConfig,
    assert_frozen_equal,
    init_model,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)

log = logging.getLogger(__name__)

CLEAN = "clean"
# fields that say where files live rather than what is computed
LOCATION_KEYS = ("data", "checkpoint", "out")


@dataclass
class ExperimentConfig:
    # files
    data: str | None = None
    checkpoint: str | None = None
    out: str = "runs/default"
    # dataset generated when ``data`` is unset
    train_per_class: int = 250
    test_per_class: int = 50
    n_points: int = 1024
    data_seed: int = 0
    # desk-scale model
    mlp_channels: tuple = (32, 64, 128)
    head_dims: tuple = (64,)
    fps_points: int = 256
    # pretraining
    epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32
    # adaptation
    method: str = "svwa"
    corruption: str = "gaussian:3"
    nv: int = 6
    iters: int = 1
    mode: str = "parallel"
    lr: float = 1e-3
    batch_size: int = 128
    variation_source: str = "sampling"
    reset_to_pretrained: bool = False
    # seeds
    seed: int = 0
    repeats: int = 5

    def __post_init__(self):
        self.mlp_channels = tuple(int(c) for c in self.mlp_channels)
        self.head_dims = tuple(int(c) for c in self.head_dims)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.variation_source not in VARIATION_SOURCES:
            raise ConfigError(f"variation_source must be one of {VARIATION_SOURCES}")
        if self.mode not in ("parallel", "sequential"):
            raise ConfigError("mode must be 'parallel' or 'sequential'")
        positive = ("train_per_class", "test_per_class", "n_points", "fps_points", "nv", "iters",
                    "pretrain_batch_size", "repeats")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.fps_points > self.n_points:
            raise ConfigError("fps_points cannot exceed n_points")
        self.corruption_spec(0)

    def corruption_spec(self, seed: int) -> CorruptionSpec | None:
        if self.corruption == CLEAN:
            return None
        try:
            return CorruptionSpec.parse(self.corruption, seed)
        except ValueError as exc:
            raise ConfigError(f"bad corruption {self.corruption!r}: {exc}") from None

    def model_config(self, num_classes: int) -> PointNetLiteConfig:
        return PointNetLiteConfig(num_classes, self.mlp_channels, self.head_dims, self.fps_points)

    def adapt_config(self, repeat: int) -> AdaptConfig:
        seeds = repeat_seeds(self.seed, repeat)
        return AdaptConfig(
            nv=self.nv,
            iterations=self.iters,
            mode=self.mode,
            lr=self.lr,
            batch_size=self.batch_size,
            base_seed=seeds["variation"],
            prediction_seed=seeds["prediction"],
            variation_source=self.variation_source,
            reset_to_pretrained=self.reset_to_pretrained,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def label(self) -> str:
        """Method name plus whatever distinguishes this cell from the defaults."""
        if self.method != "svwa":
            return self.method if self.iters == 1 else f"{self.method}[iters={self.iters}]"
        parts = [f"nv={self.nv}"]
        if self.mode != "parallel":
            parts.append(self.mode)
        if self.variation_source != "sampling":
            parts.append(self.variation_source)
        if self.iters != 1:
            parts.append(f"iters={self.iters}")
        return f"svwa[{','.join(parts)}]"

    # -- text form ---------------------------------------------------------

    def to_text(self, locations: bool = True) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if not locations and f.name in LOCATION_KEYS:
                continue
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """Hash of everything that affects results (file locations excluded)."""
        return hashlib.sha256(self.to_text(locations=False).encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, object] | None = None) -> "ExperimentConfig":
        values = parse_config_text(text)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(key, raw, default)
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, overrides: Mapping[str, object] | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    if default is None:
        return raw or None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def repeat_seeds(seed: int, repeat: int) -> dict[str, int]:
    """Seeds of every random stream used by repeat ``repeat`` of a run."""
    base = mix_seed(seed, repeat)
    return {
        "repeat": base,
        "corruption": mix_seed(base, 0),
        "variation": mix_seed(base, 1),
        "prediction": mix_seed(base, 2),
        "shuffle": mix_seed(base, 3),
    }


# --------------------------------------------------------------------------
# dataset and pretraining
# --------------------------------------------------------------------------


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data is None:
        return make_dataset(cfg.train_per_class, cfg.test_per_class, cfg.n_points, cfg.data_seed)
    return load_dataset(cfg.data)


def evaluate_clean(state: ModelState, dataset: Dataset, cfg: ExperimentConfig) -> float:
    """Source-only accuracy on the clean test split, streamed as repeat 0 would be."""
    seeds = repeat_seeds(cfg.seed, 0)
    stream = batch_iter(dataset, "test", cfg.batch_size, seeds["shuffle"])
    return run_stream(state.copy(), stream, cfg.adapt_config(0), "source-only").accuracy


def run_pretrain(cfg: ExperimentConfig, dataset: Dataset | None = None):
    """Supervised pretraining with AdamW at a constant learning rate.

    Returns ``(state, history)``; ``history`` has one entry per epoch and a
    final ``clean_accuracy``.  Writes the checkpoint and a JSON-lines log
    when ``cfg.checkpoint`` is set.
    """
    dataset = resolve_dataset(cfg) if dataset is None else dataset
    state = init_model(cfg.model_config(dataset.num_classes), mix_seed(cfg.seed, 10))
    opt = nx.AdamWState.for_params(state.params, lr=cfg.pretrain_lr)
    m = cfg.fps_points
    history = []
    for epoch in range(cfg.epochs):
        losses, t0 = [], time.perf_counter()
        sample_seed = mix_seed(mix_seed(cfg.seed, 12), epoch)
        stream = batch_iter(dataset, "train", cfg.pretrain_batch_size, mix_seed(mix_seed(cfg.seed, 11), epoch))
        for index, batch in enumerate(stream):
            if len(batch) < 2:
                continue
            points = canonical_points(batch.clouds, m, sample_seed, index)
            loss, grads, _ = loss_and_grads(
                state, points, CROSS_ENTROPY, batch.labels, norm_only=False, update_running=True
            )
            nx.adamw_step(state.params, grads, opt)
            losses.append(loss)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)),
                        "seconds": round(time.perf_counter() - t0, 3)})
        log.info("epoch %d loss %.4f", epoch + 1, history[-1]["loss"])
    accuracy = evaluate_clean(state, dataset, cfg)
    history.append({"clean_accuracy": accuracy})
    log.info("clean test accuracy %.4f", accuracy)
    if cfg.checkpoint:
        save_checkpoint(state, cfg.checkpoint)
        with open(training_log_path(cfg.checkpoint), "w") as fh:
            for entry in history:
                fh.write(json.dumps(entry) + "\n")
    return state, history


def training_log_path(checkpoint) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".log")


# --------------------------------------------------------------------------
# adaptation runs
# --------------------------------------------------------------------------

ROW_COLUMNS = (
    "label", "method", "corruption", "severity", "repeat", "seed", "nv", "mode",
    "variation_source", "iters", "num_samples", "accuracy", "entropy_before",
    "entropy_after", "adaptable_fraction", "overhead_fraction", "fingerprint",
)
_INT_COLUMNS = {"severity", "repeat", "seed", "nv", "iters", "num_samples"}
_FLOAT_COLUMNS = {"accuracy", "entropy_before", "entropy_after", "adaptable_fraction", "overhead_fraction"}


def stream_clouds(dataset: Dataset, cfg: ExperimentConfig, repeat: int):
    """The (possibly corrupted) test split seen by repeat ``repeat``."""
    clouds = dataset.split("test")
    spec = cfg.corruption_spec(repeat_seeds(cfg.seed, repeat)["corruption"])
    return clouds if spec is None else corrupt_all(clouds, spec)


def run_adapt_eval(
    cfg: ExperimentConfig,
    state: ModelState | None = None,
    dataset: Dataset | None = None,
    clouds_cache: dict | None = None,
) -> list[dict]:
    """One row per repeat of ``cfg.method`` on the configured test stream.

    ``state`` is never modified; every repeat adapts its own copy.
    ``clouds_cache`` lets sweeps share corrupted streams between cells.
    """
    if state is None:
        if not cfg.checkpoint:
            raise ConfigError("no checkpoint given")
        state = load_checkpoint(cfg.checkpoint)
    dataset = resolve_dataset(cfg) if dataset is None else dataset
    spec = cfg.corruption_spec(0)
    rows = []
    for repeat in range(cfg.repeats):
        seeds = repeat_seeds(cfg.seed, repeat)
        key = (cfg.corruption, cfg.seed, repeat)
        if clouds_cache is not None and key in clouds_cache:
            clouds = clouds_cache[key]
        else:
            clouds = stream_clouds(dataset, cfg, repeat)
            if clouds_cache is not None:
                clouds_cache[key] = clouds
        model = state.copy()
        t0 = time.perf_counter()
        report = run_stream(model, batch_iter(clouds, "test", cfg.batch_size, seeds["shuffle"]),
                            cfg.adapt_config(repeat), cfg.method)
        seconds = time.perf_counter() - t0
        assert_frozen_equal(model, state)
        rows.append({
            "label": cfg.label(),
            "method": cfg.method,
            "corruption": spec.kind if spec else CLEAN,
            "severity": spec.severity if spec else 0,
            "repeat": repeat,
            "seed": seeds["repeat"],
            "nv": cfg.nv if cfg.method == "svwa" else 0,
            "mode": cfg.mode,
            "variation_source": cfg.variation_source,
            "iters": cfg.iters,
            "num_samples": report.num_samples,
            "accuracy": report.accuracy,
            "entropy_before": report.entropy_before,
            "entropy_after": report.entropy_after,
            "adaptable_fraction": report.adaptable_fraction,
            "overhead_fraction": report.overhead_fraction,
            "fingerprint": cfg.fingerprint(),
            "seconds": seconds,
        })
        log.info("%s on %s repeat %d: accuracy %.4f (%.1fs)", cfg.label(), cfg.corruption,
                 repeat, report.accuracy, seconds)
    return rows


SWEEP_AXES = ("method", "nv", "mode", "variation_source", "corruption", "iters")


def parse_sweep(text: str) -> tuple[str, list[str]]:
    """``"nv=2,6,12"`` -> ``("nv", ["2", "6", "12"])``."""
    key, sep, values = text.partition("=")
    key = key.strip().replace("-", "_")
    if not sep or key not in SWEEP_AXES:
        raise ConfigError(f"sweep must look like AXIS=v1,v2 with AXIS in {SWEEP_AXES}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep has no values")
    return key, items


def sweep_configs(
    base: ExperimentConfig,
    axis: str,
    values: Sequence[str],
    corruptions: Sequence[str] | None = None,
) -> list[ExperimentConfig]:
    """Cells of a one-axis sweep, crossed with ``corruptions``."""
    corruptions = list(corruptions or [base.corruption])
    cells = []
    for corruption in corruptions:
        for value in values:
            changes = {"corruption": corruption, axis: value}
            cells.append(ExperimentConfig.from_mapping({**dataclasses.asdict(base), **changes}))
    return cells


def run_sweep(
    cells: Iterable[ExperimentConfig],
    state: ModelState | None = None,
    dataset: Dataset | None = None,
) -> list[dict]:
    cells = list(cells)
    if not cells:
        raise ConfigError("empty sweep")
    state = state if state is not None else load_checkpoint(_require(cells[0].checkpoint, "checkpoint"))
    dataset = dataset if dataset is not None else resolve_dataset(cells[0])
    cache: dict = {}
    rows = []
    for cell in cells:
        rows.extend(run_adapt_eval(cell, state, dataset, cache))
    return rows


def _require(value, what):
    if not value:
        raise ConfigError(f"no {what} given")
    return value


# --------------------------------------------------------------------------
# orderings
# --------------------------------------------------------------------------


def seed_means(rows: Iterable[dict], key: str = "label", corruption: str | None = None) -> dict:
    """Mean accuracy (in percent) per ``key`` value, optionally for one corruption."""
    groups: dict = {}
    for r in rows:
        name = f"{r['corruption']}:{r['severity']}" if r["severity"] else r["corruption"]
        if corruption is not None and corruption not in (name, r["corruption"]):
            continue
        groups.setdefault(r[key], []).append(100.0 * r["accuracy"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def ordering_failures(rows: Sequence[dict], axis: str) -> list[str]:
    """Directional checks on seed-mean accuracy; returns human-readable failures.

    ``method``: svwa >= tent - 0.5, tent >= source-only + 1, svwa >= source-only + 1
    per corruption.  ``nv``: V=12 >= V=2 - 0.3 with V=6 inside the band.
    ``variation_source``: sampling >= jitter - 0.5, >= rotation, >= flip.
    ``mode``: |parallel - sequential| <= 1.5.  All in percentage points.
    """
    failures = []
    corruptions = sorted({(r["corruption"], r["severity"]) for r in rows})
    for kind, severity in corruptions:
        name = f"{kind}:{severity}" if severity else kind
        sub = [r for r in rows if (r["corruption"], r["severity"]) == (kind, severity)]

        def check(ok, text):
            if not ok:
                failures.append(f"{name}: {text}")

        if axis == "method":
            m = seed_means(sub, "method")
            src, tent, svwa = m["source-only"], m["tent"], m["svwa"]
            check(svwa >= tent - 0.5, f"svwa {svwa:.2f} < tent {tent:.2f} - 0.5")
            check(tent >= src + 1.0, f"tent {tent:.2f} < source-only {src:.2f} + 1")
            check(svwa >= src + 1.0, f"svwa {svwa:.2f} < source-only {src:.2f} + 1")
        elif axis == "nv":
            m = seed_means([r for r in sub if r["method"] == "svwa"], "nv")
            lo, hi = m[2], m[12]
            check(hi >= lo - 0.3, f"V=12 {hi:.2f} < V=2 {lo:.2f} - 0.3")
            if 6 in m:
                check(lo - 0.3 <= m[6] <= hi + 0.3, f"V=6 {m[6]:.2f} outside [{lo:.2f}-0.3, {hi:.2f}+0.3]")
        elif axis == "variation_source":
            m = seed_means(sub, "variation_source")
            s = m["sampling"]
            check(s >= m["jitter"] - 0.5, f"sampling {s:.2f} < jitter {m['jitter']:.2f} - 0.5")
            for other in ("rotation", "flip"):
                check(s >= m[other], f"sampling {s:.2f} < {other} {m[other]:.2f}")
        elif axis == "mode":
            m = seed_means(sub, "mode")
            gap = abs(m["parallel"] - m["sequential"])
            check(gap <= 1.5, f"|parallel - sequential| = {gap:.2f} > 1.5")
        else:
            raise ConfigError(f"no ordering defined for axis {axis!r}")
    return failures


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def summary_table(rows: Sequence[dict]) -> tuple[list[str], list[list]]:
    """Labels x corruptions of seed-mean accuracy (%) plus a ``Mean`` column."""
    corruptions, labels = [], []
    for r in rows:
        name = f"{r['corruption']}:{r['severity']}" if r["severity"] else r["corruption"]
        if name not in corruptions:
            corruptions.append(name)
        if r["label"] not in labels:
            labels.append(r["label"])
    header = ["label", *corruptions, "Mean"]
    table = []
    for label in labels:
        line = [label]
        for c in corruptions:
            accs = [100.0 * r["accuracy"] for r in rows if r["label"] == label
                    and (f"{r['corruption']}:{r['severity']}" if r["severity"] else r["corruption"]) == c]
            line.append(float(np.mean(accs)) if accs else float("nan"))
        line.append(float(np.mean(line[1:])))
        table.append(line)
    return header, table


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean and standard deviation over repeats for every (label, corruption)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["label"], r["corruption"], r["severity"]), []).append(r["accuracy"])
    return [
        {"label": k[0], "corruption": k[1], "severity": k[2], "repeats": len(v),
         "mean": float(np.mean(v)), "std": float(np.std(v))}
        for k, v in groups.items()
    ]


def emit_report(rows: Sequence[dict], out_dir, fmt: str = "csv") -> list[Path]:
    """Write the long-format rows, a paper-shaped summary and per-cell aggregates.

    Timing goes to a separate ``timing.csv`` so the report files themselves
    are bitwise reproducible.
    """
    if not rows:
        raise ValueError("no rows to report")
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header, table = summary_table(rows)
    written = []
    if fmt == "csv":
        written.append(_write_csv(out / "results.csv", ROW_COLUMNS, [[r[c] for c in ROW_COLUMNS] for r in rows]))
        written.append(_write_csv(out / "summary.csv", header, table))
        agg = aggregate(rows)
        written.append(_write_csv(out / "aggregate.csv", list(agg[0]), [list(a.values()) for a in agg]))
    else:
        doc = {
            "rows": [{c: r[c] for c in ROW_COLUMNS} for r in rows],
            "summary": {"columns": header, "rows": table},
            "aggregate": aggregate(rows),
        }
        path = out / "results.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        written.append(path)
    if all("seconds" in r for r in rows):
        written.append(_write_csv(out / "timing.csv", ["label", "corruption", "repeat", "seconds"],
                                  [[r["label"], r["corruption"], r["repeat"], r["seconds"]] for r in rows]))
    return written


def _cell(value):
    return repr(value) if isinstance(value, float) else value


def _write_csv(path: Path, header, lines) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([_cell(v) for v in line] for line in lines)
    return path


def read_rows(path) -> list[dict]:
    """Rows of a ``results.csv`` or ``results.json`` with their original types."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())["rows"]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in _INT_COLUMNS:
            r[c] = int(r[c])
        for c in _FLOAT_COLUMNS:
            r[c] = float(r[c])
    return rows


def write_cell_configs(cells: Iterable[ExperimentConfig], out_dir) -> None:
    """Store each cell's resolved config under ``configs/<fingerprint>.cfg``."""
    folder = Path(out_dir) / "configs"
    folder.mkdir(parents=True, exist_ok=True)
    for cell in cells:
        cell.save(folder / f"{cell.fingerprint()}.cfg")
