"""CSV ingestion, lagged feature construction, configs and ledger files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .allocation import MarketDesign
from .bayes import Dataset
from .errors import ConfigurationError, InvalidArgument, ParseError, ValidationError
from .market import STAGES, AgentRegistry, ClearingResult

MISSING = {"", "na", "nan", "null", "none"}


# ---------------------------------------------------------------------------
# atomic output


def atomic_write(path, data: str | bytes):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def fmt(value) -> str:
    """Decimal text that parses back to the identical float."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return "" if value is None else str(value)


def write_table(rows: list[dict], path, columns=None):
    """Tidy CSV table; columns default to first-seen key order."""
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    atomic_write(path, buf.getvalue())


def write_json(obj, path):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# raw series


@dataclass(frozen=True)
class RawSeriesTable:
    timestamps: tuple[datetime, ...]
    entities: tuple[str, ...]
    values: np.ndarray
    dropped: int = 0
    gap: np.ndarray | None = None
    step: float | None = None

    def __len__(self):
        return len(self.timestamps)

    def column(self, entity: str) -> np.ndarray:
        return self.values[:, self.entities.index(entity)]


def _parse_time(text: str, line: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"invalid timestamp {text!r}", line) from None


def ingest_csv(path, schema: dict | None = None) -> RawSeriesTable:
    """Read a timestamp column plus one numeric column per entity.

    ``schema`` may name the ``timestamp`` column and restrict ``entities``;
    by default the first column holds timestamps and every other column is an
    entity. Rows with a missing cell are dropped and counted. A row is
    flagged in ``gap`` when its distance to the previous kept row exceeds
    the smallest step in the file.
    """
    schema = schema or {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", 1) from None
        header = [h.strip() for h in header]
        if len(header) < 1 or any(not h for h in header) or len(set(header)) != len(header):
            raise ParseError("malformed header", 1)
        ts_name = schema.get("timestamp", header[0])
        if ts_name not in header:
            raise ParseError(f"timestamp column {ts_name!r} not in header", 1)
        entities = tuple(schema.get("entities") or [h for h in header if h != ts_name])
        missing_cols = [e for e in entities if e not in header]
        if missing_cols:
            raise ParseError(f"columns {missing_cols} not in header", 1)
        ts_idx = header.index(ts_name)
        idx = [header.index(e) for e in entities]
        stamps, rows, dropped = [], [], 0
        for cells in reader:
            line = reader.line_num
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(cells)}", line)
            stamp = _parse_time(cells[ts_idx], line)
            if stamps and stamp <= stamps[-1]:
                raise ValidationError(f"timestamps not strictly increasing at line {line}")
            raw = [cells[j].strip() for j in idx]
            if any(c.lower() in MISSING for c in raw):
                dropped += 1
                stamps.append(stamp)
                rows.append(None)
                continue
            try:
                vals = [float(c) for c in raw]
            except ValueError:
                raise ParseError("non-numeric cell", line) from None
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"non-finite value at line {line}")
            stamps.append(stamp)
            rows.append(vals)
    kept = [(s, r) for s, r in zip(stamps, rows) if r is not None]
    all_diffs = [(b - a).total_seconds() for a, b in zip(stamps, stamps[1:])]
    step = min(all_diffs) if all_diffs else None
    times = tuple(s for s, _ in kept)
    gap = np.zeros(len(kept), dtype=bool)
    if step is not None:
        for i in range(1, len(times)):
            gap[i] = (times[i] - times[i - 1]).total_seconds() > step
    values = np.array([r for _, r in kept], dtype=float).reshape(len(kept), len(entities))
    return RawSeriesTable(times, entities, values, dropped, gap, step)


# ---------------------------------------------------------------------------
# lagged design


@dataclass(frozen=True)
class ReplaySpec:
    target: str
    lag: int = 1
    owners: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.lag) != self.lag or self.lag < 1:
            raise InvalidArgument("lag order must be a positive integer")


class LaggedData(NamedTuple):
    data: Dataset
    registry: AgentRegistry
    gap: np.ndarray


def build_lagged_dataset(table: RawSeriesTable, spec: ReplaySpec) -> LaggedData:
    """Lagged design for forecasting ``spec.target``.

    Input columns are lags ``1..lag`` of the target (owned by the central
    agent) followed by the same lags of every other entity (each owned by
    that entity's agent). The first ``lag`` rows have no lagged values and
    are dropped. Lags are positional, so after a gap they come from the
    previous available row; such rows are marked in ``gap``.
    """
    if spec.target not in table.entities:
        raise InvalidArgument(f"target {spec.target!r} not in table")
    n = len(table)
    if spec.lag >= n:
        raise InvalidArgument(f"lag {spec.lag} needs more than {n} rows")
    order = [spec.target] + [e for e in table.entities if e != spec.target]
    cols, names = [], []
    for e in order:
        series = table.column(e)
        for l in range(1, spec.lag + 1):
            cols.append(series[spec.lag - l:n - l])
            names.append(f"{e}_lag{l}")
    x = np.column_stack(cols)
    y = table.column(spec.target)[spec.lag:]
    stamps = np.array(table.timestamps[spec.lag:], dtype="datetime64[s]")
    data = Dataset(x, y, tuple(names), stamps)
    owner = lambda e: spec.owners.get(e, e)
    central_cols = tuple(range(1, spec.lag + 1))
    supports = {}
    for k, e in enumerate(order[1:], start=1):
        supports.setdefault(owner(e), ())
        supports[owner(e)] += tuple(1 + k * spec.lag + l for l in range(spec.lag))
    registry = AgentRegistry(owner(spec.target), central_cols, supports)
    gap = np.zeros(len(y), dtype=bool)
    if table.gap is not None:
        g = np.asarray(table.gap)
        for l in range(spec.lag):
            gap |= g[spec.lag - l:n - l]
    return LaggedData(data, registry, gap)


# ---------------------------------------------------------------------------
# ledgers


def ledger_columns(registry: AgentRegistry) -> list[str]:
    return (["t", "stage", "design", "pi_c"]
            + [f"pi_a:{a}" for a in registry.agents]
            + [f"E_phi:x{f}" for f in registry.support_features])


def ledger_records(result: ClearingResult) -> tuple[list[str], list[list]]:
    cols = ledger_columns(result.registry)
    records = []
    for r in result.rows:
        rec = [int(r.t), r.stage, r.design.value, float(r.pi_c)]
        rec += [float(r.pi_a.get(a, 0.0)) for a in result.registry.agents]
        rec += [float(r.expected_shapley.get(f, 0.0)) for f in result.registry.support_features]
        records.append(rec)
    return cols, records


def write_ledger(result: ClearingResult, path, format: str | None = None):
    fmt_ = (format or Path(path).suffix.lstrip(".") or "csv").lower()
    cols, records = ledger_records(result)
    if fmt_ == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in records:
            w.writerow([fmt(v) for v in rec])
        atomic_write(path, buf.getvalue())
    elif fmt_ == "json":
        write_json({"columns": cols, "rows": records}, path)
    else:
        raise InvalidArgument(f"unknown ledger format {fmt_!r}")


@dataclass(frozen=True)
class LedgerTable:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]


def _typed(col: str, value):
    if col == "t":
        return int(value)
    if col in ("stage", "design"):
        return str(value)
    return float(value)


def read_ledger(path, format: str | None = None) -> LedgerTable:
    fmt_ = (format or Path(path).suffix.lstrip(".") or "csv").lower()
    if fmt_ == "json":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        cols, raw = obj["columns"], obj["rows"]
    elif fmt_ == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            cols = next(reader)
            raw = list(reader)
    else:
        raise InvalidArgument(f"unknown ledger format {fmt_!r}")
    rows = tuple(tuple(_typed(c, v) for c, v in zip(cols, r)) for r in raw)
    return LedgerTable(tuple(cols), rows)


# ---------------------------------------------------------------------------
# quarterly summary


def _quarter(stamp) -> str:
    d = np.datetime64(stamp, "M").astype(object)
    return f"{d.year}Q{(d.month - 1) // 3 + 1}"


def quarterly_summary(result: ClearingResult, timestamps, entity: str) -> list[dict]:
    """Relative NLL improvement of the grand coalition over the central model per quarter.

    ``improvement`` is ``(mean l_central - mean l_grand) / |mean l_central|``
    over the steps of each calendar quarter, per stage.
    """
    from .scoring import nll
    from .bayes import PredictiveDistribution

    stamps = np.asarray(timestamps)
    out = []
    for stage in STAGES:
        log_ = result.predictions.get(stage)
        if log_ is None or not len(log_["t"]):
            continue
        grand = log_["mean"].shape[1] - 1
        l_c = nll(PredictiveDistribution(log_["mean"][:, 0], log_["precision"][:, 0]), log_["y"])
        l_g = nll(PredictiveDistribution(log_["mean"][:, grand], log_["precision"][:, grand]),
                  log_["y"])
        quarters = [_quarter(stamps[t]) for t in log_["t"]]
        for q in sorted(set(quarters)):
            sel = np.array([x == q for x in quarters])
            c = math.fsum(np.atleast_1d(l_c)[sel]) / sel.sum()
            g = math.fsum(np.atleast_1d(l_g)[sel]) / sel.sum()
            out.append(dict(entity=entity, quarter=q, stage=stage, n=int(sel.sum()),
                            nll_central=c, nll_grand=g,
                            improvement=(c - g) / abs(c) if c else 0.0))
    return out


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "design": "blr_nll",
    "tau": 1.0,
    "lambda_in": 1.0,
    "lambda_out": 1.0,
    "xi": 1.0,
    "gamma": 1e-6,
    "alpha": 0.05,
    "seed": 0,
}

KNOWN = set(DEFAULTS) | {
    "experiments", "setup", "replay", "audit",
    "traces", "calibration", "convergence", "risk", "tracking", "truthfulness", "moments",
}


def load_config(path=None, defaults: dict | None = None) -> dict:
    """Parse a JSON config (or a manifest holding one under ``config``).

    Keys absent from the file take their values from ``defaults``.
    """
    cfg = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        if not isinstance(cfg, dict):
            raise ConfigurationError("config must be a JSON object")
        if "config" in cfg and "files" in cfg:
            cfg = cfg["config"]
    unknown = set(cfg) - KNOWN
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    merged = dict(DEFAULTS if defaults is None else defaults, **cfg)
    validate_config(merged)
    return merged


def validate_config(cfg: dict):
    try:
        MarketDesign.parse(cfg["design"])
    except InvalidArgument as exc:
        raise ConfigurationError(str(exc)) from None
    checks = [
        ("tau", lambda v: 0.0 <= v <= 1.0),
        ("lambda_in", lambda v: v >= 0),
        ("lambda_out", lambda v: v >= 0),
        ("xi", lambda v: v > 0),
        ("gamma", lambda v: v > 0),
        ("alpha", lambda v: 0.0 < v < 1.0),
    ]
    for key, ok in checks:
        v = cfg[key]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not ok(v):
            raise ConfigurationError(f"invalid value for {key}: {v!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigurationError("seed must be a nonnegative integer")
