"""Market data loading, repair, feature construction, and scaling.

A market CSV holds one row per hour with four columns: timestamp, price,
and two exogenous series (day-ahead forecasts of load, generation, wind,
or a neighbouring zone's load, depending on the market). Timestamps are
naive local clock readings, so daylight-saving transitions show up as a
duplicated hour (fall) or a missing hour (spring). :func:`parse_market_csv`
repairs both so every day has exactly 24 rows.

Model inputs are built per delivery day: for each configured super-variable
(a named series at a fixed day lag) the 24 hourly values of the lagged day,
plus optionally a single day-of-week integer. Targets are the 24 prices of
the delivery day itself.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import EpxaiError

__all__ = [
    "DataError",
    "MalformedRow",
    "EmptyInput",
    "NonHourlyCadence",
    "InsufficientHistory",
    "TooFewRows",
    "DimensionMismatch",
    "NonFiniteInput",
    "SOURCES",
    "SCALER_KINDS",
    "MARKET_IDS",
    "SuperVariable",
    "MarketConfig",
    "FeatureId",
    "HourlySeries",
    "FeatureMatrix",
    "ScalerParams",
    "parse_market_csv",
    "build_feature_matrix",
    "daily_price_matrix",
    "fit_scaler",
    "transform",
    "inverse_transform",
    "market_config",
    "market_config_to_dict",
    "market_config_from_dict",
    "series_to_csv",
]


class DataError(EpxaiError):
    """Base class for data-layer errors."""


class MalformedRow(DataError):
    """A CSV row that cannot be parsed; carries the 1-based line number."""

    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {reason}")


class EmptyInput(DataError):
    """No data rows at all."""


class NonHourlyCadence(DataError):
    """Timestamps that do not sit on an hourly grid even after repair."""


class InsufficientHistory(DataError):
    """Not enough leading days to satisfy the largest configured day lag."""


class TooFewRows(DataError):
    """Scaler fitting needs at least two rows."""


class DimensionMismatch(DataError):
    """Transform called with a different column count than the fit."""


class NonFiniteInput(DataError):
    """NaN or infinity where a finite value is required."""


SOURCES = ("price", "exog1", "exog2")
SCALER_KINDS = ("std", "median", "arcsinh")
MARKET_IDS = ("DE", "FR", "BE", "NP", "PJM")

DAY_OF_WEEK_LABEL = "Day of week"

# 1970-01-01 (day zero of the epoch) was a Thursday; Monday = 0.
_EPOCH_WEEKDAY = 3


@dataclass(frozen=True)
class SuperVariable:
    """One named input series at a fixed day lag.

    ``source`` is one of :data:`SOURCES`; ``day_lag`` counts days back from
    the delivery day (0 means the delivery day itself, which is valid for
    day-ahead forecasts published before delivery).
    """

    label: str
    source: str
    day_lag: int

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.day_lag < 0:
            raise ValueError("day_lag must be >= 0")


@dataclass(frozen=True)
class MarketConfig:
    """Which super-variables (and optionally day-of-week) feed the model."""

    market_id: str
    currency: str
    super_variables: tuple[SuperVariable, ...]
    include_day_of_week: bool = False

    def __post_init__(self):
        labels = [sv.label for sv in self.super_variables]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate super-variable labels")
        if not self.super_variables:
            raise ValueError("at least one super-variable required")

    @property
    def n_features(self) -> int:
        return 24 * len(self.super_variables) + (1 if self.include_day_of_week else 0)

    @property
    def max_day_lag(self) -> int:
        return max(sv.day_lag for sv in self.super_variables)


@dataclass(frozen=True, order=True)
class FeatureId:
    """A single model input: a super-variable at one hour, or day-of-week.

    ``hour`` is None only for the day-of-week column.
    """

    group: str
    hour: int | None

    def __str__(self) -> str:
        return self.group if self.hour is None else f"{self.group} H{self.hour}"


@dataclass(frozen=True)
class HourlySeries:
    """Contiguous hourly market data: price plus two exogenous series."""

    market_id: str
    timestamps: np.ndarray  # datetime64[h], strictly contiguous
    price: np.ndarray
    exog1: np.ndarray
    exog2: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        if n == 0:
            raise EmptyInput("series has no rows")
        for name in ("price", "exog1", "exog2"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != {n} timestamps")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"{name} contains non-finite values")
        hours = self.timestamps.astype("datetime64[h]").astype(np.int64)
        if n > 1 and not np.all(np.diff(hours) == 1):
            raise NonHourlyCadence("timestamps are not contiguous hourly")

    @property
    def n_hours(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-day model inputs and targets in raw (unscaled) units."""

    market_id: str
    instances: np.ndarray  # datetime64[D], one delivery day per row
    columns: tuple[FeatureId, ...]
    values: np.ndarray  # (n_instances, n_features)
    targets: np.ndarray  # (n_instances, 24) delivery-day prices
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.values.shape != (len(self.instances), len(self.columns)):
            raise ValueError("values shape does not match instances/columns")
        if self.targets.shape != (len(self.instances), 24):
            raise ValueError("targets must be (n_instances, 24)")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.columns)})

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def group_labels(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for c in self.columns:
            seen.setdefault(c.group, None)
        return tuple(seen)

    def column_index(self, feature: FeatureId) -> int:
        try:
            return self._index[feature]
        except KeyError:
            raise KeyError(f"no column {feature}") from None

    def instance_ids(self) -> list[str]:
        return [str(d) for d in self.instances]


@dataclass(frozen=True)
class ScalerParams:
    """Fitted per-column location/scale, tied to one scaler kind."""

    kind: str
    location: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.kind not in SCALER_KINDS:
            raise ValueError(f"unknown scaler kind {self.kind!r}")
        if self.location.shape != self.scale.shape or self.location.ndim != 1:
            raise ValueError("location and scale must be 1-D and equally long")

    @property
    def n_columns(self) -> int:
        return len(self.location)


_NA_TOKENS = {"", "na", "nan", "null", "none"}


def _parse_float(token: str, line_number: int, col: str) -> float:
    token = token.strip()
    if token.lower() in _NA_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise MalformedRow(line_number, f"bad {col} value {token!r}") from None


def _parse_timestamp(token: str) -> datetime:
    ts = datetime.fromisoformat(token.strip())
    if ts.tzinfo is not None:
        # Offsets are dropped: the series is treated as local clock time.
        ts = ts.replace(tzinfo=None)
    return ts


def parse_market_csv(raw_text: str, market_id: str) -> HourlySeries:
    """Parse a market CSV into a repaired, strictly hourly series.

    Expects four columns per row (timestamp, price, exog1, exog2) with an
    optional header. Duplicate timestamps are averaged, gaps and missing
    cells are filled by linear interpolation, so daylight-saving artefacts
    disappear. Raises :class:`MalformedRow` (with line number) on rows that
    cannot be parsed, :class:`EmptyInput` when no data rows exist, and
    :class:`NonHourlyCadence` when a timestamp is off the hourly grid.
    """
    rows: list[tuple[datetime, float, float, float]] = []
    reader = csv.reader(io.StringIO(raw_text))
    for line_number, fields in enumerate(reader, start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != 4:
            raise MalformedRow(line_number, f"expected 4 columns, got {len(fields)}")
        try:
            ts = _parse_timestamp(fields[0])
        except ValueError:
            if line_number == 1 and not rows:
                continue  # header row
            raise MalformedRow(
                line_number, f"bad timestamp {fields[0].strip()!r}"
            ) from None
        if ts.minute or ts.second or ts.microsecond:
            raise NonHourlyCadence(f"line {line_number}: {ts} is not on the hour")
        rows.append(
            (
                ts,
                _parse_float(fields[1], line_number, "price"),
                _parse_float(fields[2], line_number, "exog1"),
                _parse_float(fields[3], line_number, "exog2"),
            )
        )
    if not rows:
        raise EmptyInput("no data rows in CSV")

    rows.sort(key=lambda r: r[0])
    hours = np.array(
        [np.datetime64(r[0]) for r in rows], dtype="datetime64[h]"
    ).astype(np.int64)
    raw = np.array([r[1:] for r in rows], dtype=np.float64)

    # Average duplicated hours (fall transition repeats one local hour).
    uniq, inverse, counts = np.unique(hours, return_inverse=True, return_counts=True)
    summed = np.zeros((len(uniq), 3))
    mask = np.zeros((len(uniq), 3))
    finite = np.isfinite(raw)
    np.add.at(summed, inverse, np.where(finite, raw, 0.0))
    np.add.at(mask, inverse, finite.astype(np.float64))
    with np.errstate(invalid="ignore"):
        values = np.where(mask > 0, summed / np.where(mask > 0, mask, 1.0), np.nan)

    # Reindex onto the full hourly grid and interpolate the holes.
    full = np.arange(uniq[0], uniq[-1] + 1)
    grid = np.full((len(full), 3), np.nan)
    grid[uniq - uniq[0]] = values
    for c in range(3):
        col = grid[:, c]
        known = np.isfinite(col)
        if not np.any(known):
            raise EmptyInput(f"column {SOURCES[c]} has no usable values")
        grid[:, c] = np.interp(np.arange(len(full)), np.flatnonzero(known), col[known])

    return HourlySeries(
        market_id=market_id,
        timestamps=full.astype("datetime64[h]"),
        price=grid[:, 0],
        exog1=grid[:, 1],
        exog2=grid[:, 2],
    )


def series_to_csv(series: HourlySeries) -> str:
    """Render a repaired series back to canonical CSV text."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["timestamp", "price", "exog1", "exog2"])
    stamps = series.timestamps.astype("datetime64[s]")
    for i in range(series.n_hours):
        writer.writerow(
            [
                str(stamps[i]).replace("T", " "),
                repr(float(series.price[i])),
                repr(float(series.exog1[i])),
                repr(float(series.exog2[i])),
            ]
        )
    return out.getvalue()


def build_feature_matrix(series: HourlySeries, config: MarketConfig) -> FeatureMatrix:
    """Lay out per-day inputs (lagged 24-hour blocks) and 24-hour targets.

    The first usable delivery day is the first midnight-aligned day with
    ``config.max_day_lag`` full days of history before it. Raises
    :class:`InsufficientHistory` when no delivery day qualifies.
    """
    hours = series.timestamps.astype(np.int64)
    start = int((-hours[0]) % 24)  # first midnight-aligned index
    n_days = (series.n_hours - start) // 24
    max_lag = config.max_day_lag
    n_inst = n_days - max_lag
    if n_inst <= 0:
        raise InsufficientHistory(
            f"need more than {max_lag} full days, have {max(n_days, 0)}"
        )

    by_source = {
        "price": series.price,
        "exog1": series.exog1,
        "exog2": series.exog2,
    }
    day_blocks = {
        name: arr[start : start + n_days * 24].reshape(n_days, 24)
        for name, arr in by_source.items()
    }
    day_stamps = series.timestamps[start : start + n_days * 24 : 24].astype(
        "datetime64[D]"
    )

    columns: list[FeatureId] = []
    parts: list[np.ndarray] = []
    for sv in config.super_variables:
        offset = max_lag - sv.day_lag
        parts.append(day_blocks[sv.source][offset : offset + n_inst])
        columns.extend(FeatureId(sv.label, h) for h in range(24))
    if config.include_day_of_week:
        day_index = day_stamps[max_lag:].astype(np.int64)
        weekday = ((day_index + _EPOCH_WEEKDAY) % 7).astype(np.float64)
        parts.append(weekday[:, None])
        columns.append(FeatureId(DAY_OF_WEEK_LABEL, None))

    return FeatureMatrix(
        market_id=config.market_id,
        instances=day_stamps[max_lag:],
        columns=tuple(columns),
        values=np.hstack(parts),
        targets=day_blocks["price"][max_lag:].copy(),
    )


def daily_price_matrix(series: HourlySeries) -> tuple[np.ndarray, np.ndarray]:
    """Midnight-aligned full days as (dates, (n_days, 24) price matrix)."""
    hours = series.timestamps.astype(np.int64)
    start = int((-hours[0]) % 24)
    n_days = (series.n_hours - start) // 24
    if n_days < 1:
        raise InsufficientHistory("series holds no full midnight-aligned day")
    dates = series.timestamps[start : start + n_days * 24 : 24].astype("datetime64[D]")
    return dates, series.price[start : start + n_days * 24].reshape(n_days, 24).copy()


def fit_scaler(kind: str, values: np.ndarray) -> ScalerParams:
    """Fit per-column location/scale statistics.

    ``std`` uses mean and population standard deviation; ``median`` and
    ``arcsinh`` use median and median absolute deviation. Columns with zero
    spread get scale 1 so transforms stay defined.
    """
    if kind not in SCALER_KINDS:
        raise ValueError(f"unknown scaler kind {kind!r}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a 2-D array of rows x columns")
    if values.shape[0] < 2:
        raise TooFewRows(f"scaler fit needs >= 2 rows, got {values.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("scaler fit input contains non-finite values")
    if kind == "std":
        location = values.mean(axis=0)
        scale = values.std(axis=0)
    else:
        location = np.median(values, axis=0)
        scale = np.median(np.abs(values - location), axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    return ScalerParams(kind=kind, location=location, scale=scale)


def _check_columns(params: ScalerParams, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    n_cols = values.shape[-1] if values.ndim else 0
    if values.ndim not in (1, 2) or n_cols != params.n_columns:
        raise DimensionMismatch(
            f"expected {params.n_columns} columns, got shape {values.shape}"
        )
    return values


def transform(params: ScalerParams, values: np.ndarray) -> np.ndarray:
    """Map raw values to normalized units (rows or a single row)."""
    values = _check_columns(params, values)
    centred = (values - params.location) / params.scale
    if params.kind == "arcsinh":
        return np.arcsinh(centred)
    return centred


def inverse_transform(params: ScalerParams, values: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`transform`."""
    values = _check_columns(params, values)
    if params.kind == "arcsinh":
        values = np.sinh(values)
    return values * params.scale + params.location


def _sv(label: str, source: str, day_lag: int) -> SuperVariable:
    return SuperVariable(label=label, source=source, day_lag=day_lag)


_MARKET_PRESETS: dict[str, MarketConfig] = {
    # exog1/exog2 meanings follow the benchmark datasets for each market.
    "DE": MarketConfig(
        market_id="DE",
        currency="EUR",
        super_variables=(
            _sv("Price D-1", "price", 1),
            _sv("Price D-2", "price", 2),
            _sv("Price D-3", "price", 3),
            _sv("Price D-7", "price", 7),
            _sv("Load Forecast D", "exog1", 0),
            _sv("Load Forecast D-1", "exog1", 1),
            _sv("Load Forecast D-7", "exog1", 7),
            _sv("Renewable Forecast D", "exog2", 0),
            _sv("Renewable Forecast D-1", "exog2", 1),
        ),
        include_day_of_week=True,
    ),
    "FR": MarketConfig(
        market_id="FR",
        currency="EUR",
        super_variables=(
            _sv("Price D-1", "price", 1),
            _sv("Price D-3", "price", 3),
            _sv("Load Forecast D", "exog1", 0),
            _sv("Generation Forecast D", "exog2", 0),
            _sv("Generation Forecast D-1", "exog2", 1),
        ),
        include_day_of_week=False,
    ),
    "BE": MarketConfig(
        market_id="BE",
        currency="EUR",
        super_variables=(
            _sv("Price D-1", "price", 1),
            _sv("French Load Forecast D", "exog1", 0),
            _sv("French Load Forecast D-7", "exog1", 7),
            _sv("French Generation Forecast D", "exog2", 0),
            _sv("French Generation Forecast D-1", "exog2", 1),
        ),
        include_day_of_week=True,
    ),
    "NP": MarketConfig(
        market_id="NP",
        currency="EUR",
        super_variables=(
            _sv("Price D-1", "price", 1),
            _sv("Price D-2", "price", 2),
            _sv("Load Forecast D", "exog1", 0),
            _sv("Load Forecast D-1", "exog1", 1),
            _sv("Wind Forecast D", "exog2", 0),
            _sv("Wind Forecast D-1", "exog2", 1),
        ),
        include_day_of_week=False,
    ),
    "PJM": MarketConfig(
        market_id="PJM",
        currency="USD",
        super_variables=(
            _sv("Price D-1", "price", 1),
            _sv("PJM Load Forecast D", "exog1", 0),
            _sv("PJM Load Forecast D-1", "exog1", 1),
            _sv("ComEd Load Forecast D", "exog2", 0),
            _sv("ComEd Load Forecast D-1", "exog2", 1),
        ),
        include_day_of_week=False,
    ),
}


def market_config(market_id: str) -> MarketConfig:
    """Built-in configuration for one of the five benchmark markets."""
    try:
        return _MARKET_PRESETS[market_id]
    except KeyError:
        raise ValueError(
            f"unknown market {market_id!r}; expected one of {MARKET_IDS}"
        ) from None


def market_config_to_dict(config: MarketConfig) -> dict:
    return {
        "market_id": config.market_id,
        "currency": config.currency,
        "include_day_of_week": config.include_day_of_week,
        "super_variables": [
            {"label": sv.label, "source": sv.source, "day_lag": sv.day_lag}
            for sv in config.super_variables
        ],
    }


def market_config_from_dict(payload: dict) -> MarketConfig:
    """Build a MarketConfig from its JSON form; raises ValueError on bad shape."""
    try:
        svs = tuple(
            SuperVariable(
                label=str(entry["label"]),
                source=str(entry["source"]),
                day_lag=int(entry["day_lag"]),
            )
            for entry in payload["super_variables"]
        )
        return MarketConfig(
            market_id=str(payload["market_id"]),
            currency=str(payload.get("currency", "EUR")),
            super_variables=svs,
            include_day_of_week=bool(payload.get("include_day_of_week", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad market config: {exc}") from exc
