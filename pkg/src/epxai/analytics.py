"""Aggregated views of attributions plus forecast quality and model metrics.

Heatmaps condense an attribution tensor into 24x24 blocks (output hour by
input hour, one block per hourly super-variable); rankings order features
or groups by mean absolute contribution; performance metrics follow the
benchmark definitions, with the naive yesterday-forecast as the scale for
the relative MAE; complexity metrics summarise how non-linear and how
hour-inhomogeneous a trained forecaster is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import AttributionTensor
from .data import HourlySeries, InsufficientHistory, NonFiniteInput, daily_price_matrix
from .errors import EpxaiError
from .mlp import TooFewInstances
from .sshap import SshapTensor

__all__ = [
    "AnalyticsError",
    "EmptyTensor",
    "LengthMismatch",
    "ZeroNaiveError",
    "HeatmapGrid",
    "ImportanceTable",
    "BeeswarmRow",
    "BeeswarmTable",
    "PerformanceReport",
    "NaiveForecast",
    "ComplexityReport",
    "heatmap",
    "hourly_importance",
    "beeswarm_table",
    "performance_metrics",
    "naive_forecast",
    "complexity_metrics",
]

HEATMAP_AGGREGATIONS = ("mean_abs", "mean", "single")


class AnalyticsError(EpxaiError):
    """Base class for analytics-layer errors."""


class EmptyTensor(AnalyticsError):
    """Aggregation over an empty instance axis (or no hourly blocks)."""


class LengthMismatch(AnalyticsError):
    """Prediction and actual arrays of different shapes."""


class ZeroNaiveError(AnalyticsError):
    """Naive forecast matches actuals exactly; relative MAE undefined."""


@dataclass
class HeatmapGrid:
    """Per-group 24x24 maps; ``values[b, output_hour, input_hour]``."""

    kind: str  # tensor kind the grid was built from
    aggregation: str
    blocks: tuple  # group labels, one per block
    values: np.ndarray  # (n_blocks, 24, 24)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block(self, label: str) -> np.ndarray:
        try:
            return self.values[self.blocks.index(label)]
        except ValueError:
            raise KeyError(f"no block {label!r}") from None


@dataclass
class ImportanceTable:
    """Mean absolute group value per output hour: ``values[hour, group]``."""

    groups: tuple
    values: np.ndarray  # (24, n_groups)


@dataclass
class BeeswarmRow:
    """One ranked feature with its per-instance points.

    ``shap_values[i, h]`` pairs with ``feature_values[i]`` repeated over
    the 24 output hours.
    """

    feature: object  # FeatureId
    score: float
    feature_values: np.ndarray  # (n_instances,)
    shap_values: np.ndarray  # (n_instances, 24)


@dataclass
class BeeswarmTable:
    rows: list
    instance_ids: list
    n_features_total: int


@dataclass
class PerformanceReport:
    mae: float
    rmae: float
    smape: float
    rmse: float
    n_observations: int


@dataclass
class NaiveForecast:
    """Yesterday's 24 prices replayed as today's forecast."""

    days: np.ndarray  # datetime64[D]
    predicted: np.ndarray  # (n_days, 24)
    actual: np.ndarray  # (n_days, 24)


@dataclass
class ComplexityReport:
    non_linearity: float
    non_homogeneity: float
    important_vars_per_hour: float
    threshold: float


def _hourly_blocks(tensor: AttributionTensor):
    """Ordered (label, column index array) for groups holding hours 0-23."""
    by_group: dict = {}
    for j, fid in enumerate(tensor.feature_ids):
        if fid.hour is not None:
            by_group.setdefault(fid.group, {})[fid.hour] = j
    blocks = []
    for label, hours in by_group.items():
        if sorted(hours) == list(range(24)):
            blocks.append((label, np.array([hours[h] for h in range(24)])))
    return blocks


def heatmap(
    tensor: AttributionTensor, aggregation: str = "mean_abs", instance=None
) -> HeatmapGrid:
    """24x24 blocks per hourly group, aggregated across instances.

    ``mean_abs`` averages magnitudes, ``mean`` keeps signs, ``single``
    takes one instance (by position or instance id). Features without an
    hour (day-of-week) have no place on an hour-by-hour map and are
    skipped.
    """
    if aggregation not in HEATMAP_AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    blocks = _hourly_blocks(tensor)
    if not blocks:
        raise EmptyTensor("tensor has no full hourly groups to map")
    if aggregation == "single":
        if instance is None:
            raise ValueError("aggregation 'single' needs an instance")
        if isinstance(instance, str):
            try:
                idx = tensor.instance_ids.index(instance)
            except ValueError:
                raise KeyError(f"no instance {instance!r}") from None
        else:
            idx = int(instance)
            if not -tensor.n_instances <= idx < tensor.n_instances:
                raise KeyError(f"instance index {idx} out of range")
        source = tensor.values[idx]
    else:
        if tensor.n_instances == 0:
            raise EmptyTensor(f"cannot take {aggregation} over zero instances")
        if aggregation == "mean_abs":
            source = np.abs(tensor.values).mean(axis=0)
        else:
            source = tensor.values.mean(axis=0)

    values = np.stack([source[:, cols] for _, cols in blocks])
    return HeatmapGrid(
        kind=tensor.kind,
        aggregation=aggregation,
        blocks=tuple(label for label, _ in blocks),
        values=values,
    )


def hourly_importance(sshap: SshapTensor) -> ImportanceTable:
    """Mean absolute grouped value per output hour, across instances."""
    if sshap.n_instances == 0:
        raise EmptyTensor("no instances to average")
    return ImportanceTable(
        groups=sshap.partition.labels,
        values=np.abs(sshap.values).mean(axis=0),
    )


def beeswarm_table(
    tensor: AttributionTensor, feature_values: np.ndarray, top_k: int = 20
) -> BeeswarmTable:
    """Top features by mean |value| over instances and output hours.

    Ties rank by feature position, so equal scores never reshuffle between
    runs. Each retained row carries every instance's feature value and its
    24 per-hour attribution values.
    """
    if tensor.n_instances == 0:
        raise EmptyTensor("no instances to rank")
    feature_values = np.asarray(feature_values, dtype=np.float64)
    if feature_values.shape != (tensor.n_instances, len(tensor.feature_ids)):
        raise LengthMismatch(
            f"feature_values shape {feature_values.shape} does not match tensor"
        )
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = np.abs(tensor.values).mean(axis=(0, 1))
    order = np.lexsort((np.arange(len(scores)), -scores))[:top_k]
    rows = [
        BeeswarmRow(
            feature=tensor.feature_ids[j],
            score=float(scores[j]),
            feature_values=feature_values[:, j].copy(),
            shap_values=tensor.values[:, :, j].copy(),
        )
        for j in order
    ]
    return BeeswarmTable(
        rows=rows,
        instance_ids=list(tensor.instance_ids),
        n_features_total=len(tensor.feature_ids),
    )


def performance_metrics(
    predicted: np.ndarray, actual: np.ndarray, naive_predicted: np.ndarray
) -> PerformanceReport:
    """MAE, relative MAE, symmetric MAPE, and RMSE over flattened hours.

    The relative MAE divides by the naive forecast's MAE on the same rows;
    symmetric MAPE terms with both values zero count as zero error.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    naive_predicted = np.asarray(naive_predicted, dtype=np.float64)
    if predicted.shape != actual.shape or naive_predicted.shape != actual.shape:
        raise LengthMismatch(
            f"shapes differ: predicted {predicted.shape}, actual {actual.shape}, "
            f"naive {naive_predicted.shape}"
        )
    if predicted.size == 0:
        raise LengthMismatch("no observations")
    for name, arr in (("predicted", predicted), ("actual", actual),
                      ("naive", naive_predicted)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput(f"{name} contains non-finite values")

    err = np.abs(predicted - actual)
    mae = float(err.mean())
    rmse = float(np.sqrt(np.mean((predicted - actual) ** 2)))
    denom = np.abs(predicted) + np.abs(actual)
    terms = np.where(denom > 0.0, 2.0 * err / np.where(denom > 0.0, denom, 1.0), 0.0)
    smape = float(terms.mean())
    naive_mae = float(np.abs(naive_predicted - actual).mean())
    if naive_mae == 0.0:
        raise ZeroNaiveError("naive forecast is perfect; relative MAE undefined")
    return PerformanceReport(
        mae=mae,
        rmae=mae / naive_mae,
        smape=smape,
        rmse=rmse,
        n_observations=int(predicted.size),
    )


def naive_forecast(series: HourlySeries) -> NaiveForecast:
    """Persistence forecast: each day predicted by the previous day's prices."""
    dates, prices = daily_price_matrix(series)
    if len(dates) < 2:
        raise InsufficientHistory("naive forecast needs at least 2 full days")
    return NaiveForecast(
        days=dates[1:], predicted=prices[:-1].copy(), actual=prices[1:].copy()
    )


def _population_std_exact_zero(values: np.ndarray) -> np.ndarray:
    """Across-instance std per entry; exactly 0.0 for constant entries.

    Centring on the first instance makes identical entries subtract to
    bitwise zero before any averaging, so a linear model (whose Jacobian
    does not depend on the instance) reports exactly zero spread instead
    of accumulated rounding noise.
    """
    centred = values - values[0]
    mean = centred.mean(axis=0)
    return np.sqrt(((centred - mean) ** 2).mean(axis=0))


def complexity_metrics(
    grad_tensor: AttributionTensor, shap_grid: HeatmapGrid, threshold: float = 0.5
) -> ComplexityReport:
    """Model complexity summary.

    Non-linearity: mean across-instance standard deviation of the Jacobian
    entries (zero exactly for a linear model). Non-homogeneity: mean
    absolute difference between horizontally and vertically neighbouring
    cells inside each heatmap block. Important variables per hour: heatmap
    cells above ``threshold``, divided by 24.
    """
    if grad_tensor.kind != "gradient":
        raise ValueError(f"need a gradient tensor, got {grad_tensor.kind!r}")
    if grad_tensor.n_instances < 2:
        raise TooFewInstances("non-linearity needs at least 2 instances")
    non_linearity = float(_population_std_exact_zero(grad_tensor.values).mean())

    blocks = shap_grid.values
    horizontal = np.abs(blocks[:, :, 1:] - blocks[:, :, :-1])
    vertical = np.abs(blocks[:, 1:, :] - blocks[:, :-1, :])
    non_homogeneity = float(
        (horizontal.sum() + vertical.sum()) / (horizontal.size + vertical.size)
    )
    important = float(np.count_nonzero(blocks > threshold) / 24.0)
    return ComplexityReport(
        non_linearity=non_linearity,
        non_homogeneity=non_homogeneity,
        important_vars_per_hour=important,
        threshold=float(threshold),
    )
