"""Grouped Shapley values over super-variable partitions.

A trained forecaster sees hundreds of hourly inputs, but analysts reason
about a handful of named series (yesterday's price curve, today's load
forecast, ...). Summing the per-feature Shapley values of each group in a
partition yields one value per group that keeps the additivity property:
group values still sum to the prediction minus the baseline, because the
regrouping only re-brackets the same sum.

On top of the grouped values this module provides hour-range splitting of a
group (e.g. early-morning vs rest-of-day load), kernel-smoothed curves of
group value against the realised price, and a consistency check that the
summed curves follow the identity line implied by additivity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import AttributionTensor
from .data import DAY_OF_WEEK_LABEL, FeatureId, MarketConfig
from .errors import EpxaiError

__all__ = [
    "SshapError",
    "PartitionMismatch",
    "UnknownGroup",
    "NotHourlyGroup",
    "EmptyData",
    "GridMismatch",
    "Partition",
    "SshapTensor",
    "SshapLine",
    "SlopeCheck",
    "default_partition",
    "merge_groups",
    "split_group",
    "aggregate",
    "sshap_line",
    "slope_check",
]


class SshapError(EpxaiError):
    """Base class for grouped-attribution errors."""


class PartitionMismatch(SshapError):
    """Partition does not cover the tensor's features exactly."""


class UnknownGroup(SshapError):
    """No group with the requested label."""


class NotHourlyGroup(SshapError):
    """Operation needs a group holding exactly hours 0-23 of one series."""


class EmptyData(SshapError):
    """No observations (or no usable points) for the requested curve."""


class GridMismatch(SshapError):
    """Curves evaluated on different grids cannot be combined."""


# exp(-x) underflows to zero in float64 near x = 745; past this squared
# half-distance even the closest observation carries no weight.
_UNDERFLOW = 709.0

LINE_MODES = ("pooled", "daily_mean")


@dataclass(frozen=True)
class Partition:
    """Ordered, disjoint grouping of feature ids under unique labels."""

    groups: tuple  # of (label, tuple[FeatureId, ...])

    def __post_init__(self):
        labels = [label for label, _ in self.groups]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate group labels")
        seen: set[FeatureId] = set()
        for label, members in self.groups:
            if not members:
                raise ValueError(f"group {label!r} is empty")
            for fid in members:
                if fid in seen:
                    raise ValueError(f"feature {fid} appears in two groups")
                seen.add(fid)

    @property
    def labels(self) -> tuple:
        return tuple(label for label, _ in self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def members(self, label: str):
        for got, members in self.groups:
            if got == label:
                return members
        raise UnknownGroup(f"no group labelled {label!r}")

    def all_features(self) -> set:
        return {fid for _, members in self.groups for fid in members}


@dataclass
class SshapTensor:
    """Grouped Shapley values: (n_instances, 24, n_groups) plus baseline."""

    instance_ids: list
    partition: Partition
    values: np.ndarray
    baseline: np.ndarray

    def __post_init__(self):
        n, h, g = self.values.shape
        if n != len(self.instance_ids) or h != 24 or g != self.partition.n_groups:
            raise ValueError("values must be (n_instances, 24, n_groups)")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    def group_index(self, label: str) -> int:
        try:
            return self.partition.labels.index(label)
        except ValueError:
            raise UnknownGroup(f"no group labelled {label!r}") from None


@dataclass
class SshapLine:
    """Kernel-smoothed curve of a group's value against realised price.

    ``values`` has NaN wherever no observation kept nonzero kernel weight.
    """

    group: str
    mode: str
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    n_observations: int


@dataclass
class SlopeCheck:
    """Least-squares fit of summed curves against the identity line."""

    slope: float
    intercept: float
    max_deviation: float
    n_points: int


def default_partition(config: MarketConfig) -> Partition:
    """One group per super-variable, day-of-week as its own singleton."""
    groups = [
        (sv.label, tuple(FeatureId(sv.label, h) for h in range(24)))
        for sv in config.super_variables
    ]
    if config.include_day_of_week:
        groups.append((DAY_OF_WEEK_LABEL, (FeatureId(DAY_OF_WEEK_LABEL, None),)))
    return Partition(groups=tuple(groups))


def merge_groups(partition: Partition, new_label: str, labels) -> Partition:
    """Fuse several groups into one, keeping the first one's position."""
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError("merging needs at least two group labels")
    for label in labels:
        partition.members(label)  # raises UnknownGroup
    merged = tuple(
        fid for label in labels for fid in partition.members(label)
    )
    groups: list = []
    for label, members in partition.groups:
        if label == labels[0]:
            groups.append((new_label, merged))
        elif label not in labels:
            groups.append((label, members))
    return Partition(groups=tuple(groups))


def split_group(partition: Partition, label: str, split_hour: int) -> Partition:
    """Split an hourly group into H0-H(s-1) and Hs-H23 halves in place.

    The group must hold exactly hours 0-23 of one series; day-of-week and
    already-split groups do not qualify.
    """
    members = partition.members(label)
    hours = sorted(m.hour for m in members if m.hour is not None)
    if len(members) != 24 or hours != list(range(24)):
        raise NotHourlyGroup(f"group {label!r} does not hold exactly hours 0-23")
    if not 1 <= split_hour <= 23:
        raise ValueError("split_hour must be in 1..23 so both halves are nonempty")
    early_label = f"{label} H0-H{split_hour - 1}"
    late_label = f"{label} H{split_hour}-H23"
    early = tuple(m for m in members if m.hour < split_hour)
    late = tuple(m for m in members if m.hour >= split_hour)
    groups: list = []
    for got, got_members in partition.groups:
        if got == label:
            groups.append((early_label, early))
            groups.append((late_label, late))
        else:
            groups.append((got, got_members))
    return Partition(groups=tuple(groups))


def aggregate(tensor: AttributionTensor, partition: Partition) -> SshapTensor:
    """Sum per-feature Shapley values into per-group values.

    The partition must cover the tensor's features exactly; within a group,
    features are summed in tensor column order so results do not depend on
    how the partition was written down.
    """
    if tensor.kind != "shap":
        raise ValueError(f"can only aggregate shap tensors, got {tensor.kind!r}")
    tensor_features = set(tensor.feature_ids)
    partition_features = partition.all_features()
    if tensor_features != partition_features:
        missing = tensor_features - partition_features
        extra = partition_features - tensor_features
        raise PartitionMismatch(
            f"partition misses {len(missing)} tensor features, "
            f"adds {len(extra)} unknown ones"
        )
    column_of = {fid: j for j, fid in enumerate(tensor.feature_ids)}
    values = np.empty((tensor.values.shape[0], 24, partition.n_groups))
    for g, (_, members) in enumerate(partition.groups):
        cols = sorted(column_of[fid] for fid in members)
        values[:, :, g] = tensor.values[:, :, cols].sum(axis=2)
    return SshapTensor(
        instance_ids=list(tensor.instance_ids),
        partition=partition,
        values=values,
        baseline=tensor.baseline.copy(),
    )


def _line_observations(sshap: SshapTensor, g: int, actual_prices, hours):
    prices = np.asarray(actual_prices, dtype=np.float64)
    if prices.shape != (sshap.n_instances, 24):
        raise ValueError(
            f"actual_prices must be ({sshap.n_instances}, 24), got {prices.shape}"
        )
    if hours == "pooled":
        return prices.ravel(), sshap.values[:, :, g].ravel()
    if hours == "daily_mean":
        return prices.mean(axis=1), sshap.values[:, :, g].mean(axis=1)
    if isinstance(hours, (int, np.integer)) and 0 <= int(hours) < 24:
        h = int(hours)
        return prices[:, h], sshap.values[:, h, g]
    raise ValueError(f"hours must be 'pooled', 'daily_mean', or 0..23, got {hours!r}")


def sshap_line(
    sshap: SshapTensor,
    group: str,
    actual_prices: np.ndarray,
    hours="pooled",
    bandwidth: float = 5.0,
    grid: np.ndarray | None = None,
    grid_size: int = 200,
) -> SshapLine:
    """Gaussian-kernel regression of a group's values on realised prices.

    Observations are (price, group value) pairs: one per instance and
    output hour when ``hours`` is "pooled", one per instance at a single
    output hour when ``hours`` is 0..23, or daily means when ``hours`` is
    "daily_mean". The default grid spans the 1st to 99th percentile of the
    observed prices with ``grid_size`` points. Grid points where every
    observation's kernel weight underflows to zero are returned as NaN.
    """
    if bandwidth <= 0.0:
        raise ValueError("bandwidth must be positive")
    g = sshap.group_index(group)
    x, v = _line_observations(sshap, g, actual_prices, hours)
    if x.size == 0:
        raise EmptyData("no observations to smooth")
    if grid is None:
        lo, hi = np.percentile(x, [1.0, 99.0])
        grid = np.linspace(lo, hi, grid_size)
    else:
        grid = np.asarray(grid, dtype=np.float64)

    half_sq = 0.5 * ((grid[:, None] - x[None, :]) / bandwidth) ** 2
    nearest = half_sq.min(axis=1)
    # Shift by the per-point minimum so the close observations keep full
    # precision; the shift cancels in the weighted mean.
    weights = np.exp(-(half_sq - nearest[:, None]))
    curve = (weights @ v) / weights.sum(axis=1)
    curve = np.where(nearest >= _UNDERFLOW, np.nan, curve)
    return SshapLine(
        group=group,
        mode=str(hours),
        grid=grid,
        values=curve,
        bandwidth=float(bandwidth),
        n_observations=int(x.size),
    )


def slope_check(lines, baseline_value: float, band=None) -> SlopeCheck:
    """Fit the vertical sum of curves against price and measure deviation.

    When every configured group is present, additivity predicts the summed
    curve equals ``price - baseline_value``: slope one, intercept minus
    baseline. Returns the least-squares slope/intercept over the finite
    grid points inside ``band`` (a (low, high) price window; None keeps the
    whole grid) and the maximum absolute deviation from that identity line.
    """
    lines = list(lines)
    if not lines:
        raise EmptyData("no curves given")
    grid = lines[0].grid
    for line in lines[1:]:
        if line.grid.shape != grid.shape or not np.array_equal(line.grid, grid):
            raise GridMismatch("curves were evaluated on different grids")
    total = np.sum([line.values for line in lines], axis=0)
    mask = np.isfinite(total)
    if band is not None:
        lo, hi = band
        mask &= (grid >= lo) & (grid <= hi)
    if mask.sum() < 2:
        raise EmptyData("fewer than 2 usable grid points in the band")
    g = grid[mask]
    s = total[mask]
    g_centred = g - g.mean()
    slope = float(g_centred @ (s - s.mean()) / (g_centred @ g_centred))
    intercept = float(s.mean() - slope * g.mean())
    deviation = float(np.max(np.abs(s - (g - baseline_value))))
    return SlopeCheck(
        slope=slope,
        intercept=intercept,
        max_deviation=deviation,
        n_points=int(mask.sum()),
    )
