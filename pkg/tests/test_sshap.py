"""Grouped attributions: partitions, aggregation, smoothed curves, slope check."""

import numpy as np
import pytest

from epxai.attribution import AttributionTensor
from epxai.data import FeatureId, MarketConfig, SuperVariable, market_config
from epxai.sshap import (
    EmptyData,
    GridMismatch,
    NotHourlyGroup,
    Partition,
    PartitionMismatch,
    SshapLine,
    SshapTensor,
    UnknownGroup,
    aggregate,
    default_partition,
    merge_groups,
    slope_check,
    split_group,
    sshap_line,
)


def two_group_config():
    return MarketConfig(
        market_id="XX",
        currency="EUR",
        super_variables=(
            SuperVariable("A", "price", 1),
            SuperVariable("B", "exog1", 0),
        ),
        include_day_of_week=True,
    )


def integer_tensor(n_instances=4, seed=0):
    config = two_group_config()
    columns = tuple(
        FeatureId(label, h) for label in ("A", "B") for h in range(24)
    ) + (FeatureId("Day of week", None),)
    rng = np.random.default_rng(seed)
    values = rng.integers(-8, 9, size=(n_instances, 24, len(columns))).astype(float)
    tensor = AttributionTensor(
        kind="shap",
        instance_ids=[f"2013-01-{8 + i:02d}" for i in range(n_instances)],
        feature_ids=columns,
        values=values,
        baseline=rng.integers(-5, 6, size=24).astype(float),
    )
    return tensor, config


def make_sshap(values, baseline=None, labels=("G",)):
    """SshapTensor with given (n, 24, n_groups) values and singleton groups."""
    n = values.shape[0]
    groups = tuple(
        (label, tuple(FeatureId(label, h) for h in range(24))) for label in labels
    )
    return SshapTensor(
        instance_ids=[str(i) for i in range(n)],
        partition=Partition(groups=groups),
        values=values,
        baseline=np.zeros(24) if baseline is None else baseline,
    )


def naive_kernel_curve(grid, x, v, bandwidth):
    out = np.empty(len(grid))
    for k, g in enumerate(grid):
        w = np.exp(-0.5 * ((g - x) / bandwidth) ** 2)
        out[k] = (w * v).sum() / w.sum()
    return out


class TestAggregate:
    def test_group_sums_are_exact(self):
        tensor, config = integer_tensor()
        grouped = aggregate(tensor, default_partition(config))
        assert grouped.values.shape == (4, 24, 3)
        np.testing.assert_array_equal(
            grouped.values[:, :, 0], tensor.values[:, :, 0:24].sum(axis=2)
        )
        np.testing.assert_array_equal(
            grouped.values[:, :, 1], tensor.values[:, :, 24:48].sum(axis=2)
        )
        np.testing.assert_array_equal(grouped.values[:, :, 2], tensor.values[:, :, 48])
        np.testing.assert_array_equal(grouped.baseline, tensor.baseline)
        assert grouped.partition.labels == ("A", "B", "Day of week")

    def test_rebracketing_preserves_totals(self):
        # Integer values make both sum orders exact, so equality is bitwise.
        tensor, config = integer_tensor(seed=3)
        grouped = aggregate(tensor, default_partition(config))
        np.testing.assert_array_equal(
            grouped.values.sum(axis=2), tensor.values.sum(axis=2)
        )

    def test_partition_must_cover_exactly(self):
        tensor, config = integer_tensor()
        partition = default_partition(config)
        missing_dow = Partition(groups=partition.groups[:2])
        with pytest.raises(PartitionMismatch):
            aggregate(tensor, missing_dow)
        extra = Partition(
            groups=partition.groups + (("Z", (FeatureId("Z", 0),)),)
        )
        with pytest.raises(PartitionMismatch):
            aggregate(tensor, extra)

    def test_gradient_tensor_rejected(self):
        tensor, config = integer_tensor()
        grad = AttributionTensor(
            kind="gradient",
            instance_ids=tensor.instance_ids,
            feature_ids=tensor.feature_ids,
            values=tensor.values,
        )
        with pytest.raises(ValueError):
            aggregate(grad, default_partition(config))


class TestPartitionOps:
    def test_default_partition_counts(self):
        expected = {"DE": 10, "FR": 5, "BE": 6, "NP": 6, "PJM": 5}
        for market_id, n in expected.items():
            partition = default_partition(market_config(market_id))
            assert partition.n_groups == n
            assert len(partition.all_features()) == market_config(
                market_id
            ).n_features

    def test_split_group_labels_and_membership(self):
        _, config = integer_tensor()
        partition = split_group(default_partition(config), "A", 5)
        assert partition.labels == ("A H0-H4", "A H5-H23", "B", "Day of week")
        assert partition.members("A H0-H4") == tuple(
            FeatureId("A", h) for h in range(5)
        )
        assert partition.members("A H5-H23") == tuple(
            FeatureId("A", h) for h in range(5, 24)
        )

    def test_split_then_aggregate(self):
        tensor, config = integer_tensor(seed=5)
        partition = split_group(default_partition(config), "B", 12)
        grouped = aggregate(tensor, partition)
        np.testing.assert_array_equal(
            grouped.values[:, :, grouped.group_index("B H0-H11")],
            tensor.values[:, :, 24:36].sum(axis=2),
        )

    def test_split_errors(self):
        _, config = integer_tensor()
        partition = default_partition(config)
        with pytest.raises(UnknownGroup):
            split_group(partition, "Z", 5)
        with pytest.raises(NotHourlyGroup):
            split_group(partition, "Day of week", 5)
        once = split_group(partition, "A", 5)
        with pytest.raises(NotHourlyGroup):
            split_group(once, "A H0-H4", 2)
        with pytest.raises(ValueError):
            split_group(partition, "A", 0)
        with pytest.raises(ValueError):
            split_group(partition, "A", 24)

    def test_merge_groups(self):
        _, config = integer_tensor()
        partition = merge_groups(default_partition(config), "A+B", ["A", "B"])
        assert partition.labels == ("A+B", "Day of week")
        assert len(partition.members("A+B")) == 48
        with pytest.raises(UnknownGroup):
            merge_groups(partition, "X", ["A+B", "missing"])
        with pytest.raises(ValueError):
            merge_groups(partition, "X", ["A+B"])

    def test_partition_validation(self):
        fid = FeatureId("A", 0)
        with pytest.raises(ValueError):
            Partition(groups=(("A", (fid,)), ("B", (fid,))))
        with pytest.raises(ValueError):
            Partition(groups=(("A", (fid,)), ("A", (FeatureId("A", 1),))))
        with pytest.raises(ValueError):
            Partition(groups=(("A", ()),))


class TestSshapLine:
    def test_matches_direct_kernel_regression(self):
        rng = np.random.default_rng(7)
        values = rng.normal(0.0, 2.0, (6, 24, 1))
        sshap = make_sshap(values)
        prices = rng.normal(40.0, 10.0, (6, 24))
        line = sshap_line(sshap, "G", prices, hours="pooled", bandwidth=5.0)
        expected = naive_kernel_curve(
            line.grid, prices.ravel(), values[:, :, 0].ravel(), 5.0
        )
        np.testing.assert_allclose(line.values, expected, rtol=1e-9)
        assert line.n_observations == 6 * 24

    def test_hour_and_daily_mean_modes(self):
        n = 5
        values = np.tile(np.arange(24.0)[None, :, None], (n, 1, 1))
        sshap = make_sshap(values)
        prices = np.linspace(30.0, 60.0, n)[:, None] + np.zeros((n, 24))
        hour_line = sshap_line(sshap, "G", prices, hours=3, bandwidth=5.0)
        np.testing.assert_allclose(hour_line.values, 3.0, rtol=1e-12)
        assert hour_line.n_observations == n
        mean_line = sshap_line(sshap, "G", prices, hours="daily_mean", bandwidth=5.0)
        np.testing.assert_allclose(mean_line.values, 11.5, rtol=1e-12)

    def test_default_grid_spans_percentiles(self):
        rng = np.random.default_rng(2)
        sshap = make_sshap(rng.normal(0.0, 1.0, (50, 24, 1)))
        prices = rng.normal(40.0, 10.0, (50, 24))
        line = sshap_line(sshap, "G", prices, grid_size=200)
        lo, hi = np.percentile(prices.ravel(), [1.0, 99.0])
        assert len(line.grid) == 200
        np.testing.assert_allclose([line.grid[0], line.grid[-1]], [lo, hi])

    def test_far_grid_points_marked_absent(self):
        values = np.full((1, 24, 1), 2.0)
        sshap = make_sshap(values)
        prices = np.zeros((1, 24))
        grid = np.array([0.0, 5.0 * 40.0])  # 40 bandwidths away underflows
        line = sshap_line(sshap, "G", prices, grid=grid, bandwidth=5.0)
        np.testing.assert_allclose(line.values[0], 2.0, rtol=1e-12)
        assert np.isnan(line.values[1])

    def test_bad_arguments(self):
        sshap = make_sshap(np.zeros((2, 24, 1)))
        prices = np.zeros((2, 24))
        with pytest.raises(UnknownGroup):
            sshap_line(sshap, "missing", prices)
        with pytest.raises(ValueError):
            sshap_line(sshap, "G", prices, hours="weekly")
        with pytest.raises(ValueError):
            sshap_line(sshap, "G", prices, hours=24)
        with pytest.raises(ValueError):
            sshap_line(sshap, "G", prices, bandwidth=0.0)
        with pytest.raises(ValueError):
            sshap_line(sshap, "G", np.zeros((3, 24)))


class TestSlopeCheck:
    def line(self, grid, values, group="G"):
        return SshapLine(
            group=group,
            mode="pooled",
            grid=grid,
            values=values,
            bandwidth=5.0,
            n_observations=100,
        )

    def test_exact_linear_sum(self):
        grid = np.linspace(10.0, 90.0, 50)
        a = self.line(grid, 1.5 * grid - 3.0, "A")
        b = self.line(grid, 0.5 * grid - 4.0, "B")
        result = slope_check([a, b], baseline_value=7.0)
        np.testing.assert_allclose(result.slope, 2.0, rtol=1e-12)
        np.testing.assert_allclose(result.intercept, -7.0, rtol=1e-12)
        expected_dev = np.max(np.abs(2.0 * grid - 7.0 - (grid - 7.0)))
        np.testing.assert_allclose(result.max_deviation, expected_dev, rtol=1e-12)
        assert result.n_points == 50

    def test_all_zero_curves(self):
        grid = np.linspace(20.0, 60.0, 30)
        result = slope_check([self.line(grid, np.zeros(30))], baseline_value=35.0)
        assert result.slope == 0.0
        np.testing.assert_allclose(result.max_deviation, 60.0 - 35.0, rtol=1e-12)

    def test_band_restriction_and_nan_handling(self):
        grid = np.linspace(0.0, 100.0, 101)
        values = grid - 10.0
        values[:5] = np.nan  # absent points are dropped
        values[80:] = 999.0  # junk outside the band is ignored
        result = slope_check(
            [self.line(grid, values)], baseline_value=10.0, band=(5.0, 79.0)
        )
        np.testing.assert_allclose(result.slope, 1.0, rtol=1e-12)
        np.testing.assert_allclose(result.max_deviation, 0.0, atol=1e-12)
        assert result.n_points == 75

    def test_grid_mismatch(self):
        a = self.line(np.linspace(0, 1, 10), np.zeros(10))
        b = self.line(np.linspace(0, 2, 10), np.zeros(10))
        with pytest.raises(GridMismatch):
            slope_check([a, b], baseline_value=0.0)

    def test_empty_cases(self):
        with pytest.raises(EmptyData):
            slope_check([], baseline_value=0.0)
        grid = np.linspace(0.0, 1.0, 5)
        with pytest.raises(EmptyData):
            slope_check(
                [self.line(grid, np.zeros(5))], baseline_value=0.0, band=(2.0, 3.0)
            )

    def test_self_consistent_lattice_recovers_identity(self):
        # Observations y = x - c on a uniform price lattice; inside a band
        # far from the lattice edges the kernel weights are symmetric, so
        # the smoothed curve reproduces the identity up to ~1e-30.
        bandwidth = 5.0
        step = bandwidth / 2.0
        lattice = np.arange(0.0, 300.0, step)  # 120 points = 5 days x 24 h
        c = 37.0
        prices = lattice.reshape(5, 24)
        values = (lattice - c).reshape(5, 24, 1)
        sshap = make_sshap(values, baseline=np.full(24, c))
        grid = np.arange(60.0, 240.0 + 1e-9, step)
        line = sshap_line(
            sshap, "G", prices, hours="pooled", bandwidth=bandwidth, grid=grid
        )
        result = slope_check([line], baseline_value=c)
        assert abs(result.slope - 1.0) <= 1e-9
        assert result.max_deviation <= 1e-9
