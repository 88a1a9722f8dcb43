"""Config schema, run-directory layout, and the CLI stage implementations.

A run is driven by one JSON config file and writes into one output
directory: ``model.json``, ``report.json``, ``manifest.json``,
``tables/*.csv``, ``figures/*.svg``, and ``summary.md``. Every artifact is
deterministic for a fixed config, dataset, and thread count; the manifest
records sha256 hashes so two runs can be compared file by file. Wall-clock
timings live only in the manifest's stage entries, never in hashed outputs.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (
    beeswarm_table,
    complexity_metrics,
    heatmap,
    hourly_importance,
    performance_metrics,
)
from .attribution import attribution_to_csv, explain_dataset, sample_background
from .data import (
    MARKET_IDS,
    SCALER_KINDS,
    DataError,
    MarketConfig,
    build_feature_matrix,
    daily_price_matrix,
    market_config,
    market_config_from_dict,
    market_config_to_dict,
    parse_market_csv,
    series_to_csv,
)
from .errors import EpxaiError
from .figures import instance_stack, render_figure
from .mlp import (
    ACTIVATIONS,
    INIT_SCHEMES,
    DivergedLoss,
    ModelError,
    ModelSpec,
    TooFewInstances,
    TrainingHyperparams,
    benchmark_spec,
    count_parameters,
    init_model,
    load_model,
    predict_prices,
    save_model,
    train,
)
from .sshap import (
    aggregate,
    default_partition,
    merge_groups,
    slope_check,
    split_group,
    sshap_line,
)

__all__ = [
    "ConfigError",
    "ModelMismatch",
    "IncompleteRun",
    "RunConfig",
    "load_config",
    "resolve_config",
    "dispatch",
]


class ConfigError(EpxaiError):
    """Run configuration is missing, malformed, or out of range."""

    exit_code = 2


class ModelMismatch(EpxaiError):
    """Model file absent, unreadable, or not the one the config describes."""

    exit_code = 5


class IncompleteRun(EpxaiError):
    """Run directory lacks artifacts the requested command needs."""

    exit_code = 6


_TOP_KEYS = {
    "market_id", "dataset", "out", "seed", "market", "model", "training",
    "attribution", "partition", "lines", "instance_dates", "beeswarm_top_k",
}
_MODEL_KEYS = {
    "hidden1", "hidden2", "activation", "init_scheme", "input_scaler",
    "output_scaler", "dropout", "l1", "seed",
}
_TRAINING_KEYS = {
    "learning_rate", "batch_size", "max_epochs", "early_stop_patience",
    "validation_fraction", "seed",
}
_ATTRIBUTION_KEYS = {"n_pairs", "background_size", "antithetic", "max_instances", "seed"}
_PARTITION_KEYS = {"splits", "merges"}
_LINE_KEYS = {"bandwidth", "grid_size", "band"}

_DEFAULT_MAX_INSTANCES = 256


@dataclass
class RunConfig:
    """Fully resolved run settings; ``echo`` is the JSON round-trip form."""

    market_id: str
    dataset: Path
    out: Path | None
    seed: int
    market: MarketConfig
    model_spec: ModelSpec
    training: TrainingHyperparams
    n_pairs: int
    background_size: int
    antithetic: bool
    max_instances: int | None
    attribution_seed: int
    splits: tuple
    merges: tuple
    bandwidth: float
    grid_size: int
    band: tuple | None
    instance_dates: tuple
    top_k: int
    echo: dict


def _reject_unknown(payload: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be an object")
    return value


def _as_int(value, name: str, lo=None, hi=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"'{name}' must be an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"'{name}' must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(f"'{name}' must be <= {hi}, got {value}")
    return value


def _as_float(value, name: str, lo=None, lo_open=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{name}' must be a number, got {value!r}")
    value = float(value)
    if lo is not None and (value <= lo if lo_open else value < lo):
        op = ">" if lo_open else ">="
        raise ConfigError(f"'{name}' must be {op} {lo}, got {value}")
    return value


def _as_bool(value, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"'{name}' must be true or false, got {value!r}")
    return value


def _as_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ConfigError(f"'{name}' must be one of {sorted(choices)}, got {value!r}")
    return value


def load_config(
    path: Path,
    out_override: str | None = None,
    seed_override: int | None = None,
    check_paths: bool = False,
) -> RunConfig:
    """Read and resolve a config file; all problems raise :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(
        raw,
        base_dir=path.parent,
        out_override=out_override,
        seed_override=seed_override,
        check_paths=check_paths,
    )


def resolve_config(
    raw,
    base_dir: Path,
    out_override: str | None = None,
    seed_override: int | None = None,
    check_paths: bool = False,
) -> RunConfig:
    """Validate a raw config mapping and fill every default.

    The returned config's ``echo`` re-resolves to the same settings, which
    is what lets a manifest reproduce its run. Relative paths are taken
    against ``base_dir`` (the config file's directory).
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")

    market_id = raw.get("market_id")
    if market_id not in MARKET_IDS:
        raise ConfigError(
            f"'market_id' must be one of {list(MARKET_IDS)}, got {market_id!r}"
        )

    dataset_raw = raw.get("dataset")
    if not isinstance(dataset_raw, str) or not dataset_raw:
        raise ConfigError("'dataset' must be a non-empty path string")
    dataset = Path(dataset_raw)
    if not dataset.is_absolute():
        dataset = (Path(base_dir) / dataset).resolve()
    if check_paths and not dataset.is_file():
        raise ConfigError(f"dataset path does not exist: {dataset}")

    seed = _as_int(raw.get("seed", 0), "seed", lo=0, hi=2**64 - 1)
    if seed_override is not None:
        seed = _as_int(seed_override, "seed", lo=0, hi=2**64 - 1)

    out_raw = out_override if out_override is not None else raw.get("out")
    out: Path | None = None
    if out_raw is not None:
        if not isinstance(out_raw, (str, Path)) or not str(out_raw):
            raise ConfigError("'out' must be a non-empty path string")
        out = Path(out_raw)
        if not out.is_absolute():
            out = (Path(base_dir) / out).resolve()

    market_raw = raw.get("market")
    if market_raw is None:
        market = market_config(market_id)
    else:
        if not isinstance(market_raw, dict):
            raise ConfigError("'market' must be an object")
        try:
            market = market_config_from_dict(market_raw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if market.market_id != market_id:
            raise ConfigError(
                f"market config is for {market.market_id!r}, run is {market_id!r}"
            )

    bench = benchmark_spec(market_id)
    model_raw = _section(raw, "model")
    _reject_unknown(model_raw, _MODEL_KEYS, "model")
    try:
        model_spec = ModelSpec(
            layer_sizes=(
                market.n_features,
                _as_int(model_raw.get("hidden1", bench.layer_sizes[1]), "model.hidden1", lo=1),
                _as_int(model_raw.get("hidden2", bench.layer_sizes[2]), "model.hidden2", lo=1),
                24,
            ),
            activation=_as_choice(
                model_raw.get("activation", bench.activation),
                "model.activation", ACTIVATIONS,
            ),
            dropout_rate=_as_float(model_raw.get("dropout", bench.dropout_rate), "model.dropout", lo=0.0),
            l1_factor=_as_float(model_raw.get("l1", bench.l1_factor), "model.l1", lo=0.0),
            init_scheme=_as_choice(
                model_raw.get("init_scheme", bench.init_scheme),
                "model.init_scheme", INIT_SCHEMES,
            ),
            input_scaler_kind=_as_choice(
                model_raw.get("input_scaler", bench.input_scaler_kind),
                "model.input_scaler", SCALER_KINDS,
            ),
            output_scaler_kind=_as_choice(
                model_raw.get("output_scaler", bench.output_scaler_kind),
                "model.output_scaler", SCALER_KINDS,
            ),
            seed=_as_int(model_raw.get("seed", seed), "model.seed", lo=0),
        )
    except ValueError as exc:
        raise ConfigError(f"bad model settings: {exc}") from exc

    training_raw = _section(raw, "training")
    _reject_unknown(training_raw, _TRAINING_KEYS, "training")
    try:
        training = TrainingHyperparams(
            learning_rate=_as_float(
                training_raw.get("learning_rate", 1e-3), "training.learning_rate",
                lo=0.0, lo_open=True,
            ),
            batch_size=_as_int(training_raw.get("batch_size", 64), "training.batch_size", lo=1),
            max_epochs=_as_int(training_raw.get("max_epochs", 300), "training.max_epochs", lo=1),
            early_stop_patience=_as_int(
                training_raw.get("early_stop_patience", 20),
                "training.early_stop_patience", lo=0,
            ),
            validation_fraction=_as_float(
                training_raw.get("validation_fraction", 0.15),
                "training.validation_fraction", lo=0.0,
            ),
            seed=_as_int(training_raw.get("seed", seed), "training.seed", lo=0),
        )
    except ValueError as exc:
        raise ConfigError(f"bad training settings: {exc}") from exc

    attribution_raw = _section(raw, "attribution")
    _reject_unknown(attribution_raw, _ATTRIBUTION_KEYS, "attribution")
    n_pairs = _as_int(attribution_raw.get("n_pairs", 64), "attribution.n_pairs", lo=1)
    background_size = _as_int(
        attribution_raw.get("background_size", 500), "attribution.background_size", lo=1
    )
    antithetic = _as_bool(attribution_raw.get("antithetic", True), "attribution.antithetic")
    if "max_instances" in attribution_raw:
        max_instances = attribution_raw["max_instances"]
        if max_instances is not None:
            max_instances = _as_int(max_instances, "attribution.max_instances", lo=1)
    else:
        max_instances = _DEFAULT_MAX_INSTANCES
    attribution_seed = _as_int(attribution_raw.get("seed", seed), "attribution.seed", lo=0)

    hourly_labels = tuple(sv.label for sv in market.super_variables)
    group_labels = hourly_labels + (
        ("Day of week",) if market.include_day_of_week else ()
    )
    partition_raw = _section(raw, "partition")
    _reject_unknown(partition_raw, _PARTITION_KEYS, "partition")
    splits = []
    for k, entry in enumerate(partition_raw.get("splits") or []):
        if not isinstance(entry, dict):
            raise ConfigError(f"partition.splits[{k}] must be an object")
        _reject_unknown(entry, {"group", "hour"}, f"partition.splits[{k}]")
        group = entry.get("group")
        if group not in hourly_labels:
            raise ConfigError(
                f"partition.splits[{k}].group must be one of {list(hourly_labels)}, "
                f"got {group!r}"
            )
        hour = _as_int(entry.get("hour"), f"partition.splits[{k}].hour", lo=1, hi=23)
        splits.append((group, hour))
    merges = []
    for k, entry in enumerate(partition_raw.get("merges") or []):
        if not isinstance(entry, dict):
            raise ConfigError(f"partition.merges[{k}] must be an object")
        _reject_unknown(entry, {"label", "members"}, f"partition.merges[{k}]")
        label = entry.get("label")
        if not isinstance(label, str) or not label:
            raise ConfigError(f"partition.merges[{k}].label must be a non-empty string")
        members = entry.get("members")
        if not isinstance(members, list) or len(members) < 2:
            raise ConfigError(
                f"partition.merges[{k}].members must list at least two groups"
            )
        for member in members:
            if member not in group_labels:
                raise ConfigError(
                    f"partition.merges[{k}] references unknown group {member!r}"
                )
        merges.append((label, tuple(members)))

    lines_raw = _section(raw, "lines")
    _reject_unknown(lines_raw, _LINE_KEYS, "lines")
    bandwidth = _as_float(lines_raw.get("bandwidth", 5.0), "lines.bandwidth", lo=0.0, lo_open=True)
    grid_size = _as_int(lines_raw.get("grid_size", 200), "lines.grid_size", lo=2)
    band_raw = lines_raw.get("band")
    band: tuple | None = None
    if band_raw is not None:
        if not isinstance(band_raw, (list, tuple)) or len(band_raw) != 2:
            raise ConfigError("lines.band must be [low_percentile, high_percentile]")
        lo = _as_float(band_raw[0], "lines.band[0]", lo=0.0)
        hi = _as_float(band_raw[1], "lines.band[1]", lo=0.0)
        if not 0.0 <= lo < hi <= 100.0:
            raise ConfigError(f"lines.band must satisfy 0 <= low < high <= 100, got {band_raw}")
        band = (lo, hi)

    dates_raw = raw.get("instance_dates") or []
    if not isinstance(dates_raw, list):
        raise ConfigError("'instance_dates' must be a list of YYYY-MM-DD strings")
    instance_dates = []
    for value in dates_raw:
        try:
            datetime.date.fromisoformat(str(value))
        except ValueError as exc:
            raise ConfigError(f"bad instance date {value!r}: {exc}") from exc
        instance_dates.append(str(value))

    top_k = _as_int(raw.get("beeswarm_top_k", 20), "beeswarm_top_k", lo=1)

    echo = {
        "market_id": market_id,
        "dataset": str(dataset),
        "out": str(out) if out is not None else None,
        "seed": seed,
        "market": market_config_to_dict(market),
        "model": {
            "hidden1": model_spec.layer_sizes[1],
            "hidden2": model_spec.layer_sizes[2],
            "activation": model_spec.activation,
            "init_scheme": model_spec.init_scheme,
            "input_scaler": model_spec.input_scaler_kind,
            "output_scaler": model_spec.output_scaler_kind,
            "dropout": model_spec.dropout_rate,
            "l1": model_spec.l1_factor,
            "seed": model_spec.seed,
        },
        "training": {
            "learning_rate": training.learning_rate,
            "batch_size": training.batch_size,
            "max_epochs": training.max_epochs,
            "early_stop_patience": training.early_stop_patience,
            "validation_fraction": training.validation_fraction,
            "seed": training.seed,
        },
        "attribution": {
            "n_pairs": n_pairs,
            "background_size": background_size,
            "antithetic": antithetic,
            "max_instances": max_instances,
            "seed": attribution_seed,
        },
        "partition": {
            "splits": [{"group": g, "hour": h} for g, h in splits],
            "merges": [{"label": l, "members": list(m)} for l, m in merges],
        },
        "lines": {
            "bandwidth": bandwidth,
            "grid_size": grid_size,
            "band": list(band) if band is not None else None,
        },
        "instance_dates": instance_dates,
        "beeswarm_top_k": top_k,
    }
    return RunConfig(
        market_id=market_id,
        dataset=dataset,
        out=out,
        seed=seed,
        market=market,
        model_spec=model_spec,
        training=training,
        n_pairs=n_pairs,
        background_size=background_size,
        antithetic=antithetic,
        max_instances=max_instances,
        attribution_seed=attribution_seed,
        splits=tuple(splits),
        merges=tuple(merges),
        bandwidth=bandwidth,
        grid_size=grid_size,
        band=band,
        instance_dates=tuple(instance_dates),
        top_k=top_k,
        echo=echo,
    )


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_output(out: Path, rel: str, text: str, outputs: dict) -> None:
    path = out / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    outputs[rel] = _sha256_text(text)


def _write_figure(out: Path, stem: str, figure, outputs: dict) -> None:
    _write_output(out, f"figures/{stem}.svg", figure.svg, outputs)
    _write_output(out, f"tables/{stem}.csv", figure.csv, outputs)


def _update_manifest(
    out: Path,
    config: RunConfig,
    stage: str,
    seconds: float,
    outputs: dict,
    inputs: dict | None = None,
) -> None:
    """Merge one stage's record into the run manifest.

    A run directory belongs to one config: a second config writing into it
    is refused rather than silently mixed.
    """
    digest = _sha256_text(_canonical_json(config.echo))
    path = out / "manifest.json"
    manifest = {
        "tool": "epxai",
        "version": __version__,
        "config": config.echo,
        "config_digest": digest,
        "seeds": {
            "master": config.seed,
            "model": config.model_spec.seed,
            "training": config.training.seed,
            "attribution": config.attribution_seed,
        },
        "inputs": {},
        "stages": {},
    }
    if path.is_file():
        try:
            existing = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise IncompleteRun(f"unreadable manifest {path}: {exc}") from exc
        if existing.get("config_digest") != digest:
            raise ConfigError(
                f"run directory {out} was produced by a different config "
                f"(manifest digest {existing.get('config_digest')!r}); "
                f"use a fresh directory"
            )
        manifest["inputs"] = existing.get("inputs", {})
        manifest["stages"] = existing.get("stages", {})
    if inputs:
        manifest["inputs"].update(inputs)
    manifest["stages"][stage] = {
        "seconds": round(seconds, 3),
        "outputs": dict(sorted(outputs.items())),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_canonical_json(manifest), encoding="utf-8")


def _merge_report(out: Path, updates: dict) -> str:
    """Fold new sections into report.json, keeping other stages' sections."""
    path = out / "report.json"
    report = {}
    if path.is_file():
        try:
            report = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            report = {}
    report.update(updates)
    text = _canonical_json(report)
    path.write_text(text, encoding="utf-8")
    return text


def _require_out(config: RunConfig) -> Path:
    if config.out is None:
        raise ConfigError(
            'no output directory: pass --out, set EPXAI_OUT, or set "out" in the config'
        )
    return config.out


def _read_dataset(config: RunConfig):
    try:
        text = config.dataset.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {config.dataset}") from None
    except OSError as exc:
        raise DataError(f"cannot read dataset {config.dataset}: {exc}") from exc
    return text, parse_market_csv(text, config.market_id)


def _naive_for_instances(series, features) -> np.ndarray:
    """Previous-day prices aligned to the feature matrix's delivery days."""
    dates, prices = daily_price_matrix(series)
    index = {d: i for i, d in enumerate(dates)}
    rows = np.empty((features.n_instances, 24))
    for k, day in enumerate(features.instances):
        i = index.get(day)
        if i is None or i == 0:
            raise DataError(f"no previous-day prices for delivery day {day}")
        rows[k] = prices[i - 1]
    return rows


def _performance_csv(reports: dict) -> str:
    lines = ["scope,mae,rmae,smape,rmse,n_observations"]
    for scope, report in reports.items():
        lines.append(
            f"{scope},{float(report.mae)!r},{float(report.rmae)!r},"
            f"{float(report.smape)!r},{float(report.rmse)!r},{report.n_observations}"
        )
    return "\n".join(lines) + "\n"


def _report_fields(report) -> dict:
    return {
        "mae": report.mae,
        "rmae": report.rmae,
        "smape": report.smape,
        "rmse": report.rmse,
        "n_observations": report.n_observations,
    }


def cmd_validate(args) -> int:
    config = _config_from_args(args, check_paths=True)
    sys.stdout.write(_canonical_json(config.echo))
    print(f"config ok: {config.market_id}, {config.market.n_features} features")
    return 0


def cmd_ingest(args) -> int:
    config = _config_from_args(args)
    out = _require_out(config)
    t0 = time.perf_counter()
    text, series = _read_dataset(config)
    outputs: dict = {}
    _write_output(out, "tables/dataset.csv", series_to_csv(series), outputs)
    _update_manifest(
        out, config, "ingest", time.perf_counter() - t0, outputs,
        inputs={"dataset": {"path": str(config.dataset), "sha256": _sha256_text(text)}},
    )
    print(
        f"ingest: {series.n_hours} hourly rows "
        f"({series.timestamps[0]} .. {series.timestamps[-1]}) -> {out / 'tables/dataset.csv'}"
    )
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = _require_out(config)
    t0 = time.perf_counter()
    text, series = _read_dataset(config)
    features = build_feature_matrix(series, config.market)
    # overflow on a diverging run ends as a non-finite loss, which train
    # reports itself; keep the CLI's stderr to the single error line
    with np.errstate(over="ignore", invalid="ignore"):
        trained = train(init_model(config.model_spec), features, config.training)

    predictions = predict_prices(trained, features.values)
    naive = _naive_for_instances(series, features)
    n = features.n_instances
    n_val = int(round(config.training.validation_fraction * n))
    n_train = n - n_val
    scopes = {
        "train": performance_metrics(
            predictions[:n_train], features.targets[:n_train], naive[:n_train]
        )
    }
    if n_val:
        scopes["validation"] = performance_metrics(
            predictions[n_train:], features.targets[n_train:], naive[n_train:]
        )

    outputs: dict = {}
    _write_output(out, "model.json", save_model(trained), outputs)
    _write_output(out, "tables/performance.csv", _performance_csv(scopes), outputs)
    val_maes = [h["val_mae"] for h in trained.history if h["val_mae"] is not None]
    report_text = _merge_report(out, {
        "market_id": config.market_id,
        "config": config.echo,
        "seeds": {
            "master": config.seed,
            "model": config.model_spec.seed,
            "training": config.training.seed,
            "attribution": config.attribution_seed,
        },
        "data": {
            "dataset_path": str(config.dataset),
            "dataset_sha256": _sha256_text(text),
            "n_hours": series.n_hours,
            "n_instances": n,
            "first_day": str(features.instances[0]),
            "last_day": str(features.instances[-1]),
        },
        "performance": {k: _report_fields(v) for k, v in scopes.items()},
        "training": {
            "epochs_run": len(trained.history),
            "best_val_mae": min(val_maes) if val_maes else None,
            "n_parameters": count_parameters(trained),
        },
    })
    outputs["report.json"] = _sha256_text(report_text)
    _update_manifest(
        out, config, "train", time.perf_counter() - t0, outputs,
        inputs={"dataset": {"path": str(config.dataset), "sha256": _sha256_text(text)}},
    )
    report = scopes["train"]
    print(
        f"train: {len(trained.history)} epochs, train MAE "
        f"{report.mae:.3f} {config.market.currency}/MWh (rMAE {report.rmae:.3f}) "
        f"-> {out / 'model.json'}"
    )
    return 0


def _instance_subset(features, config: RunConfig) -> np.ndarray:
    n = features.n_instances
    if config.max_instances is None or config.max_instances >= n:
        indices = np.arange(n)
    else:
        indices = np.unique(
            np.round(np.linspace(0, n - 1, config.max_instances)).astype(np.intp)
        )
    if config.instance_dates:
        ids = features.instance_ids()
        extra = []
        for date in config.instance_dates:
            try:
                extra.append(ids.index(date))
            except ValueError:
                raise DataError(
                    f"instance date {date} is not a delivery day of this run "
                    f"({ids[0]} .. {ids[-1]})"
                ) from None
        indices = np.unique(np.concatenate([indices, np.asarray(extra, dtype=np.intp)]))
    return indices


def _sshap_csv(tensor) -> str:
    lines = ["instance_id,output_hour,group,value"]
    labels = tensor.partition.labels
    for i, instance_id in enumerate(tensor.instance_ids):
        for h in range(24):
            for g, label in enumerate(labels):
                lines.append(
                    f"{instance_id},{h},{label},{float(tensor.values[i, h, g])!r}"
                )
    return "\n".join(lines) + "\n"


def _load_model_file(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelMismatch(f"model file not found: {path}; run train first") from None
    except OSError as exc:
        raise ModelMismatch(f"cannot read model file {path}: {exc}") from exc
    try:
        return load_model(text)
    except ModelError as exc:
        raise ModelMismatch(f"model file {path}: {exc}") from exc


def cmd_explain(args) -> int:
    config = _config_from_args(args)
    out = _require_out(config)
    t0 = time.perf_counter()
    model_path = Path(args.model) if getattr(args, "model", None) else out / "model.json"
    trained = _load_model_file(model_path)
    if trained.spec != config.model_spec:
        raise ModelMismatch(
            f"model file {model_path} was trained with different settings than "
            f"the config describes (architecture, scalers, or seed differ)"
        )
    if not trained.is_trained:
        raise ModelMismatch(f"model file {model_path} carries no fitted scalers")

    text, series = _read_dataset(config)
    features = build_feature_matrix(series, config.market)
    if features.n_features != trained.spec.n_inputs:
        raise ModelMismatch(
            f"model expects {trained.spec.n_inputs} inputs, dataset produces "
            f"{features.n_features}"
        )

    indices = _instance_subset(features, config)
    background = sample_background(
        features, size=config.background_size, seed=config.attribution_seed
    )
    shap_tensor, grad_tensor = explain_dataset(
        trained,
        features,
        background,
        n_pairs=config.n_pairs,
        seed=config.attribution_seed,
        antithetic=config.antithetic,
        instance_indices=indices,
    )

    outputs: dict = {}
    _write_output(out, "tables/shap.csv", attribution_to_csv(shap_tensor), outputs)
    _write_output(out, "tables/gradient.csv", attribution_to_csv(grad_tensor), outputs)

    partitions = {"default": default_partition(config.market)}
    if config.splits:
        part = partitions["default"]
        for group, hour in config.splits:
            part = split_group(part, group, hour)
        partitions["split"] = part
    if config.merges:
        part = partitions["default"]
        for label, members in config.merges:
            part = merge_groups(part, label, members)
        partitions["merged"] = part

    grouped = {
        name: aggregate(shap_tensor, part) for name, part in partitions.items()
    }
    for name, tensor in grouped.items():
        _write_output(out, f"tables/sshap_{name}.csv", _sshap_csv(tensor), outputs)

    unit = f"{config.market.currency}/MWh"
    sshap_default = grouped["default"]
    shap_grid = heatmap(shap_tensor, "mean_abs")
    _write_figure(
        out, "heatmap_shap",
        render_figure(shap_grid, title=f"{config.market_id} mean |contribution|", unit=unit),
        outputs,
    )
    _write_figure(
        out, "heatmap_gradient",
        render_figure(
            heatmap(grad_tensor, "mean"),
            title=f"{config.market_id} mean gradient",
            unit=f"{unit} per normalised input",
        ),
        outputs,
    )
    _write_figure(
        out, "importance",
        render_figure(
            hourly_importance(sshap_default),
            title=f"{config.market_id} hourly importance", unit=unit,
        ),
        outputs,
    )
    _write_figure(
        out, "beeswarm",
        render_figure(
            beeswarm_table(shap_tensor, features.values[indices], top_k=config.top_k),
            title=f"{config.market_id} top features", unit=unit,
        ),
        outputs,
    )

    prices = features.targets[indices]
    pooled = prices.ravel()
    grid_lo, grid_hi = np.percentile(pooled, [1.0, 99.0])
    grid = np.linspace(grid_lo, grid_hi, config.grid_size)
    lines = [
        sshap_line(
            sshap_default, label, prices,
            hours="pooled", bandwidth=config.bandwidth, grid=grid,
        )
        for label in sshap_default.partition.labels
    ]
    baseline_value = float(sshap_default.baseline.mean())
    band_abs = None
    if config.band is not None:
        band_abs = tuple(float(v) for v in np.percentile(pooled, config.band))
    check = slope_check(lines, baseline_value=baseline_value, band=band_abs)
    _write_figure(
        out, "lines",
        render_figure(
            lines, title=f"{config.market_id} group value vs price",
            unit=unit, baseline=baseline_value,
        ),
        outputs,
    )

    complexity = complexity_metrics(grad_tensor, shap_grid, threshold=0.5)
    _write_output(
        out, "tables/complexity.csv",
        "non_linearity,non_homogeneity,important_vars_per_hour,threshold\n"
        f"{float(complexity.non_linearity)!r},{float(complexity.non_homogeneity)!r},"
        f"{float(complexity.important_vars_per_hour)!r},0.5\n",
        outputs,
    )

    for date in config.instance_dates:
        position = sshap_default.instance_ids.index(date)
        row_index = indices[position]
        forecast = predict_prices(trained, features.values[row_index])
        _write_figure(
            out, f"instance_{date}",
            render_figure(
                instance_stack(sshap_default, date, forecast),
                title=f"{config.market_id} contributions {date}", unit=unit,
            ),
            outputs,
        )

    report_text = _merge_report(out, {
        "explain": {
            "n_instances_explained": int(len(indices)),
            "n_pairs": config.n_pairs,
            "background_size": background.size,
            "antithetic": config.antithetic,
            "seed": config.attribution_seed,
            "baseline": [float(v) for v in sshap_default.baseline],
            "partitions": {
                name: list(part.labels) for name, part in partitions.items()
            },
            "slope_check": {
                "slope": check.slope,
                "intercept": check.intercept,
                "max_deviation": check.max_deviation,
                "n_points": check.n_points,
                "band_percentiles": list(config.band) if config.band else None,
                "band_prices": list(band_abs) if band_abs else None,
            },
            "complexity": {
                "non_linearity": complexity.non_linearity,
                "non_homogeneity": complexity.non_homogeneity,
                "important_vars_per_hour": complexity.important_vars_per_hour,
                "threshold": 0.5,
            },
        },
    })
    outputs["report.json"] = _sha256_text(report_text)
    _update_manifest(
        out, config, "explain", time.perf_counter() - t0, outputs,
        inputs={"dataset": {"path": str(config.dataset), "sha256": _sha256_text(text)}},
    )
    print(
        f"explain: {len(indices)} instances, slope {check.slope:.3f}, "
        f"non-linearity {complexity.non_linearity:.3f} -> {out}"
    )
    return 0


def _markdown_table(header: list, rows: list) -> list:
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(" --- " for _ in header) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return lines


def cmd_report(args) -> int:
    out_raw = args.out or os.environ.get("EPXAI_OUT")
    if not out_raw and getattr(args, "config", None):
        config = load_config(Path(args.config))
        if config.out is not None:
            out_raw = str(config.out)
    if not out_raw:
        raise ConfigError("report needs the run directory: pass --out or set EPXAI_OUT")
    out = Path(out_raw)
    manifest_path = out / "manifest.json"
    if not manifest_path.is_file():
        raise IncompleteRun(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IncompleteRun(f"unreadable manifest {manifest_path}: {exc}") from exc
    report_path = out / "report.json"
    if not report_path.is_file():
        raise IncompleteRun(f"missing report.json in {out}; run train and explain first")
    report = json.loads(report_path.read_text(encoding="utf-8"))

    for stage, record in sorted(manifest.get("stages", {}).items()):
        for rel in record.get("outputs", {}):
            if not (out / rel).is_file():
                raise IncompleteRun(f"stage {stage} output missing from run directory: {rel}")

    market = report.get("market_id", manifest.get("config", {}).get("market_id", "?"))
    currency = manifest.get("config", {}).get("market", {}).get("currency", "EUR")
    lines = [
        f"# {market} run summary",
        "",
        f"Produced by epxai {manifest.get('version', '?')}. "
        f"Config digest `{manifest.get('config_digest', '?')}`.",
        "",
    ]

    data = report.get("data")
    if data:
        lines += [
            "## Data",
            "",
            f"- dataset: `{data['dataset_path']}` (sha256 `{data['dataset_sha256'][:16]}...`)",
            f"- hourly rows: {data['n_hours']}, delivery days modelled: {data['n_instances']}",
            f"- span: {data['first_day']} to {data['last_day']}",
            "",
        ]

    lines += ["## Performance", ""]
    performance = report.get("performance")
    if performance:
        rows = [
            [
                scope,
                f"{m['mae']:.4f}", f"{m['rmae']:.4f}",
                f"{m['smape']:.4f}", f"{m['rmse']:.4f}", m["n_observations"],
            ]
            for scope, m in performance.items()
        ]
        lines += _markdown_table(
            ["scope", f"MAE [{currency}/MWh]", "rMAE", "sMAPE", f"RMSE [{currency}/MWh]", "hours"],
            rows,
        )
    else:
        lines.append("Not produced yet (run train).")
    lines.append("")

    lines += ["## Complexity", ""]
    explain = report.get("explain")
    if explain:
        c = explain["complexity"]
        lines += _markdown_table(
            [
                f"non-linearity [{currency}/MWh]",
                f"non-homogeneity [{currency}/MWh]",
                "important variables per hour",
                f"threshold [{currency}/MWh]",
            ],
            [[
                f"{c['non_linearity']:.4f}", f"{c['non_homogeneity']:.4f}",
                f"{c['important_vars_per_hour']:.2f}", c["threshold"],
            ]],
        )
        lines.append("")
        s = explain["slope_check"]
        lines += [
            "## Additivity check",
            "",
            f"Summed group curves against price minus baseline: slope "
            f"{s['slope']:.4f}, intercept {s['intercept']:.2f}, max deviation "
            f"{s['max_deviation']:.4g} over {s['n_points']} grid points"
            + (
                f" inside the {s['band_percentiles'][0]:g}-{s['band_percentiles'][1]:g} "
                f"percentile band"
                if s.get("band_percentiles")
                else ""
            )
            + ".",
            "",
            f"Explained instances: {explain['n_instances_explained']} "
            f"({explain['n_pairs']} permutation pairs, background "
            f"{explain['background_size']}, seed {explain['seed']}).",
        ]
    else:
        lines.append("Not produced yet (run explain).")
    lines.append("")

    figures = sorted((out / "figures").glob("*.svg")) if (out / "figures").is_dir() else []
    lines += ["## Figures", ""]
    if figures:
        for path in figures:
            lines += [f"### {path.stem}", "", f"![{path.stem}](figures/{path.name})", ""]
    else:
        lines += ["No figures produced yet.", ""]

    tables = sorted((out / "tables").glob("*.csv")) if (out / "tables").is_dir() else []
    if tables:
        lines += ["## Tables", ""]
        lines += [f"- `tables/{p.name}`" for p in tables]
        lines.append("")

    seeds = manifest.get("seeds", {})
    lines += [
        "## Reproducibility",
        "",
        f"- seeds: " + ", ".join(f"{k} {v}" for k, v in sorted(seeds.items())),
    ]
    for name, record in sorted(manifest.get("inputs", {}).items()):
        lines.append(f"- input {name}: sha256 `{record['sha256'][:16]}...`")
    for stage, record in sorted(manifest.get("stages", {}).items()):
        lines.append(
            f"- stage {stage}: {record['seconds']:.1f}s, "
            f"{len(record.get('outputs', {}))} files"
        )
    lines.append("")

    summary = "\n".join(lines)
    (out / "summary.md").write_text(summary, encoding="utf-8")
    print(f"report: {len(figures)} figures, {len(tables)} tables -> {out / 'summary.md'}")
    return 0


def cmd_oracle(args) -> int:
    from . import oracle

    results = oracle.run_all(args.seed)
    for result in results:
        print(result.line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "seed": args.seed,
            "results": [
                {
                    "name": r.name,
                    "passed": r.passed,
                    "detail": r.detail,
                    "seconds": round(r.seconds, 3),
                    "metrics": r.metrics,
                }
                for r in results
            ],
        }
        (out / "oracle.json").write_text(_canonical_json(payload), encoding="utf-8")
        print(f"wrote {out / 'oracle.json'}")
    return 0 if all(r.passed for r in results) else 1


def _config_from_args(args, check_paths: bool = False) -> RunConfig:
    if not getattr(args, "config", None):
        raise ConfigError("a --config file is required")
    out_override = getattr(args, "out", None) or os.environ.get("EPXAI_OUT")
    return load_config(
        Path(args.config),
        out_override=out_override,
        seed_override=getattr(args, "seed", None),
        check_paths=check_paths,
    )


_COMMANDS = {
    "validate": cmd_validate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "explain": cmd_explain,
    "report": cmd_report,
    "oracle": cmd_oracle,
}


def _fail(code: int, message: str) -> int:
    print(f"error: {code}: {message}", file=sys.stderr)
    return code


def dispatch(args) -> int:
    """Run one subcommand, mapping typed failures to documented exit codes."""
    handler = _COMMANDS[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        return _fail(2, str(exc))
    except IncompleteRun as exc:
        return _fail(6, str(exc))
    except DivergedLoss as exc:
        return _fail(4, f"training diverged: {exc}")
    except ModelMismatch as exc:
        return _fail(5, str(exc))
    except TooFewInstances as exc:
        return _fail(3, str(exc))
    except ModelError as exc:
        return _fail(5, str(exc))
    except DataError as exc:
        return _fail(3, str(exc))
    except EpxaiError as exc:
        return _fail(1, str(exc))
