"""Feed-forward forecaster: two hidden layers mapping lagged inputs to 24 prices.

The network is plain numpy end to end so that training, prediction, and the
analytic input gradients elsewhere in the package share one arithmetic path
and stay reproducible bit for bit under a fixed seed. Inputs and targets are
normalized with the scalers from :mod:`epxai.data`; prediction undoes the
output scaling, so callers only ever see raw price units.

Training follows the benchmark recipe: Adam on mean absolute error with
optional L1 weight penalty, inverted dropout on both hidden layers, a
chronological validation split, and early stopping that restores the best
validation weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    FeatureMatrix,
    NonFiniteInput,
    ScalerParams,
    fit_scaler,
    inverse_transform,
    transform,
)
from .errors import EpxaiError

__all__ = [
    "ModelError",
    "DivergedLoss",
    "TooFewInstances",
    "SchemaVersionMismatch",
    "CorruptPayload",
    "ACTIVATIONS",
    "INIT_SCHEMES",
    "SELU_LAMBDA",
    "SELU_ALPHA",
    "MODEL_SCHEMA_VERSION",
    "ModelSpec",
    "TrainingHyperparams",
    "TrainedModel",
    "benchmark_spec",
    "init_model",
    "forward",
    "forward_trace",
    "train",
    "predict_prices",
    "save_model",
    "load_model",
    "count_parameters",
]


class ModelError(EpxaiError):
    """Base class for model-layer errors."""


class DivergedLoss(ModelError):
    """Training or validation loss became non-finite."""


class TooFewInstances(ModelError):
    """Not enough instances for the requested operation."""


class SchemaVersionMismatch(ModelError):
    """Persisted model written by an incompatible schema."""


class CorruptPayload(ModelError):
    """Persisted model cannot be decoded into a consistent network."""


ACTIVATIONS = ("softplus", "selu")
INIT_SCHEMES = ("glorot_uniform", "he_normal", "lecun_uniform", "lecun_normal")

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and scaling choices for one forecaster."""

    layer_sizes: tuple[int, int, int, int]  # (n_inputs, hidden1, hidden2, 24)
    activation: str
    dropout_rate: float
    l1_factor: float
    init_scheme: str
    input_scaler_kind: str
    output_scaler_kind: str
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_sizes) != 4 or any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer_sizes must be four positive integers")
        if self.layer_sizes[-1] != 24:
            raise ValueError("output layer must have 24 units (one per hour)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l1_factor < 0.0:
            raise ValueError("l1_factor must be >= 0")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]


@dataclass(frozen=True)
class TrainingHyperparams:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    early_stop_patience: int = 20
    validation_fraction: float = 0.15
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass
class TrainedModel:
    """Network weights plus the scalers they were trained with.

    ``input_scaler``/``output_scaler`` are None until :func:`train` runs;
    :func:`forward` works in normalized units either way, while
    :func:`predict_prices` requires the scalers.
    """

    spec: ModelSpec
    weights: list  # three (fan_in, fan_out) float64 matrices
    biases: list  # three (fan_out,) float64 vectors
    input_scaler: ScalerParams | None = None
    output_scaler: ScalerParams | None = None
    history: list = field(default_factory=list)

    @property
    def is_trained(self) -> bool:
        return self.input_scaler is not None and self.output_scaler is not None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return np.where(z > 0.0, SELU_LAMBDA * z, SELU_LAMBDA * SELU_ALPHA * np.expm1(z))


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return _sigmoid(z)
    return np.where(z > 0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(z))


def benchmark_spec(market_id: str, seed: int = 0) -> ModelSpec:
    """Tuned architecture for one of the five benchmark markets."""
    table = {
        "DE": ((217, 329, 379, 24), "softplus", 0.455, 0.0,
               "glorot_uniform", "std", "median"),
        "FR": ((120, 233, 206, 24), "softplus", 0.193, 0.0,
               "glorot_uniform", "arcsinh", "std"),
        "BE": ((121, 205, 308, 24), "softplus", 0.253, 0.0,
               "he_normal", "arcsinh", "arcsinh"),
        "NP": ((144, 274, 308, 24), "softplus", 0.154, 0.0,
               "lecun_uniform", "median", "std"),
        "PJM": ((120, 299, 376, 24), "selu", 0.0079, 0.000306,
                "lecun_uniform", "arcsinh", "arcsinh"),
    }
    try:
        sizes, act, dropout, l1, init, sin, sout = table[market_id]
    except KeyError:
        raise ValueError(f"unknown market {market_id!r}") from None
    return ModelSpec(
        layer_sizes=sizes,
        activation=act,
        dropout_rate=dropout,
        l1_factor=l1,
        init_scheme=init,
        input_scaler_kind=sin,
        output_scaler_kind=sout,
        seed=seed,
    )


def init_model(spec: ModelSpec) -> TrainedModel:
    """Fresh network with scheme-appropriate random weights and zero biases."""
    rng = np.random.default_rng(spec.seed)
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        shape = (fan_in, fan_out)
        if spec.init_scheme == "glorot_uniform":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, shape)
        elif spec.init_scheme == "he_normal":
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        elif spec.init_scheme == "lecun_uniform":
            bound = math.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, shape)
        else:  # lecun_normal
            w = rng.normal(0.0, math.sqrt(1.0 / fan_in), shape)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return TrainedModel(spec=spec, weights=weights, biases=biases)


def _as_batch(x: np.ndarray, n_inputs: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_inputs:
        raise ValueError(f"expected {n_inputs} input features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("model input contains non-finite values")
    return x, single


def forward_trace(model: TrainedModel, x_norm: np.ndarray):
    """Forward pass in normalized units, keeping pre-activations.

    Returns ``(z1, a1, z2, a2, y_norm)`` for a 2-D batch; used by training
    and by the analytic gradient path.
    """
    w1, w2, w3 = model.weights
    b1, b2, b3 = model.biases
    act = model.spec.activation
    z1 = x_norm @ w1 + b1
    a1 = _activation(act, z1)
    z2 = a1 @ w2 + b2
    a2 = _activation(act, z2)
    y = a2 @ w3 + b3
    return z1, a1, z2, a2, y


def forward(model: TrainedModel, x_norm: np.ndarray) -> np.ndarray:
    """Normalized inputs to normalized outputs, no dropout."""
    batch, single = _as_batch(x_norm, model.spec.n_inputs)
    y = forward_trace(model, batch)[-1]
    return y[0] if single else y


def predict_prices(model: TrainedModel, x_raw: np.ndarray) -> np.ndarray:
    """Raw feature rows to 24 hourly prices in raw units."""
    if not model.is_trained:
        raise ModelError("model has no fitted scalers; train it first")
    batch, single = _as_batch(x_raw, model.spec.n_inputs)
    y = forward_trace(model, transform(model.input_scaler, batch))[-1]
    prices = inverse_transform(model.output_scaler, y)
    return prices[0] if single else prices


def _batch_gradients(model, xb, yb, masks):
    """Loss and parameter gradients for one dropped-out minibatch."""
    w1, w2, w3 = model.weights
    b1, b2, b3 = model.biases
    act = model.spec.activation
    l1 = model.spec.l1_factor

    z1 = xb @ w1 + b1
    a1 = _activation(act, z1)
    if masks is not None:
        a1 = a1 * masks[0]
    z2 = a1 @ w2 + b2
    a2 = _activation(act, z2)
    if masks is not None:
        a2 = a2 * masks[1]
    y = a2 @ w3 + b3

    resid = y - yb
    loss = float(np.mean(np.abs(resid)))
    if l1 > 0.0:
        loss += l1 * float(sum(np.sum(np.abs(w)) for w in model.weights))

    dy = np.sign(resid) / resid.size
    dw3 = a2.T @ dy
    db3 = dy.sum(axis=0)
    da2 = dy @ w3.T
    if masks is not None:
        da2 = da2 * masks[1]
    dz2 = da2 * _activation_grad(act, z2)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ w2.T
    if masks is not None:
        da1 = da1 * masks[0]
    dz1 = da1 * _activation_grad(act, z1)
    dw1 = xb.T @ dz1
    db1 = dz1.sum(axis=0)

    if l1 > 0.0:
        dw1 = dw1 + l1 * np.sign(w1)
        dw2 = dw2 + l1 * np.sign(w2)
        dw3 = dw3 + l1 * np.sign(w3)
    return loss, [dw1, dw2, dw3], [db1, db2, db3]


def train(
    model: TrainedModel,
    features: FeatureMatrix,
    hp: TrainingHyperparams | None = None,
) -> TrainedModel:
    """Fit the network on a feature matrix; returns a new trained model.

    Scalers are fit on the chronological training slice only, the trailing
    ``validation_fraction`` of days is held out for early stopping, and the
    weights that achieved the best validation MAE are restored at the end.
    With ``validation_fraction`` 0 the model simply runs all epochs.
    Raises :class:`DivergedLoss` if any loss turns non-finite and
    :class:`TooFewInstances` when the split leaves fewer than 2 training days.
    """
    hp = hp or TrainingHyperparams()
    spec = model.spec
    if features.n_features != spec.n_inputs:
        raise ValueError(
            f"model expects {spec.n_inputs} features, matrix has {features.n_features}"
        )
    n = features.n_instances
    n_val = int(round(hp.validation_fraction * n)) if hp.validation_fraction else 0
    n_train = n - n_val
    if n_train < 2:
        raise TooFewInstances(
            f"{n} instances leave {n_train} for training after the split"
        )

    input_scaler = fit_scaler(spec.input_scaler_kind, features.values[:n_train])
    output_scaler = fit_scaler(spec.output_scaler_kind, features.targets[:n_train])
    x_all = transform(input_scaler, features.values)
    y_all = transform(output_scaler, features.targets)
    x_train, y_train = x_all[:n_train], y_all[:n_train]
    x_val, y_val = x_all[n_train:], y_all[n_train:]

    rng = np.random.default_rng(hp.seed)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    work = TrainedModel(spec=spec, weights=weights, biases=biases)

    params = weights + biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    t = 0
    dropout = spec.dropout_rate
    hidden_sizes = (spec.layer_sizes[1], spec.layer_sizes[2])

    best_val = math.inf
    best_weights = [w.copy() for w in weights]
    best_biases = [b.copy() for b in biases]
    stall = 0
    history: list[dict] = []

    for epoch in range(hp.max_epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for lo in range(0, n_train, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            masks = None
            if dropout > 0.0:
                keep = 1.0 - dropout
                masks = [
                    (rng.random((len(idx), h)) >= dropout) / keep
                    for h in hidden_sizes
                ]
            loss, dws, dbs = _batch_gradients(work, xb, yb, masks)
            epoch_loss += loss * len(idx)
            t += 1
            c1 = 1.0 - hp.adam_beta1**t
            c2 = 1.0 - hp.adam_beta2**t
            for p, m, v, g in zip(params, m_state, v_state, dws + dbs):
                m *= hp.adam_beta1
                m += (1.0 - hp.adam_beta1) * g
                v *= hp.adam_beta2
                v += (1.0 - hp.adam_beta2) * g * g
                p -= hp.learning_rate * (m / c1) / (np.sqrt(v / c2) + hp.adam_epsilon)
        epoch_loss /= n_train

        record = {"epoch": epoch, "train_loss": epoch_loss, "val_mae": None}
        if not math.isfinite(epoch_loss):
            raise DivergedLoss(f"training loss became {epoch_loss} at epoch {epoch}")
        if n_val:
            val_pred = forward_trace(work, x_val)[-1]
            val_mae = float(np.mean(np.abs(val_pred - y_val)))
            if not math.isfinite(val_mae):
                raise DivergedLoss(f"validation MAE became {val_mae} at epoch {epoch}")
            record["val_mae"] = val_mae
            history.append(record)
            if val_mae < best_val:
                best_val = val_mae
                best_weights = [w.copy() for w in weights]
                best_biases = [b.copy() for b in biases]
                stall = 0
            else:
                stall += 1
                if stall > hp.early_stop_patience:
                    break
        else:
            history.append(record)

    if n_val:
        final_weights, final_biases = best_weights, best_biases
    else:
        final_weights, final_biases = weights, biases
    return TrainedModel(
        spec=spec,
        weights=final_weights,
        biases=final_biases,
        input_scaler=input_scaler,
        output_scaler=output_scaler,
        history=history,
    )


def _scaler_to_dict(params: ScalerParams | None):
    if params is None:
        return None
    return {
        "kind": params.kind,
        "location": params.location.tolist(),
        "scale": params.scale.tolist(),
    }


def _scaler_from_dict(payload) -> ScalerParams | None:
    if payload is None:
        return None
    return ScalerParams(
        kind=payload["kind"],
        location=np.asarray(payload["location"], dtype=np.float64),
        scale=np.asarray(payload["scale"], dtype=np.float64),
    )


def save_model(model: TrainedModel) -> str:
    """Serialize a model to versioned JSON text; exact float round-trip."""
    payload = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "spec": {
            "layer_sizes": list(model.spec.layer_sizes),
            "activation": model.spec.activation,
            "dropout_rate": model.spec.dropout_rate,
            "l1_factor": model.spec.l1_factor,
            "init_scheme": model.spec.init_scheme,
            "input_scaler_kind": model.spec.input_scaler_kind,
            "output_scaler_kind": model.spec.output_scaler_kind,
            "seed": model.spec.seed,
        },
        "input_scaler": _scaler_to_dict(model.input_scaler),
        "output_scaler": _scaler_to_dict(model.output_scaler),
        "layers": [
            {
                "rows": w.shape[0],
                "cols": w.shape[1],
                "weights_row_major": w.reshape(-1).tolist(),
                "bias": b.tolist(),
            }
            for w, b in zip(model.weights, model.biases)
        ],
        "history": model.history,
    }
    return json.dumps(payload, indent=1)


def load_model(text: str) -> TrainedModel:
    """Inverse of :func:`save_model`.

    Raises :class:`SchemaVersionMismatch` for foreign schema versions and
    :class:`CorruptPayload` for anything that does not decode into a
    consistent network.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptPayload(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CorruptPayload("top-level JSON value is not an object")
    version = payload.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"schema_version {version!r}, supported {MODEL_SCHEMA_VERSION}"
        )
    try:
        sp = payload["spec"]
        spec = ModelSpec(
            layer_sizes=tuple(sp["layer_sizes"]),
            activation=sp["activation"],
            dropout_rate=sp["dropout_rate"],
            l1_factor=sp["l1_factor"],
            init_scheme=sp["init_scheme"],
            input_scaler_kind=sp["input_scaler_kind"],
            output_scaler_kind=sp["output_scaler_kind"],
            seed=sp["seed"],
        )
        weights, biases = [], []
        for layer in payload["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            flat = np.asarray(layer["weights_row_major"], dtype=np.float64)
            if flat.size != rows * cols:
                raise CorruptPayload(
                    f"layer holds {flat.size} weights, expected {rows * cols}"
                )
            weights.append(flat.reshape(rows, cols))
            biases.append(np.asarray(layer["bias"], dtype=np.float64))
        model = TrainedModel(
            spec=spec,
            weights=weights,
            biases=biases,
            input_scaler=_scaler_from_dict(payload.get("input_scaler")),
            output_scaler=_scaler_from_dict(payload.get("output_scaler")),
            history=payload.get("history", []),
        )
    except CorruptPayload:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayload(f"bad model payload: {exc}") from exc

    shapes = [w.shape for w in model.weights]
    expected = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    if shapes != expected or len(model.biases) != 3:
        raise CorruptPayload(f"layer shapes {shapes} do not match spec {expected}")
    for b, (_, fan_out) in zip(model.biases, expected):
        if b.shape != (fan_out,):
            raise CorruptPayload(f"bias shape {b.shape} does not match {fan_out}")
    return model


def count_parameters(model: TrainedModel) -> int:
    return sum(w.size for w in model.weights) + sum(b.size for b in model.biases)
