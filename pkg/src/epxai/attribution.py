"""Per-instance model explanations: gradients and Shapley values.

Two complementary views of a trained forecaster:

* :func:`jacobian` gives the analytic derivative of every denormalised
  output price with respect to every normalized input, computed by reverse
  accumulation through the network and the output scaler. No sampling, no
  truncation error.

* :func:`shap_mc` estimates Shapley values by sampling (permutation,
  background row) pairs and walking the permutation, switching one feature
  at a time from the background value to the instance value. Each walk
  telescopes, so the summed values reproduce the prediction minus the
  sampled baseline regardless of how few pairs are drawn. The value
  function marginalises removed features over an empirical background set
  (full rows, so feature dependence within the background is preserved;
  conditional value functions are a possible extension, not implemented).
  :func:`shap_exact` enumerates all coalitions for small feature counts and
  serves as the ground truth the sampler is checked against.

Shapley values are computed on denormalised outputs, so gradient and
Shapley artefacts share the unit of the target price.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .data import FeatureId, FeatureMatrix
from .errors import EpxaiError
from .mlp import ModelError, TrainedModel, forward_trace, predict_prices, transform

__all__ = [
    "AttributionError",
    "EmptyBackground",
    "NonFiniteModelOutput",
    "TooManyFeatures",
    "BackgroundSet",
    "ShapExplanation",
    "AttributionTensor",
    "sample_background",
    "jacobian",
    "jacobian_batch",
    "shap_mc",
    "shap_exact",
    "explain_dataset",
    "attribution_to_csv",
]


class AttributionError(EpxaiError):
    """Base class for attribution-layer errors."""


class EmptyBackground(AttributionError):
    """Background set with no rows."""


class NonFiniteModelOutput(AttributionError):
    """Model produced NaN or infinity while being explained."""


class TooManyFeatures(AttributionError):
    """Exact enumeration requested above the feature-count cap."""


EXACT_FEATURE_CAP = 12

# Rows per model evaluation chunk; bounds peak memory during enumeration.
_CHUNK_ROWS = 1 << 16


@dataclass(frozen=True)
class BackgroundSet:
    """Raw-unit feature rows that removed features are averaged over."""

    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] == 0:
            raise EmptyBackground("background needs at least one row")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("background rows must be finite")

    @property
    def size(self) -> int:
        return self.rows.shape[0]


@dataclass
class ShapExplanation:
    """Sampled Shapley values for one instance.

    ``values[h, i]`` is the contribution of feature i to the hour-h price;
    ``baseline`` is the mean prediction over the sampled background rows, so
    ``values.sum(axis=1) == prediction - baseline`` up to rounding.
    ``stderr`` is the per-value standard error over pair estimates (NaN when
    only one pair was drawn).
    """

    values: np.ndarray  # (24, n_features)
    baseline: np.ndarray  # (24,)
    stderr: np.ndarray  # (24, n_features)
    n_pairs: int
    antithetic: bool


@dataclass
class AttributionTensor:
    """Stacked per-instance attributions: (n_instances, 24, n_features).

    ``kind`` is "shap" (baseline present, one vector shared by every
    instance) or "gradient" (baseline None).
    """

    kind: str
    instance_ids: list
    feature_ids: tuple
    values: np.ndarray
    baseline: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("shap", "gradient"):
            raise ValueError(f"unknown tensor kind {self.kind!r}")
        n_inst, n_hours, n_feat = self.values.shape
        if n_inst != len(self.instance_ids) or n_hours != 24:
            raise ValueError("values must be (n_instances, 24, n_features)")
        if n_feat != len(self.feature_ids):
            raise ValueError("feature axis does not match feature_ids")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]


def sample_background(
    features: FeatureMatrix, size: int = 100, seed: int = 0
) -> BackgroundSet:
    """Draw background rows uniformly without replacement (capped at n)."""
    n = features.n_instances
    if n == 0:
        raise EmptyBackground("feature matrix has no instances")
    take = min(size, n)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=take, replace=False))
    return BackgroundSet(rows=features.values[idx].copy())


def _require_trained(model: TrainedModel):
    if not model.is_trained:
        raise ModelError("model has no fitted scalers; train it first")


def _predict_fn(model):
    """Batch prediction callable for a trained model or a bare function.

    Shapley machinery only needs rows-in, 24-prices-out, so any callable
    with that contract can be explained (handy for closed-form checks).
    """
    if isinstance(model, TrainedModel):
        _require_trained(model)
        return lambda batch: predict_prices(model, batch)
    if callable(model):
        return model
    raise TypeError(f"cannot explain object of type {type(model).__name__}")


def _predict_checked(fn, states: np.ndarray) -> np.ndarray:
    preds = np.asarray(fn(states), dtype=np.float64)
    if preds.shape != (states.shape[0], 24):
        raise ValueError(f"predictor returned shape {preds.shape}, expected (n, 24)")
    if not np.all(np.isfinite(preds)):
        raise NonFiniteModelOutput("model produced non-finite outputs")
    return preds


def _output_derivative(model: TrainedModel, y_norm: np.ndarray) -> np.ndarray:
    """d(denormalised output)/d(normalized output), per output unit."""
    scaler = model.output_scaler
    if scaler.kind == "arcsinh":
        return scaler.scale * np.cosh(y_norm)
    return np.broadcast_to(scaler.scale, y_norm.shape).copy()


def jacobian_batch(model: TrainedModel, x_raw: np.ndarray) -> np.ndarray:
    """Analytic Jacobians for a batch of raw rows: (n, 24, n_features).

    Entry (h, i) is the derivative of the hour-h price (raw units) with
    respect to normalized input i, accumulated right to left through both
    hidden layers and the output scaler.
    """
    _require_trained(model)
    x_raw = np.asarray(x_raw, dtype=np.float64)
    single = x_raw.ndim == 1
    if single:
        x_raw = x_raw[None, :]
    xn = transform(model.input_scaler, x_raw)
    z1, _, z2, _, yn = forward_trace(model, xn)
    if not np.all(np.isfinite(yn)):
        raise NonFiniteModelOutput("forward pass produced non-finite outputs")

    from .mlp import _activation_grad  # shared derivative definitions

    act = model.spec.activation
    s1 = _activation_grad(act, z1)  # (n, h1)
    s2 = _activation_grad(act, z2)  # (n, h2)
    w1, w2, w3 = model.weights
    d_out = _output_derivative(model, yn)  # (n, 24)

    back = s2[:, :, None] * w3[None, :, :]  # (n, h2, 24)
    back = np.einsum("ab,nbo->nao", w2, back)  # (n, h1, 24)
    back *= s1[:, :, None]
    back = np.einsum("ia,nao->nio", w1, back)  # (n, n_in, 24)
    jac = np.transpose(back, (0, 2, 1)) * d_out[:, :, None]
    if not np.all(np.isfinite(jac)):
        raise NonFiniteModelOutput("gradient accumulation produced non-finite values")
    return jac[0] if single else jac


def jacobian(model: TrainedModel, x_raw: np.ndarray) -> np.ndarray:
    """Analytic Jacobian for one raw row: (24, n_features)."""
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.ndim != 1:
        raise ValueError("jacobian takes a single 1-D feature row")
    return jacobian_batch(model, x_raw)


def _walk_predictions(fn, x, zs, perms):
    """Predictions along permutation walks: (n_pairs, n_features+1, 24).

    Row k of a walk has the first k features (in permutation order) switched
    from the background row to the instance values.
    """
    n_pairs, n_f = perms.shape
    positions = np.argsort(perms, axis=1)  # positions[p, j]: step feature j switches
    mask = positions[:, None, :] < np.arange(n_f + 1)[None, :, None]
    states = np.where(mask, x[None, None, :], zs[:, None, :])
    preds = _predict_checked(fn, states.reshape(-1, n_f))
    return preds.reshape(n_pairs, n_f + 1, 24)


def _walk_contributions(preds, perms):
    """Scatter per-step prediction deltas back to feature order."""
    n_pairs, n_f = perms.shape
    diffs = preds[:, 1:, :] - preds[:, :-1, :]  # (P, n_f, 24), step order
    contrib = np.empty_like(diffs)
    contrib[np.arange(n_pairs)[:, None], perms, :] = diffs
    return contrib


def shap_mc(
    model: TrainedModel,
    x_raw: np.ndarray,
    background: BackgroundSet,
    n_pairs: int = 64,
    seed=0,
    antithetic: bool = True,
    background_draws: np.ndarray | None = None,
) -> ShapExplanation:
    """Monte-Carlo permutation Shapley values for one instance.

    Draws ``n_pairs`` (background row, permutation) pairs; with
    ``antithetic`` each permutation is also walked in reverse on the same
    row, which cancels first-order walk noise at no extra sampling budget.
    ``background_draws`` (an index array into the background set) can be
    supplied to share one background sample across many instances; the
    permutations still come from ``seed``. Draw order is fixed: background
    indices first, then permutations, so a given seed always produces the
    same walks.
    """
    fn = _predict_fn(model)
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.ndim != 1:
        raise ValueError("shap_mc takes a single 1-D feature row")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n_f = x_raw.shape[0]
    rng = np.random.default_rng(seed)
    if background_draws is None:
        draws = rng.integers(0, background.size, size=n_pairs)
    else:
        draws = np.asarray(background_draws, dtype=np.intp)
        if draws.shape != (n_pairs,):
            raise ValueError("background_draws must have shape (n_pairs,)")
        if draws.size and (draws.min() < 0 or draws.max() >= background.size):
            raise ValueError("background_draws index out of range")
    zs = background.rows[draws]
    perms = np.stack([rng.permutation(n_f) for _ in range(n_pairs)])

    preds = _walk_predictions(fn, x_raw, zs, perms)
    estimates = _walk_contributions(preds, perms)
    if antithetic:
        preds_rev = _walk_predictions(fn, x_raw, zs, perms[:, ::-1])
        estimates = 0.5 * (estimates + _walk_contributions(preds_rev, perms[:, ::-1]))

    values = estimates.mean(axis=0).T  # (24, n_f)
    baseline = preds[:, 0, :].mean(axis=0)
    if n_pairs > 1:
        stderr = (estimates.std(axis=0, ddof=1) / np.sqrt(n_pairs)).T
    else:
        stderr = np.full((24, n_f), np.nan)
    return ShapExplanation(
        values=values,
        baseline=baseline,
        stderr=stderr,
        n_pairs=n_pairs,
        antithetic=antithetic,
    )


def shap_exact(
    model: TrainedModel, x_raw: np.ndarray, background: BackgroundSet
) -> np.ndarray:
    """Exact Shapley values by coalition enumeration: (24, n_features).

    The value of a coalition is the mean prediction over the background set
    with coalition features fixed to the instance. Cost grows as
    2^n_features * background size, so the feature count is capped at
    :data:`EXACT_FEATURE_CAP`.
    """
    fn = _predict_fn(model)
    x_raw = np.asarray(x_raw, dtype=np.float64)
    n_f = x_raw.shape[0]
    if n_f > EXACT_FEATURE_CAP:
        raise TooManyFeatures(f"{n_f} features exceeds cap {EXACT_FEATURE_CAP}")
    n_masks = 1 << n_f
    bits = (np.arange(n_masks)[:, None] >> np.arange(n_f)[None, :]) & 1  # (2^n, n_f)

    b = background.size
    coalition_values = np.empty((n_masks, 24))
    masks_per_chunk = max(1, _CHUNK_ROWS // b)
    for lo in range(0, n_masks, masks_per_chunk):
        hi = min(lo + masks_per_chunk, n_masks)
        chunk_bits = bits[lo:hi, None, :].astype(bool)  # (c, 1, n_f)
        states = np.where(chunk_bits, x_raw[None, None, :], background.rows[None, :, :])
        preds = _predict_checked(fn, states.reshape(-1, n_f))
        coalition_values[lo:hi] = preds.reshape(hi - lo, b, 24).mean(axis=1)

    sizes = bits.sum(axis=1)
    weight_by_size = np.array(
        [
            factorial(s) * factorial(n_f - 1 - s) / factorial(n_f)
            for s in range(n_f)
        ]
    )
    values = np.empty((24, n_f))
    all_masks = np.arange(n_masks)
    for i in range(n_f):
        without = all_masks[(all_masks >> i) & 1 == 0]
        w = weight_by_size[sizes[without]]
        gaps = coalition_values[without | (1 << i)] - coalition_values[without]
        values[:, i] = w @ gaps
    return values


def explain_dataset(
    model: TrainedModel,
    features: FeatureMatrix,
    background: BackgroundSet,
    n_pairs: int = 64,
    seed: int = 0,
    antithetic: bool = True,
    instance_indices: np.ndarray | None = None,
) -> tuple[AttributionTensor, AttributionTensor]:
    """Shapley and gradient tensors for a whole feature matrix.

    One background draw sequence (derived from ``seed``) is shared by every
    instance, so the tensor's single baseline vector is the exact baseline
    of each instance and summing an instance's values reproduces its
    prediction minus that shared baseline. Permutations use per-instance
    child seeds, also derived from ``seed``.
    """
    if instance_indices is None:
        instance_indices = np.arange(features.n_instances)
    else:
        instance_indices = np.asarray(instance_indices, dtype=np.intp)
    rows = features.values[instance_indices]
    ids = [str(features.instances[i]) for i in instance_indices]

    draw_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    draws = draw_rng.integers(0, background.size, size=n_pairs)
    baseline = predict_prices(model, background.rows[draws]).mean(axis=0)

    shap_values = np.empty((len(rows), 24, features.n_features))
    for k, row in enumerate(rows):
        result = shap_mc(
            model,
            row,
            background,
            n_pairs=n_pairs,
            seed=np.random.SeedSequence([seed, 1, int(instance_indices[k])]),
            antithetic=antithetic,
            background_draws=draws,
        )
        shap_values[k] = result.values

    grad_values = (
        jacobian_batch(model, rows)
        if len(rows)
        else np.empty((0, 24, features.n_features))
    )

    shap_tensor = AttributionTensor(
        kind="shap",
        instance_ids=ids,
        feature_ids=features.columns,
        values=shap_values,
        baseline=baseline,
    )
    grad_tensor = AttributionTensor(
        kind="gradient",
        instance_ids=ids,
        feature_ids=features.columns,
        values=grad_values,
    )
    return shap_tensor, grad_tensor


def attribution_to_csv(tensor: AttributionTensor) -> str:
    """Flat CSV of a tensor: instance, output hour, feature, value.

    Values use shortest round-trip float formatting, so equal tensors
    always serialize to byte-identical text.
    """
    lines = ["instance_id,output_hour,group,input_hour,value"]
    for k, instance_id in enumerate(tensor.instance_ids):
        block = tensor.values[k]
        for h in range(24):
            row = block[h]
            for j, fid in enumerate(tensor.feature_ids):
                hour = "" if fid.hour is None else str(fid.hour)
                lines.append(
                    f"{instance_id},{h},{fid.group},{hour},{float(row[j])!r}"
                )
    return "\n".join(lines) + "\n"
