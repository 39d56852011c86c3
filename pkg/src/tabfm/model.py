"""Model assembly, the training loop, the explicit-pairs linear baseline,
and checkpoint serialization.

A DeepFMModel combines one shared embedding bank with an FM head and an MLP
head; the class scores are the sum of the two heads' scores, mapped through a
softmax.  Variants drop one head: ``fm_only`` has no MLP, ``dnn_only`` no FM.
Training minimizes multiclass cross-entropy plus elementwise L1/L2 penalties
on weights (never biases) with adaptive moment estimation, and early-stops on
validation balanced accuracy.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    FeatureSchema,
    Standardizer,
    encode_dataset,
    feature_scalars,
    fit_standardizer,
    identity_standardizer,
    schema_from_obj,
    schema_to_obj,
)
from .embeddings import EmbeddingBank, embed_batch, embed_jacobians_batch, init_embeddings
from .errors import (
    CheckpointError,
    LeakageError,
    NumericalError,
    ShapeError,
    TrainingDivergedError,
)
from .fm import FMHead, fm_backward_batch, fm_forward_batch, init_fm_head
from .mlp import MLPHead, init_mlp_head, mlp_backward_batch, mlp_forward_batch

VARIANTS = ("deepfm", "fm_only", "dnn_only")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Everything the trainer needs; produced by hand or by the search space."""

    learning_rate: float = 1e-2
    l1_weight: float = 0.0
    l2_weight: float = 0.0
    dropout_rate: float = 0.0
    m: int = 8
    h1: int = 64
    h2: int = 32
    h3: int = 0          # third hidden layer, honored by variant dnn_only only
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ShapeError(f"learning_rate {self.learning_rate} invalid")
        if self.l1_weight < 0 or self.l2_weight < 0:
            raise ShapeError("regularization weights must be nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        for name in ("m", "h1", "h2", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be a positive integer")
        if self.h3 < 0:
            raise ShapeError("h3 must be nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "learning_rate", "l1_weight", "l2_weight", "dropout_rate", "m",
            "h1", "h2", "h3", "batch_size", "max_epochs", "patience", "seed")}


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_balanced_accuracy: float


@dataclass
class DeepFMModel:
    """Embedding bank + heads for one of the three deep/FM variants.

    ``fm`` is None for dnn_only, ``mlp`` is None for fm_only.  The fitted
    standardizer travels with the model so checkpoints reproduce predictions
    from raw samples.  ``literal_interactions`` switches the interaction term
    to the literal reading that multiplies each embedding dot product by the
    raw scalar values once more (off by default; see fm module docs).
    """

    schema: FeatureSchema
    variant: str
    bank: EmbeddingBank
    fm: FMHead | None
    mlp: MLPHead | None
    standardizer: Standardizer
    literal_interactions: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ShapeError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if (self.fm is None) != (self.variant == "dnn_only"):
            raise ShapeError(f"variant {self.variant!r} and FM head presence disagree")
        if (self.mlp is None) != (self.variant == "fm_only"):
            raise ShapeError(f"variant {self.variant!r} and MLP head presence disagree")
        self.bank.validate(self.schema)
        if self.fm is not None:
            self.fm.validate(self.schema.width, self.schema.n_classes, self.bank.m)
        if self.mlp is not None:
            self.mlp.validate()
            expected = self.schema.n_features * self.bank.m
            if self.mlp.input_width != expected:
                raise ShapeError(f"MLP input width {self.mlp.input_width}, expected {expected}")
            if self.mlp.n_classes != self.schema.n_classes:
                raise ShapeError("MLP class count disagrees with schema")

    def copy(self) -> "DeepFMModel":
        return DeepFMModel(
            schema=self.schema, variant=self.variant, bank=self.bank.copy(),
            fm=self.fm.copy() if self.fm else None,
            mlp=self.mlp.copy() if self.mlp else None,
            standardizer=self.standardizer,
            literal_interactions=self.literal_interactions,
        )


@dataclass
class LinearInteractionModel:
    """Multinomial logistic regression over [x, all products x_a x_b, a < b].

    With ``include_pairs`` False the expansion is skipped and this is a plain
    main-effects logistic regression (the no-interaction reference point).
    """

    schema: FeatureSchema
    weights: np.ndarray      # (C, D_expanded)
    bias: np.ndarray         # (C,)
    standardizer: Standardizer
    include_pairs: bool = True

    def validate(self) -> None:
        d = expanded_width(self.schema.width, self.include_pairs)
        if self.weights.shape != (self.schema.n_classes, d):
            raise ShapeError(
                f"weights shape {self.weights.shape}, expected ({self.schema.n_classes}, {d})"
            )
        if self.bias.shape != (self.schema.n_classes,):
            raise ShapeError(f"bias shape {self.bias.shape} inconsistent")


def expanded_width(d: int, include_pairs: bool = True) -> int:
    return d + (d * (d - 1)) // 2 if include_pairs else d


def expand_pairs(x: np.ndarray, include_pairs: bool = True) -> np.ndarray:
    """Append all pairwise products x_a * x_b (a < b) to each row."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if not include_pairs:
        return x[0] if single else x
    a, b = np.triu_indices(x.shape[1], k=1)
    z = np.concatenate([x, x[:, a] * x[:, b]], axis=1)
    return z[0] if single else z


def init_model(schema: FeatureSchema, variant: str, config: TrainConfig,
               literal_interactions: bool = False) -> DeepFMModel:
    """Fresh model for a variant; all randomness derives from config.seed."""
    if variant not in VARIANTS:
        raise ShapeError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    config.validate()
    bank = init_embeddings(schema, config.m, seed=[config.seed, 0])
    fm = None
    if variant != "dnn_only":
        fm = init_fm_head(schema.width, schema.n_classes, config.m)
    mlp = None
    if variant != "fm_only":
        hidden = [config.h1, config.h2]
        if variant == "dnn_only" and config.h3 > 0:
            hidden.append(config.h3)
        mlp = init_mlp_head(schema.n_features * config.m, hidden,
                            schema.n_classes, config.dropout_rate,
                            seed=[config.seed, 1])
    model = DeepFMModel(schema=schema, variant=variant, bank=bank, fm=fm,
                        mlp=mlp, standardizer=identity_standardizer(schema),
                        literal_interactions=literal_interactions)
    model.validate()
    return model


def named_parameters(model) -> list:
    """Ordered (name, array, regularized) triples over all trainable arrays.

    The arrays are the live model buffers (mutated in place by the trainer).
    Biases are never regularized, which keeps the all-zero model's loss at
    exactly ln C.
    """
    if isinstance(model, LinearInteractionModel):
        return [("linear.weights", model.weights, True),
                ("linear.bias", model.bias, False)]
    out = []
    if model.fm is not None:
        out.append(("fm.w0", model.fm.w0, False))
        out.append(("fm.w", model.fm.w, True))
        out.append(("fm.v", model.fm.v, True))
    for i, a in enumerate(model.bank.matrices):
        out.append((f"embed.A{i}", a, True))
    if model.mlp is not None:
        for k, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
            out.append((f"mlp.w{k}", w, True))
            out.append((f"mlp.b{k}", b, False))
        out.append(("mlp.w_out", model.mlp.w_out, True))
        out.append(("mlp.b_out", model.mlp.b_out, False))
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _cross_entropy(scores: np.ndarray, y: np.ndarray):
    # log-softmax from shifted scores so an underflowing class yields a huge
    # finite loss instead of log(0)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = -float(np.mean(log_probs[np.arange(len(y)), y]))
    return data, np.exp(log_probs)


def _interaction_scale(model: DeepFMModel, x: np.ndarray):
    if not model.literal_interactions:
        return None
    return feature_scalars(x, model.schema)[..., None]   # (N, n, 1)


def _scores_batch(model: DeepFMModel, x: np.ndarray, mode: str = "eval", rng=None):
    """Class scores plus the caches backward needs (E, E_fm, flat, masks)."""
    x = np.asarray(x, dtype=float)
    e = embed_batch(model.bank, x, model.schema)
    scale = _interaction_scale(model, x)
    e_fm = e if scale is None else e * scale
    scores = np.zeros((x.shape[0], model.schema.n_classes))
    flat = masks = None
    if model.fm is not None:
        scores += fm_forward_batch(model.fm, x, e_fm)
    if model.mlp is not None:
        flat = e.reshape(e.shape[0], -1)
        mlp_scores, masks, _ = mlp_forward_batch(model.mlp, flat, mode=mode, rng=rng)
        scores += mlp_scores
    return scores, e, e_fm, flat, masks


def deep_scores_batch(model: DeepFMModel, x: np.ndarray) -> np.ndarray:
    """Eval-mode MLP head scores (N, C); zeros when the variant has no MLP."""
    x = np.asarray(x, dtype=float)
    if model.mlp is None:
        return np.zeros((x.shape[0], model.schema.n_classes))
    e = embed_batch(model.bank, x, model.schema)
    scores, _, _ = mlp_forward_batch(model.mlp, e.reshape(e.shape[0], -1), mode="eval")
    return scores


def _finite_diagnostics(model) -> str:
    bad = [name for name, arr, _ in named_parameters(model)
           if not np.all(np.isfinite(arr))]
    return f"non-finite parameter arrays: {bad}" if bad else "all parameters finite"


def _eval_scores(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, LinearInteractionModel):
        z = expand_pairs(x, model.include_pairs)
        return z @ model.weights.T + model.bias
    scores, *_ = _scores_batch(model, x, mode="eval")
    return scores


def predict_proba_batch(model, x: np.ndarray) -> np.ndarray:
    """Class probabilities (N, C) for encoded inputs; works for both
    DeepFMModel and LinearInteractionModel."""
    x = np.asarray(x, dtype=float)
    scores = _eval_scores(model, x)
    if not np.all(np.isfinite(scores)):
        raise NumericalError(f"non-finite class scores; {_finite_diagnostics(model)}")
    return _softmax(scores)


def predict_proba(model, x: np.ndarray) -> np.ndarray:
    """Probability vector over classes for one encoded input of width D."""
    x = np.asarray(x, dtype=float)
    width = model.schema.width
    if x.shape != (width,):
        raise ShapeError(f"x has shape {x.shape}, expected ({width},)")
    return predict_proba_batch(model, x[None, :])[0]


def predict_classes(model, x: np.ndarray) -> np.ndarray:
    return predict_proba_batch(model, x).argmax(axis=1)


def _regularization(params, l1: float, l2: float) -> float:
    if l1 == 0.0 and l2 == 0.0:
        return 0.0
    total = 0.0
    for _, arr, reg in params:
        if reg:
            total += l1 * np.abs(arr).sum() + l2 * np.square(arr).sum()
    return total


def loss(model, x: np.ndarray, y: np.ndarray,
         l1_weight: float = 0.0, l2_weight: float = 0.0) -> float:
    """Mean cross-entropy over the batch plus L1/L2 penalties on weights."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or y.shape[0] == 0:
        raise ShapeError("need a non-empty batch with matching x/y lengths")
    scores = _eval_scores(model, x)
    if not np.all(np.isfinite(scores)):
        raise NumericalError(f"non-finite class scores; {_finite_diagnostics(model)}")
    data, _ = _cross_entropy(scores, y)
    return data + _regularization(named_parameters(model), l1_weight, l2_weight)


def loss_gradients(model, x: np.ndarray, y: np.ndarray,
                   l1_weight: float = 0.0, l2_weight: float = 0.0,
                   mode: str = "eval", rng=None):
    """Total loss and its gradients keyed like :func:`named_parameters`.

    ``mode='train'`` samples dropout masks from ``rng``; the returned loss is
    then the masked objective the optimizer actually descends.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n_rows = x.shape[0]
    params = named_parameters(model)
    grads = {name: np.zeros_like(arr) for name, arr, _ in params}

    if isinstance(model, LinearInteractionModel):
        z = expand_pairs(x, model.include_pairs)
        data, probs = _cross_entropy(z @ model.weights.T + model.bias, y)
        upstream = probs.copy()
        upstream[np.arange(n_rows), y] -= 1.0
        upstream /= n_rows
        grads["linear.weights"] = upstream.T @ z
        grads["linear.bias"] = upstream.sum(axis=0)
    else:
        scores, e, e_fm, flat, masks = _scores_batch(model, x, mode=mode, rng=rng)
        data, probs = _cross_entropy(scores, y)
        upstream = probs.copy()
        upstream[np.arange(n_rows), y] -= 1.0
        upstream /= n_rows
        de = np.zeros_like(e)
        if model.fm is not None:
            dw0, dw, dv, de_fm = fm_backward_batch(model.fm, x, e_fm, upstream)
            scale = _interaction_scale(model, x)
            de += de_fm if scale is None else de_fm * scale
            grads["fm.w0"], grads["fm.w"], grads["fm.v"] = dw0, dw, dv
        if model.mlp is not None:
            (d_ws, d_bs, d_wout, d_bout), dflat = mlp_backward_batch(
                model.mlp, flat, masks, upstream)
            de += dflat.reshape(e.shape)
            for k in range(len(d_ws)):
                grads[f"mlp.w{k}"], grads[f"mlp.b{k}"] = d_ws[k], d_bs[k]
            grads["mlp.w_out"], grads["mlp.b_out"] = d_wout, d_bout
        d_a, _ = embed_jacobians_batch(model.bank, x, model.schema, de)
        for i, g in enumerate(d_a):
            grads[f"embed.A{i}"] = g

    total = data + _regularization(params, l1_weight, l2_weight)
    if l1_weight > 0.0 or l2_weight > 0.0:
        for name, arr, reg in params:
            if reg:
                grads[name] += l1_weight * np.sign(arr) + 2.0 * l2_weight * arr
    return total, grads


class _Adam:
    """Adaptive moment estimation over a list of live parameter arrays."""

    def __init__(self, params, learning_rate: float):
        self.lr = learning_rate
        self.params = params
        self.moment1 = [np.zeros_like(arr) for _, arr, _ in params]
        self.moment2 = [np.zeros_like(arr) for _, arr, _ in params]
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for k, (name, arr, _) in enumerate(self.params):
            g = grads[name]
            self.moment1[k] = ADAM_BETA1 * self.moment1[k] + (1.0 - ADAM_BETA1) * g
            self.moment2[k] = ADAM_BETA2 * self.moment2[k] + (1.0 - ADAM_BETA2) * g * g
            arr -= self.lr * (self.moment1[k] / c1) / (np.sqrt(self.moment2[k] / c2) + ADAM_EPS)


def _balanced_accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    # mean per-class recall over classes present in y (harness owns the
    # public, validated version of this metric)
    classes = np.unique(y)
    return float(np.mean([np.mean(pred[y == c] == c) for c in classes]))


def train_arrays(model, x_train, y_train, x_val, y_val, config: TrainConfig):
    """Core optimization loop over pre-encoded arrays.

    Returns (best model, per-epoch log).  The input model is not mutated;
    the returned model carries the parameters of the epoch with the best
    validation balanced accuracy (earliest epoch on ties).  Raises
    TrainingDivergedError as soon as any minibatch objective turns non-finite.
    """
    config.validate()
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train)
    x_val = np.asarray(x_val, dtype=float)
    y_val = np.asarray(y_val)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ShapeError("empty train or validation set")

    work = model.copy() if isinstance(model, DeepFMModel) else LinearInteractionModel(
        schema=model.schema, weights=model.weights.copy(), bias=model.bias.copy(),
        standardizer=model.standardizer, include_pairs=model.include_pairs)
    params = named_parameters(work)
    opt = _Adam(params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 2])
    n = len(x_train)

    # the expanded design matrix is reused across epochs for the linear model
    if isinstance(work, LinearInteractionModel):
        x_train = expand_pairs(x_train, work.include_pairs)

    def minibatch_grads(xb, yb):
        if isinstance(work, LinearInteractionModel):
            data, probs = _cross_entropy(xb @ work.weights.T + work.bias, yb)
            up = probs
            up[np.arange(len(yb)), yb] -= 1.0
            up /= len(yb)
            grads = {"linear.weights": up.T @ xb, "linear.bias": up.sum(axis=0)}
            total = data + _regularization(params, config.l1_weight, config.l2_weight)
            if config.l1_weight > 0.0 or config.l2_weight > 0.0:
                grads["linear.weights"] += (config.l1_weight * np.sign(work.weights)
                                            + 2.0 * config.l2_weight * work.weights)
            return total, grads
        return loss_gradients(work, xb, yb, config.l1_weight, config.l2_weight,
                              mode="train", rng=rng)

    log: list[EpochStats] = []
    best_metric = -np.inf
    best_state = None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_loss, grads = minibatch_grads(x_train[idx], y_train[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size} "
                    f"(learning_rate={config.learning_rate}); {_finite_diagnostics(work)}"
                )
            epoch_loss += batch_loss * len(idx)
            opt.step(grads)
        metric = _balanced_accuracy(predict_classes(work, x_val), y_val)
        log.append(EpochStats(epoch=epoch, train_loss=epoch_loss / n,
                              val_balanced_accuracy=metric))
        if metric > best_metric:
            best_metric = metric
            best_state = [arr.copy() for _, arr, _ in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    for (_, arr, _), saved in zip(params, best_state):
        arr[...] = saved
    return work, log


def _check_disjoint_patients(train_samples, val_samples) -> None:
    shared = {s.patient_id for s in train_samples} & {s.patient_id for s in val_samples}
    if shared:
        raise LeakageError(f"patients in both train and validation: {sorted(shared)[:5]}")


def train(model: DeepFMModel, train_samples, val_samples, config: TrainConfig):
    """Convenience trainer over raw samples.

    Fits the standardizer on the training samples, encodes both sets, runs
    train_arrays, and returns (model, log) with the fitted standardizer
    attached.  Train/validation patient ids must be disjoint.
    """
    _check_disjoint_patients(train_samples, val_samples)
    std = fit_standardizer(train_samples, model.schema)
    x_tr, y_tr = encode_dataset(train_samples, model.schema, std)
    x_va, y_va = encode_dataset(val_samples, model.schema, std)
    model = model.copy()
    model.standardizer = std
    return train_arrays(model, x_tr, y_tr, x_va, y_va, config)


def fit_linear_interactions(train_samples, val_samples, config: TrainConfig,
                            schema: FeatureSchema, include_pairs: bool = True):
    """Multinomial logistic regression on the pair-expanded input.

    Same optimizer and early stopping as the deep models; L1/L2 apply to the
    weight matrix only.  Returns (LinearInteractionModel, log).
    """
    _check_disjoint_patients(train_samples, val_samples)
    std = fit_standardizer(train_samples, schema)
    x_tr, y_tr = encode_dataset(train_samples, schema, std)
    x_va, y_va = encode_dataset(val_samples, schema, std)
    return fit_linear_arrays(x_tr, y_tr, x_va, y_va, config, schema,
                             include_pairs, standardizer=std)


def fit_linear_arrays(x_train, y_train, x_val, y_val, config: TrainConfig,
                      schema: FeatureSchema, include_pairs: bool = True,
                      standardizer: Standardizer = None):
    """Array-level variant of fit_linear_interactions."""
    d = expanded_width(schema.width, include_pairs)
    model = LinearInteractionModel(
        schema=schema,
        weights=np.zeros((schema.n_classes, d)),
        bias=np.zeros(schema.n_classes),
        standardizer=standardizer if standardizer is not None
        else identity_standardizer(schema),
        include_pairs=include_pairs,
    )
    return train_arrays(model, x_train, y_train, x_val, y_val, config)


def write_training_log(log, path) -> None:
    """Tab-separated epoch log: epoch, train_loss, val_balanced_accuracy."""
    lines = ["epoch\ttrain_loss\tval_balanced_accuracy"]
    for row in log:
        lines.append(f"{row.epoch}\t{row.train_loss!r}\t{row.val_balanced_accuracy!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"TBFM"
CHECKPOINT_VERSION = 1


def _checkpoint_arrays(model) -> list:
    arrays = [("std.mean", model.standardizer.mean),
              ("std.scale", model.standardizer.scale)]
    arrays += [(name, arr) for name, arr, _ in named_parameters(model)]
    return arrays


def save_checkpoint(model, path) -> None:
    """Single-file binary checkpoint: magic, JSON header, raw float64 payload.

    The header stores the schema itself (so loading is self-contained), the
    schema hash, array names/shapes, and a SHA-256 of the payload bytes.
    """
    arrays = _checkpoint_arrays(model)
    payload = b"".join(np.ascontiguousarray(arr, dtype=np.float64).tobytes()
                       for _, arr in arrays)
    if isinstance(model, LinearInteractionModel):
        kind, extras = "linear_interactions", {"include_pairs": model.include_pairs}
    else:
        model.validate()
        kind = "deepfm"
        extras = {"variant": model.variant, "m": model.bank.m,
                  "dropout_rate": model.mlp.dropout_rate if model.mlp else 0.0,
                  "hidden_sizes": [w.shape[0] for w in model.mlp.weights] if model.mlp else [],
                  "literal_interactions": model.literal_interactions}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": kind,
        "schema": schema_to_obj(model.schema),
        "schema_hash": model.schema.schema_hash,
        "zero_variance": list(model.standardizer.zero_variance),
        "extras": extras,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, expected_schema_hash: str = None):
    """Load a checkpoint; verifies magic, version, payload checksum, and
    (when given) the expected schema hash.  Returns the reconstructed model."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    payload = raw[off:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    if expected_schema_hash is not None and header.get("schema_hash") != expected_schema_hash:
        raise CheckpointError(
            f"{path}: checkpoint schema hash {header.get('schema_hash')} does not "
            f"match expected {expected_schema_hash}"
        )

    schema = schema_from_obj(header["schema"], context=f"{path} (embedded schema)")
    if schema.schema_hash != header.get("schema_hash"):
        raise CheckpointError(f"{path}: embedded schema does not match its recorded hash")

    arrays = {}
    pos = 0
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload shorter than declared arrays")
        arrays[meta["name"]] = np.frombuffer(
            payload, dtype=np.float64, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes

    std = Standardizer(mean=arrays["std.mean"], scale=arrays["std.scale"],
                       zero_variance=tuple(header.get("zero_variance", ())))
    extras = header["extras"]
    if header["model_kind"] == "linear_interactions":
        model = LinearInteractionModel(
            schema=schema, weights=arrays["linear.weights"],
            bias=arrays["linear.bias"], standardizer=std,
            include_pairs=bool(extras["include_pairs"]))
        model.validate()
        return model
    if header["model_kind"] != "deepfm":
        raise CheckpointError(f"{path}: unknown model kind {header['model_kind']!r}")

    variant = extras["variant"]
    m = int(extras["m"])
    try:
        bank = EmbeddingBank(m=m, matrices=[arrays[f"embed.A{i}"]
                                            for i in range(schema.n_features)])
        fm = None
        if variant != "dnn_only":
            fm = FMHead(w0=arrays["fm.w0"], w=arrays["fm.w"], v=arrays["fm.v"])
        mlp = None
        if variant != "fm_only":
            n_hidden = len(extras["hidden_sizes"])
            mlp = MLPHead(
                weights=[arrays[f"mlp.w{k}"] for k in range(n_hidden)],
                biases=[arrays[f"mlp.b{k}"] for k in range(n_hidden)],
                w_out=arrays["mlp.w_out"], b_out=arrays["mlp.b_out"],
                dropout_rate=float(extras["dropout_rate"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from None
    model = DeepFMModel(schema=schema, variant=variant, bank=bank, fm=fm, mlp=mlp,
                        standardizer=std,
                        literal_interactions=bool(extras.get("literal_interactions", False)))
    model.validate()
    return model
