"""Interpretability products: per-class linear feature importances from the
FM's linear weights, and per-class pairwise interaction importances.

Interaction importance is per-sample normalized: for sample x and class c,
each pair's share is |p_ij| divided by the sum of all pair magnitudes plus
the magnitude of the rest of the model (bias + linear term + deep head).
Pair shares and the rest share therefore sum to exactly 1 per sample; the
report averages shares over samples.  The signed mean contribution is kept
as a secondary column for direction analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSchema, encode_dataset, feature_scalars
from .errors import SchemaError, ShapeError
from .model import DeepFMModel, deep_scores_batch
from .embeddings import embed_batch


@dataclass(frozen=True)
class ImportanceEntry:
    class_label: str
    column: str            # encoded input column name (one per raw weight)
    mean_weight: float     # signed mean over folds; the ranking key
    share: float           # mean |weight| over folds, normalized per class
    fold_weights: tuple


@dataclass
class ImportanceReport:
    """Ranked linear importances per class, plus per-class top-10 share."""

    entries: list                 # ImportanceEntry, ranked within class
    n_folds: int
    schema_hash: str
    top10_share: dict             # class label -> sum of the 10 largest shares

    def for_class(self, class_label: str) -> list:
        return [e for e in self.entries if e.class_label == class_label]


@dataclass(frozen=True)
class InteractionEntry:
    class_label: str
    pair: str              # "feature_a × feature_b" in schema order
    mean_share: float      # mean over samples of |p| / (sum|p| + |rest|)
    signed_mean: float     # mean over samples of p / (sum|p| + |rest|)


@dataclass
class InteractionReport:
    """Ranked pair shares per class with the rest-of-model share."""

    entries: list                 # InteractionEntry, ranked within class
    rest_share: dict              # class label -> mean rest share
    n_samples: int
    n_pairs: int
    schema_hash: str

    def for_class(self, class_label: str) -> list:
        return [e for e in self.entries if e.class_label == class_label]


def linear_importance(models) -> ImportanceReport:
    """Rank encoded input columns by mean signed linear weight over folds.

    Shares come from the fold-mean absolute weight, normalized per class to
    sum to 1.  All models must share one schema and carry an FM head.
    """
    models = list(models)
    if not models:
        raise ShapeError("need at least one trained model")
    schema = models[0].schema
    for m in models:
        if m.schema.schema_hash != schema.schema_hash:
            raise SchemaError("models were trained on different schemas")
        if m.fm is None:
            raise ShapeError(f"variant {m.variant!r} has no linear FM weights")

    stacked = np.stack([m.fm.w for m in models])      # (folds, C, D)
    mean_signed = stacked.mean(axis=0)                # (C, D)
    mean_abs = np.abs(stacked).mean(axis=0)           # (C, D)
    columns = schema.encoded_columns
    entries = []
    top10 = {}
    for c, label in enumerate(schema.class_labels):
        total = mean_abs[c].sum()
        shares = mean_abs[c] / total if total > 0 else np.zeros_like(mean_abs[c])
        order = np.argsort(-mean_signed[c], kind="stable")
        entries.extend(
            ImportanceEntry(class_label=label, column=columns[d],
                            mean_weight=float(mean_signed[c, d]),
                            share=float(shares[d]),
                            fold_weights=tuple(float(w) for w in stacked[:, c, d]))
            for d in order
        )
        top10[label] = float(np.sort(shares)[::-1][:10].sum())
    return ImportanceReport(entries=entries, n_folds=len(models),
                            schema_hash=schema.schema_hash, top10_share=top10)


def pair_names(schema: FeatureSchema) -> list:
    names = [f.name for f in schema.features]
    return [f"{names[i]} × {names[j]}"
            for i in range(len(names)) for j in range(i + 1, len(names))]


def _interaction_shares(model: DeepFMModel, x: np.ndarray, chunk: int = 64):
    """Per-class sums over samples of pair shares, signed shares, rest share.

    Returns (share_sums (C, P), signed_sums (C, P), rest_sums (C,), n) with
    P = C(n_features, 2) pairs in row-major (i < j) order.
    """
    if model.fm is None:
        raise ShapeError(f"variant {model.variant!r} has no FM interaction term")
    x = np.asarray(x, dtype=float)
    n_feat = model.schema.n_features
    iu, ju = np.triu_indices(n_feat, k=1)
    n_classes = model.schema.n_classes
    share_sums = np.zeros((n_classes, len(iu)))
    signed_sums = np.zeros((n_classes, len(iu)))
    rest_sums = np.zeros(n_classes)

    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        e = embed_batch(model.bank, xb, model.schema)
        if model.literal_interactions:
            e = e * feature_scalars(xb, model.schema)[..., None]
        linear = model.fm.w0 + xb @ model.fm.w.T          # (N, C)
        rest = linear + deep_scores_batch(model, xb)      # (N, C)
        for c in range(n_classes):
            weighted = e * model.fm.v[c]                  # (N, n, m)
            pmat = np.einsum("bif,bjf->bij", weighted, e) # (N, n, n)
            pairs = pmat[:, iu, ju]                       # (N, P)
            denom = np.abs(pairs).sum(axis=1) + np.abs(rest[:, c])
            safe = denom > 0
            inv = np.zeros_like(denom)
            inv[safe] = 1.0 / denom[safe]
            share_sums[c] += (np.abs(pairs) * inv[:, None]).sum(axis=0)
            signed_sums[c] += (pairs * inv[:, None]).sum(axis=0)
            # a zero denominator only happens for an all-zero model; count
            # that sample's whole budget as "rest"
            rest_sums[c] += (np.abs(rest[:, c]) * inv)[safe].sum() + (~safe).sum()
    return share_sums, signed_sums, rest_sums, len(x)


def _build_report(schema: FeatureSchema, share_sums, signed_sums, rest_sums,
                  n_samples: int) -> InteractionReport:
    pairs = pair_names(schema)
    entries = []
    rest_share = {}
    for c, label in enumerate(schema.class_labels):
        mean_share = share_sums[c] / n_samples
        signed_mean = signed_sums[c] / n_samples
        order = np.argsort(-mean_share, kind="stable")
        entries.extend(
            InteractionEntry(class_label=label, pair=pairs[p],
                             mean_share=float(mean_share[p]),
                             signed_mean=float(signed_mean[p]))
            for p in order
        )
        rest_share[label] = float(rest_sums[c] / n_samples)
    return InteractionReport(entries=entries, rest_share=rest_share,
                             n_samples=n_samples, n_pairs=len(pairs),
                             schema_hash=schema.schema_hash)


def interaction_importance(model: DeepFMModel, samples, class_label=None):
    """Mean per-sample pair shares for one trained model.

    ``samples`` may be a list of raw samples (encoded with the model's own
    standardizer) or an already-encoded (N, D) array.  Returns the full
    InteractionReport, or just one class's ranked entries when
    ``class_label`` is given (by name or index).
    """
    x = _as_encoded(model, samples)
    if len(x) == 0:
        raise ShapeError("empty test set")
    report = _build_report(model.schema, *_interaction_shares(model, x))
    if class_label is None:
        return report
    if isinstance(class_label, (int, np.integer)):
        class_label = model.schema.class_labels[class_label]
    return report.for_class(class_label)


def meta_interaction_importance(model: DeepFMModel, samples) -> InteractionReport:
    """interaction_importance for a model trained on a group schema; pairs
    are named by group names, and the pair count is C(n_meta, 2)."""
    if not any(f.kind == "group" for f in model.schema.features):
        raise SchemaError("model schema has no group features")
    return interaction_importance(model, samples)


def interaction_report(models, sample_sets) -> InteractionReport:
    """Aggregate over folds: the sample-count-weighted mean of per-fold
    reports, equal to pooling all (model, sample) pairs into one report."""
    models = list(models)
    sample_sets = list(sample_sets)
    if len(models) != len(sample_sets) or not models:
        raise ShapeError("need one sample set per model")
    schema = models[0].schema
    n_feat = schema.n_features
    p = (n_feat * (n_feat - 1)) // 2
    share_sums = np.zeros((schema.n_classes, p))
    signed_sums = np.zeros((schema.n_classes, p))
    rest_sums = np.zeros(schema.n_classes)
    total = 0
    for model, samples in zip(models, sample_sets):
        if model.schema.schema_hash != schema.schema_hash:
            raise SchemaError("models were trained on different schemas")
        x = _as_encoded(model, samples)
        if len(x) == 0:
            raise ShapeError("empty test set")
        s, g, r, n = _interaction_shares(model, x)
        share_sums += s
        signed_sums += g
        rest_sums += r
        total += n
    return _build_report(schema, share_sums, signed_sums, rest_sums, total)


def _as_encoded(model, samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        x = np.asarray(samples, dtype=float)
        if x.ndim != 2 or x.shape[1] != model.schema.width:
            raise ShapeError(f"encoded array has shape {x.shape}, expected "
                             f"(N, {model.schema.width})")
        return x
    x, _ = encode_dataset(samples, model.schema, model.standardizer)
    return x


# ---------------------------------------------------------------------------
# report files


def write_importance_report(report: ImportanceReport, path) -> None:
    """Long-form TSV: one row per (class, column), ranked within class."""
    lines = ["class\trank\tcolumn\tmean_weight\tshare"]
    for label in dict.fromkeys(e.class_label for e in report.entries):
        for rank, e in enumerate(report.for_class(label), start=1):
            lines.append(f"{label}\t{rank}\t{e.column}\t{e.mean_weight!r}\t{e.share!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_interaction_report(report: InteractionReport, path) -> None:
    """Long-form TSV: one row per (class, pair) plus a rest-of-model row."""
    lines = ["class\trank\tpair\tmean_share\tsigned_mean"]
    for label in dict.fromkeys(e.class_label for e in report.entries):
        for rank, e in enumerate(report.for_class(label), start=1):
            lines.append(f"{label}\t{rank}\t{e.pair}\t{e.mean_share!r}\t{e.signed_mean!r}")
        lines.append(f"{label}\t\t<rest of model>\t{report.rest_share[label]!r}\t")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_summary(importance: ImportanceReport,
                         interactions: InteractionReport, path) -> None:
    """Machine-readable summary of both reports."""
    obj = {
        "schema_hash": importance.schema_hash,
        "n_folds": importance.n_folds,
        "top10_linear_share": importance.top10_share,
        "n_interaction_pairs": interactions.n_pairs,
        "n_samples": interactions.n_samples,
        "rest_share": interactions.rest_share,
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
