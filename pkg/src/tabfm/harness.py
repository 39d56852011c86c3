"""Evaluation protocol: balanced patient-level folds, longitudinal expansion
of the training split only, balanced-accuracy scoring, and seeded random
hyperparameter search.

Folds are built from baseline visits only.  Patients are grouped into
(class, sex) strata, sorted by age, and dealt greedily one age-block at a
time into the folds currently least filled for that class/sex (seeded
tie-break).  That bounds per-fold class and sex counts to within about one
patient of an even split and keeps per-fold mean age tight.  The tolerances
the plan must meet are asserted on every construction, never silently
accepted.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    FeatureSchema,
    encode_dataset,
    fit_standardizer,
    remap_samples,
)
from .errors import (
    DatasetError,
    FoldBalanceError,
    LeakageError,
    SchemaError,
    SearchError,
    ShapeError,
    TrainingDivergedError,
)
from .model import (
    TrainConfig,
    fit_linear_arrays,
    init_model,
    predict_classes,
    train_arrays,
)

CLASS_TOLERANCE = 0.05   # per-fold class proportion, absolute deviation
SEX_TOLERANCE = 0.05     # per-fold sex proportion, absolute deviation
AGE_TOLERANCE = 2.0      # per-fold mean age deviation, in age units

BENCHMARK_VARIANTS = ("deepfm", "deepfm_meta", "fm_only", "dnn_only",
                      "linear_interactions")
ALL_VARIANTS = BENCHMARK_VARIANTS + ("linear_main_effects",)


@dataclass(frozen=True)
class FoldPlan:
    """K disjoint patient-id sets covering the baseline cohort."""

    folds: tuple[frozenset, ...]
    seed: int
    val_fraction: float = 0.2

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, patient_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if patient_id in fold:
                return i
        raise DatasetError(f"patient {patient_id!r} not in any fold")


def _balance_columns(samples, schema: FeatureSchema):
    """Per-patient (label, sex value, age) from baseline visits.

    Sex comes from the first feature tagged 'sex', age from the first tagged
    'age'; either may be absent, in which case that axis is a single stratum.
    """
    sex_feature = next(iter(schema.features_tagged("sex")), None)
    age_feature = next(iter(schema.features_tagged("age")), None)
    rows = []
    for s in samples:
        if not s.is_baseline:
            continue
        sex = s.values.get(sex_feature.name) if sex_feature else 0
        age = s.values.get(age_feature.name) if age_feature else 0.0
        rows.append([s.patient_id, s.label, sex if sex is not None else -1, age])
    ages = [r[3] for r in rows if r[3] is not None]
    fill = float(np.median(ages)) if ages else 0.0
    for r in rows:
        if r[3] is None:
            r[3] = fill
    return rows


def make_folds(samples, schema: FeatureSchema, k: int = 5, seed: int = 0) -> FoldPlan:
    """Partition baseline patients into k folds balanced on class, sex, age.

    Raises:
        DatasetError: a patient with zero or multiple baseline visits.
        FoldBalanceError: the greedy assignment missed a tolerance; the
            message reports every achieved deviation.
    """
    if k < 2:
        raise ShapeError("need at least 2 folds")
    baseline_counts: dict = {}
    for s in samples:
        if s.is_baseline:
            baseline_counts[s.patient_id] = baseline_counts.get(s.patient_id, 0) + 1
    for s in samples:
        if s.patient_id not in baseline_counts:
            raise DatasetError(f"patient {s.patient_id!r} has no baseline visit")
    multi = sorted(p for p, c in baseline_counts.items() if c > 1)
    if multi:
        raise DatasetError(f"patients with multiple baseline visits: {multi[:5]}")
    if len(baseline_counts) < k:
        raise DatasetError(f"{len(baseline_counts)} patients cannot fill {k} folds")

    rows = _balance_columns(samples, schema)
    rng = np.random.default_rng([seed, 0xF01D])

    strata: dict = {}
    for row in rows:
        strata.setdefault((row[1], row[2]), []).append(row)

    # Deal each (class, sex) stratum in age order, one block of k patients at
    # a time, preferring folds least filled for that class, then that sex,
    # then overall; the seeded permutations break ties and scatter ages.
    sizes = np.zeros(k, dtype=int)
    class_fill = {c: np.zeros(k, dtype=int) for c in {r[1] for r in rows}}
    sex_fill = {s: np.zeros(k, dtype=int) for s in {r[2] for r in rows}}
    assignment: dict = {}
    for key in sorted(strata, key=lambda t: (repr(t[0]), repr(t[1]))):
        label, sex = key
        members = sorted(strata[key], key=lambda r: (r[3], r[0]))
        for start in range(0, len(members), k):
            block = members[start:start + k]
            tie = rng.permutation(k)
            order = sorted(range(k), key=lambda f: (class_fill[label][f],
                                                    sex_fill[sex][f],
                                                    sizes[f], tie[f]))
            for slot, b in enumerate(rng.permutation(len(block))):
                fold = order[slot]
                assignment[block[b][0]] = fold
                sizes[fold] += 1
                class_fill[label][fold] += 1
                sex_fill[sex][fold] += 1

    folds = tuple(frozenset(p for p, f in assignment.items() if f == i)
                  for i in range(k))
    plan = FoldPlan(folds=folds, seed=seed)
    _check_balance(plan, rows)
    return plan


def _check_balance(plan: FoldPlan, rows) -> None:
    labels = np.array([r[1] for r in rows])
    sexes = np.array([r[2] for r in rows])
    ages = np.array([float(r[3]) for r in rows])
    total = len(rows)
    global_age = ages.mean()
    failures = []
    for i, fold in enumerate(plan.folds):
        mask = np.array([r[0] in fold for r in rows])
        n_fold = mask.sum()
        for c in np.unique(labels):
            dev = abs((labels[mask] == c).mean() - (labels == c).mean())
            if dev > CLASS_TOLERANCE + 1e-12:
                failures.append(f"fold {i}: class {c} proportion off by {dev:.3f}")
        for v in np.unique(sexes):
            dev = abs((sexes[mask] == v).mean() - (sexes == v).mean())
            if dev > SEX_TOLERANCE + 1e-12:
                failures.append(f"fold {i}: sex {v} proportion off by {dev:.3f}")
        age_dev = abs(ages[mask].mean() - global_age)
        if age_dev > AGE_TOLERANCE + 1e-12:
            failures.append(f"fold {i}: mean age off by {age_dev:.2f}")
        if n_fold == 0:
            failures.append(f"fold {i}: empty")
    if failures:
        raise FoldBalanceError(
            f"fold balance infeasible for {total} patients in {plan.k} folds: "
            + "; ".join(failures)
        )


def expand_training(plan: FoldPlan, fold_index: int, samples):
    """Per-run split: (train, validation, test) sample lists.

    Test is the baseline visits of the test fold.  The remaining patients are
    split 80/20 by patient, stratified by class; train then gains every
    non-baseline visit of its patients.  Validation and test stay
    baseline-only.  Patient ids across the three sets are disjoint by
    construction and re-asserted before returning.
    """
    if not 0 <= fold_index < plan.k:
        raise ShapeError(f"fold index {fold_index} out of range for k={plan.k}")
    test_patients = plan.folds[fold_index]
    baselines = {s.patient_id: s for s in samples if s.is_baseline}

    remaining_by_class: dict = {}
    for pid, s in sorted(baselines.items()):
        if pid not in test_patients:
            remaining_by_class.setdefault(s.label, []).append(pid)

    rng = np.random.default_rng([plan.seed, fold_index, 0x5917])
    val_patients = set()
    for label in sorted(remaining_by_class):
        pids = remaining_by_class[label]
        order = rng.permutation(len(pids))
        n_val = max(1, round(plan.val_fraction * len(pids)))
        val_patients.update(pids[j] for j in order[:n_val])

    train, val, test = [], [], []
    for s in samples:
        if s.patient_id in test_patients:
            if s.is_baseline:
                test.append(s)
        elif s.patient_id in val_patients:
            if s.is_baseline:
                val.append(s)
        else:
            train.append(s)

    ids = [{s.patient_id for s in part} for part in (train, val, test)]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise LeakageError("train/validation/test patient sets overlap")
    return train, val, test


def balanced_accuracy(predictions, labels, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or labels.ndim != 1:
        raise ShapeError("predictions and labels must be equal-length 1-d sequences")
    if len(labels) == 0:
        raise ShapeError("empty input")
    present = np.unique(labels)
    if present.min() < 0 or present.max() >= n_classes:
        raise ShapeError(f"labels outside [0, {n_classes})")
    if predictions.min() < 0 or predictions.max() >= n_classes:
        raise ShapeError(f"predictions outside [0, {n_classes})")
    recalls = [(predictions[labels == c] == c).mean() for c in present]
    return float(np.mean(recalls))


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class SearchSpace:
    """Random-search distributions: uniform integers for layer sizes and
    embedding length, log-uniform for learning rate, L1/L2, and dropout.

    The regularization range is wider for the linear baselines; dropout is
    drawn only for variants with a deep head, a third hidden layer only for
    the standalone deep baseline.
    """

    variant: str = "deepfm"
    hidden_low: int = 1
    hidden_high: int = 400
    h3_low: int = 0
    h3_high: int = 400
    m_low: int = 1
    m_high: int = 20
    lr_low: float = 1e-4
    lr_high: float = 0.9
    reg_low: float = 1e-4
    reg_high: float = 0.9
    dropout_low: float = 0.1
    dropout_high: float = 0.9

    @classmethod
    def for_variant(cls, variant: str) -> "SearchSpace":
        if variant not in ALL_VARIANTS:
            raise SearchError(f"unknown variant {variant!r}; expected one of {ALL_VARIANTS}")
        if variant.startswith("linear"):
            return cls(variant=variant, reg_high=9.0)
        return cls(variant=variant)

    def sample(self, rng) -> TrainConfig:
        """One configuration; the draw order is fixed so trial streams are
        reproducible and comparable across variants."""

        def log_uniform(low, high):
            return float(np.exp(rng.uniform(np.log(low), np.log(high))))

        h1 = int(rng.integers(self.hidden_low, self.hidden_high + 1))
        h2 = int(rng.integers(self.hidden_low, self.hidden_high + 1))
        h3 = int(rng.integers(self.h3_low, self.h3_high + 1))
        m = int(rng.integers(self.m_low, self.m_high + 1))
        lr = log_uniform(self.lr_low, self.lr_high)
        l1 = log_uniform(self.reg_low, self.reg_high)
        l2 = log_uniform(self.reg_low, self.reg_high)
        dropout = log_uniform(self.dropout_low, self.dropout_high)
        seed = int(rng.integers(2**31 - 1))
        if self.variant not in ("deepfm", "dnn_only"):
            dropout = 0.0
        if self.variant != "dnn_only":
            h3 = 0
        return TrainConfig(learning_rate=lr, l1_weight=l1, l2_weight=l2,
                           dropout_rate=dropout, m=m, h1=h1, h2=h2, h3=h3,
                           seed=seed)


@dataclass
class FoldData:
    """Everything one fold's trials need, encoded once."""

    fold_index: int
    schema: FeatureSchema
    standardizer: object
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray = None
    y_test: np.ndarray = None


def prepare_fold(schema: FeatureSchema, fold_index: int,
                 train_samples, val_samples, test_samples=None) -> FoldData:
    """Fit the standardizer on the training split and encode all splits."""
    std = fit_standardizer(train_samples, schema)
    x_tr, y_tr = encode_dataset(train_samples, schema, std)
    x_va, y_va = encode_dataset(val_samples, schema, std)
    x_te = y_te = None
    if test_samples is not None:
        x_te, y_te = encode_dataset(test_samples, schema, std)
    return FoldData(fold_index=fold_index, schema=schema, standardizer=std,
                    x_train=x_tr, y_train=y_tr, x_val=x_va, y_val=y_va,
                    x_test=x_te, y_test=y_te)


@dataclass(frozen=True)
class TrialResult:
    fold_index: int
    trial_index: int
    config: TrainConfig
    val_balanced_accuracy: float
    status: str = "ok"   # or "diverged"


def _train_variant(variant: str, fold: FoldData, config: TrainConfig):
    """Train one model of any benchmark variant on one fold's arrays."""
    if variant in ("linear_interactions", "linear_main_effects"):
        return fit_linear_arrays(fold.x_train, fold.y_train, fold.x_val, fold.y_val,
                                 config, fold.schema,
                                 include_pairs=(variant == "linear_interactions"),
                                 standardizer=fold.standardizer)
    base_variant = "deepfm" if variant == "deepfm_meta" else variant
    model = init_model(fold.schema, base_variant, config)
    model.standardizer = fold.standardizer
    return train_arrays(model, fold.x_train, fold.y_train, fold.x_val, fold.y_val,
                        config)


def hyperparameter_search(space: SearchSpace, folds, budget: int, seed: int = 0,
                          jobs: int = 1, max_epochs: int = 300,
                          patience: int = 10, batch_size: int = 128):
    """Per fold: sample ``budget`` configs, train, pick the best validation
    balanced accuracy (first trial wins ties).

    Returns (best config per fold, best model per fold, trial log).  Configs
    are pre-sampled serially so the trial sequence depends only on the seed;
    with jobs > 1 trials run on a thread pool, which cannot change results.

    Raises:
        SearchError: budget < 1, or every trial of some fold diverged.
    """
    if budget < 1:
        raise SearchError(f"budget must be >= 1, got {budget}")

    tasks = []
    for fold in folds:
        rng = np.random.default_rng([seed, 0x5EA8C4, fold.fold_index])
        for t in range(budget):
            config = space.sample(rng)
            config = replace(config, max_epochs=max_epochs, patience=patience,
                             batch_size=batch_size)
            tasks.append((fold, t, config))

    def run(task):
        fold, t, config = task
        try:
            model, log = _train_variant(space.variant, fold, config)
            score = max(row.val_balanced_accuracy for row in log)
            return TrialResult(fold.fold_index, t, config, score), model
        except TrainingDivergedError:
            return TrialResult(fold.fold_index, t, config, float("-inf"),
                               status="diverged"), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, tasks))
    else:
        outcomes = [run(task) for task in tasks]

    best_configs, best_models, trials = {}, {}, []
    for (result, model) in outcomes:
        trials.append(result)
        i = result.fold_index
        if result.status == "ok":
            current = best_configs.get(i)
            if current is None or result.val_balanced_accuracy > current[1]:
                best_configs[i] = (result.config, result.val_balanced_accuracy,
                                   result.trial_index)
                best_models[i] = model
    for fold in folds:
        if fold.fold_index not in best_configs:
            raise SearchError(
                f"all {budget} trials diverged on fold {fold.fold_index}"
            )
    order = [fold.fold_index for fold in folds]
    return ([best_configs[i][0] for i in order],
            [best_models[i] for i in order],
            sorted(trials, key=lambda r: (r.fold_index, r.trial_index)))


# ---------------------------------------------------------------------------
# the full benchmark


@dataclass(frozen=True)
class FoldOutcome:
    variant: str
    fold_index: int
    config: TrainConfig
    val_balanced_accuracy: float
    test_balanced_accuracy: float


@dataclass
class EvalReport:
    """Per-(variant, fold) outcomes plus per-variant aggregate statistics."""

    outcomes: list
    aggregates: dict     # variant -> {"median", "iqr", "min", "max"}
    k: int
    seed: int
    budget: int
    schema_hash: str

    def scores(self, variant: str) -> list:
        return [o.test_balanced_accuracy for o in self.outcomes if o.variant == variant]

    def median(self, variant: str) -> float:
        return self.aggregates[variant]["median"]


def _aggregate(scores) -> dict:
    arr = np.asarray(scores, dtype=float)
    q25, q50, q75 = np.percentile(arr, [25, 50, 75])
    return {"median": float(q50), "iqr": float(q75 - q25),
            "min": float(arr.min()), "max": float(arr.max())}


def run_benchmark(samples, schema: FeatureSchema, variants=BENCHMARK_VARIANTS,
                  budget: int = 30, seed: int = 0, jobs: int = 1, k: int = 5,
                  meta_schema: FeatureSchema = None, max_epochs: int = 300,
                  patience: int = 10, batch_size: int = 128):
    """The full evaluation protocol end to end, for each requested variant.

    Returns (EvalReport, trial logs per variant, best models per variant).
    ``deepfm_meta`` runs the same engine on the group schema, so requesting
    it requires ``meta_schema``.
    """
    for v in variants:
        if v not in ALL_VARIANTS:
            raise SearchError(f"unknown variant {v!r}; expected one of {ALL_VARIANTS}")
    if "deepfm_meta" in variants and meta_schema is None:
        raise SchemaError("variant deepfm_meta requires a meta (group) schema")

    plan = make_folds(samples, schema, k=k, seed=seed)
    splits = [expand_training(plan, i, samples) for i in range(k)]
    folds = [prepare_fold(schema, i, *splits[i]) for i in range(k)]
    meta_folds = None
    if "deepfm_meta" in variants:
        meta_samples = remap_samples(samples, schema, meta_schema)
        by_id = {(s.patient_id, s.visit_id): s for s in meta_samples}
        meta_folds = []
        for i, (tr, va, te) in enumerate(splits):
            remapped = [[by_id[(s.patient_id, s.visit_id)] for s in part]
                        for part in (tr, va, te)]
            meta_folds.append(prepare_fold(meta_schema, i, *remapped))

    outcomes, trial_logs, models_by_variant = [], {}, {}
    for variant in variants:
        space = SearchSpace.for_variant(variant)
        fold_data = meta_folds if variant == "deepfm_meta" else folds
        configs, models, trials = hyperparameter_search(
            space, fold_data, budget=budget, seed=seed, jobs=jobs,
            max_epochs=max_epochs, patience=patience, batch_size=batch_size)
        trial_logs[variant] = trials
        models_by_variant[variant] = models
        for fold, config, model in zip(fold_data, configs, models):
            preds = predict_classes(model, fold.x_test)
            test_score = balanced_accuracy(preds, fold.y_test, schema.n_classes)
            val_score = max(t.val_balanced_accuracy for t in trials
                            if t.fold_index == fold.fold_index)
            outcomes.append(FoldOutcome(variant=variant, fold_index=fold.fold_index,
                                        config=config,
                                        val_balanced_accuracy=val_score,
                                        test_balanced_accuracy=test_score))

    aggregates = {v: _aggregate([o.test_balanced_accuracy for o in outcomes
                                 if o.variant == v]) for v in variants}
    report = EvalReport(outcomes=outcomes, aggregates=aggregates, k=k, seed=seed,
                        budget=budget, schema_hash=schema.schema_hash)
    return report, trial_logs, models_by_variant


# ---------------------------------------------------------------------------
# report files


def write_eval_report(report: EvalReport, out_dir) -> None:
    """TSV table of per-fold outcomes plus a JSON summary."""
    import json

    out = Path(out_dir)
    lines = ["variant\tfold\tval_balanced_accuracy\ttest_balanced_accuracy"]
    for o in report.outcomes:
        lines.append(f"{o.variant}\t{o.fold_index}\t{o.val_balanced_accuracy!r}"
                     f"\t{o.test_balanced_accuracy!r}")
    (out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary = {
        "k": report.k, "seed": report.seed, "budget": report.budget,
        "schema_hash": report.schema_hash,
        "aggregates": report.aggregates,
        "outcomes": [
            {"variant": o.variant, "fold": o.fold_index,
             "val_balanced_accuracy": o.val_balanced_accuracy,
             "test_balanced_accuracy": o.test_balanced_accuracy,
             "config": o.config.to_dict()}
            for o in report.outcomes
        ],
    }
    (out / "report.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_trial_log(trials, path) -> None:
    """TSV log: one row per (fold, trial) with the sampled configuration."""
    cols = ("fold\ttrial\tstatus\tval_balanced_accuracy\tlearning_rate\t"
            "l1_weight\tl2_weight\tdropout_rate\tm\th1\th2\th3\tseed")
    lines = [cols]
    for t in trials:
        c = t.config
        lines.append(
            f"{t.fold_index}\t{t.trial_index}\t{t.status}\t{t.val_balanced_accuracy!r}"
            f"\t{c.learning_rate!r}\t{c.l1_weight!r}\t{c.l2_weight!r}"
            f"\t{c.dropout_rate!r}\t{c.m}\t{c.h1}\t{c.h2}\t{c.h3}\t{c.seed}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
