"""Shared builders for the test suite.

Everything here is deliberately independent of library internals: schemas are
assembled from public types and datasets are built sample by sample, so tests
can use these as ground truth.
"""

import numpy as np

import tabfm


def continuous_schema(n, n_classes=3, prefix="f"):
    feats = tuple(tabfm.FeatureSpec(name=f"{prefix}{i}", kind="continuous") for i in range(n))
    labels = tuple("abcdefgh"[:n_classes])
    return tabfm.FeatureSchema(features=feats, class_labels=labels)


def mixed_schema():
    """Small schema touching every feature kind and missing policy."""
    feats = (
        tabfm.FeatureSpec(name="age", kind="continuous"),
        tabfm.FeatureSpec(name="marker", kind="continuous", missing_policy="zero_impute"),
        tabfm.FeatureSpec(name="variant", kind="categorical", categories=("aa", "ab", "bb", "cc")),
        tabfm.FeatureSpec(name="left", kind="continuous"),
        tabfm.FeatureSpec(name="right", kind="continuous"),
    )
    schema = tabfm.FeatureSchema(features=feats, class_labels=("x", "y", "z"))
    return tabfm.group_features(schema, {"volume": ("left", "right")})


def random_samples(schema, n, seed=0, missing_rate=0.0):
    """Random samples conforming to a schema; one patient per sample."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        values = {}
        for spec in schema.features:
            if spec.kind == "continuous":
                v = float(rng.normal())
                if missing_rate and spec.missing_policy == "zero_impute" and rng.random() < missing_rate:
                    v = None
                values[spec.name] = v
            elif spec.kind == "categorical":
                values[spec.name] = int(rng.integers(len(spec.categories)))
            else:
                values[spec.name] = tuple(float(rng.normal()) for _ in spec.members)
        pid = f"p{i:04d}"
        out.append(tabfm.Sample(patient_id=pid, visit_id=f"{pid}-v0", is_baseline=True,
                                values=values, label=int(rng.integers(schema.n_classes))))
    return out


def learnable_dataset(n_patients=360, n_feats=6, seed=5, margin=0.6, shuffle=False):
    """Cohort whose labels are a deterministic argmax of a linear score.

    The margin filter keeps the decision boundary away from every point, so
    any model family that can express a linear rule should score well above
    0.9; shuffling the labels destroys all signal.
    """
    rng = np.random.default_rng(seed)
    schema = continuous_schema(n_feats)
    w = rng.normal(size=(schema.n_classes, n_feats)) * 2.0
    samples = []
    while len(samples) < n_patients:
        x = rng.normal(size=n_feats)
        s = w @ x
        top = np.sort(s)
        if top[-1] - top[-2] < margin:
            continue
        pid = f"p{len(samples):04d}"
        samples.append(tabfm.Sample(patient_id=pid, visit_id=f"{pid}-v0", is_baseline=True,
                                    values={f"f{i}": float(x[i]) for i in range(n_feats)},
                                    label=int(np.argmax(s))))
    if shuffle:
        permuted = np.random.default_rng(seed + 1).permutation([s.label for s in samples])
        samples = [tabfm.Sample(s.patient_id, s.visit_id, s.is_baseline, s.values, int(permuted[i]))
                   for i, s in enumerate(samples)]
    return schema, samples


def small_template():
    return tabfm.SchemaTemplate(n_volumes=4, n_lobes=2, n_thickness=6,
                                n_csf=1, n_genetic=3, n_demographics=3)


def balanced_cohort(n_per_cell=50, age=70.0, n_classes=3):
    """Patients forming identical (class, sex) strata: folds can balance exactly."""
    feats = (
        tabfm.FeatureSpec(name="biomarker", kind="continuous"),
        tabfm.FeatureSpec(name="age", kind="continuous", tags=("age",)),
        tabfm.FeatureSpec(name="sex", kind="categorical", categories=("female", "male"),
                          tags=("sex",)),
    )
    schema = tabfm.FeatureSchema(features=feats, class_labels=tuple("abc"[:n_classes]))
    samples = []
    rng = np.random.default_rng(0)
    for label in range(n_classes):
        for sex in (0, 1):
            for i in range(n_per_cell):
                pid = f"c{label}s{sex}n{i:03d}"
                samples.append(tabfm.Sample(
                    patient_id=pid, visit_id=f"{pid}-v0", is_baseline=True,
                    values={"biomarker": float(rng.normal()), "age": age, "sex": sex},
                    label=label))
    return schema, samples
