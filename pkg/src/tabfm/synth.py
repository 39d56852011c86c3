"""Synthetic cohort generator shaped like the reference study data.

Cohorts carry planted linear and pairwise-interaction effects with known
coefficients, so recovery tests have exact ground truth.  Labels come from a
softmax over per-class scores (log prior + planted effects + noise), which
gives tunable Bayes error; with no planted effects, labels are independent of
the features and any classifier sits at chance.

Feature layout of the default template (109 features):
    20 regional volumes (4 per lobe, 5 lobes)  continuous, groupable
    34 cortical thicknesses                    continuous
     3 CSF markers                             continuous, zero-imputed
    41 genetic markers                         categorical
    11 demographics (age, sex, 9 more)         age/sex tagged for balancing
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureSchema, FeatureSpec, Sample, group_features, save_dataset, save_schema
from .errors import CohortSpecError, ShapeError

LOBE_NAMES = ("frontal", "parietal", "temporal", "occipital", "cingulate")

# reference shape: 1536 + 3131 + 2177 = 6844 visits over 1492 patients,
# 1863 visits with CSF measurements
REFERENCE_PRIORS = (1536 / 6844, 3131 / 6844, 2177 / 6844)
REFERENCE_PATIENTS = 1492
REFERENCE_MEAN_VISITS = 6844 / 1492
REFERENCE_CSF_MISSING = 1.0 - 1863 / 6844

AGE_MEAN = 73.0     # synthetic age = AGE_MEAN + AGE_SCALE * z
AGE_SCALE = 7.0
AGE_PER_VISIT = 0.5
DRIFT_PER_VISIT = 0.08
VISIT_JITTER = 0.15


@dataclass(frozen=True)
class SchemaTemplate:
    """Feature counts; the default mirrors the reference data's shape."""

    n_volumes: int = 20
    n_lobes: int = 5
    n_thickness: int = 34
    n_csf: int = 3
    n_genetic: int = 41
    n_demographics: int = 11

    def validate(self) -> None:
        for name in ("n_volumes", "n_lobes", "n_thickness", "n_csf",
                     "n_genetic", "n_demographics"):
            if getattr(self, name) < 0:
                raise CohortSpecError(f"{name} must be nonnegative")
        if self.n_volumes > 0 and self.n_lobes < 1:
            raise CohortSpecError("volumes require at least one lobe")
        if self.total_features == 0:
            raise CohortSpecError("template declares zero features")

    @property
    def total_features(self) -> int:
        return (self.n_volumes + self.n_thickness + self.n_csf
                + self.n_genetic + self.n_demographics)


@dataclass(frozen=True)
class CohortSpec:
    """Full description of one synthetic cohort."""

    n_patients: int = REFERENCE_PATIENTS
    mean_visits: float = REFERENCE_MEAN_VISITS
    class_priors: tuple = REFERENCE_PRIORS
    template: SchemaTemplate = field(default_factory=SchemaTemplate)
    planted_linear: tuple = ()   # (feature, class index, coefficient)
    planted_pairs: tuple = ()    # (feature_a, feature_b, class index, coefficient)
    csf_missing_rate: float = REFERENCE_CSF_MISSING
    noise_scale: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise CohortSpecError("n_patients must be positive")
        if self.mean_visits < 1.0:
            raise CohortSpecError("mean_visits must be at least 1")
        priors = np.asarray(self.class_priors, dtype=float)
        if len(priors) < 2 or np.any(priors <= 0):
            raise CohortSpecError("class priors must be positive, length >= 2")
        if abs(priors.sum() - 1.0) > 1e-6:
            raise CohortSpecError(f"class priors sum to {priors.sum()}, not 1")
        if not 0.0 <= self.csf_missing_rate <= 1.0:
            raise CohortSpecError("csf_missing_rate outside [0, 1]")
        if self.noise_scale < 0 or not np.isfinite(self.noise_scale):
            raise CohortSpecError("noise_scale must be finite and nonnegative")
        self.template.validate()
        for effect in self.planted_linear:
            if len(effect) != 3:
                raise CohortSpecError(f"planted_linear entry {effect!r} needs "
                                      "(feature, class, coefficient)")
        for effect in self.planted_pairs:
            if len(effect) != 4:
                raise CohortSpecError(f"planted_pairs entry {effect!r} needs "
                                      "(feature_a, feature_b, class, coefficient)")


@dataclass(frozen=True)
class GroundTruth:
    """What was planted, for recovery oracles."""

    planted_linear: tuple
    planted_pairs: tuple
    class_priors: tuple
    noise_scale: float
    csf_missing_rate: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "planted_linear": [list(e) for e in self.planted_linear],
            "planted_pairs": [list(e) for e in self.planted_pairs],
            "class_priors": list(self.class_priors),
            "noise_scale": self.noise_scale,
            "csf_missing_rate": self.csf_missing_rate,
            "seed": self.seed,
        }


def _lobe_of(index: int, template: SchemaTemplate) -> str:
    lobe = index % template.n_lobes
    return LOBE_NAMES[lobe] if lobe < len(LOBE_NAMES) else f"lobe_{lobe + 1}"


def volume_names(template: SchemaTemplate) -> list:
    counts: dict = {}
    names = []
    for i in range(template.n_volumes):
        lobe = _lobe_of(i, template)
        counts[lobe] = counts.get(lobe, 0) + 1
        names.append(f"vol_{lobe}_{counts[lobe]}")
    return names


def meta_groups(template: SchemaTemplate) -> dict:
    """Lobe name -> member volume names; the grouping behind the meta schema."""
    groups: dict = {}
    for i, name in enumerate(volume_names(template)):
        groups.setdefault(_lobe_of(i, template), []).append(name)
    return groups


def build_schema(template: SchemaTemplate, n_classes: int = 3) -> FeatureSchema:
    """Plain (ungrouped) schema for a template."""
    template.validate()
    if n_classes == 3:
        labels = ("AD", "MCI", "CN")
    else:
        labels = tuple(f"class_{i}" for i in range(n_classes))
    feats = []
    for name in volume_names(template):
        feats.append(FeatureSpec(name=name, kind="continuous", tags=("volume",)))
    for i in range(template.n_thickness):
        feats.append(FeatureSpec(name=f"thick_{i + 1:02d}", kind="continuous",
                                 tags=("thickness",)))
    csf_names = ["csf_abeta", "csf_tau", "csf_ptau"]
    for i in range(template.n_csf):
        name = csf_names[i] if i < 3 else f"csf_{i + 1}"
        feats.append(FeatureSpec(name=name, kind="continuous",
                                 missing_policy="zero_impute", tags=("csf",)))
    for i in range(template.n_genetic):
        if i == 0:
            feats.append(FeatureSpec(
                name="apoe", kind="categorical",
                categories=("e2/e2", "e2/e3", "e2/e4", "e3/e3", "e3/e4", "e4/e4"),
                tags=("genetic",)))
        else:
            feats.append(FeatureSpec(name=f"snp_{i:02d}", kind="categorical",
                                     categories=("0", "1", "2"), tags=("genetic",)))
    demo = template.n_demographics
    if demo >= 1:
        feats.append(FeatureSpec(name="age", kind="continuous",
                                 tags=("age", "demographics")))
    if demo >= 2:
        feats.append(FeatureSpec(name="sex", kind="categorical",
                                 categories=("female", "male"),
                                 tags=("sex", "demographics")))
    if demo >= 3:
        feats.append(FeatureSpec(name="edu_years", kind="continuous",
                                 tags=("demographics",)))
    for i in range(4, demo + 1):
        feats.append(FeatureSpec(name=f"demog_{i}", kind="continuous",
                                 tags=("demographics",)))
    return FeatureSchema(features=tuple(feats), class_labels=labels)


def meta_schema_for(schema: FeatureSchema, template: SchemaTemplate) -> FeatureSchema:
    """Group schema with one meta-feature per lobe."""
    groups = meta_groups(template)
    if not groups:
        raise CohortSpecError("template has no volumes to group")
    return group_features(schema, groups, tags_by_group={g: ("lobe",) for g in groups})


def _continuous_names(schema: FeatureSchema) -> list:
    return [f.name for f in schema.features if f.kind == "continuous"]


def _prior_offsets(priors: np.ndarray, noise_scale: float) -> np.ndarray:
    """Per-class score offsets whose noisy softmax averages to the priors.

    Adding noise inside the softmax flattens E[softmax(log p + sigma eps)]
    away from p (about one point at sigma 0.5 for the reference priors), so
    the offsets are calibrated by fixed-point iteration against a fixed
    quadrature sample.  Deterministic; independent of the cohort seed.
    """
    b = np.log(priors)
    if noise_scale == 0.0:
        return b
    eps = np.random.default_rng(0x0FF5E7).standard_normal((50_000, len(priors)))
    target = np.log(priors)
    for _ in range(25):
        s = b + noise_scale * eps
        sm = np.exp(s - s.max(axis=1, keepdims=True))
        sm /= sm.sum(axis=1, keepdims=True)
        b = b + target - np.log(sm.mean(axis=0))
    return b


def generate(spec: CohortSpec):
    """Generate one cohort; returns (schema, samples, ground truth).

    Planted effects act on the latent standard-normal values (for age, the
    latent behind the affine rescaling), so coefficients are comparable
    across features.  Longitudinal visits drift the continuous latents and
    keep the label and categorical values fixed.
    """
    spec.validate()
    schema = build_schema(spec.template, n_classes=len(spec.class_priors))
    continuous = _continuous_names(schema)
    cont_index = {name: i for i, name in enumerate(continuous)}
    categorical = [f for f in schema.features if f.kind == "categorical"]

    for feature, c, coef in spec.planted_linear:
        if feature not in cont_index:
            raise CohortSpecError(f"planted_linear feature {feature!r} is not a "
                                  "continuous feature of the template")
        if not 0 <= c < len(spec.class_priors):
            raise CohortSpecError(f"planted_linear class {c} out of range")
        if not np.isfinite(coef):
            raise CohortSpecError("planted_linear coefficient must be finite")
    for fa, fb, c, coef in spec.planted_pairs:
        if fa not in cont_index or fb not in cont_index:
            raise CohortSpecError(f"planted_pairs features ({fa!r}, {fb!r}) must "
                                  "be continuous features of the template")
        if fa == fb:
            raise CohortSpecError(f"planted pair ({fa!r}, {fb!r}) is not a pair")
        if not 0 <= c < len(spec.class_priors):
            raise CohortSpecError(f"planted_pairs class {c} out of range")
        if not np.isfinite(coef):
            raise CohortSpecError("planted_pairs coefficient must be finite")

    rng = np.random.default_rng(spec.seed)
    log_priors = _prior_offsets(np.asarray(spec.class_priors, dtype=float),
                                spec.noise_scale)
    csf_names = {f.name for f in schema.features if "csf" in f.tags}

    # cohort-level category distributions, one per categorical feature
    cat_probs = {f.name: rng.dirichlet(np.full(f.cardinality, 5.0))
                 for f in categorical}

    id_width = max(4, len(str(spec.n_patients)))
    samples = []
    for p in range(spec.n_patients):
        pid = f"P{p + 1:0{id_width}d}"
        z = rng.standard_normal(len(continuous))
        cats = {f.name: int(rng.choice(f.cardinality, p=cat_probs[f.name]))
                for f in categorical}

        scores = log_priors.copy()
        for feature, c, coef in spec.planted_linear:
            scores[c] += coef * z[cont_index[feature]]
        for fa, fb, c, coef in spec.planted_pairs:
            scores[c] += coef * z[cont_index[fa]] * z[cont_index[fb]]
        if spec.noise_scale > 0:
            scores = scores + spec.noise_scale * rng.standard_normal(len(scores))
        scores -= scores.max()
        probs = np.exp(scores)
        probs /= probs.sum()
        label = int(rng.choice(len(probs), p=probs))

        n_visits = 1 + int(rng.poisson(spec.mean_visits - 1.0))
        for t in range(n_visits):
            if t == 0:
                zt = z
            else:
                zt = (z + DRIFT_PER_VISIT * t
                      + VISIT_JITTER * rng.standard_normal(len(continuous)))
            csf_missing = rng.random() < spec.csf_missing_rate
            values: dict = {}
            for name in continuous:
                v = float(zt[cont_index[name]])
                if name == "age":
                    v = AGE_MEAN + AGE_SCALE * v + AGE_PER_VISIT * t
                values[name] = None if (csf_missing and name in csf_names) else v
            values.update(cats)
            samples.append(Sample(patient_id=pid, visit_id=f"{pid}-v{t:02d}",
                                  is_baseline=(t == 0), values=values, label=label))

    truth = GroundTruth(planted_linear=tuple(tuple(e) for e in spec.planted_linear),
                        planted_pairs=tuple(tuple(e) for e in spec.planted_pairs),
                        class_priors=tuple(spec.class_priors),
                        noise_scale=spec.noise_scale,
                        csf_missing_rate=spec.csf_missing_rate, seed=spec.seed)
    return schema, samples, truth


def describe(samples, schema: FeatureSchema) -> dict:
    """Aggregate summary used to validate generator output against its spec."""
    if not samples:
        raise ShapeError("empty input")
    class_counts = {label: 0 for label in schema.class_labels}
    for s in samples:
        class_counts[schema.class_labels[s.label]] += 1

    features: dict = {}
    n = len(samples)
    for f in schema.features:
        vals = [s.values.get(f.name) for s in samples]
        missing = sum(v is None for v in vals)
        entry = {"missing_rate": missing / n}
        if f.kind == "continuous":
            present = np.array([v for v in vals if v is not None], dtype=float)
            entry["mean"] = float(present.mean()) if len(present) else None
            entry["std"] = float(present.std()) if len(present) else None
        elif f.kind == "categorical":
            counts = dict.fromkeys(f.categories, 0)
            for v in vals:
                if v is not None:
                    counts[f.categories[v]] += 1
            entry["category_counts"] = counts
        features[f.name] = entry

    return {
        "n_samples": n,
        "n_patients": len({s.patient_id for s in samples}),
        "n_baseline": sum(s.is_baseline for s in samples),
        "class_counts": class_counts,
        "features": features,
    }


# ---------------------------------------------------------------------------
# spec and output files


def load_cohort_spec(path) -> CohortSpec:
    """Parse a cohort spec file (JSON; all fields optional with defaults)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CohortSpecError(f"cohort spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CohortSpecError(f"{path}: not valid JSON (line {exc.lineno}: "
                              f"{exc.msg})") from None
    if not isinstance(raw, dict):
        raise CohortSpecError(f"{path}: expected a JSON object")
    known = {"n_patients", "mean_visits", "class_priors", "template",
             "planted_linear", "planted_pairs", "csf_missing_rate",
             "noise_scale", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise CohortSpecError(f"{path}: unknown fields {sorted(unknown)}")
    kwargs = dict(raw)
    try:
        if "template" in kwargs:
            kwargs["template"] = SchemaTemplate(**kwargs["template"])
        if "class_priors" in kwargs:
            kwargs["class_priors"] = tuple(kwargs["class_priors"])
        if "planted_linear" in kwargs:
            kwargs["planted_linear"] = tuple(tuple(e) for e in kwargs["planted_linear"])
        if "planted_pairs" in kwargs:
            kwargs["planted_pairs"] = tuple(tuple(e) for e in kwargs["planted_pairs"])
        spec = CohortSpec(**kwargs)
    except TypeError as exc:
        raise CohortSpecError(f"{path}: {exc}") from None
    spec.validate()
    return spec


def write_cohort(spec: CohortSpec, out_dir):
    """Generate and write schema.json, data.csv, ground_truth.json, and (when
    the template has volume groups) schema_meta.json.  Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema, samples, truth = generate(spec)
    paths = {
        "schema": out / "schema.json",
        "data": out / "data.csv",
        "ground_truth": out / "ground_truth.json",
    }
    save_schema(schema, paths["schema"])
    save_dataset(samples, schema, paths["data"])
    paths["ground_truth"].write_text(
        json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    if spec.template.n_volumes > 0:
        paths["meta_schema"] = out / "schema_meta.json"
        save_schema(meta_schema_for(schema, spec.template), paths["meta_schema"])
    return schema, samples, truth, paths
