"""Feature schemas, dataset files, standardization, and raw-input encoding.

A schema describes an ordered list of features, each of which is continuous
(one column), categorical (one-hot block over named categories), or a group
(a block of named continuous member columns sharing one embedding).  Schema
files are JSON; dataset files are UTF-8 CSV with one row per visit, an empty
cell meaning "missing", category cells holding category names, and the label
cell holding a class label name.

Group features in a schema file reference continuous features declared in the
same file; the loader absorbs the referenced declarations into the group, so
the same dataset file serves both the plain and the grouped ("meta") schema.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DatasetError, SchemaError

KINDS = ("continuous", "categorical", "group")
MISSING_POLICIES = ("reject", "zero_impute")

#: Non-feature columns every dataset file starts with, in this order.
ID_COLUMNS = ("patient_id", "visit_id", "is_baseline", "label")


@dataclass(frozen=True)
class FeatureSpec:
    """One feature: its kind, encoding width, and missing-value policy.

    Encoding width is 1 for continuous features, the number of categories for
    categorical features, and the number of members for group features.
    """

    name: str
    kind: str
    categories: tuple[str, ...] | None = None
    members: tuple[str, ...] | None = None
    missing_policy: str = "reject"
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.missing_policy not in MISSING_POLICIES:
            raise SchemaError(
                f"feature {self.name!r}: unknown missing_policy {self.missing_policy!r}"
            )
        if self.kind == "categorical":
            if not self.categories or len(self.categories) < 2:
                raise SchemaError(
                    f"feature {self.name!r}: categorical cardinality must be >= 2"
                )
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"feature {self.name!r}: duplicate category names")
        elif self.categories is not None:
            raise SchemaError(f"feature {self.name!r}: categories only valid for categorical kind")
        if self.kind == "group":
            if not self.members:
                raise SchemaError(f"feature {self.name!r}: group member list is empty")
            if len(set(self.members)) != len(self.members):
                raise SchemaError(f"feature {self.name!r}: duplicate group members")
        elif self.members is not None:
            raise SchemaError(f"feature {self.name!r}: members only valid for group kind")

    @property
    def cardinality(self) -> int:
        if self.kind != "categorical":
            raise SchemaError(f"feature {self.name!r} is not categorical")
        return len(self.categories)

    @property
    def width(self) -> int:
        """Raw encoding width of this feature."""
        if self.kind == "continuous":
            return 1
        if self.kind == "categorical":
            return len(self.categories)
        return len(self.members)

    def csv_columns(self) -> tuple[str, ...]:
        """Dataset-file columns this feature occupies (groups span their members)."""
        if self.kind == "group":
            return self.members
        return (self.name,)

    def encoded_columns(self) -> tuple[str, ...]:
        """Names of this feature's columns in the encoded input vector."""
        if self.kind == "continuous":
            return (self.name,)
        if self.kind == "categorical":
            return tuple(f"{self.name}={c}" for c in self.categories)
        return self.members


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list plus the class label names."""

    features: tuple[FeatureSpec, ...]
    class_labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.class_labels) < 2:
            raise SchemaError("at least 2 class labels required")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise SchemaError("duplicate class labels")
        if not self.features:
            raise SchemaError("schema declares no features")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dupes}")
        # Group members occupy the dataset-column namespace together with
        # feature names, so collisions are ambiguous.
        column_names = []
        for f in self.features:
            column_names.extend(f.csv_columns())
        if len(set(column_names)) != len(column_names):
            dupes = sorted({n for n in column_names if column_names.count(n) > 1})
            raise SchemaError(f"dataset column name collision: {dupes}")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @cached_property
    def width(self) -> int:
        """Total raw input width D = sum of per-feature widths."""
        return sum(f.width for f in self.features)

    @cached_property
    def slices(self) -> tuple[slice, ...]:
        """Per-feature slice into the encoded input vector, in feature order."""
        out, start = [], 0
        for f in self.features:
            out.append(slice(start, start + f.width))
            start += f.width
        return tuple(out)

    @cached_property
    def encoded_columns(self) -> tuple[str, ...]:
        out = []
        for f in self.features:
            out.extend(f.encoded_columns())
        return tuple(out)

    @cached_property
    def csv_header(self) -> tuple[str, ...]:
        cols = list(ID_COLUMNS)
        for f in self.features:
            cols.extend(f.csv_columns())
        return tuple(cols)

    @cached_property
    def schema_hash(self) -> str:
        """Stable 16-hex-digit digest of the schema content."""
        payload = json.dumps(_schema_to_obj(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"no feature named {name!r}")

    def feature_index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"no feature named {name!r}")

    def features_tagged(self, tag: str) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if tag in f.tags)

    def label_index(self, label: str) -> int:
        try:
            return self.class_labels.index(label)
        except ValueError:
            raise SchemaError(f"unknown class label {label!r}") from None


@dataclass(frozen=True)
class Sample:
    """One visit row: per-feature raw values plus identity and label.

    ``values`` maps feature name to a float (continuous), an int category
    index (categorical), or a tuple of floats (group); ``None`` marks a
    missing value, and group tuples may hold ``None`` per member.
    """

    patient_id: str
    visit_id: str
    is_baseline: bool
    values: dict
    label: int


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine scaling fitted on training data.

    ``mean``/``scale`` are aligned to the encoded input columns; one-hot
    columns and zero-variance columns pass through with mean 0/scale 1.
    """

    mean: np.ndarray
    scale: np.ndarray
    zero_variance: tuple[str, ...] = ()

    def transform_column(self, column_index: int, value: float) -> float:
        return (value - self.mean[column_index]) / self.scale[column_index]

    def inverse_column(self, column_index: int, value: float) -> float:
        return value * self.scale[column_index] + self.mean[column_index]


def identity_standardizer(schema: FeatureSchema) -> Standardizer:
    """Standardizer that leaves every column untouched."""
    d = schema.width
    return Standardizer(mean=np.zeros(d), scale=np.ones(d))


# ---------------------------------------------------------------------------
# schema files


def _schema_to_obj(schema: FeatureSchema) -> dict:
    feats = []
    for f in schema.features:
        entry = {"name": f.name, "kind": f.kind, "missing_policy": f.missing_policy}
        if f.kind == "categorical":
            entry["categories"] = list(f.categories)
        if f.kind == "group":
            entry["members"] = list(f.members)
        if f.tags:
            entry["tags"] = list(f.tags)
        feats.append(entry)
    return {"class_labels": list(schema.class_labels), "features": feats}


def schema_from_obj(raw, context: str = "<schema>") -> FeatureSchema:
    """Build a schema from the parsed file-format object (see load_schema)."""
    if not isinstance(raw, dict) or "features" not in raw or "class_labels" not in raw:
        raise SchemaError(f"{context}: expected an object with 'features' and 'class_labels'")

    entries = raw["features"]
    if not isinstance(entries, list):
        raise SchemaError(f"{context}: 'features' must be a list")
    parsed: list[FeatureSpec] = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry or "kind" not in entry:
            raise SchemaError(f"{context}: feature[{i}] needs at least 'name' and 'kind'")
        try:
            parsed.append(
                FeatureSpec(
                    name=str(entry["name"]),
                    kind=str(entry["kind"]),
                    categories=tuple(entry["categories"]) if "categories" in entry else None,
                    members=tuple(entry["members"]) if "members" in entry else None,
                    missing_policy=str(entry.get("missing_policy", "reject")),
                    tags=tuple(entry.get("tags", ())),
                )
            )
        except SchemaError as exc:
            raise SchemaError(f"{context}: feature[{i}]: {exc}") from None

    features = _resolve_groups(parsed, context=context)
    try:
        return FeatureSchema(features=features, class_labels=tuple(raw["class_labels"]))
    except SchemaError as exc:
        raise SchemaError(f"{context}: {exc}") from None


def load_schema(path) -> FeatureSchema:
    """Load and validate a schema file.

    Group entries reference continuous features declared in the same file;
    those declarations are absorbed into the group (the group keeps its own
    declared position).  A member that does not name a declared continuous
    feature is a referential-integrity error.

    Raises:
        SchemaError: parse failure, unknown kind/policy, duplicate names,
            or a group referencing an undeclared member.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON (line {exc.lineno}: {exc.msg})") from None
    return schema_from_obj(raw, context=str(path))


def _resolve_groups(parsed: list[FeatureSpec], context: str) -> tuple[FeatureSpec, ...]:
    by_name = {f.name: f for f in parsed}
    absorbed: set[str] = set()
    for f in parsed:
        if f.kind != "group":
            continue
        for member in f.members:
            target = by_name.get(member)
            if target is None:
                raise SchemaError(
                    f"{context}: group {f.name!r} references undeclared member {member!r}"
                )
            if target.kind != "continuous":
                raise SchemaError(
                    f"{context}: group {f.name!r} member {member!r} must be continuous"
                )
            if member in absorbed:
                raise SchemaError(
                    f"{context}: member {member!r} absorbed by more than one group"
                )
            absorbed.add(member)
    return tuple(f for f in parsed if f.name not in absorbed)


def schema_to_obj(schema: FeatureSchema) -> dict:
    """File-format object that round-trips through :func:`schema_from_obj`.

    Group members are re-emitted as standalone continuous declarations
    immediately before their group, matching the reference format.
    """
    feats = []
    for f in schema.features:
        if f.kind == "group":
            for member in f.members:
                feats.append({"name": member, "kind": "continuous",
                              "missing_policy": f.missing_policy})
        entry = {"name": f.name, "kind": f.kind, "missing_policy": f.missing_policy}
        if f.kind == "categorical":
            entry["categories"] = list(f.categories)
        if f.kind == "group":
            entry["members"] = list(f.members)
        if f.tags:
            entry["tags"] = list(f.tags)
        feats.append(entry)
    return {"class_labels": list(schema.class_labels), "features": feats}


def save_schema(schema: FeatureSchema, path) -> None:
    """Write a schema file that round-trips through :func:`load_schema`."""
    Path(path).write_text(json.dumps(schema_to_obj(schema), indent=2) + "\n",
                          encoding="utf-8")


def group_features(schema: FeatureSchema, groups: dict, *,
                   missing_policy: str = "reject",
                   tags_by_group: dict | None = None) -> FeatureSchema:
    """Derive a grouped ("meta") schema from a plain one.

    ``groups`` maps a new group name to the continuous feature names it
    absorbs.  Each absorbed feature is removed from the schema; the group is
    inserted at the position of its first member.
    """
    member_to_group: dict[str, str] = {}
    for gname, members in groups.items():
        if not members:
            raise SchemaError(f"group {gname!r}: empty member list")
        for m in members:
            spec = schema.feature(m)  # raises SchemaError for undeclared members
            if spec.kind != "continuous":
                raise SchemaError(f"group {gname!r} member {m!r} must be continuous")
            if m in member_to_group:
                raise SchemaError(f"member {m!r} absorbed by more than one group")
            member_to_group[m] = gname

    tags_by_group = tags_by_group or {}
    out: list[FeatureSpec] = []
    emitted: set[str] = set()
    for f in schema.features:
        gname = member_to_group.get(f.name)
        if gname is None:
            out.append(f)
        elif gname not in emitted:
            out.append(FeatureSpec(
                name=gname, kind="group", members=tuple(groups[gname]),
                missing_policy=missing_policy,
                tags=tuple(tags_by_group.get(gname, ())),
            ))
            emitted.add(gname)
    return FeatureSchema(features=tuple(out), class_labels=schema.class_labels)


# ---------------------------------------------------------------------------
# dataset files


def _parse_float(cell: str, where: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DatasetError(f"{where}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DatasetError(f"{where}: non-finite value {cell!r}")
    return v


def load_dataset(path, schema: FeatureSchema) -> list[Sample]:
    """Read a dataset CSV against ``schema``, one Sample per row, order preserved.

    Feature columns are matched by name, so a file written against the plain
    schema also loads under the grouped schema (whose header lists each
    group's members together).  The four id columns must come first.  Empty
    cells are recorded as missing; the missing policy is applied at encode
    time, except that a missing cell under a ``reject`` policy fails
    immediately with row context.
    """
    path = Path(path)
    try:
        handle = path.open("r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None

    expected = schema.csv_header
    samples: list[Sample] = []
    with handle:
        reader = csv.reader(handle)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise DatasetError(f"{path}: empty file (missing header)") from None
        order = None
        if header != expected:
            if (header[:4] != expected[:4]
                    or sorted(header[4:]) != sorted(expected[4:])):
                raise DatasetError(
                    f"{path}: header mismatch; expected {list(expected)}, got {list(header)}"
                )
            order = [header.index(c) for c in expected]
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetError(f"{path}:{row_no}: expected {len(expected)} cells, got {len(row)}")
            if order is not None:
                row = [row[i] for i in order]
            samples.append(_parse_row(row, schema, where=f"{path}:{row_no}"))
    return samples


def _parse_row(row: list[str], schema: FeatureSchema, where: str) -> Sample:
    patient_id, visit_id, baseline_cell, label_cell = row[:4]
    if not patient_id or not visit_id:
        raise DatasetError(f"{where}: patient_id and visit_id must be non-empty")
    if baseline_cell not in ("0", "1", "true", "false"):
        raise DatasetError(f"{where}: is_baseline must be 0/1, got {baseline_cell!r}")
    try:
        label = schema.label_index(label_cell)
    except SchemaError:
        raise DatasetError(
            f"{where}: unknown class label {label_cell!r} (expected one of {list(schema.class_labels)})"
        ) from None

    values: dict = {}
    pos = 4
    for spec in schema.features:
        if spec.kind == "continuous":
            cell = row[pos]
            pos += 1
            if cell == "":
                _check_missing_allowed(spec, spec.name, where)
                values[spec.name] = None
            else:
                values[spec.name] = _parse_float(cell, f"{where} column {spec.name!r}")
        elif spec.kind == "categorical":
            cell = row[pos]
            pos += 1
            if cell == "":
                _check_missing_allowed(spec, spec.name, where)
                values[spec.name] = None
            else:
                try:
                    values[spec.name] = spec.categories.index(cell)
                except ValueError:
                    raise DatasetError(
                        f"{where} column {spec.name!r}: unknown category {cell!r}"
                    ) from None
        else:  # group
            member_vals = []
            for member in spec.members:
                cell = row[pos]
                pos += 1
                if cell == "":
                    _check_missing_allowed(spec, member, where)
                    member_vals.append(None)
                else:
                    member_vals.append(_parse_float(cell, f"{where} column {member!r}"))
            values[spec.name] = tuple(member_vals)
    return Sample(patient_id=patient_id, visit_id=visit_id,
                  is_baseline=baseline_cell in ("1", "true"),
                  values=values, label=label)


def _check_missing_allowed(spec: FeatureSpec, column: str, where: str) -> None:
    if spec.missing_policy == "reject":
        raise DatasetError(
            f"{where} column {column!r}: missing value, but feature {spec.name!r} "
            f"has missing_policy 'reject'"
        )


def _format_value(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def save_dataset(samples, schema: FeatureSchema, path) -> None:
    """Write samples to a dataset CSV in the documented format (round-trips)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(schema.csv_header)
        for s in samples:
            row = [s.patient_id, s.visit_id, "1" if s.is_baseline else "0",
                   schema.class_labels[s.label]]
            for spec in schema.features:
                v = s.values[spec.name]
                if spec.kind == "continuous":
                    row.append(_format_value(v))
                elif spec.kind == "categorical":
                    row.append("" if v is None else spec.categories[v])
                else:
                    row.extend(_format_value(m) for m in v)
            writer.writerow(row)


def remap_samples(samples, old_schema: FeatureSchema, new_schema: FeatureSchema) -> list[Sample]:
    """Re-key samples loaded under one schema to another over the same columns.

    Used to run a grouped schema over samples loaded with the plain one:
    a group's value is gathered from its members' scalar values.
    """
    out = []
    for s in samples:
        values: dict = {}
        for spec in new_schema.features:
            if spec.kind == "group":
                values[spec.name] = tuple(
                    _member_value(s, old_schema, m) for m in spec.members
                )
            else:
                values[spec.name] = s.values[spec.name]
        out.append(Sample(patient_id=s.patient_id, visit_id=s.visit_id,
                          is_baseline=s.is_baseline, values=values, label=s.label))
    return out


def _member_value(sample: Sample, schema: FeatureSchema, member: str):
    if member in sample.values:
        return sample.values[member]
    # member may already live inside a group of the source schema
    for spec in schema.features:
        if spec.kind == "group" and member in spec.members:
            return sample.values[spec.name][spec.members.index(member)]
    raise SchemaError(f"cannot resolve column {member!r} in source schema")


# ---------------------------------------------------------------------------
# standardization and encoding


def _continuous_column_indices(schema: FeatureSchema):
    """(column index, column name) for every continuous-valued input column."""
    out = []
    for spec, sl in zip(schema.features, schema.slices):
        if spec.kind == "continuous":
            out.append((sl.start, spec.name))
        elif spec.kind == "group":
            for j, member in enumerate(spec.members):
                out.append((sl.start + j, member))
    return out


def fit_standardizer(samples, schema: FeatureSchema) -> Standardizer:
    """Fit per-column mean/std over non-missing values of the training samples.

    Uses the population (1/N) variance.  Zero-variance and all-missing
    columns are flagged and pass through unscaled.
    """
    if not samples:
        raise DatasetError("cannot fit a standardizer on an empty training set")
    d = schema.width
    mean = np.zeros(d)
    scale = np.ones(d)
    flagged: list[str] = []
    columns = _continuous_column_indices(schema)
    raw: dict[int, list[float]] = {idx: [] for idx, _ in columns}
    for s in samples:
        for spec, sl in zip(schema.features, schema.slices):
            if spec.kind == "continuous":
                v = s.values[spec.name]
                if v is not None:
                    raw[sl.start].append(v)
            elif spec.kind == "group":
                vals = s.values[spec.name]
                for j, v in enumerate(vals):
                    if v is not None:
                        raw[sl.start + j].append(v)
    for idx, name in columns:
        vals = raw[idx]
        if not vals:
            flagged.append(name)  # vacuous statistics: mean 0, passthrough
            continue
        arr = np.asarray(vals, dtype=float)
        mu = float(arr.mean())
        sd = float(arr.std())  # population formula
        mean[idx] = mu
        if sd > 0.0:
            scale[idx] = sd
        else:
            flagged.append(name)
    return Standardizer(mean=mean, scale=scale, zero_variance=tuple(flagged))


def encode(sample: Sample, schema: FeatureSchema, std: Standardizer) -> np.ndarray:
    """Encode one sample into the raw input vector x of width D.

    Continuous columns are z-scored with the training statistics; categorical
    features become one-hot blocks; missing values under ``zero_impute``
    become literal zeros, bypassing standardization (zero means "no signal").

    Raises:
        DatasetError: missing value under a ``reject`` policy.
    """
    x = np.zeros(schema.width)
    for spec, sl in zip(schema.features, schema.slices):
        v = sample.values.get(spec.name)
        if spec.kind == "continuous":
            if v is None:
                _check_missing_allowed(spec, spec.name, f"sample {sample.visit_id!r}")
                continue  # literal zero
            x[sl.start] = (v - std.mean[sl.start]) / std.scale[sl.start]
        elif spec.kind == "categorical":
            if v is None:
                _check_missing_allowed(spec, spec.name, f"sample {sample.visit_id!r}")
                continue  # all-zero block
            if not 0 <= v < spec.cardinality:
                raise DatasetError(
                    f"sample {sample.visit_id!r}: category index {v} out of range "
                    f"for feature {spec.name!r}"
                )
            x[sl.start + v] = 1.0
        else:
            for j, member_val in enumerate(v):
                if member_val is None:
                    _check_missing_allowed(spec, spec.members[j], f"sample {sample.visit_id!r}")
                    continue
                idx = sl.start + j
                x[idx] = (member_val - std.mean[idx]) / std.scale[idx]
    return x


def encode_dataset(samples, schema: FeatureSchema, std: Standardizer):
    """Encode a sample list into (X, y) arrays; row order preserved."""
    n = len(samples)
    x = np.zeros((n, schema.width))
    y = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(samples):
        x[i] = encode(s, schema, std)
        if not 0 <= s.label < schema.n_classes:
            raise DatasetError(f"sample {s.visit_id!r}: label {s.label} out of range")
        y[i] = s.label
    return x, y


def feature_scalars(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Per-feature scalar raw values for width-1 features, 1.0 elsewhere.

    Supports the literal interaction reading that multiplies the embedding
    dot products by x_i * x_j once more; one-hot and group blocks keep
    factor 1, where the selection already lives in the embedding.
    """
    x = np.asarray(x)
    n = schema.n_features
    s = np.ones(x.shape[:-1] + (n,))
    for i, (spec, sl) in enumerate(zip(schema.features, schema.slices)):
        if spec.width == 1:
            s[..., i] = x[..., sl.start]
    return s
