"""Expression-matrix and metadata ingestion.

File formats
------------
Expression matrix TSV: first header cell is ``feature_id``, the remaining
header cells are sample ids; one row per feature; tab-separated decimal
numbers; UTF-8; no quoting.

Metadata TSV: header ``sample_id/dataset_id/tissue/sex/age`` (tab
separated); the empty string means missing; sex is ``male``/``female``
or empty; age is decimal years.

Feature ids are namespaced ``srna:<id>`` or ``contam:<id>`` so the two
feature spaces can be merged without collisions. Ids that already carry
a known namespace prefix are kept as-is on load, which makes written
artifacts round-trip exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

NAMESPACES = ("srna", "contam")
LABEL_FIELDS = ("tissue", "sex", "age_interval")
SEXES = ("male", "female")

METADATA_COLUMNS = ("sample_id", "dataset_id", "tissue", "sex", "age")


@dataclass
class ExpressionMatrix:
    """Dense features x samples matrix of non-negative expression values."""

    feature_ids: list[str]
    sample_ids: list[str]
    values: np.ndarray  # (n_features, n_samples) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("expression values must be a 2-d matrix")

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def validate(self) -> None:
        if self.values.shape != (len(self.feature_ids), len(self.sample_ids)):
            raise DataError(
                f"matrix shape {self.values.shape} does not match "
                f"{len(self.feature_ids)} features x {len(self.sample_ids)} samples"
            )
        dup = _first_duplicate(self.feature_ids)
        if dup is not None:
            raise DataError(f"duplicate feature id {dup!r}")
        dup = _first_duplicate(self.sample_ids)
        if dup is not None:
            raise DataError(f"duplicate sample id {dup!r}")
        if self.values.size:
            if not np.all(np.isfinite(self.values)):
                raise DataError("matrix contains non-finite values")
            if self.values.min() < 0:
                raise DataError("matrix contains negative values")

    def sample_major(self) -> np.ndarray:
        """Values as a (n_samples, n_features) array."""
        return np.ascontiguousarray(self.values.T)

    def subset_samples(self, sample_ids: list[str]) -> "ExpressionMatrix":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        try:
            cols = [index[s] for s in sample_ids]
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]!r}") from None
        return ExpressionMatrix(
            feature_ids=list(self.feature_ids),
            sample_ids=list(sample_ids),
            values=self.values[:, cols],
        )

    def subset_features(self, indices) -> "ExpressionMatrix":
        indices = list(indices)
        return ExpressionMatrix(
            feature_ids=[self.feature_ids[i] for i in indices],
            sample_ids=list(self.sample_ids),
            values=self.values[indices, :],
        )


@dataclass
class SampleMeta:
    dataset_id: str
    tissue: str | None = None
    sex: str | None = None
    age: float | None = None


@dataclass
class MetadataTable:
    """Per-sample annotations keyed by sample id."""

    rows: dict[str, SampleMeta] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def get(self, sample_id: str) -> SampleMeta | None:
        return self.rows.get(sample_id)

    def restrict(self, sample_ids) -> "MetadataTable":
        return MetadataTable({s: self.rows[s] for s in sample_ids if s in self.rows})


@dataclass
class AnnotatedDataset:
    """Expression matrix joined with encoded labels for one metadata field."""

    matrix: ExpressionMatrix
    metadata: MetadataTable
    label_field: str
    labels: np.ndarray  # (n_samples,) int
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return self.matrix.n_samples

    @property
    def n_features(self) -> int:
        return self.matrix.n_features

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_ids(self) -> list[str]:
        return self.matrix.sample_ids

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def sample_major(self) -> np.ndarray:
        return self.matrix.sample_major()

    def dataset_ids(self) -> list[str]:
        return [self.metadata.rows[s].dataset_id for s in self.sample_ids]

    def subset(self, sample_ids: list[str]) -> "AnnotatedDataset":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        rows = [index[s] for s in sample_ids]
        return AnnotatedDataset(
            matrix=self.matrix.subset_samples(sample_ids),
            metadata=self.metadata.restrict(sample_ids),
            label_field=self.label_field,
            labels=self.labels[rows],
            class_names=list(self.class_names),
        )

    def with_matrix(self, matrix: ExpressionMatrix) -> "AnnotatedDataset":
        if matrix.sample_ids != self.matrix.sample_ids:
            raise DataError("replacement matrix has different samples")
        return replace(self, matrix=matrix)

    @classmethod
    def from_arrays(
        cls,
        values_sample_major: np.ndarray,
        labels,
        class_names: list[str] | None = None,
        feature_ids: list[str] | None = None,
        sample_ids: list[str] | None = None,
        dataset_ids: list[str] | None = None,
        label_field: str = "tissue",
    ) -> "AnnotatedDataset":
        """Build a dataset from a (samples x features) array and integer labels.

        Convenience constructor for synthetic and test data.
        """
        x = np.asarray(values_sample_major, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n, p = x.shape
        if labels.shape != (n,):
            raise DataError("labels length does not match sample count")
        if class_names is None:
            class_names = [f"class_{k:02d}" for k in range(int(labels.max()) + 1)]
        if feature_ids is None:
            feature_ids = [f"srna:f{j:05d}" for j in range(p)]
        if sample_ids is None:
            sample_ids = [f"sample_{i:05d}" for i in range(n)]
        if dataset_ids is None:
            dataset_ids = ["ds_0"] * n
        matrix = ExpressionMatrix(feature_ids, list(sample_ids), x.T.copy())
        meta = MetadataTable(
            {
                s: SampleMeta(dataset_id=d, tissue=class_names[labels[i]])
                for i, (s, d) in enumerate(zip(sample_ids, dataset_ids))
            }
        )
        return cls(matrix, meta, label_field, labels, list(class_names))


def _first_duplicate(items) -> str | None:
    seen = set()
    for it in items:
        if it in seen:
            return it
        seen.add(it)
    return None


def _namespace_feature_id(raw: str, namespace: str) -> str:
    for ns in NAMESPACES:
        if raw.startswith(ns + ":"):
            return raw
    return f"{namespace}:{raw}"


def load_expression_matrix(path, namespace: str) -> ExpressionMatrix:
    """Parse an expression matrix TSV, prefixing feature ids with `namespace`.

    Ids already carrying a known namespace prefix are left untouched, so
    files written by :func:`write_expression_matrix` reload identically.
    """
    if namespace not in NAMESPACES:
        raise DataError(f"unknown namespace {namespace!r}; expected one of {NAMESPACES}")
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}:1: empty file")

    header = lines[0].split("\t")
    if header[0] != "feature_id":
        raise DataError(
            f"{path}:1: malformed header, first cell must be 'feature_id' "
            f"(got {header[0]!r})"
        )
    sample_ids = header[1:]
    dup = _first_duplicate(sample_ids)
    if dup is not None:
        raise DataError(f"{path}:1: duplicate sample id {dup!r}")

    n_cols = len(header)
    feature_ids: list[str] = []
    seen: set[str] = set()
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != n_cols:
            raise DataError(
                f"{path}:{lineno}: ragged row, expected {n_cols} columns, got {len(cells)}"
            )
        fid = _namespace_feature_id(cells[0], namespace)
        if fid in seen:
            raise DataError(f"{path}:{lineno}: duplicate feature id {fid!r}")
        seen.add(fid)
        feature_ids.append(fid)
        try:
            row = np.array([float(c) for c in cells[1:]], dtype=np.float64)
        except ValueError:
            bad = next(c for c in cells[1:] if not _is_float(c))
            raise DataError(f"{path}:{lineno}: non-numeric value {bad!r}") from None
        if row.size and not np.all(np.isfinite(row)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if row.size and row.min() < 0:
            bad = row.min()
            raise DataError(f"{path}:{lineno}: negative value {bad!r}")
        rows.append(row)

    values = (
        np.vstack(rows) if rows else np.empty((0, len(sample_ids)), dtype=np.float64)
    )
    matrix = ExpressionMatrix(feature_ids, sample_ids, values)
    matrix.validate()
    return matrix


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def write_expression_matrix(matrix: ExpressionMatrix, path) -> None:
    """Write a matrix TSV that reloads bit-exactly (repr-serialized reals)."""
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("feature_id\t" + "\t".join(matrix.sample_ids) + "\n")
        for i, fid in enumerate(matrix.feature_ids):
            vals = "\t".join(repr(float(v)) for v in matrix.values[i])
            fh.write(fid + ("\t" + vals if matrix.n_samples else "") + "\n")


def load_metadata(path) -> MetadataTable:
    """Parse a metadata TSV (sample_id, dataset_id, tissue, sex, age)."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}:1: empty file")
    header = tuple(lines[0].split("\t"))
    if header != METADATA_COLUMNS:
        raise DataError(
            f"{path}:1: malformed header, expected {list(METADATA_COLUMNS)}, "
            f"got {list(header)}"
        )
    rows: dict[str, SampleMeta] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(METADATA_COLUMNS):
            raise DataError(
                f"{path}:{lineno}: ragged row, expected {len(METADATA_COLUMNS)} "
                f"columns, got {len(cells)}"
            )
        sample_id, dataset_id, tissue, sex, age_raw = cells
        if sample_id in rows:
            raise DataError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
        if sex and sex not in SEXES:
            raise DataError(f"{path}:{lineno}: invalid sex {sex!r}")
        age: float | None = None
        if age_raw:
            try:
                age = float(age_raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric age {age_raw!r}") from None
            if not np.isfinite(age) or age < 0 or age > 130:
                raise DataError(f"{path}:{lineno}: age {age_raw!r} outside [0, 130]")
        rows[sample_id] = SampleMeta(
            dataset_id=dataset_id,
            tissue=tissue or None,
            sex=sex or None,
            age=age,
        )
    return MetadataTable(rows)


def write_metadata(meta: MetadataTable, path) -> None:
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("\t".join(METADATA_COLUMNS) + "\n")
        for sample_id, row in meta.rows.items():
            age = "" if row.age is None else repr(float(row.age))
            fh.write(
                "\t".join(
                    [sample_id, row.dataset_id, row.tissue or "", row.sex or "", age]
                )
                + "\n"
            )


def merge_matrices(a: ExpressionMatrix, b: ExpressionMatrix) -> ExpressionMatrix:
    """Concatenate two matrices along the feature axis (a first, then b)."""
    if a.sample_ids != b.sample_ids:
        raise DataError("cannot merge: sample ids differ or are ordered differently")
    overlap = set(a.feature_ids) & set(b.feature_ids)
    if overlap:
        raise DataError(f"cannot merge: overlapping feature ids (e.g. {sorted(overlap)[0]!r})")
    return ExpressionMatrix(
        feature_ids=list(a.feature_ids) + list(b.feature_ids),
        sample_ids=list(a.sample_ids),
        values=np.vstack([a.values, b.values]),
    )


def join(
    matrix: ExpressionMatrix,
    meta: MetadataTable,
    label_field: str,
    age_scheme=None,
) -> AnnotatedDataset:
    """Join a matrix with metadata, encoding one field as integer labels.

    Samples lacking the requested field (or with an age that cannot be
    binned) are dropped; the count is logged. Class names are sorted
    lexicographically and encoded by index.
    """
    if label_field not in LABEL_FIELDS:
        raise DataError(f"unknown label field {label_field!r}; expected one of {LABEL_FIELDS}")
    if label_field == "age_interval" and age_scheme is None:
        raise DataError("label field 'age_interval' requires an age binning scheme")

    kept_ids: list[str] = []
    raw_labels: list[str] = []
    n_dropped = 0
    for sample_id in matrix.sample_ids:
        row = meta.get(sample_id)
        value: str | None = None
        if row is not None:
            if label_field == "tissue":
                value = row.tissue
            elif label_field == "sex":
                value = row.sex
            elif row.age is not None and 0 <= row.age <= 110:
                value = age_scheme.label_for(row.age)
        if value is None:
            n_dropped += 1
            continue
        kept_ids.append(sample_id)
        raw_labels.append(value)

    if not kept_ids:
        raise DataError(f"no samples carry a usable {label_field!r} annotation")
    if n_dropped:
        log.info("join: dropped %d of %d samples lacking %s",
                 n_dropped, matrix.n_samples, label_field)

    class_names = sorted(set(raw_labels))
    encoding = {name: k for k, name in enumerate(class_names)}
    labels = np.array([encoding[v] for v in raw_labels], dtype=np.int64)
    return AnnotatedDataset(
        matrix=matrix.subset_samples(kept_ids),
        metadata=meta.restrict(kept_ids),
        label_field=label_field,
        labels=labels,
        class_names=class_names,
    )
