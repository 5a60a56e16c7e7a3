"""Matrix normalization, scaling, filtering, and label preparation.

The canonical order is reads-per-million, then per-feature min-max
scaling, then removal of features with too many zeros, applied to the
full labeled dataset. Fitted state is captured in a
:class:`PipelineRecord` so the exact transformation can be replayed on
new samples at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ingest import (
    AnnotatedDataset,
    ExpressionMatrix,
    MetadataTable,
    SampleMeta,
    join,
)
from .rng import substream

RPM_TOTAL = 1e6

# Tissue and cell-line names collapsed onto five coarse groups.
TISSUE_GROUPS: dict[str, tuple[str, ...]] = {
    "blood_group": (
        "blood",
        "blood plasma",
        "blood serum",
        "peripheral blood",
        "umbilical cord blood",
        "serum",
        "buffy coat",
        "immortal human B cell",
        "liver",
        "lymphoblastoid cell",
    ),
    "brain_group": (
        "brain",
        "cingulate gyrus",
        "motor cortex",
        "prefrontal cortex",
        "neocortex",
    ),
    "epithelium_group": (
        "skin",
        "dermis",
        "epidermis",
        "breast",
        "oral mucosa",
        "larynx",
    ),
    "gland_group": (
        "prostate gland",
        "testis",
        "kidney",
        "bladder",
        "uterine endometrium",
        "tonsil",
        "lymph node",
    ),
    "intestine_group": (
        "intestine",
        "colon",
        "ileal mucosa",
    ),
}

# Age interval bounds per scheme size. First interval is closed on the
# left; all others are left-open; every interval is right-closed.
AGE_SCHEMES: dict[int, tuple[tuple[float, float], ...]] = {
    2: ((0, 65), (65, 110)),
    3: ((0, 45), (45, 70), (70, 110)),
    4: ((0, 30), (30, 60), (60, 80), (80, 110)),
}


@dataclass
class ScalerParams:
    """Per-feature min/max captured by :func:`fit_minmax`."""

    feature_ids: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != (len(self.feature_ids),) or self.maxs.shape != self.mins.shape:
            raise DataError("scaler parameter arrays do not match the feature list")
        if np.any(self.mins > self.maxs):
            raise DataError("scaler has a feature with min > max")


@dataclass
class TissueGroupMap:
    mapping: dict[str, str]

    @classmethod
    def default(cls) -> "TissueGroupMap":
        mapping: dict[str, str] = {}
        for group, members in TISSUE_GROUPS.items():
            for tissue in members:
                if tissue in mapping:
                    raise DataError(f"tissue {tissue!r} assigned to two groups")
                mapping[tissue] = group
        return cls(mapping)

    def resolve(self, tissue: str) -> str:
        return self.mapping.get(tissue, tissue)


@dataclass
class AgeBinning:
    """Ordered, contiguous age intervals covering [0, 110] years."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.bounds:
            raise DataError("age binning needs at least one interval")
        lo0 = self.bounds[0][0]
        prev_hi = lo0
        for lo, hi in self.bounds:
            if lo != prev_hi or hi <= lo:
                raise DataError("age intervals must be contiguous and increasing")
            prev_hi = hi
        if lo0 != 0 or prev_hi != 110:
            raise DataError("age intervals must cover [0, 110]")

    @classmethod
    def scheme(cls, k: int) -> "AgeBinning":
        if k not in AGE_SCHEMES:
            raise DataError(f"no {k}-interval age scheme; choose one of {sorted(AGE_SCHEMES)}")
        return cls(AGE_SCHEMES[k])

    @property
    def labels(self) -> list[str]:
        out = []
        for i, (lo, hi) in enumerate(self.bounds):
            left = "[" if i == 0 else "("
            out.append(f"{left}{lo:g};{hi:g}]")
        return out

    def label_for(self, age: float) -> str | None:
        """Interval label containing `age`, or None if out of range."""
        for i, (lo, hi) in enumerate(self.bounds):
            if (age >= lo if i == 0 else age > lo) and age <= hi:
                return self.labels[i]
        return None


def bin_age(age: float, scheme: AgeBinning) -> str:
    label = scheme.label_for(age)
    if label is None:
        raise DataError(f"age {age!r} outside [0, 110]")
    return label


def rpm_normalize(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Scale each sample column to reads-per-million."""
    totals = matrix.values.sum(axis=0)
    zero = np.flatnonzero(totals == 0)
    if zero.size:
        raise DataError(
            f"sample {matrix.sample_ids[zero[0]]!r} has zero total count, cannot normalize"
        )
    values = matrix.values / totals * RPM_TOTAL
    return ExpressionMatrix(list(matrix.feature_ids), list(matrix.sample_ids), values)


def fit_minmax(matrix: ExpressionMatrix) -> ScalerParams:
    if matrix.n_samples == 0:
        raise DataError("cannot fit a scaler on an empty matrix")
    return ScalerParams(
        feature_ids=list(matrix.feature_ids),
        mins=matrix.values.min(axis=1),
        maxs=matrix.values.max(axis=1),
    )


def apply_minmax(matrix: ExpressionMatrix, params: ScalerParams) -> ExpressionMatrix:
    """Map each feature to [0,1] by its fitted range.

    Constant features (min = max) map to 0; values outside the fitted
    range are clamped so unseen data stays inside the trained domain.
    """
    if matrix.feature_ids != params.feature_ids:
        raise DataError("scaler was fitted on a different feature set")
    span = params.maxs - params.mins
    safe = np.where(span > 0, span, 1.0)
    values = (matrix.values - params.mins[:, None]) / safe[:, None]
    values[span == 0, :] = 0.0
    np.clip(values, 0.0, 1.0, out=values)
    return ExpressionMatrix(list(matrix.feature_ids), list(matrix.sample_ids), values)


def filter_zero_features(matrix: ExpressionMatrix, threshold: float = 0.3) -> ExpressionMatrix:
    """Drop features whose zero fraction strictly exceeds `threshold`."""
    if not 0 <= threshold <= 1:
        raise DataError(f"zero threshold {threshold!r} outside [0, 1]")
    if matrix.n_samples == 0:
        raise DataError("cannot zero-filter an empty matrix")
    zero_frac = (matrix.values == 0).sum(axis=1) / matrix.n_samples
    keep = np.flatnonzero(zero_frac <= threshold)
    if keep.size == 0:
        raise DataError(
            f"all {matrix.n_features} features exceed the {threshold:g} zero-fraction threshold"
        )
    return matrix.subset_features(keep)


def group_tissues(meta: MetadataTable, group_map: TissueGroupMap | None = None) -> MetadataTable:
    """Replace tissue names by their group; unmapped names pass through."""
    if group_map is None:
        group_map = TissueGroupMap.default()
    rows = {}
    for sample_id, row in meta.rows.items():
        tissue = None if row.tissue is None else group_map.resolve(row.tissue)
        rows[sample_id] = SampleMeta(
            dataset_id=row.dataset_id, tissue=tissue, sex=row.sex, age=row.age
        )
    return MetadataTable(rows)


def filter_small_classes(data: AnnotatedDataset, min_samples: int) -> AnnotatedDataset:
    """Drop classes rarer than `min_samples` and re-encode labels densely."""
    if min_samples < 1:
        raise DataError(f"min_samples must be >= 1, got {min_samples}")
    counts = data.class_counts()
    kept_classes = [k for k in range(data.n_classes) if counts[k] >= min_samples]
    if len(kept_classes) < 2:
        raise DataError(
            f"fewer than 2 classes have at least {min_samples} samples "
            f"(counts: {dict(zip(data.class_names, counts.tolist()))})"
        )
    if len(kept_classes) == data.n_classes:
        return data
    keep_mask = np.isin(data.labels, kept_classes)
    sample_ids = [s for s, m in zip(data.sample_ids, keep_mask) if m]
    remap = {old: new for new, old in enumerate(kept_classes)}
    subset = data.subset(sample_ids)
    return AnnotatedDataset(
        matrix=subset.matrix,
        metadata=subset.metadata,
        label_field=data.label_field,
        labels=np.array([remap[y] for y in subset.labels], dtype=np.int64),
        class_names=[data.class_names[k] for k in kept_classes],
    )


def downsample_classes(data: AnnotatedDataset, seed: int) -> AnnotatedDataset:
    """Downsample every class to the size of the smallest one."""
    if data.n_classes < 2:
        raise DataError("downsampling needs at least 2 classes")
    counts = data.class_counts()
    if np.any(counts == 0):
        empty = data.class_names[int(np.flatnonzero(counts == 0)[0])]
        raise DataError(f"class {empty!r} has no samples")
    target = int(counts.min())
    rng = substream(seed, "downsample")
    chosen: list[int] = []
    for k in range(data.n_classes):
        members = np.flatnonzero(data.labels == k)
        picked = rng.choice(members, size=target, replace=False)
        chosen.extend(int(i) for i in picked)
    chosen.sort()  # keep original sample order
    return data.subset([data.sample_ids[i] for i in chosen])


@dataclass
class PipelineConfig:
    """Switches for the standard preprocessing chain."""

    rpm: bool = False
    minmax: bool = True
    zero_threshold: float | None = 0.3
    group_tissues: bool = False
    label_field: str = "tissue"
    age_scheme_k: int | None = None
    min_class_size: int | None = None
    downsample: bool = False
    seed: int = 0


@dataclass
class PipelineRecord:
    """Fitted state needed to replay the matrix transformation exactly.

    `input_feature_ids` is the feature order the chain was fitted on
    (before zero filtering); `kept_feature_ids` is what survived.
    """

    input_feature_ids: list[str]
    kept_feature_ids: list[str]
    rpm: bool
    scaler: ScalerParams | None
    label_field: str
    age_scheme_k: int | None
    group_tissues: bool
    class_names: list[str] = field(default_factory=list)
    feature_set: str = "srna"


def record_to_dict(record: PipelineRecord) -> dict:
    scaler = None
    if record.scaler is not None:
        scaler = {
            "feature_ids": list(record.scaler.feature_ids),
            "mins": record.scaler.mins.tolist(),
            "maxs": record.scaler.maxs.tolist(),
        }
    return {
        "input_feature_ids": list(record.input_feature_ids),
        "kept_feature_ids": list(record.kept_feature_ids),
        "rpm": record.rpm,
        "scaler": scaler,
        "label_field": record.label_field,
        "age_scheme_k": record.age_scheme_k,
        "group_tissues": record.group_tissues,
        "class_names": list(record.class_names),
        "feature_set": record.feature_set,
    }


def record_from_dict(doc: dict) -> PipelineRecord:
    scaler = None
    if doc.get("scaler") is not None:
        scaler = ScalerParams(
            feature_ids=list(doc["scaler"]["feature_ids"]),
            mins=np.array(doc["scaler"]["mins"], dtype=np.float64),
            maxs=np.array(doc["scaler"]["maxs"], dtype=np.float64),
        )
    return PipelineRecord(
        input_feature_ids=list(doc["input_feature_ids"]),
        kept_feature_ids=list(doc["kept_feature_ids"]),
        rpm=bool(doc["rpm"]),
        scaler=scaler,
        label_field=doc["label_field"],
        age_scheme_k=doc["age_scheme_k"],
        group_tissues=bool(doc["group_tissues"]),
        class_names=list(doc.get("class_names", [])),
        feature_set=doc.get("feature_set", "srna"),
    )


def transform_matrix(
    matrix: ExpressionMatrix, config: PipelineConfig
) -> tuple[ExpressionMatrix, PipelineRecord]:
    """Fit and apply the matrix chain: RPM, then min-max, then zero filter."""
    input_ids = list(matrix.feature_ids)
    out = matrix
    if config.rpm:
        out = rpm_normalize(out)
    scaler = None
    if config.minmax:
        scaler = fit_minmax(out)
        out = apply_minmax(out, scaler)
    if config.zero_threshold is not None:
        out = filter_zero_features(out, config.zero_threshold)
    record = PipelineRecord(
        input_feature_ids=input_ids,
        kept_feature_ids=list(out.feature_ids),
        rpm=config.rpm,
        scaler=scaler,
        label_field=config.label_field,
        age_scheme_k=config.age_scheme_k,
        group_tissues=config.group_tissues,
    )
    return out, record


def replay_matrix(matrix: ExpressionMatrix, record: PipelineRecord) -> ExpressionMatrix:
    """Apply a fitted chain to new samples (no refitting)."""
    missing = set(record.input_feature_ids) - set(matrix.feature_ids)
    if missing:
        raise DataError(
            f"matrix lacks {len(missing)} features the model was trained on "
            f"(e.g. {sorted(missing)[0]!r})"
        )
    index = {f: i for i, f in enumerate(matrix.feature_ids)}
    out = matrix.subset_features([index[f] for f in record.input_feature_ids])
    if record.rpm:
        out = rpm_normalize(out)
    if record.scaler is not None:
        out = apply_minmax(out, record.scaler)
    kept = set(record.kept_feature_ids)
    out = out.subset_features([i for i, f in enumerate(out.feature_ids) if f in kept])
    return out


def build_dataset(
    matrix: ExpressionMatrix,
    meta: MetadataTable,
    config: PipelineConfig,
) -> tuple[AnnotatedDataset, PipelineRecord, dict]:
    """Run the full chain and join labels; returns (data, record, report)."""
    report: dict = {"n_features_in": matrix.n_features, "n_samples_in": matrix.n_samples}
    transformed, record = transform_matrix(matrix, config)
    report["n_features_kept"] = transformed.n_features

    if config.group_tissues:
        meta = group_tissues(meta)
    scheme = AgeBinning.scheme(config.age_scheme_k) if config.age_scheme_k else None
    data = join(transformed, meta, config.label_field, age_scheme=scheme)
    report["n_samples_labeled"] = data.n_samples

    if config.min_class_size is not None:
        data = filter_small_classes(data, config.min_class_size)
        report["n_classes_kept"] = data.n_classes
    if config.downsample:
        data = downsample_classes(data, config.seed)
        report["n_per_class"] = int(data.class_counts()[0])
    report["n_samples_out"] = data.n_samples
    report["class_names"] = list(data.class_names)
    record.class_names = list(data.class_names)
    return data, record, report
