"""Contribution scores and knockout analysis for the neural classifier.

Scores are computed with the DeepLIFT backward pass against a zero
reference input: the Linear rule propagates multipliers through affine
layers and the Rescale rule through ReLU units. Contributions target
the pre-softmax logits, where the sum over input features equals the
logit shift from the reference exactly.

On top of the raw tensor sit the class-average ranking (average
own-class minus other-class score per feature), per-target score
differences, and the knockout procedure that zeroes features in
descending difference order until the predicted class flips.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .ingest import AnnotatedDataset, ExpressionMatrix
from .mlp import MlpModel, forward, serialize_model

RESCALE_EPS = 1e-7


@dataclass
class ContributionTensor:
    """scores[i][j][k]: contribution of feature j to the class-k logit
    of sample i, relative to the reference input."""

    scores: np.ndarray  # (n_samples, n_features, n_classes)
    reference: np.ndarray  # (n_features,)
    class_names: list[str]
    model_fingerprint: str
    feature_ids: list[str] | None = None
    sample_ids: list[str] | None = None

    @property
    def n_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def n_features(self) -> int:
        return self.scores.shape[1]

    @property
    def n_classes(self) -> int:
        return self.scores.shape[2]


@dataclass
class ClassScoreTable:
    """values[j][k]: class-average contribution advantage of feature j
    for class k (own-class score minus mean other-class score)."""

    values: np.ndarray  # (n_features, n_classes)
    class_names: list[str]
    feature_ids: list[str] | None = None


@dataclass
class KnockoutResult:
    start_class: int
    removed: list[int]  # feature indices in removal order
    steps: int
    flipped: bool
    new_class: int | None
    capped: bool


def model_fingerprint(model: MlpModel) -> str:
    return hashlib.sha256(serialize_model(model).encode("utf-8")).hexdigest()


def _as_batch(model: MlpModel, samples) -> tuple[np.ndarray, list[str] | None, list[str] | None]:
    if isinstance(samples, ExpressionMatrix):
        if samples.n_features != model.config.input_dim:
            raise DataError(
                f"matrix has {samples.n_features} features, model expects "
                f"{model.config.input_dim}"
            )
        return samples.sample_major(), samples.feature_ids, samples.sample_ids
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DataError(f"samples have shape {x.shape}, expected (n, {model.config.input_dim})")
    return x, None, None


def deeplift_scores(
    model: MlpModel, samples, reference: np.ndarray | None = None
) -> ContributionTensor:
    """Per-feature, per-class contribution scores on the logits.

    Multipliers start as the identity on the logit layer and are pulled
    back through each affine layer with its weight matrix (Linear rule)
    and through each ReLU with the ratio of activation change to
    pre-activation change (Rescale rule). Where the pre-activation
    change is below 1e-7 the ratio falls back to the ReLU derivative at
    the reference. Contributions are multiplier times input change.
    """
    x, feature_ids, sample_ids = _as_batch(model, samples)
    d = model.config.input_dim
    if reference is None:
        reference = np.zeros(d)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (d,):
        raise DataError(f"reference has shape {reference.shape}, expected ({d},)")

    cache = forward(model, x)
    ref_cache = forward(model, reference[None, :])
    n, k = x.shape[0], model.config.output_dim

    # multipliers of the logits w.r.t. the current layer's output
    mult = np.broadcast_to(np.eye(k), (n, k, k)).copy()
    for i in range(model.n_layers - 1, -1, -1):
        layer = model.layers[i]
        # Linear rule: pull multipliers through z = W a_prev + b
        mult = np.einsum("oi,bok->bik", layer.weights, mult)
        if i == 0:
            break
        prev = model.layers[i - 1]
        if prev.activation == "relu":
            z = cache.pre_activations[i - 1]
            z_ref = ref_cache.pre_activations[i - 1]
            dz = z - z_ref
            da = np.maximum(z, 0.0) - np.maximum(z_ref, 0.0)
            ratio = np.divide(da, dz, out=np.zeros_like(dz), where=np.abs(dz) >= RESCALE_EPS)
            fallback = (z_ref > 0).astype(np.float64)
            scale = np.where(np.abs(dz) >= RESCALE_EPS, ratio, fallback)
            mult = mult * scale[:, :, None]
        # identity activation needs no rescaling

    scores = mult * (x - reference)[:, :, None]
    if not np.all(np.isfinite(scores)):
        raise NumericError("contribution scores contain non-finite values")
    return ContributionTensor(
        scores=scores,
        reference=reference,
        class_names=list(model.class_names),
        model_fingerprint=model_fingerprint(model),
        feature_ids=feature_ids,
        sample_ids=sample_ids,
    )


def class_average_scores(tensor: ContributionTensor, labels) -> ClassScoreTable:
    """Average, over the samples of each class, of the own-class score
    minus the mean score across the other classes."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (tensor.n_samples,):
        raise DataError("labels length does not match the tensor")
    k = tensor.n_classes
    if k < 2:
        raise DataError("class averaging needs at least 2 classes")
    values = np.empty((tensor.n_features, k))
    for c in range(k):
        rows = np.flatnonzero(labels == c)
        if rows.size == 0:
            raise DataError(f"class {tensor.class_names[c]!r} has no samples")
        own = tensor.scores[rows, :, c]
        others = (tensor.scores[rows].sum(axis=2) - own) / (k - 1)
        values[:, c] = (own - others).mean(axis=0)
    return ClassScoreTable(
        values=values,
        class_names=list(tensor.class_names),
        feature_ids=tensor.feature_ids,
    )


def _class_index(class_names: list[str], which) -> int:
    if isinstance(which, str):
        try:
            return class_names.index(which)
        except ValueError:
            raise DataError(f"unknown class {which!r}") from None
    idx = int(which)
    if not 0 <= idx < len(class_names):
        raise DataError(f"class index {idx} out of range")
    return idx


def top_n_features(table: ClassScoreTable, which_class, n: int = 300) -> list:
    """Feature ids (indices if the table has no ids) with the highest
    class-average score for the class, best first; ties to lower index."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    k = _class_index(table.class_names, which_class)
    col = table.values[:, k]
    order = sorted(range(len(col)), key=lambda j: (-col[j], j))[: min(n, len(col))]
    if table.feature_ids is not None:
        return [table.feature_ids[j] for j in order]
    return order


def score_differences(
    tensor: ContributionTensor, sample: int, own_class, target_class
) -> np.ndarray:
    """Per-feature own-class minus target-class score for one sample."""
    own = _class_index(tensor.class_names, own_class)
    target = _class_index(tensor.class_names, target_class)
    if own == target:
        raise DataError("target class must differ from the own class")
    return tensor.scores[sample, :, own] - tensor.scores[sample, :, target]


def _logits_row(model: MlpModel, x_row: np.ndarray) -> np.ndarray:
    return forward(model, x_row[None, :]).pre_activations[-1][0]


def _knockout_ordered(
    model: MlpModel,
    x_row: np.ndarray,
    order: list[int],
    start_class: int,
    stop_when,
    max_steps: int,
) -> KnockoutResult:
    x_cur = x_row.copy()
    removed: list[int] = []
    for j in order[:max_steps]:
        x_cur[j] = 0.0
        removed.append(j)
        pred = int(np.argmax(_logits_row(model, x_cur)))
        if stop_when(pred):
            return KnockoutResult(
                start_class=start_class,
                removed=removed,
                steps=len(removed),
                flipped=True,
                new_class=pred,
                capped=False,
            )
    return KnockoutResult(
        start_class=start_class,
        removed=removed,
        steps=len(removed),
        flipped=False,
        new_class=None,
        capped=True,
    )


def knockout(
    model: MlpModel,
    sample,
    mode: str = "stability",
    target_class=None,
    max_steps: int | None = None,
) -> KnockoutResult:
    """Zero features one per step, in descending score-difference order
    computed once on the intact sample, until the prediction flips.

    similarity mode stops when the prediction becomes `target_class`;
    stability mode orders differences against the runner-up class and
    stops when the prediction leaves the starting class. Without a flip
    the run is capped at `max_steps` (default: all features).
    """
    x, _, _ = _as_batch(model, sample)
    if x.shape[0] != 1:
        raise DataError("knockout works on a single sample")
    x_row = x[0]
    n_features = x.shape[1]
    if max_steps is None:
        max_steps = n_features
    if not 1 <= max_steps <= n_features:
        raise ConfigError(f"max_steps must be in [1, {n_features}], got {max_steps}")

    logit0 = _logits_row(model, x_row)
    start = int(np.argmax(logit0))
    if mode == "similarity":
        if target_class is None:
            raise ConfigError("similarity mode needs a target class")
        target = _class_index(model.class_names, target_class)
        if target == start:
            return KnockoutResult(
                start_class=start, removed=[], steps=0, flipped=True,
                new_class=start, capped=False,
            )
        against = target
        stop_when = lambda pred: pred == target  # noqa: E731
    elif mode == "stability":
        # order against the strongest competitor logit
        against = int(np.argsort(-logit0, kind="stable")[1])
        stop_when = lambda pred: pred != start  # noqa: E731
    else:
        raise ConfigError(f"unknown knockout mode {mode!r}")

    tensor = deeplift_scores(model, x_row[None, :])
    d2 = tensor.scores[0, :, start] - tensor.scores[0, :, against]
    order = sorted(range(n_features), key=lambda j: (-d2[j], j))
    return _knockout_ordered(model, x_row, order, start, stop_when, max_steps)


@dataclass
class StabilityReport:
    class_names: list[str]
    pair_steps: np.ndarray  # (k, k) mean steps to flip row-class into col-class; nan diagonal
    stability: np.ndarray  # (k,) mean steps to flip into any class
    n_used: np.ndarray  # correctly-predicted samples per class
    missing_classes: list[str]
    max_steps: int


def stability_matrix(
    model: MlpModel, data: AnnotatedDataset, max_steps: int | None = None
) -> StabilityReport:
    """Average knockout steps over correctly-predicted samples: pairwise
    flips (similarity) and flips to any class (stability). Runs that
    never flip contribute max_steps. Classes without a correct
    prediction are reported missing and left as NaN."""
    x = data.sample_major()
    y = data.labels
    k = data.n_classes
    if max_steps is None:
        max_steps = data.n_features
    probs = forward(model, x).probabilities
    correct = np.flatnonzero(probs.argmax(axis=1) == y)

    sums = np.zeros((k, k))
    stab_sum = np.zeros(k)
    counts = np.zeros(k, dtype=np.int64)
    for i in correct:
        counts[y[i]] += 1
        res = knockout(model, x[i], mode="stability", max_steps=max_steps)
        stab_sum[y[i]] += res.steps if res.flipped else max_steps
        for target in range(k):
            if target == y[i]:
                continue
            res = knockout(
                model, x[i], mode="similarity", target_class=target, max_steps=max_steps
            )
            sums[y[i], target] += res.steps if res.flipped else max_steps

    pair = np.full((k, k), np.nan)
    stability = np.full(k, np.nan)
    for c in range(k):
        if counts[c]:
            pair[c] = sums[c] / counts[c]
            pair[c, c] = np.nan
            stability[c] = stab_sum[c] / counts[c]
    missing = [data.class_names[c] for c in range(k) if counts[c] == 0]
    return StabilityReport(
        class_names=list(data.class_names),
        pair_steps=pair,
        stability=stability,
        n_used=counts,
        missing_classes=missing,
        max_steps=max_steps,
    )


def _heat_color(value: float, peak: float) -> str:
    """Diverging palette centered at 0: blue for negative, red for positive."""
    if peak <= 0 or not np.isfinite(value):
        return "#ffffff"
    t = min(abs(value) / peak, 1.0)
    other = int(round(255 * (1 - t)))
    if value >= 0:
        return f"#ff{other:02x}{other:02x}"
    return f"#{other:02x}{other:02x}ff"


def emit_heatmap(
    scores: np.ndarray,
    row_labels: list[str],
    col_labels: list[str],
    tsv_path,
    svg_path=None,
) -> None:
    """Write a labeled score table as TSV, and optionally a color grid
    as SVG (one cell per entry, diverging palette centered at 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0 or scores.shape[1] == 0:
        raise DataError("heatmap needs a non-empty 2-d score matrix")
    if scores.shape != (len(row_labels), len(col_labels)):
        raise DataError("heatmap labels do not match the score matrix shape")
    finite = scores[np.isfinite(scores)]

    with open(str(tsv_path), "w", encoding="utf-8") as fh:
        fh.write("feature_id\t" + "\t".join(col_labels) + "\n")
        for label, row in zip(row_labels, scores):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            fh.write(label + "\t" + "\t".join(cells) + "\n")

    if svg_path is None:
        return
    cell = 18
    left = 10 + 7 * max(len(s) for s in row_labels)
    top = 10 + 7 * max(len(s) for s in col_labels)
    width = left + cell * len(col_labels) + 10
    height = top + cell * len(row_labels) + 10
    peak = float(np.max(np.abs(finite))) if finite.size else 0.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<style>text{font:10px monospace;}</style>',
    ]
    for j, label in enumerate(col_labels):
        x = left + j * cell + cell // 2
        parts.append(
            f'<text x="{x}" y="{top - 4}" text-anchor="start" '
            f'transform="rotate(-60 {x} {top - 4})">{_xml_escape(label)}</text>'
        )
    for i, label in enumerate(row_labels):
        y = top + i * cell + cell - 5
        parts.append(f'<text x="4" y="{y}">{_xml_escape(label)}</text>')
        for j in range(len(col_labels)):
            color = _heat_color(float(scores[i, j]), peak)
            parts.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" '
                f'width="{cell}" height="{cell}" fill="{color}" '
                f'stroke="#cccccc"/>'
            )
    parts.append("</svg>")
    with open(str(svg_path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def _xml_escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )
