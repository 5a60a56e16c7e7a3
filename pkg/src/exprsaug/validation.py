"""Evaluation harness: k-fold CV, one-dataset-out, metrics, synthetic data.

The harness treats learners as small fit/predict adapters so the neural
network and the forest run under identical folds, scaling, and seeding.
All fold draws and per-fold learner seeds derive from one master seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ingest import AnnotatedDataset, ExpressionMatrix
from .mlp import DEFAULT_HIDDEN, MlpConfig
from .mlp import predict as mlp_predict
from .mlp import train as mlp_train
from .preprocess import apply_minmax, downsample_classes, fit_minmax
from .rf import TwoStageResult, predict_forest, two_stage_fit
from .rng import derive_seed, substream


@dataclass
class FoldPlan:
    k: int
    folds: list[list[str]]  # sample ids per fold
    seed: int

    def all_ids(self) -> list[str]:
        return [s for fold in self.folds for s in fold]


def kfold_split(sample_ids: list[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded permutation dealt round-robin into k folds."""
    n = len(sample_ids)
    if not 2 <= k <= n:
        raise ConfigError(f"k must be in [2, {n}], got {k}")
    perm = substream(seed, "folds").permutation(n)
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(perm):
        folds[pos % k].append(sample_ids[idx])
    return FoldPlan(k=k, folds=folds, seed=seed)


@dataclass
class FoldDetail:
    train_ids: list[str]
    test_ids: list[str]
    scaler_fit_ids: list[str] | None = None  # set when scaling is fold-safe


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: np.ndarray  # true x predicted counts
    accuracy: float
    precision: list  # per class; None where no sample was predicted as it
    recall: list  # per class; None where the class never occurs in truth
    n_samples: int
    fold_accuracies: list[float] | None = None
    fold_details: list[FoldDetail] | None = None
    plan_seed: int | None = None

    @property
    def fold_mean_accuracy(self) -> float | None:
        if not self.fold_accuracies:
            return None
        return float(np.mean(self.fold_accuracies))


def metrics(truth, predicted, class_names: list[str]) -> EvalReport:
    """Accuracy, per-class precision/recall (0/0 reported as None), and
    the true-by-predicted confusion matrix."""
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape:
        raise DataError("truth and prediction lengths differ")
    k = len(class_names)
    if truth.size and (truth.min() < 0 or truth.max() >= k):
        raise DataError("truth contains labels outside the class list")
    if predicted.size and (predicted.min() < 0 or predicted.max() >= k):
        raise DataError("prediction contains labels outside the class list")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    total = int(confusion.sum())
    if total == 0:
        raise DataError("metrics need at least one sample")
    diag = np.diag(confusion)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    precision = [
        (int(diag[c]) / int(col[c])) if col[c] else None for c in range(k)
    ]
    recall = [
        (int(diag[c]) / int(row[c])) if row[c] else None for c in range(k)
    ]
    return EvalReport(
        class_names=list(class_names),
        confusion=confusion,
        accuracy=int(diag.sum()) / total,
        precision=precision,
        recall=recall,
        n_samples=total,
    )


@dataclass
class HarnessOptions:
    """Knobs shared by cross_validate and one_dataset_out."""

    seed: int = 0
    fold_safe_scaling: bool = False
    downsample: bool = False  # re-balance each training portion
    max_plan_redraws: int = 20


class MlpLearner:
    """Adapter training the neural classifier with per-fold seeds."""

    name = "mlp"

    def __init__(
        self,
        hidden=DEFAULT_HIDDEN,
        epochs: int = 50,
        batch_size: int = 30,
        learning_rate: float = 0.001,
    ):
        self.hidden = tuple(hidden)
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate

    def fit(self, train: AnnotatedDataset, seed: int):
        config = MlpConfig(
            input_dim=train.n_features,
            output_dim=train.n_classes,
            hidden=self.hidden,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=seed,
        )
        model, _ = mlp_train(train, config)
        return model

    def predict(self, model, matrix: ExpressionMatrix) -> np.ndarray:
        _, labels = mlp_predict(model, matrix)
        return labels


class RfLearner:
    """Adapter running the two-stage forest fit."""

    name = "rf"

    def __init__(
        self,
        stage1_trees: int = 100,
        keep: int = 1000,
        stage2_trees: int = 500,
        threads: int = 1,
    ):
        self.stage1_trees = stage1_trees
        self.keep = keep
        self.stage2_trees = stage2_trees
        self.threads = threads

    def fit(self, train: AnnotatedDataset, seed: int) -> TwoStageResult:
        return two_stage_fit(
            train,
            stage1_trees=self.stage1_trees,
            keep=self.keep,
            stage2_trees=self.stage2_trees,
            seed=seed,
            threads=self.threads,
        )

    def predict(self, result: TwoStageResult, matrix: ExpressionMatrix) -> np.ndarray:
        index = {f: i for i, f in enumerate(matrix.feature_ids)}
        try:
            cols = [index[f] for f in result.forest.feature_ids]
        except KeyError as exc:
            raise DataError(f"matrix lacks feature {exc.args[0]!r}") from None
        labels, _ = predict_forest(result.forest, matrix.subset_features(cols))
        return labels


def _training_covers_all_classes(plan: FoldPlan, data: AnnotatedDataset) -> bool:
    label_of = dict(zip(data.sample_ids, data.labels.tolist()))
    fold_counts = []
    for fold in plan.folds:
        counts = np.zeros(data.n_classes, dtype=np.int64)
        for s in fold:
            counts[label_of[s]] += 1
        fold_counts.append(counts)
    total = np.sum(fold_counts, axis=0)
    for counts in fold_counts:
        if np.any(total - counts == 0):
            return False
    return True


def ensure_class_coverage(
    plan: FoldPlan, data: AnnotatedDataset, max_redraws: int = 20
) -> FoldPlan:
    """Redraw the fold plan (bumping the seed) until every fold's
    training portion contains every class."""
    candidate = plan
    for attempt in range(max_redraws):
        if _training_covers_all_classes(candidate, data):
            return candidate
        candidate = kfold_split(plan.all_ids(), plan.k, plan.seed + attempt + 1)
    if _training_covers_all_classes(candidate, data):
        return candidate
    raise DataError(
        f"no fold plan with full class coverage found in {max_redraws} redraws; "
        "a class is too rare for this k"
    )


def _prepare_fold(
    data: AnnotatedDataset,
    train_ids: list[str],
    test_ids: list[str],
    options: HarnessOptions,
    fold_tag,
) -> tuple[AnnotatedDataset, AnnotatedDataset, FoldDetail]:
    train = data.subset(train_ids)
    test = data.subset(test_ids)
    detail = FoldDetail(train_ids=list(train_ids), test_ids=list(test_ids))
    if options.fold_safe_scaling:
        scaler = fit_minmax(train.matrix)
        train = train.with_matrix(apply_minmax(train.matrix, scaler))
        test = test.with_matrix(apply_minmax(test.matrix, scaler))
        detail.scaler_fit_ids = list(train_ids)
    if options.downsample:
        train = downsample_classes(
            train, derive_seed(options.seed, "downsample", fold_tag)
        )
    return train, test, detail


def cross_validate(
    learner,
    data: AnnotatedDataset,
    plan: FoldPlan | None = None,
    options: HarnessOptions | None = None,
) -> EvalReport:
    """Train on k-1 folds, test on the held-out fold, pool predictions.

    Every fold's training portion must contain every class; the plan is
    redrawn a bounded number of times to achieve that.
    """
    options = options or HarnessOptions()
    if plan is None:
        plan = kfold_split(data.sample_ids, 5, options.seed)
    if sorted(plan.all_ids()) != sorted(data.sample_ids):
        raise DataError("fold plan does not cover exactly the dataset samples")
    plan = ensure_class_coverage(plan, data, options.max_plan_redraws)

    pooled_truth: list[np.ndarray] = []
    pooled_pred: list[np.ndarray] = []
    fold_accuracies: list[float] = []
    details: list[FoldDetail] = []
    for f in range(plan.k):
        test_ids = plan.folds[f]
        train_ids = [s for g in range(plan.k) if g != f for s in plan.folds[g]]
        train, test, detail = _prepare_fold(data, train_ids, test_ids, options, f)
        model = learner.fit(train, derive_seed(options.seed, "fold", f))
        pred = np.asarray(learner.predict(model, test.matrix), dtype=np.int64)
        fold_accuracies.append(float(np.mean(pred == test.labels)))
        pooled_truth.append(test.labels)
        pooled_pred.append(pred)
        details.append(detail)

    report = metrics(
        np.concatenate(pooled_truth), np.concatenate(pooled_pred), data.class_names
    )
    report.fold_accuracies = fold_accuracies
    report.fold_details = details
    report.plan_seed = plan.seed
    return report


def one_dataset_out(
    learner,
    data: AnnotatedDataset,
    held_out: str,
    options: HarnessOptions | None = None,
) -> EvalReport:
    """Hold one dataset's samples out as the test set.

    Every class present in the held-out dataset must also occur in the
    remaining training data, otherwise the orphaned classes are named.
    """
    options = options or HarnessOptions()
    ds = data.dataset_ids()
    test_ids = [s for s, d in zip(data.sample_ids, ds) if d == held_out]
    train_ids = [s for s, d in zip(data.sample_ids, ds) if d != held_out]
    if not test_ids:
        raise DataError(f"no samples belong to dataset {held_out!r}")
    if not train_ids:
        raise DataError(f"dataset {held_out!r} is the whole corpus; nothing to train on")

    label_of = dict(zip(data.sample_ids, data.labels.tolist()))
    train_classes = {label_of[s] for s in train_ids}
    orphaned = sorted(
        {label_of[s] for s in test_ids} - train_classes
    )
    if orphaned:
        names = ", ".join(data.class_names[c] for c in orphaned)
        raise DataError(
            f"dataset {held_out!r} is the only source of class(es): {names}"
        )

    train, test, detail = _prepare_fold(data, train_ids, test_ids, options, held_out)
    model = learner.fit(train, derive_seed(options.seed, "odo", held_out))
    pred = np.asarray(learner.predict(model, test.matrix), dtype=np.int64)
    report = metrics(test.labels, pred, data.class_names)
    report.fold_details = [detail]
    return report


def one_dataset_out_all(
    learner, data: AnnotatedDataset, options: HarnessOptions | None = None
) -> dict[str, EvalReport]:
    """Run one_dataset_out for every dataset id, in sorted order."""
    reports = {}
    for held_out in sorted(set(data.dataset_ids())):
        reports[held_out] = one_dataset_out(learner, data, held_out, options)
    return reports


def odo_summary(reports: dict[str, EvalReport]) -> dict:
    """Two aggregate views over per-dataset reports: the mean of the
    per-dataset accuracies, and the mean per-class recall on the pooled
    confusion matrix."""
    if not reports:
        raise DataError("no reports to summarize")
    accs = [r.accuracy for r in reports.values()]
    pooled = None
    class_names = None
    for r in reports.values():
        pooled = r.confusion.copy() if pooled is None else pooled + r.confusion
        class_names = r.class_names
    diag = np.diag(pooled)
    row = pooled.sum(axis=1)
    recalls = [int(diag[c]) / int(row[c]) for c in range(len(class_names)) if row[c]]
    return {
        "mean_dataset_accuracy": float(np.mean(accs)),
        "mean_class_recall": float(np.mean(recalls)) if recalls else None,
        "pooled_confusion": pooled,
        "class_names": class_names,
    }


def generate_synthetic(
    n_classes: int,
    n_features: int,
    n_informative: int,
    samples_per_class: int,
    shift: float,
    n_datasets: int = 1,
    seed: int = 0,
    noise_scale: float = 1.0,
    bias_low: float = 0.25,
    bias_high: float = 4.0,
) -> AnnotatedDataset:
    """Synthetic expression cohort with planted class signal.

    Background is |N(0, noise_scale)|; class c adds +shift to its own
    disjoint block of n_informative features. Samples go round-robin to
    n_datasets, and each dataset multiplies every feature by its own
    bias factor drawn log-uniformly from [bias_low, bias_high] (none
    when a single dataset is requested), so a held-out dataset distorts
    the feature scales in ways training never saw.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if samples_per_class < 1 or n_features < 1:
        raise ConfigError("need samples_per_class >= 1 and n_features >= 1")
    if n_informative < 0 or n_classes * n_informative > n_features:
        raise ConfigError(
            f"need n_classes*n_informative <= n_features "
            f"({n_classes}*{n_informative} > {n_features})"
        )
    if shift <= 0:
        raise ConfigError(f"shift must be positive, got {shift}")
    if n_datasets < 1:
        raise ConfigError(f"n_datasets must be >= 1, got {n_datasets}")
    if not 0 < bias_low <= bias_high:
        raise ConfigError("need 0 < bias_low <= bias_high")

    rng = substream(seed, "synth")
    n = n_classes * samples_per_class
    x = np.abs(rng.normal(0.0, noise_scale, size=(n, n_features)))
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    for c in range(n_classes):
        block = slice(c * n_informative, (c + 1) * n_informative)
        x[labels == c, block] += shift

    dataset_idx = np.arange(n) % n_datasets
    if n_datasets > 1:
        bias = np.exp(
            rng.uniform(
                np.log(bias_low), np.log(bias_high), size=(n_datasets, n_features)
            )
        )
        x *= bias[dataset_idx]

    class_names = [f"class_{c:02d}" for c in range(n_classes)]
    return AnnotatedDataset.from_arrays(
        x,
        labels,
        class_names=class_names,
        feature_ids=[f"srna:f{j:05d}" for j in range(n_features)],
        sample_ids=[f"sample_{i:05d}" for i in range(n)],
        dataset_ids=[f"ds_{d}" for d in dataset_idx],
        label_field="tissue",
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_report(report: EvalReport, confusion_path, per_class_path) -> None:
    """Emit the confusion matrix and the per-class table as TSV."""
    with open(str(confusion_path), "w", encoding="utf-8") as fh:
        fh.write("true\\predicted\t" + "\t".join(report.class_names) + "\n")
        for name, row in zip(report.class_names, report.confusion):
            fh.write(name + "\t" + "\t".join(str(int(v)) for v in row) + "\n")
    with open(str(per_class_path), "w", encoding="utf-8") as fh:
        fh.write("class\tprecision\trecall\tsupport\n")
        row_sums = report.confusion.sum(axis=1)
        for c, name in enumerate(report.class_names):
            fh.write(
                f"{name}\t{_fmt(report.precision[c])}\t{_fmt(report.recall[c])}"
                f"\t{int(row_sums[c])}\n"
            )


def summary_lines(report: EvalReport, title: str) -> list[str]:
    lines = [
        f"{title}: accuracy {report.accuracy:.4f} over {report.n_samples} samples, "
        f"{len(report.class_names)} classes"
    ]
    if report.fold_accuracies:
        per_fold = ", ".join(f"{a:.4f}" for a in report.fold_accuracies)
        lines.append(
            f"  fold accuracies: [{per_fold}], mean {report.fold_mean_accuracy:.4f}"
        )
    return lines
