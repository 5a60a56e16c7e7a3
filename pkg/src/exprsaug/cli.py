"""Command-line entry point.

Subcommands: synth, preprocess, train, predict, validate (cv | odo),
explain. A TOML config file can preload any flag value; explicit flags
win over the config, which wins over built-in defaults. Every command
writes a run manifest (resolved config, seed, version, input checksums)
so a run can be reproduced byte-for-byte.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .attribution import (
    class_average_scores,
    deeplift_scores,
    emit_heatmap,
    stability_matrix,
    top_n_features,
)
from .errors import ConfigError, DataError, ExprsaugError, NumericError
from .ingest import (
    load_expression_matrix,
    load_metadata,
    merge_matrices,
    write_expression_matrix,
    write_metadata,
)
from .mlp import (
    MlpConfig,
    model_from_dict,
    model_to_dict,
)
from .mlp import predict as mlp_predict
from .mlp import train as mlp_train
from .preprocess import (
    PipelineConfig,
    build_dataset,
    record_from_dict,
    record_to_dict,
    replay_matrix,
)
from .rf import (
    forest_from_dict,
    forest_to_dict,
    predict_forest,
    two_stage_fit,
)
from .validation import (
    HarnessOptions,
    MlpLearner,
    RfLearner,
    cross_validate,
    kfold_split,
    odo_summary,
    one_dataset_out,
    one_dataset_out_all,
    summary_lines,
    write_report,
)

FEATURE_SETS = ("srna", "contam", "both")


@dataclass
class RunConfig:
    """Resolved data/pipeline settings shared by the data-driven commands."""

    srna: str | None
    contam: str | None
    metadata: str | None
    feature_set: str
    label_field: str
    age_scheme: int | None
    rpm: bool
    minmax: bool
    zero_threshold: float | None
    group_tissues: bool
    min_class_size: int | None
    seed: int
    out_dir: str

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise ConfigError(f"feature_set must be one of {FEATURE_SETS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.feature_set in ("srna", "both") and not self.srna:
            raise ConfigError("feature_set includes srna but no --srna path given")
        if self.feature_set in ("contam", "both") and not self.contam:
            raise ConfigError("feature_set includes contaminants but no --contam path given")
        if self.label_field == "age_interval" and self.age_scheme is None:
            raise ConfigError("label_field age_interval requires --age-scheme")
        for path in (self.srna, self.contam, self.metadata):
            if path and not Path(path).is_file():
                raise ConfigError(f"input file not found: {path}")


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def _write_manifest(args, out_dir: Path, inputs: list[str], outputs: list[str]) -> None:
    skip = {"func", "out_dir", "config"}
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k not in skip and not callable(v)
    }
    doc = {
        "tool": "exprsaug",
        "version": __version__,
        "format_version": 1,
        "config": resolved,
        "inputs": {p: _sha256_file(p) for p in sorted({p for p in inputs if p})},
        "outputs": sorted(outputs),
    }
    _write_json(doc, out_dir / "run_manifest.json")


def _resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get("EXPRSAUG_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"EXPRSAUG_THREADS must be an integer, got {env!r}") from None
    value = int(value)
    if value < 1:
        raise ConfigError(f"threads must be >= 1, got {value}")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    return RunConfig(
        srna=args.srna,
        contam=args.contam,
        metadata=args.metadata,
        feature_set=args.feature_set,
        label_field=args.label_field,
        age_scheme=args.age_scheme,
        rpm=args.rpm,
        minmax=args.minmax,
        zero_threshold=args.zero_threshold if args.zero_threshold >= 0 else None,
        group_tissues=args.group_tissues,
        min_class_size=args.min_class_size,
        seed=args.seed,
        out_dir=args.out_dir,
    )


def _load_inputs(cfg: RunConfig):
    if cfg.metadata is None:
        raise ConfigError("this command needs --metadata")
    meta = load_metadata(cfg.metadata)
    matrices = []
    if cfg.feature_set in ("srna", "both"):
        matrices.append(load_expression_matrix(cfg.srna, "srna"))
    if cfg.feature_set in ("contam", "both"):
        matrices.append(load_expression_matrix(cfg.contam, "contam"))
    matrix = matrices[0]
    if len(matrices) == 2:
        matrix = merge_matrices(matrices[0], matrices[1])
    return matrix, meta


def _pipeline_config(cfg: RunConfig, downsample: bool, minmax: bool | None = None) -> PipelineConfig:
    return PipelineConfig(
        rpm=cfg.rpm,
        minmax=cfg.minmax if minmax is None else minmax,
        zero_threshold=cfg.zero_threshold,
        group_tissues=cfg.group_tissues,
        label_field=cfg.label_field,
        age_scheme_k=cfg.age_scheme,
        min_class_size=cfg.min_class_size,
        downsample=downsample,
        seed=cfg.seed,
    )


def _parse_hidden(widths: str, rates: str):
    try:
        w = [int(tok) for tok in widths.split(",") if tok]
        r = [float(tok) for tok in rates.split(",") if tok]
    except ValueError:
        raise ConfigError(
            f"cannot parse hidden layout {widths!r} / dropout {rates!r}"
        ) from None
    if len(w) != len(r):
        raise ConfigError("hidden widths and dropout rates differ in length")
    return tuple(zip(w, r))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .validation import generate_synthetic

    out = _out_dir(args)
    data = generate_synthetic(
        n_classes=args.classes,
        n_features=args.features,
        n_informative=args.informative,
        samples_per_class=args.per_class,
        shift=args.shift,
        n_datasets=args.datasets,
        seed=args.seed,
        noise_scale=args.noise_scale,
        bias_low=args.bias_low,
        bias_high=args.bias_high,
    )
    matrix_path = out / "srna_matrix.tsv"
    meta_path = out / "metadata.tsv"
    write_expression_matrix(data.matrix, matrix_path)
    write_metadata(data.metadata, meta_path)
    _write_manifest(args, out, [], [matrix_path.name, meta_path.name])
    print(
        f"synth: wrote {data.n_samples} samples x {data.n_features} features, "
        f"{data.n_classes} classes, {len(set(data.dataset_ids()))} dataset(s) -> {out}"
    )
    return 0


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    matrix, meta = _load_inputs(cfg)
    pipeline = _pipeline_config(cfg, downsample=args.downsample or False)
    data, record, report = build_dataset(matrix, meta, pipeline)

    matrix_path = out / "processed_matrix.tsv"
    meta_path = out / "processed_metadata.tsv"
    record_path = out / "pipeline.json"
    write_expression_matrix(data.matrix, matrix_path)
    write_metadata(data.metadata, meta_path)
    _write_json({"format_version": 1, "pipeline": record_to_dict(record)}, record_path)
    _write_manifest(
        args,
        out,
        [cfg.srna, cfg.contam, cfg.metadata],
        [matrix_path.name, meta_path.name, record_path.name],
    )
    print(
        f"preprocess: {report['n_features_in']} -> {report['n_features_kept']} features, "
        f"{report['n_samples_in']} -> {report['n_samples_out']} samples, "
        f"classes: {', '.join(report['class_names'])}"
    )
    return 0


def _train_mlp(args, data) -> dict:
    config = MlpConfig(
        input_dim=data.n_features,
        output_dim=data.n_classes,
        hidden=_parse_hidden(args.hidden, args.dropout),
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
    )
    model, history = mlp_train(data, config)
    doc = model_to_dict(model)
    doc["loss_history"] = history
    return doc


def _train_rf(args, data, threads: int) -> dict:
    result = two_stage_fit(
        data,
        stage1_trees=args.stage1_trees,
        keep=args.keep_top,
        stage2_trees=args.stage2_trees,
        seed=args.seed,
        threads=threads,
    )
    doc = forest_to_dict(result.forest)
    doc["selected_feature_ids"] = result.selected_feature_ids
    return doc


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    threads = _resolve_threads(args.threads)
    matrix, meta = _load_inputs(cfg)
    downsample = args.downsample if args.downsample is not None else args.model == "rf"
    pipeline = _pipeline_config(cfg, downsample=downsample)
    data, record, report = build_dataset(matrix, meta, pipeline)
    record.feature_set = cfg.feature_set

    if args.model == "mlp":
        doc = _train_mlp(args, data)
    else:
        doc = _train_rf(args, data, threads)
    doc["pipeline"] = record_to_dict(record)

    model_path = out / f"{args.model}_model.json"
    _write_json(doc, model_path)
    _write_manifest(args, out, [cfg.srna, cfg.contam, cfg.metadata], [model_path.name])
    print(
        f"train: {args.model} on {data.n_samples} samples x {data.n_features} features "
        f"({data.n_classes} classes) -> {model_path}"
    )
    return 0


def _load_model_file(path: str) -> dict:
    if not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "pipeline" not in doc:
        raise DataError(f"{path}: model file lacks the pipeline record")
    return doc


def _prediction_inputs(args, record):
    cfg = RunConfig(
        srna=args.srna,
        contam=args.contam,
        metadata=getattr(args, "metadata", None),
        feature_set=record.feature_set,
        label_field=record.label_field,
        age_scheme=record.age_scheme_k,
        rpm=record.rpm,
        minmax=record.scaler is not None,
        zero_threshold=None,
        group_tissues=record.group_tissues,
        min_class_size=None,
        seed=args.seed,
        out_dir=args.out_dir,
    )
    matrices = []
    if cfg.feature_set in ("srna", "both"):
        matrices.append(load_expression_matrix(cfg.srna, "srna"))
    if cfg.feature_set in ("contam", "both"):
        matrices.append(load_expression_matrix(cfg.contam, "contam"))
    matrix = matrices[0]
    if len(matrices) == 2:
        matrix = merge_matrices(matrices[0], matrices[1])
    return cfg, replay_matrix(matrix, record)


def cmd_predict(args) -> int:
    out = _out_dir(args)
    doc = _load_model_file(args.model_file)
    record = record_from_dict(doc["pipeline"])
    cfg, matrix = _prediction_inputs(args, record)

    if doc.get("kind") == "mlp":
        model = model_from_dict(doc)
        probs, labels = mlp_predict(model, matrix)
        class_names = model.class_names
        fractions = probs
    elif doc.get("kind") == "rf":
        forest = forest_from_dict(doc)
        index = {f: i for i, f in enumerate(matrix.feature_ids)}
        try:
            cols = [index[f] for f in forest.feature_ids]
        except KeyError as exc:
            raise DataError(f"matrix lacks feature {exc.args[0]!r}") from None
        labels, fractions = predict_forest(forest, matrix.subset_features(cols))
        class_names = forest.class_names
    else:
        raise DataError("model file has unknown kind")

    pred_path = out / "predictions.tsv"
    with open(pred_path, "w", encoding="utf-8") as fh:
        fh.write(
            f"sample_id\tpredicted_{record.label_field}\t"
            + "\t".join(class_names)
            + "\n"
        )
        for i, sample_id in enumerate(matrix.sample_ids):
            scores = "\t".join(repr(float(v)) for v in fractions[i])
            fh.write(f"{sample_id}\t{class_names[int(labels[i])]}\t{scores}\n")
    _write_manifest(
        args, out, [args.model_file, cfg.srna, cfg.contam], [pred_path.name]
    )
    print(f"predict: {len(matrix.sample_ids)} samples -> {pred_path}")
    return 0


def _make_learner(args, threads: int):
    if args.model == "mlp":
        return MlpLearner(
            hidden=_parse_hidden(args.hidden, args.dropout),
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.learning_rate,
        )
    return RfLearner(
        stage1_trees=args.stage1_trees,
        keep=args.keep_top,
        stage2_trees=args.stage2_trees,
        threads=threads,
    )


def cmd_validate(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    threads = _resolve_threads(args.threads)
    matrix, meta = _load_inputs(cfg)
    # class re-balancing happens inside each training portion, never globally
    downsample = args.downsample if args.downsample is not None else args.model == "rf"
    pipeline = _pipeline_config(
        cfg, downsample=False, minmax=False if args.fold_safe_scaling else None
    )
    data, _, _ = build_dataset(matrix, meta, pipeline)
    learner = _make_learner(args, threads)
    options = HarnessOptions(
        seed=cfg.seed,
        fold_safe_scaling=args.fold_safe_scaling,
        downsample=downsample,
    )

    outputs = []
    lines: list[str] = []
    if args.mode == "cv":
        plan = kfold_split(data.sample_ids, args.folds, cfg.seed)
        report = cross_validate(learner, data, plan, options)
        conf = out / f"{args.model}_cv_confusion.tsv"
        per_class = out / f"{args.model}_cv_per_class.tsv"
        write_report(report, conf, per_class)
        outputs += [conf.name, per_class.name]
        lines += summary_lines(report, f"{args.model} {args.folds}-fold CV")
    else:
        if args.dataset:
            reports = {args.dataset: one_dataset_out(learner, data, args.dataset, options)}
        else:
            reports = one_dataset_out_all(learner, data, options)
        for held_out, report in reports.items():
            conf = out / f"{args.model}_odo_{held_out}_confusion.tsv"
            per_class = out / f"{args.model}_odo_{held_out}_per_class.tsv"
            write_report(report, conf, per_class)
            outputs += [conf.name, per_class.name]
            lines += summary_lines(report, f"{args.model} held-out {held_out}")
        summary = odo_summary(reports)
        lines.append(
            f"{args.model} one-dataset-out: mean dataset accuracy "
            f"{summary['mean_dataset_accuracy']:.4f}, mean class recall "
            + (
                f"{summary['mean_class_recall']:.4f}"
                if summary["mean_class_recall"] is not None
                else "n/a"
            )
        )
        odo_path = out / f"{args.model}_odo_summary.tsv"
        with open(odo_path, "w", encoding="utf-8") as fh:
            fh.write("dataset\taccuracy\tn_samples\n")
            for held_out, report in reports.items():
                fh.write(f"{held_out}\t{repr(report.accuracy)}\t{report.n_samples}\n")
        outputs.append(odo_path.name)

    summary_path = out / f"{args.model}_{args.mode}_summary.txt"
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(summary_path.name)
    _write_manifest(args, out, [cfg.srna, cfg.contam, cfg.metadata], outputs)
    print("\n".join(lines))
    return 0


def cmd_explain(args) -> int:
    out = _out_dir(args)
    doc = _load_model_file(args.model_file)
    if doc.get("kind") != "mlp":
        raise ConfigError("explain supports only the neural model")
    model = model_from_dict(doc)
    record = record_from_dict(doc["pipeline"])
    cfg, matrix = _prediction_inputs(args, record)
    outputs: list[str] = []

    if args.sample is not None:
        if args.sample not in matrix.sample_ids:
            raise DataError(f"sample {args.sample!r} not in the matrix")
        sub = matrix.subset_samples([args.sample])
        tensor = deeplift_scores(model, sub)
        path = out / f"sample_{args.sample}_scores.tsv"
        svg = out / f"sample_{args.sample}_scores.svg" if args.svg else None
        emit_heatmap(tensor.scores[0], matrix.feature_ids, model.class_names, path, svg)
        outputs += [path.name] + ([svg.name] if svg else [])

    need_labels = args.class_scores or args.stability or args.similarity
    if need_labels:
        from .ingest import join
        from .preprocess import AgeBinning, group_tissues

        if cfg.metadata is None:
            raise ConfigError("--class-scores/--stability/--similarity need --metadata")
        meta = load_metadata(cfg.metadata)
        if record.group_tissues:
            meta = group_tissues(meta)
        scheme = AgeBinning.scheme(record.age_scheme_k) if record.age_scheme_k else None
        labeled = join(matrix, meta, record.label_field, age_scheme=scheme)
        if labeled.class_names != model.class_names:
            raise DataError(
                "label classes in the data do not match the trained model "
                f"({labeled.class_names} vs {model.class_names})"
            )

    if args.class_scores:
        tensor = deeplift_scores(model, labeled.matrix)
        table = class_average_scores(tensor, labeled.labels)
        path = out / "class_scores.tsv"
        emit_heatmap(table.values, labeled.matrix.feature_ids, model.class_names, path)
        outputs.append(path.name)
        top_path = out / "top_features.tsv"
        with open(top_path, "w", encoding="utf-8") as fh:
            fh.write("class\trank\tfeature_id\tscore\n")
            for k, name in enumerate(model.class_names):
                ids = top_n_features(table, k, args.top)
                for rank, fid in enumerate(ids, start=1):
                    j = labeled.matrix.feature_ids.index(fid)
                    fh.write(f"{name}\t{rank}\t{fid}\t{repr(float(table.values[j, k]))}\n")
        outputs.append(top_path.name)
        if args.svg:
            rows = sorted(
                range(len(labeled.matrix.feature_ids)),
                key=lambda j: -float(np.max(np.abs(table.values[j]))),
            )[: args.top]
            svg = out / "class_scores.svg"
            emit_heatmap(
                table.values[rows],
                [labeled.matrix.feature_ids[j] for j in rows],
                model.class_names,
                out / "class_scores_top.tsv",
                svg,
            )
            outputs += ["class_scores_top.tsv", svg.name]

    if args.stability or args.similarity:
        report = stability_matrix(model, labeled, max_steps=args.max_steps)
        if report.missing_classes:
            print(
                "warning: no correctly-predicted samples for: "
                + ", ".join(report.missing_classes)
            )
        if args.similarity:
            path = out / "similarity_matrix.tsv"
            svg = out / "similarity_matrix.svg" if args.svg else None
            emit_heatmap(report.pair_steps, report.class_names, report.class_names, path, svg)
            outputs += [path.name] + ([svg.name] if svg else [])
        if args.stability:
            path = out / "stability.tsv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("class\tmean_steps_to_flip\tn_samples\n")
                for c, name in enumerate(report.class_names):
                    steps = report.stability[c]
                    cell = "" if not np.isfinite(steps) else repr(float(steps))
                    fh.write(f"{name}\t{cell}\t{int(report.n_used[c])}\n")
            outputs.append(path.name)

    if not outputs:
        raise ConfigError(
            "explain needs at least one of --sample, --class-scores, "
            "--stability, --similarity"
        )
    _write_manifest(
        args, out, [args.model_file, cfg.srna, cfg.contam, cfg.metadata], outputs
    )
    print(f"explain: wrote {', '.join(sorted(outputs))} -> {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_io_flags(sp, with_metadata: bool = True):
    sp.add_argument("--srna", help="sRNA expression matrix TSV")
    sp.add_argument("--contam", help="contaminant expression matrix TSV")
    if with_metadata:
        sp.add_argument("--metadata", help="sample metadata TSV")
    sp.add_argument(
        "--feature-set",
        choices=FEATURE_SETS,
        default="srna",
        help="which feature namespaces to use",
    )


def _add_pipeline_flags(sp):
    sp.add_argument("--rpm", action=argparse.BooleanOptionalAction, default=False,
                    help="scale each sample to reads-per-million")
    sp.add_argument("--minmax", action=argparse.BooleanOptionalAction, default=True,
                    help="scale each feature to [0,1]")
    sp.add_argument("--zero-threshold", type=float, default=0.3,
                    help="drop features with more than this fraction of zeros; negative disables")
    sp.add_argument("--group-tissues", action=argparse.BooleanOptionalAction,
                    default=False, help="collapse tissues onto their ontology groups")
    sp.add_argument("--label-field", choices=("tissue", "sex", "age_interval"),
                    default="tissue")
    sp.add_argument("--age-scheme", type=int, choices=(2, 3, 4), default=None,
                    help="number of age intervals when predicting age_interval")
    sp.add_argument("--min-class-size", type=int, default=None,
                    help="drop classes with fewer samples than this")
    sp.add_argument("--downsample", action=argparse.BooleanOptionalAction, default=None,
                    help="equalize class sizes (default: on for rf, off for mlp)")


def _add_model_flags(sp):
    sp.add_argument("--model", choices=("mlp", "rf"), default="mlp")
    sp.add_argument("--hidden", default="1000,250,250",
                    help="comma-separated hidden layer widths")
    sp.add_argument("--dropout", default="0.5,0.4,0.4",
                    help="comma-separated dropout rates, one per hidden layer")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=30)
    sp.add_argument("--learning-rate", type=float, default=0.001)
    sp.add_argument("--stage1-trees", type=int, default=100)
    sp.add_argument("--keep-top", type=int, default=1000,
                    help="features kept after the first forest stage")
    sp.add_argument("--stage2-trees", type=int, default=500)
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads (fallback: EXPRSAUG_THREADS, then 1)")


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", default="out", help="directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exprsaug",
        description="Augment missing sample metadata from small-RNA expression profiles.",
    )
    parser.add_argument("--config", help="TOML file preloading any flag defaults")
    parser.add_argument("--version", action="version", version=f"exprsaug {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic labeled cohort")
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--features", type=int, default=200)
    sp.add_argument("--informative", type=int, default=10,
                    help="informative features per class")
    sp.add_argument("--per-class", type=int, default=60)
    sp.add_argument("--shift", type=float, default=5.0)
    sp.add_argument("--datasets", type=int, default=1)
    sp.add_argument("--noise-scale", type=float, default=1.0)
    sp.add_argument("--bias-low", type=float, default=0.25)
    sp.add_argument("--bias-high", type=float, default=4.0)
    _add_common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="normalize, filter, and label a cohort")
    _add_io_flags(sp)
    _add_pipeline_flags(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="fit a classifier on the full cohort")
    _add_io_flags(sp)
    _add_pipeline_flags(sp)
    _add_model_flags(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="annotate new samples with a trained model")
    sp.add_argument("--model-file", required=True)
    _add_io_flags(sp, with_metadata=False)
    _add_common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("validate", help="estimate generalization accuracy")
    sp.add_argument("mode", choices=("cv", "odo"))
    _add_io_flags(sp)
    _add_pipeline_flags(sp)
    _add_model_flags(sp)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--dataset", default=None,
                    help="dataset id to hold out (odo); default: each in turn")
    sp.add_argument("--fold-safe-scaling", action="store_true",
                    help="fit the feature scaler per training fold instead of globally")
    _add_common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("explain", help="contribution scores and knockout analysis")
    sp.add_argument("--model-file", required=True)
    _add_io_flags(sp)
    sp.add_argument("--sample", default=None, help="emit per-feature scores for one sample")
    sp.add_argument("--class-scores", action="store_true",
                    help="emit class-average score table and top features")
    sp.add_argument("--top", type=int, default=300)
    sp.add_argument("--stability", action="store_true",
                    help="mean knockout steps until any class flip, per class")
    sp.add_argument("--similarity", action="store_true",
                    help="mean knockout steps for each class pair")
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--svg", action="store_true", help="also render SVG heatmaps")
    _add_common(sp)
    sp.set_defaults(func=cmd_explain)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Load --config TOML values as defaults (flags still win)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    path = Path(known.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            loaded = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    known_dests = set()
    actions = list(parser._actions)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                actions.extend(sp._actions)
    for action in actions:
        known_dests.add(action.dest)
    unknown = sorted(set(loaded) - known_dests)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                dests = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in loaded.items() if k in dests})
    return argv


def run(argv: list[str] | None = None) -> int:
    """Dispatch a command line; returns the process exit status."""
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ExprsaugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
