"""End-to-end command line runs against tiny synthetic corpora."""

import json
import subprocess
import sys

import pytest

from exprsaug.cli import run

FAST_MLP = [
    "--model", "mlp", "--hidden", "8", "--dropout", "0.0",
    "--epochs", "5", "--batch-size", "8",
]
FAST_RF = [
    "--model", "rf", "--stage1-trees", "15", "--keep-top", "10",
    "--stage2-trees", "15",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Small two-class cohort written once for the whole module."""
    root = tmp_path_factory.mktemp("corpus")
    code = run([
        "synth", "--classes", "2", "--features", "30", "--informative", "5",
        "--per-class", "12", "--shift", "5.0", "--datasets", "2",
        "--seed", "1", "--out-dir", str(root),
    ])
    assert code == 0
    return {
        "srna": str(root / "srna_matrix.tsv"),
        "metadata": str(root / "metadata.tsv"),
    }


def common(corpus, out_dir):
    return [
        "--srna", corpus["srna"], "--metadata", corpus["metadata"],
        "--out-dir", str(out_dir),
    ]


# ------------------------------------------------------------- exit codes


def test_version_flag():
    assert run(["--version"]) == 0


def test_unknown_flag_is_usage_error():
    assert run(["synth", "--no-such-flag"]) == 2


def test_missing_input_file_is_config_error(tmp_path):
    code = run([
        "train", "--srna", str(tmp_path / "absent.tsv"),
        "--metadata", str(tmp_path / "absent2.tsv"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 2


def test_bad_matrix_is_data_error(tmp_path, corpus):
    bad = tmp_path / "bad.tsv"
    bad.write_text("feature_id\ts0\nsrna:x\tnot_a_number\n")
    code = run([
        "preprocess", "--srna", str(bad), "--metadata", corpus["metadata"],
        "--out-dir", str(tmp_path),
    ])
    assert code == 3


def test_both_feature_sets_need_contam(tmp_path, corpus):
    code = run([
        "train", "--feature-set", "both", *common(corpus, tmp_path), *FAST_MLP,
    ])
    assert code == 2


def test_bad_synth_arguments_are_config_errors(tmp_path):
    assert run(["synth", "--classes", "1", "--out-dir", str(tmp_path)]) == 2
    assert run(["synth", "--shift", "0", "--out-dir", str(tmp_path)]) == 2


# ------------------------------------------------------------- full flow


def test_synth_writes_cohort_and_manifest(tmp_path):
    out = tmp_path / "synth"
    assert run([
        "synth", "--classes", "3", "--features", "12", "--informative", "2",
        "--per-class", "4", "--out-dir", str(out),
    ]) == 0
    assert (out / "srna_matrix.tsv").is_file()
    assert (out / "metadata.tsv").is_file()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["tool"] == "exprsaug"
    assert manifest["outputs"] == ["metadata.tsv", "srna_matrix.tsv"]
    assert "out_dir" not in manifest["config"]


def test_preprocess_writes_pipeline_record(tmp_path, corpus):
    out = tmp_path / "prep"
    assert run(["preprocess", *common(corpus, out)]) == 0
    record = json.loads((out / "pipeline.json").read_text())
    assert record["format_version"] == 1
    assert record["pipeline"]["label_field"] == "tissue"
    assert (out / "processed_matrix.tsv").is_file()
    assert (out / "processed_metadata.tsv").is_file()


def test_train_predict_mlp(tmp_path, corpus):
    out = tmp_path / "mlp"
    assert run(["train", *common(corpus, out), *FAST_MLP, "--seed", "3"]) == 0
    model_file = out / "mlp_model.json"
    doc = json.loads(model_file.read_text())
    assert doc["kind"] == "mlp"
    assert "pipeline" in doc and "loss_history" in doc
    assert len(doc["loss_history"]) == 5

    pred_out = tmp_path / "mlp_pred"
    assert run([
        "predict", "--model-file", str(model_file),
        "--srna", corpus["srna"], "--out-dir", str(pred_out),
    ]) == 0
    lines = (pred_out / "predictions.tsv").read_text().splitlines()
    assert lines[0] == "sample_id\tpredicted_tissue\tclass_00\tclass_01"
    assert len(lines) == 25
    # probabilities parse and sum to one
    probs = [float(v) for v in lines[1].split("\t")[2:]]
    assert abs(sum(probs) - 1.0) < 1e-9


def test_train_predict_rf(tmp_path, corpus):
    out = tmp_path / "rf"
    assert run(["train", *common(corpus, out), *FAST_RF, "--seed", "3"]) == 0
    model_file = out / "rf_model.json"
    doc = json.loads(model_file.read_text())
    assert doc["kind"] == "rf"
    assert len(doc["selected_feature_ids"]) == 10

    pred_out = tmp_path / "rf_pred"
    assert run([
        "predict", "--model-file", str(model_file),
        "--srna", corpus["srna"], "--out-dir", str(pred_out),
    ]) == 0
    lines = (pred_out / "predictions.tsv").read_text().splitlines()
    assert len(lines) == 25
    fractions = [float(v) for v in lines[1].split("\t")[2:]]
    assert abs(sum(fractions) - 1.0) < 1e-9


def test_validate_cv_writes_reports(tmp_path, corpus):
    out = tmp_path / "cv"
    assert run([
        "validate", "cv", *common(corpus, out), *FAST_MLP, "--folds", "3",
    ]) == 0
    assert (out / "mlp_cv_confusion.tsv").is_file()
    assert (out / "mlp_cv_per_class.tsv").is_file()
    summary = (out / "mlp_cv_summary.txt").read_text()
    assert "3-fold CV" in summary and "fold accuracies" in summary


def test_validate_odo_all_datasets(tmp_path, corpus):
    out = tmp_path / "odo"
    assert run([
        "validate", "odo", *common(corpus, out), *FAST_RF,
    ]) == 0
    table = (out / "rf_odo_summary.tsv").read_text().splitlines()
    assert table[0] == "dataset\taccuracy\tn_samples"
    assert len(table) == 3  # two datasets
    assert (out / "rf_odo_ds_0_confusion.tsv").is_file()
    assert (out / "rf_odo_ds_1_per_class.tsv").is_file()
    summary = (out / "rf_odo_summary.txt").read_text()
    assert "mean dataset accuracy" in summary
    assert "mean class recall" in summary


def test_validate_odo_single_dataset(tmp_path, corpus):
    out = tmp_path / "odo1"
    assert run([
        "validate", "odo", "--dataset", "ds_1", *common(corpus, out), *FAST_RF,
    ]) == 0
    assert (out / "rf_odo_ds_1_confusion.tsv").is_file()
    assert not (out / "rf_odo_ds_0_confusion.tsv").exists()


def test_explain_class_scores_and_knockouts(tmp_path, corpus):
    out = tmp_path / "model"
    assert run(["train", *common(corpus, out), *FAST_MLP]) == 0
    model_file = str(out / "mlp_model.json")

    ex = tmp_path / "explain"
    assert run([
        "explain", "--model-file", model_file,
        "--srna", corpus["srna"], "--metadata", corpus["metadata"],
        "--class-scores", "--top", "5", "--stability", "--similarity",
        "--out-dir", str(ex),
    ]) == 0
    top = (ex / "top_features.tsv").read_text().splitlines()
    assert top[0] == "class\trank\tfeature_id\tscore"
    assert len(top) == 1 + 2 * 5  # two classes, five ranks each
    sim = (ex / "similarity_matrix.tsv").read_text().splitlines()
    assert len(sim) == 3
    stab = (ex / "stability.tsv").read_text().splitlines()
    assert stab[0] == "class\tmean_steps_to_flip\tn_samples"


def test_explain_single_sample_scores(tmp_path, corpus):
    out = tmp_path / "model"
    assert run(["train", *common(corpus, out), *FAST_MLP]) == 0
    ex = tmp_path / "explain_sample"
    assert run([
        "explain", "--model-file", str(out / "mlp_model.json"),
        "--srna", corpus["srna"], "--sample", "sample_00000",
        "--svg", "--out-dir", str(ex),
    ]) == 0
    assert (ex / "sample_sample_00000_scores.tsv").is_file()
    assert (ex / "sample_sample_00000_scores.svg").is_file()


def test_explain_requires_a_mode_and_mlp(tmp_path, corpus):
    out = tmp_path / "model"
    assert run(["train", *common(corpus, out), *FAST_MLP]) == 0
    assert run([
        "explain", "--model-file", str(out / "mlp_model.json"),
        "--srna", corpus["srna"], "--out-dir", str(tmp_path / "e1"),
    ]) == 2
    rf_out = tmp_path / "rf_model"
    assert run(["train", *common(corpus, rf_out), *FAST_RF]) == 0
    assert run([
        "explain", "--model-file", str(rf_out / "rf_model.json"),
        "--srna", corpus["srna"], "--class-scores",
        "--metadata", corpus["metadata"], "--out-dir", str(tmp_path / "e2"),
    ]) == 2


# ------------------------------------------------------------ determinism


def test_rerun_is_byte_identical(tmp_path, corpus):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    args = ["train", *FAST_MLP, "--seed", "11",
            "--srna", corpus["srna"], "--metadata", corpus["metadata"]]
    assert run([*args, "--out-dir", str(out_a)]) == 0
    assert run([*args, "--out-dir", str(out_b)]) == 0
    assert (out_a / "mlp_model.json").read_bytes() == (out_b / "mlp_model.json").read_bytes()
    assert (out_a / "run_manifest.json").read_bytes() == (out_b / "run_manifest.json").read_bytes()


def test_rf_thread_count_does_not_change_output(tmp_path, corpus):
    out_a = tmp_path / "t1"
    out_b = tmp_path / "t4"
    base = ["train", *FAST_RF, "--seed", "5",
            "--srna", corpus["srna"], "--metadata", corpus["metadata"]]
    assert run([*base, "--threads", "1", "--out-dir", str(out_a)]) == 0
    assert run([*base, "--threads", "4", "--out-dir", str(out_b)]) == 0
    assert (out_a / "rf_model.json").read_bytes() == (out_b / "rf_model.json").read_bytes()


def test_threads_env_fallback(tmp_path, corpus, monkeypatch):
    out = tmp_path / "env"
    monkeypatch.setenv("EXPRSAUG_THREADS", "2")
    assert run(["train", *common(corpus, out), *FAST_RF]) == 0
    monkeypatch.setenv("EXPRSAUG_THREADS", "zero")
    assert run(["train", *common(corpus, tmp_path / "env2"), *FAST_RF]) == 2


# ------------------------------------------------------------ config file


def test_config_file_sets_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('classes = 3\nfeatures = 16\nper_class = 4\ninformative = 2\n')
    out = tmp_path / "from_config"
    assert run(["--config", str(cfg), "synth", "--out-dir", str(out)]) == 0
    meta = (out / "metadata.tsv").read_text()
    assert "class_02" in meta  # three classes came from the file

    out2 = tmp_path / "flag_wins"
    assert run([
        "--config", str(cfg), "synth", "--classes", "2", "--out-dir", str(out2),
    ]) == 0
    assert "class_02" not in (out2 / "metadata.tsv").read_text()


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("no_such_option = 1\n")
    assert run(["--config", str(cfg), "synth", "--out-dir", str(tmp_path)]) == 2


def test_config_file_missing_or_invalid(tmp_path):
    assert run(["--config", str(tmp_path / "nope.toml"), "synth"]) == 2
    bad = tmp_path / "broken.toml"
    bad.write_text("not valid = = toml")
    assert run(["--config", str(bad), "synth"]) == 2


# -------------------------------------------------------------- console


def test_console_script_smoke():
    result = subprocess.run(
        [sys.executable, "-m", "exprsaug.cli", "--version"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "exprsaug" in result.stdout


def test_installed_entry_point_smoke(tmp_path):
    result = subprocess.run(
        ["exprsaug", "synth", "--classes", "2", "--features", "8",
         "--informative", "2", "--per-class", "3", "--out-dir", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "synth: wrote 6 samples" in result.stdout
