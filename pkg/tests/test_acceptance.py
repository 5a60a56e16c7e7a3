"""Release gate: twelve criteria, one test and one printed verdict each.

Each criterion re-derives its expected values independently of the
library (finite differences, effective-weight products, plain-Python
exhaustive search, straight-line replays, hardcoded lookup tables)
rather than trusting the implementation under test.
"""

import json
import time

import numpy as np
import pytest

from exprsaug.attribution import deeplift_scores, knockout
from exprsaug.cli import run
from exprsaug.ingest import ExpressionMatrix
from exprsaug.mlp import MlpConfig, backward, forward, init_model, loss
from exprsaug.preprocess import (
    AgeBinning,
    TissueGroupMap,
    apply_minmax,
    filter_zero_features,
    fit_minmax,
    rpm_normalize,
)
from exprsaug.rf import best_split, fit_forest
from exprsaug.validation import (
    MlpLearner,
    RfLearner,
    cross_validate,
    generate_synthetic,
    kfold_split,
    odo_summary,
    one_dataset_out_all,
)


def verdict(number: int, message: str) -> None:
    print(f"[criterion {number:02d}] PASS: {message}")


def scaled(data):
    scaler = fit_minmax(data.matrix)
    return data.with_matrix(apply_minmax(data.matrix, scaler))


@pytest.fixture(scope="module")
def planted_corpus():
    """5 classes x 60 samples, 2000 features, 20 informative per class."""
    data = generate_synthetic(5, 2000, 20, 60, shift=5.0, seed=60)
    return scaled(data)


# --------------------------------------------------------------- 1


def test_criterion_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for trial in range(20):
        depth = int(rng.integers(0, 3))
        hidden = ()
        if depth >= 1:
            hidden += ((int(rng.integers(2, 11)), 0.0),)
        if depth == 2:
            hidden += ((int(rng.integers(2, 6)), 0.0),)
        config = MlpConfig(
            input_dim=int(rng.integers(2, 21)),
            output_dim=int(rng.integers(2, 6)),
            hidden=hidden,
            seed=trial,
        )
        model = init_model(config)
        x = rng.random((4, config.input_dim))
        y = rng.integers(0, config.output_dim, size=4)
        analytic = backward(model, forward(model, x), y)

        h = 1e-5
        for p, ga in zip(model.parameters(), analytic):
            flat, gaflat = p.reshape(-1), ga.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = loss(forward(model, x).probabilities, y)
                flat[i] = keep - h
                down = loss(forward(model, x).probabilities, y)
                flat[i] = keep
                gn = (up - down) / (2 * h)
                rel = abs(gaflat[i] - gn) / max(abs(gaflat[i]), abs(gn), 1e-3)
                worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-4
    assert elapsed < 30.0
    verdict(1, f"max relative gradient error {worst:.2e} over 20 configs "
               f"({elapsed:.1f}s)")


# --------------------------------------------------------------- 2


def test_criterion_02_contributions_sum_to_logit_delta():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst_excess = -np.inf
    for trial in range(10):
        d = int(rng.integers(5, 30))
        config = MlpConfig(
            input_dim=d,
            output_dim=int(rng.integers(2, 6)),
            hidden=((int(rng.integers(4, 16)), 0.0), (int(rng.integers(3, 9)), 0.0)),
            seed=200 + trial,
        )
        model = init_model(config)
        x = rng.random((100, d))
        tensor = deeplift_scores(model, x)
        delta = (
            forward(model, x).pre_activations[-1]
            - forward(model, np.zeros((1, d))).pre_activations[-1][0]
        )
        err = np.abs(tensor.scores.sum(axis=1) - delta)
        tol = np.maximum(1e-5, 1e-6 * np.abs(delta))
        worst_excess = max(worst_excess, float(np.max(err - tol)))
        assert np.all(err <= tol)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    verdict(2, f"summation-to-delta held on 10 nets x 100 samples "
               f"(worst margin {worst_excess:.2e}, {elapsed:.1f}s)")


# --------------------------------------------------------------- 3


def test_criterion_03_affine_contributions_equal_effective_weights():
    rng = np.random.default_rng(103)
    worst = 0.0
    for trial in range(10):
        d = int(rng.integers(2, 12))
        k = int(rng.integers(2, 5))
        widths = [d] + [int(rng.integers(2, 9)) for _ in range(int(rng.integers(0, 3)))] + [k]
        config = MlpConfig(
            input_dim=d,
            output_dim=k,
            hidden=tuple((w, 0.0) for w in widths[1:-1]),
            hidden_activation="identity",
            seed=300 + trial,
        )
        model = init_model(config)
        w_eff = np.eye(d)
        for layer in model.layers:
            layer.weights = rng.normal(size=layer.weights.shape)
            layer.biases = rng.normal(size=layer.biases.shape)
            w_eff = layer.weights @ w_eff
        x = rng.random((5, d))
        tensor = deeplift_scores(model, x)
        expected = x[:, :, None] * w_eff.T[None, :, :]
        worst = max(worst, float(np.max(np.abs(tensor.scores - expected))))
    assert worst <= 1e-10
    verdict(3, f"affine contributions equal W_eff[k][j]*x_j "
               f"(max deviation {worst:.2e})")


# --------------------------------------------------------------- 4


def replay_knockout(model, x_row, mode, target=None):
    """Brute-force knockout: recompute order, zero, re-predict."""
    def pred(v):
        return int(np.argmax(forward(model, v[None, :]).pre_activations[-1][0]))

    n = len(x_row)
    start = pred(x_row)
    if mode == "similarity" and target == start:
        return (start, [], 0, True, start, False)
    against = target
    if mode == "stability":
        logit0 = forward(model, x_row[None, :]).pre_activations[-1][0]
        against = int(np.argsort(-logit0, kind="stable")[1])
    scores = deeplift_scores(model, x_row[None, :]).scores[0]
    d2 = scores[:, start] - scores[:, against]
    order = sorted(range(n), key=lambda j: (-d2[j], j))
    x_cur = x_row.copy()
    removed = []
    for j in order:
        x_cur[j] = 0.0
        removed.append(j)
        p = pred(x_cur)
        if (p == target) if mode == "similarity" else (p != start):
            return (start, removed, len(removed), True, p, False)
    return (start, removed, len(removed), False, None, True)


def test_criterion_04_knockout_equals_bruteforce_replay():
    rng = np.random.default_rng(104)
    flips = 0
    for trial in range(50):
        d = int(rng.integers(2, 11))
        k = int(rng.integers(2, 5))
        model = init_model(
            MlpConfig(input_dim=d, output_dim=k, hidden=((6, 0.0),), seed=400 + trial)
        )
        for layer in model.layers:
            layer.weights = layer.weights * 3.0
        x = rng.random(d)

        got = knockout(model, x, mode="stability")
        want = replay_knockout(model, x, "stability")
        assert (got.start_class, got.removed, got.steps,
                got.flipped, got.new_class, got.capped) == want
        flips += got.flipped

        target = int(rng.integers(0, k))
        got = knockout(model, x, mode="similarity", target_class=target)
        want = replay_knockout(model, x, "similarity", target=target)
        assert (got.start_class, got.removed, got.steps,
                got.flipped, got.new_class, got.capped) == want
    assert flips >= 10  # the oracle must have seen real flips, not only caps
    verdict(4, f"knockout equals replay on 50 models, both modes "
               f"({flips}/50 stability runs flipped)")


# --------------------------------------------------------------- 5


def exhaustive_best_split(rows, y, n_classes):
    """Plain-Python scan over every (feature, midpoint) pair."""
    n = len(y)
    counts = [0] * n_classes
    for label in y:
        counts[label] += 1
    ss = sum(c * c for c in counts)
    if n < 2 or ss == n * n:
        return None
    g_node = (n * n - ss) / (n * n)
    best = None
    for f in range(len(rows[0])):
        order = sorted(range(n), key=lambda i: rows[i][f])
        v = [rows[i][f] for i in order]
        labels = [y[i] for i in order]
        left = [0] * n_classes
        for i in range(n - 1):
            left[labels[i]] += 1
            if v[i] == v[i + 1]:
                continue
            nl, nr = i + 1, n - i - 1
            ssl = sum(c * c for c in left)
            ssr = sum((counts[c] - left[c]) ** 2 for c in range(n_classes))
            gl = (nl * nl - ssl) / (nl * nl)
            gr = (nr * nr - ssr) / (nr * nr)
            delta = g_node - (nl / n) * gl - (nr / n) * gr
            if delta > 0 and (best is None or delta > best[2]):
                best = (f, (v[i] + v[i + 1]) / 2, delta)
    return best


def test_criterion_05_best_split_equals_exhaustive_search():
    rng = np.random.default_rng(105)
    splits = 0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        p = int(rng.integers(1, 11))
        n_classes = int(rng.integers(2, 5))
        if rng.random() < 0.5:
            x = rng.integers(0, 4, size=(n, p)).astype(np.float64)
        else:
            x = np.round(rng.random((n, p)) * 10, 1)
        y = rng.integers(0, n_classes, size=n)
        got = best_split(x, y, range(p), n_classes)
        want = exhaustive_best_split(x.tolist(), y.tolist(), n_classes)
        if want is None:
            assert got is None
        else:
            assert got is not None
            assert got[0] == want[0] and got[1] == want[1] and got[2] == want[2]
            splits += 1
    assert splits >= 50
    verdict(5, f"split search exact on 100 datasets ({splits} with a split)")


# --------------------------------------------------------------- 6


def test_criterion_06_synthetic_cv_accuracy(planted_corpus):
    t0 = time.perf_counter()
    plan = kfold_split(planted_corpus.sample_ids, 5, 60)
    rf = cross_validate(
        RfLearner(stage1_trees=100, keep=1000, stage2_trees=500, threads=4),
        planted_corpus,
        plan,
    )
    mlp = cross_validate(MlpLearner(epochs=50, batch_size=30), planted_corpus, plan)
    elapsed = time.perf_counter() - t0
    assert rf.accuracy >= 0.95
    assert mlp.accuracy >= 0.95
    assert elapsed < 300.0
    verdict(6, f"5-fold CV accuracy mlp={mlp.accuracy:.3f} rf={rf.accuracy:.3f} "
               f"on the planted corpus ({elapsed:.0f}s)")


# --------------------------------------------------------------- 7


def test_criterion_07_dataset_bias_opens_cv_odo_gap():
    data = generate_synthetic(
        5, 500, 10, 60, shift=3.0, n_datasets=6, seed=70,
        bias_low=0.1, bias_high=10.0,
    )
    data = scaled(data)
    learner = MlpLearner(hidden=((128, 0.3),), epochs=50, batch_size=30)
    cv = cross_validate(learner, data, kfold_split(data.sample_ids, 5, 70))
    odo = odo_summary(one_dataset_out_all(learner, data))
    gap = cv.accuracy - odo["mean_dataset_accuracy"]
    assert gap >= 0.05
    verdict(7, f"cv={cv.accuracy:.3f} vs one-dataset-out="
               f"{odo['mean_dataset_accuracy']:.3f}, gap {gap * 100:.1f} points")


# --------------------------------------------------------------- 8


def test_criterion_08_stage1_recovers_planted_features(planted_corpus):
    stage1 = fit_forest(planted_corpus, 100, seed=8, threads=4)
    rank = sorted(range(2000), key=lambda j: (-stage1.importances[j], j))[:1000]
    planted = set(range(100))  # 5 classes x 20 informative, blocks up front
    missing = planted - set(rank)
    assert missing == set()
    verdict(8, "all 100 planted features sit in the stage-1 top 1000")


# --------------------------------------------------------------- 9

TISSUE_TABLE = {
    "blood": "blood_group",
    "blood plasma": "blood_group",
    "blood serum": "blood_group",
    "peripheral blood": "blood_group",
    "umbilical cord blood": "blood_group",
    "serum": "blood_group",
    "buffy coat": "blood_group",
    "immortal human B cell": "blood_group",
    "liver": "blood_group",
    "lymphoblastoid cell": "blood_group",
    "brain": "brain_group",
    "cingulate gyrus": "brain_group",
    "motor cortex": "brain_group",
    "prefrontal cortex": "brain_group",
    "neocortex": "brain_group",
    "skin": "epithelium_group",
    "dermis": "epithelium_group",
    "epidermis": "epithelium_group",
    "breast": "epithelium_group",
    "oral mucosa": "epithelium_group",
    "larynx": "epithelium_group",
    "prostate gland": "gland_group",
    "testis": "gland_group",
    "kidney": "gland_group",
    "bladder": "gland_group",
    "uterine endometrium": "gland_group",
    "tonsil": "gland_group",
    "lymph node": "gland_group",
    "intestine": "intestine_group",
    "colon": "intestine_group",
    "ileal mucosa": "intestine_group",
}

AGE_TABLE = {
    2: {0: "[0;65]", 30: "[0;65]", 45: "[0;65]", 60: "[0;65]", 65: "[0;65]",
        66: "(65;110]", 70: "(65;110]", 80: "(65;110]", 110: "(65;110]"},
    3: {0: "[0;45]", 30: "[0;45]", 45: "[0;45]", 60: "(45;70]", 65: "(45;70]",
        66: "(45;70]", 70: "(45;70]", 80: "(70;110]", 110: "(70;110]"},
    4: {0: "[0;30]", 30: "[0;30]", 45: "(30;60]", 60: "(30;60]", 65: "(60;80]",
        66: "(60;80]", 70: "(60;80]", 80: "(60;80]", 110: "(80;110]"},
}


def test_criterion_09_lookup_tables_exact():
    groups = TissueGroupMap.default()
    assert len(TISSUE_TABLE) == 31
    for tissue, group in TISSUE_TABLE.items():
        assert groups.resolve(tissue) == group, tissue
    for k, expected in AGE_TABLE.items():
        binning = AgeBinning.scheme(k)
        for age, label in expected.items():
            assert binning.label_for(age) == label, (k, age)
    verdict(9, "31 tissue rows and 27 age boundary cases all exact")


# --------------------------------------------------------------- 10


def test_criterion_10_preprocessing_identities():
    rng = np.random.default_rng(110)
    counts = rng.integers(0, 1000, size=(50, 20)).astype(np.float64)
    counts[0] += 1.0  # no all-zero sample columns
    matrix = ExpressionMatrix(
        feature_ids=[f"srna:f{j:05d}" for j in range(50)],
        sample_ids=[f"sample_{i:05d}" for i in range(20)],
        values=counts,
    )
    rpm = rpm_normalize(matrix)
    sums = rpm.values.sum(axis=0)
    assert np.all(np.abs(sums - 1e6) <= 1e-9 * 1e6)

    wild = ExpressionMatrix(
        feature_ids=matrix.feature_ids,
        sample_ids=matrix.sample_ids,
        values=rng.normal(0, 100, size=(50, 20)),
    )
    scaled_m = apply_minmax(wild, fit_minmax(wild))
    assert scaled_m.values.min() >= 0.0 and scaled_m.values.max() <= 1.0

    values = np.ones((2, 10))
    values[0, :3] = 0.0  # exactly 30% zeros: kept at threshold 0.3
    values[1, :4] = 0.0  # 40% zeros: removed
    sparse = ExpressionMatrix(
        feature_ids=["srna:keep", "srna:drop"],
        sample_ids=[f"sample_{i:05d}" for i in range(10)],
        values=values,
    )
    kept = filter_zero_features(sparse, 0.3)
    assert kept.feature_ids == ["srna:keep"]
    verdict(10, "rpm sums, minmax range, and the 30%-zeros boundary all hold")


# --------------------------------------------------------------- 11


def test_criterion_11_reruns_and_threads_byte_identical(tmp_path):
    corpus = tmp_path / "corpus"
    assert run([
        "synth", "--classes", "3", "--features", "40", "--informative", "5",
        "--per-class", "10", "--datasets", "2", "--seed", "31",
        "--out-dir", str(corpus),
    ]) == 0
    srna = str(corpus / "srna_matrix.tsv")
    meta = str(corpus / "metadata.tsv")

    mlp_args = ["train", "--model", "mlp", "--hidden", "16", "--dropout", "0.2",
                "--epochs", "5", "--batch-size", "10", "--seed", "31",
                "--srna", srna, "--metadata", meta]
    out_a, out_b = tmp_path / "mlp_a", tmp_path / "mlp_b"
    assert run([*mlp_args, "--out-dir", str(out_a)]) == 0
    assert run([*mlp_args, "--out-dir", str(out_b)]) == 0
    assert (out_a / "mlp_model.json").read_bytes() == (out_b / "mlp_model.json").read_bytes()
    assert (out_a / "run_manifest.json").read_bytes() == (out_b / "run_manifest.json").read_bytes()

    rf_args = ["train", "--model", "rf", "--stage1-trees", "20", "--keep-top", "15",
               "--stage2-trees", "25", "--seed", "31",
               "--srna", srna, "--metadata", meta]
    out_1, out_4 = tmp_path / "rf_t1", tmp_path / "rf_t4"
    assert run([*rf_args, "--threads", "1", "--out-dir", str(out_1)]) == 0
    assert run([*rf_args, "--threads", "4", "--out-dir", str(out_4)]) == 0
    assert (out_1 / "rf_model.json").read_bytes() == (out_4 / "rf_model.json").read_bytes()

    cv_args = ["validate", "cv", "--model", "rf", "--stage1-trees", "20",
               "--keep-top", "15", "--stage2-trees", "25", "--folds", "3",
               "--seed", "31", "--srna", srna, "--metadata", meta]
    cv_1, cv_4 = tmp_path / "cv_t1", tmp_path / "cv_t4"
    assert run([*cv_args, "--threads", "1", "--out-dir", str(cv_1)]) == 0
    assert run([*cv_args, "--threads", "4", "--out-dir", str(cv_4)]) == 0
    for name in ("rf_cv_confusion.tsv", "rf_cv_per_class.tsv", "rf_cv_summary.txt"):
        assert (cv_1 / name).read_bytes() == (cv_4 / name).read_bytes(), name

    model_doc = json.loads((out_1 / "rf_model.json").read_text())
    assert model_doc["kind"] == "rf"
    verdict(11, "model files and reports byte-identical across reruns and "
                "thread counts")


# --------------------------------------------------------------- 12


def test_criterion_12_chance_floor_without_signal():
    data = generate_synthetic(4, 100, 0, 30, shift=5.0, seed=124)
    data = scaled(data)
    plan = kfold_split(data.sample_ids, 5, 124)
    mlp = cross_validate(MlpLearner(hidden=((64, 0.3),), epochs=20), data, plan)
    rf = cross_validate(
        RfLearner(stage1_trees=50, keep=100, stage2_trees=100, threads=4), data, plan
    )
    chance = 0.25
    assert abs(mlp.accuracy - chance) <= 0.1
    assert abs(rf.accuracy - chance) <= 0.1
    verdict(12, f"no-signal CV accuracy mlp={mlp.accuracy:.3f} "
                f"rf={rf.accuracy:.3f} (chance {chance})")
