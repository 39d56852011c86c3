"""End-to-end acceptance gate.

One test per shipping criterion; each prints a single PASS/FAIL line (visible
with ``pytest -s``) and asserts it.  These checks recompute everything they
verify with independent oracles: naive double loops, finite differences, and
direct recounts of fold plans, rather than trusting the library's own
internals.
"""

import json
import math
import time

import numpy as np

import tabfm
from tabfm.embeddings import embed
from tabfm.fm import interaction_features, pair_contribution_matrix
from tabfm.interpret import _interaction_shares, pair_names

from conftest import continuous_schema, mixed_schema, random_samples, small_template


def _verdict(criterion, desc, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"\n[criterion {criterion}] {desc}: {status}{suffix}")
    return ok


# ---------------------------------------------------------------------------
# 1. FM interaction term: naive-loop equality and linear runtime


def _naive_interaction(v, e):
    n = e.shape[0]
    out = np.zeros(v.shape[0])
    for c in range(v.shape[0]):
        for i in range(n):
            for j in range(i + 1, n):
                out[c] += float(np.sum(v[c] * e[i] * e[j]))
    return out


def test_criterion_1_fm_linear_time_correctness():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        m = int(rng.integers(1, 9))
        n_classes = int(rng.integers(1, 4))
        e = rng.normal(size=(n, m))
        v = rng.normal(size=(n_classes, m))
        fast = v @ interaction_features(e)
        naive = _naive_interaction(v, e)
        worst = max(worst, float(np.max(np.abs(fast - naive))))
    exact = worst <= 1e-10

    sizes = (100, 200, 300, 400, 600, 800)
    batch = 256
    times = []
    for n in sizes:
        e = rng.normal(size=(batch, n, 8))
        interaction_features(e)  # warm up
        best = min(
            (lambda t0: (interaction_features(e), time.perf_counter() - t0))(
                time.perf_counter())[1]
            for _ in range(9)
        )
        times.append(best)
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    linear = slope < 1.2

    assert _verdict(1, "interaction term matches naive O(n^2) loop within "
                       "1e-10 and scales linearly",
                    exact and linear,
                    f"max dev {worst:.2e}, fitted exponent {slope:.3f}")


# ---------------------------------------------------------------------------
# 2. gradients vs central finite differences


def test_criterion_2_gradient_integrity():
    rng = np.random.default_rng(202)
    step = 1e-5
    worst = 0.0
    n_configs = 0
    for variant in ("deepfm", "deepfm", "deepfm", "deepfm",
                    "fm_only", "fm_only", "fm_only",
                    "dnn_only", "dnn_only", "dnn_only"):
        schema = mixed_schema()
        config = tabfm.TrainConfig(m=int(rng.integers(1, 4)),
                                   h1=int(rng.integers(2, 7)),
                                   h2=int(rng.integers(2, 7)),
                                   h3=int(rng.integers(0, 4)),
                                   dropout_rate=0.0,
                                   seed=int(rng.integers(10_000)))
        l1 = float(rng.uniform(0, 0.05))
        l2 = float(rng.uniform(0, 0.05))
        model = tabfm.init_model(schema, variant, config)
        # zero-initialized biases can sit exactly on a ReLU kink where the
        # subgradient and central differences legitimately disagree; jitter
        # every parameter onto differentiable ground first
        for _, arr, _ in tabfm.named_parameters(model):
            arr += rng.normal(size=arr.shape) * 0.05
        samples = random_samples(schema, 5, seed=int(rng.integers(10_000)),
                                 missing_rate=0.2)
        std = tabfm.fit_standardizer(samples, schema)
        x, y = tabfm.encode_dataset(samples, schema, std)
        _, grads = tabfm.loss_gradients(model, x, y, l1_weight=l1, l2_weight=l2)
        for name, arr, _ in tabfm.named_parameters(model):
            flat = arr.reshape(-1)
            got = grads[name].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                up = tabfm.loss(model, x, y, l1_weight=l1, l2_weight=l2)
                flat[idx] = orig - step
                dn = tabfm.loss(model, x, y, l1_weight=l1, l2_weight=l2)
                flat[idx] = orig
                fd = (up - dn) / (2 * step)
                worst = max(worst, abs(got[idx] - fd) / max(1.0, abs(fd)))
        n_configs += 1

    assert _verdict(2, "all parameter gradients match central finite "
                       "differences at rel. error < 1e-4 on 10 random configs",
                    n_configs >= 10 and worst < 1e-4,
                    f"{n_configs} configs, worst rel error {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. decomposition exactness on a full seeded run


def test_criterion_3_decomposition_exactness():
    spec = tabfm.CohortSpec(n_patients=300, mean_visits=2.0,
                            template=small_template(),
                            planted_pairs=(("thick_01", "thick_02", 0, 2.0),),
                            noise_scale=0.5, seed=17)
    schema, samples, _ = tabfm.generate(spec)
    plan = tabfm.make_folds(samples, schema, k=5, seed=17)
    worst_sum = 0.0
    worst_norm = 0.0
    n_checked = 0
    for f in range(5):
        tr, va, te = tabfm.expand_training(plan, f, samples)
        fold = tabfm.prepare_fold(schema, f, tr, va, te)
        cfg = tabfm.TrainConfig(m=4, learning_rate=0.02, h1=8, h2=4,
                                dropout_rate=0.3, l2_weight=1e-4, batch_size=128,
                                max_epochs=60, patience=15, seed=17 + f)
        model = tabfm.init_model(schema, "deepfm", cfg)
        model.standardizer = fold.standardizer
        model, _ = tabfm.train_arrays(model, fold.x_train, fold.y_train,
                                      fold.x_val, fold.y_val, cfg)
        iu, ju = np.triu_indices(schema.n_features, k=1)
        for row in fold.x_test:
            e = embed(model.bank, row, schema)
            term = model.fm.v @ interaction_features(e)
            mat = pair_contribution_matrix(model.fm, e)
            pair_sum = mat[:, iu, ju].sum(axis=1)
            worst_sum = max(worst_sum, float(np.max(np.abs(pair_sum - term))))

            shares, _, rest, _ = _interaction_shares(model, row[None, :])
            totals = shares.sum(axis=1) + rest
            worst_norm = max(worst_norm, float(np.max(np.abs(totals - 1.0))))
            n_checked += 1

    assert _verdict(3, "pair contributions sum to the interaction term (1e-9) "
                       "and per-sample shares + rest equal 1 (1e-9) on every "
                       "test sample",
                    worst_sum <= 1e-9 and worst_norm <= 1e-9,
                    f"{n_checked} samples, worst sum dev {worst_sum:.2e}, "
                    f"worst normalization dev {worst_norm:.2e}")


# ---------------------------------------------------------------------------
# 4. protocol safety over 100 seeded fold plans


def test_criterion_4_protocol_safety():
    failures = []
    n_plans = 0
    for cohort_seed in range(10):
        spec = tabfm.CohortSpec(seed=cohort_seed)   # reference-shaped
        schema, samples, _ = tabfm.generate(spec)
        baseline = [s for s in samples if s.is_baseline]
        labels = {s.patient_id: s.label for s in baseline}
        sexes = {s.patient_id: s.values["sex"] for s in baseline}
        ages = {s.patient_id: s.values["age"] for s in baseline}
        all_patients = set(labels)
        n = len(all_patients)
        global_class = {c: sum(1 for v in labels.values() if v == c) / n
                        for c in range(3)}
        global_sex = {v: sum(1 for s in sexes.values() if s == v) / n
                      for v in set(sexes.values())}
        global_age = sum(ages.values()) / n

        for plan_seed in range(10):
            plan = tabfm.make_folds(samples, schema, k=5, seed=plan_seed)
            n_plans += 1
            where = f"cohort {cohort_seed} plan {plan_seed}"

            seen = set()
            for fold in plan.folds:
                if fold & seen:
                    failures.append(f"{where}: folds overlap")
                seen |= fold
            if seen != all_patients:
                failures.append(f"{where}: folds do not partition the cohort")

            for i, fold in enumerate(plan.folds):
                k = len(fold)
                for c in range(3):
                    dev = abs(sum(1 for p in fold if labels[p] == c) / k
                              - global_class[c])
                    if dev > 0.05 + 1e-12:
                        failures.append(f"{where} fold {i}: class {c} off {dev:.3f}")
                for v in global_sex:
                    dev = abs(sum(1 for p in fold if sexes[p] == v) / k
                              - global_sex[v])
                    if dev > 0.05 + 1e-12:
                        failures.append(f"{where} fold {i}: sex {v} off {dev:.3f}")
                age_dev = abs(sum(ages[p] for p in fold) / k - global_age)
                if age_dev > 2.0 + 1e-12:
                    failures.append(f"{where} fold {i}: age off {age_dev:.2f}")

            for fold_index in range(5):
                train, val, test = tabfm.expand_training(plan, fold_index, samples)
                tr = {s.patient_id for s in train}
                va = {s.patient_id for s in val}
                te = {s.patient_id for s in test}
                if tr & va or tr & te or va & te:
                    failures.append(f"{where} fold {fold_index}: split sets overlap")
                if any(not s.is_baseline for s in val) or \
                        any(not s.is_baseline for s in test):
                    failures.append(f"{where} fold {fold_index}: longitudinal "
                                    "visit outside the training set")

    assert _verdict(4, "100 seeded fold plans: disjoint splits, class/sex "
                       "within 5 points, age within 2 years, longitudinal "
                       "visits only in training",
                    n_plans == 100 and not failures,
                    failures[0] if failures else f"{n_plans} plans clean")


# ---------------------------------------------------------------------------
# 5. planted-interaction recovery


def test_criterion_5_planted_interaction_recovery():
    template = small_template()
    pair_ranks = []
    linear_ranks = []
    started = time.monotonic()
    for seed in range(5):
        spec = tabfm.CohortSpec(n_patients=1500, mean_visits=4.59,
                                template=template,
                                planted_linear=(("thick_03", 1, 2.0),),
                                planted_pairs=(("thick_01", "thick_02", 0, 2.0),),
                                noise_scale=0.5, seed=seed)
        schema, samples, _ = tabfm.generate(spec)
        plan = tabfm.make_folds(samples, schema, k=5, seed=seed)
        models, tests = [], []
        for f in range(5):
            tr, va, te = tabfm.expand_training(plan, f, samples)
            fold = tabfm.prepare_fold(schema, f, tr, va, te)
            cfg = tabfm.TrainConfig(m=6, learning_rate=0.02, h1=8, h2=4,
                                    dropout_rate=0.5, l2_weight=1e-4,
                                    batch_size=128, max_epochs=200, patience=40,
                                    seed=seed * 11 + f)
            model = tabfm.init_model(schema, "deepfm", cfg)
            model.standardizer = fold.standardizer
            model, _ = tabfm.train_arrays(model, fold.x_train, fold.y_train,
                                          fold.x_val, fold.y_val, cfg)
            models.append(model)
            tests.append(fold.x_test)
        pooled = tabfm.interaction_report(models, tests)
        pair_ranks.append(next(
            (i + 1 for i, e in enumerate(pooled.for_class("AD"))
             if e.pair == "thick_01 × thick_02"), None))
        report = tabfm.linear_importance(models)
        linear_ranks.append(next(
            (i + 1 for i, e in enumerate(report.for_class("MCI"))
             if e.column == "thick_03"), None))
    elapsed = time.monotonic() - started

    pair_hits = sum(1 for r in pair_ranks if r is not None and r <= 5)
    linear_hits = sum(1 for r in linear_ranks if r is not None and r <= 3)
    assert _verdict(5, "planted pair ranks top-5 for its class in >= 4/5 "
                       "seeds and the planted linear effect ranks top-3",
                    pair_hits >= 4 and linear_hits >= 4 and elapsed < 600,
                    f"pair ranks {pair_ranks}, linear ranks {linear_ranks}, "
                    f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. model ordering and null-cohort sanity


def test_criterion_6_model_ordering():
    template = small_template()
    spec = tabfm.CohortSpec(
        n_patients=900, mean_visits=3.0, template=template,
        planted_linear=(("edu_years", 1, 1.0),),
        planted_pairs=(("thick_01", "thick_02", 0, 3.0),
                       ("thick_03", "thick_04", 1, 3.0),
                       ("thick_05", "thick_06", 2, 3.0)),
        noise_scale=0.5, seed=7)
    schema, samples, _ = tabfm.generate(spec)
    plan = tabfm.make_folds(samples, schema, k=5, seed=7)
    medians = {}
    for variant in ("deepfm", "fm_only", "linear_main_effects"):
        scores = []
        for f in range(5):
            tr, va, te = tabfm.expand_training(plan, f, samples)
            fold = tabfm.prepare_fold(schema, f, tr, va, te)
            if variant == "linear_main_effects":
                cfg = tabfm.TrainConfig(learning_rate=0.05, l2_weight=1e-4,
                                        batch_size=128, max_epochs=150,
                                        patience=30, seed=100 + f)
                model, _ = tabfm.fit_linear_arrays(
                    fold.x_train, fold.y_train, fold.x_val, fold.y_val, cfg,
                    schema, include_pairs=False, standardizer=fold.standardizer)
            else:
                cfg = tabfm.TrainConfig(
                    m=6, learning_rate=0.02, h1=16, h2=8,
                    dropout_rate=0.2 if variant == "deepfm" else 0.0,
                    l2_weight=1e-4, batch_size=128, max_epochs=150,
                    patience=30, seed=100 + f)
                model = tabfm.init_model(schema, variant, cfg)
                model.standardizer = fold.standardizer
                model, _ = tabfm.train_arrays(model, fold.x_train, fold.y_train,
                                              fold.x_val, fold.y_val, cfg)
            pred = tabfm.predict_classes(model, fold.x_test)
            scores.append(tabfm.balanced_accuracy(pred, fold.y_test, 3))
        medians[variant] = float(np.median(scores))

    deep_ok = medians["deepfm"] >= medians["fm_only"] - 0.02
    fm_ok = medians["fm_only"] - medians["linear_main_effects"] >= 0.05

    null_spec = tabfm.CohortSpec(n_patients=900, mean_visits=3.0,
                                 template=template, noise_scale=0.5, seed=11)
    null_schema, null_samples, _ = tabfm.generate(null_spec)
    meta = tabfm.meta_schema_for(null_schema, template)
    report, _, _ = tabfm.run_benchmark(
        null_samples, null_schema,
        variants=tabfm.BENCHMARK_VARIANTS + ("linear_main_effects",),
        budget=4, seed=11, jobs=4, k=5, meta_schema=meta,
        max_epochs=60, patience=15, batch_size=128)
    null_medians = {v: report.median(v) for v in report.aggregates}
    null_ok = all(abs(v - 1 / 3) <= 0.05 for v in null_medians.values())

    detail = (", ".join(f"{k} {v:.3f}" for k, v in medians.items())
              + "; null " + ", ".join(f"{k} {v:.3f}" for k, v in null_medians.items()))
    assert _verdict(6, "median balanced accuracy orders deepfm >= fm_only - "
                       "0.02 > linear baseline + 0.05, and every variant sits "
                       "at chance on a null cohort",
                    deep_ok and fm_ok and null_ok, detail)


# ---------------------------------------------------------------------------
# 7. count identities


def test_criterion_7_count_identities():
    schema = tabfm.build_schema(tabfm.SchemaTemplate())
    n_pairs = len(pair_names(schema))
    counts_ok = schema.n_features == 109 and n_pairs == 5886

    toy = continuous_schema(5)
    model = tabfm.init_model(toy, "deepfm", tabfm.TrainConfig(m=2, h1=3, h2=2))
    for _, arr, _ in tabfm.named_parameters(model):
        arr[:] = 0.0
    x = np.random.default_rng(77).normal(size=(20, 5))
    y = np.random.default_rng(78).integers(0, 3, 20)
    loss = tabfm.loss(model, x, y)
    probs = tabfm.predict_proba_batch(model, x)
    zero_ok = (abs(loss - math.log(3)) <= 1e-12
               and np.max(np.abs(probs - 1 / 3)) <= 1e-12)

    assert _verdict(7, "109 features give 5886 interaction pairs; the zero "
                       "model scores ln 3 loss and uniform predictions",
                    counts_ok and zero_ok,
                    f"n_features {schema.n_features}, pairs {n_pairs}, "
                    f"zero-model loss {loss:.12f}")


# ---------------------------------------------------------------------------
# 8. CLI determinism


def _file_map(out_dir):
    return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())
            if p.name != "manifest.json"}


def test_criterion_8_cli_determinism(tmp_path):
    spec = {"n_patients": 150, "mean_visits": 2.0,
            "template": {"n_volumes": 4, "n_lobes": 2, "n_thickness": 6,
                         "n_csf": 1, "n_genetic": 3, "n_demographics": 3},
            "planted_pairs": [["thick_01", "thick_02", 0, 2.0]], "seed": 8}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))

    mismatches = []
    gen_dirs = []
    for run in ("a", "b"):
        out = tmp_path / f"gen_{run}"
        assert tabfm.cli.main(["generate", "--spec", str(spec_path),
                               "--out", str(out)]) == 0
        gen_dirs.append(out)
    if _file_map(gen_dirs[0]) != _file_map(gen_dirs[1]):
        mismatches.append("generate outputs differ")

    cv_dirs = []
    for run in ("a", "b"):
        out = tmp_path / f"cv_{run}"
        assert tabfm.cli.main(["cv", "--data", str(gen_dirs[0] / "data.csv"),
                               "--schema", str(gen_dirs[0] / "schema.json"),
                               "--variant", "fm_only", "--budget", "2",
                               "--seed", "3", "--max-epochs", "30",
                               "--patience", "10", "--out", str(out)]) == 0
        cv_dirs.append(out)
    if _file_map(cv_dirs[0]) != _file_map(cv_dirs[1]):
        mismatches.append("cv reports or checkpoints differ")

    ckpts = sorted(str(p) for p in cv_dirs[0].glob("model_fold*.ckpt"))
    explain_dirs = []
    for run in ("a", "b"):
        out = tmp_path / f"explain_{run}"
        assert tabfm.cli.main(["explain", "--checkpoint", *ckpts,
                               "--data", str(gen_dirs[0] / "data.csv"),
                               "--schema", str(gen_dirs[0] / "schema.json"),
                               "--out", str(out)]) == 0
        explain_dirs.append(out)
    if _file_map(explain_dirs[0]) != _file_map(explain_dirs[1]):
        mismatches.append("explain reports differ")

    assert _verdict(8, "generate, cv, and explain re-runs are byte-identical "
                       "across reports and checkpoints",
                    not mismatches, "; ".join(mismatches) or "all outputs equal")
