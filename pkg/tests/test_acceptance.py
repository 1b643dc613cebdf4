"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. Criterion 3 trains
3 variants x 10 seeds at the full regression schedule and dominates the
runtime (tens of minutes on a small machine).
"""

import time

import numpy as np

from ctxmask.data import (
    Dataset,
    Sample,
    load_push_dataset,
    rbf_kernel_matrix,
    sample_gp_trajectory,
    split_setup,
    write_synthetic_push_file,
)
from ctxmask.evaluation import (
    ExperimentConfig,
    rmse_to_mm,
    run_experiment,
)
from ctxmask.gradcheck import COMPOSED_TOL, OP_TOL, run_suite
from ctxmask.model import (
    ContextVector,
    ModelSpec,
    context_mask,
    forward,
    init_params,
)
from ctxmask.numeric import RngState
from ctxmask.training import TrainConfig, train


def report(criterion: str, ok: bool, detail: str = ""):
    print(f"\n[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{criterion} failed: {detail}"


class TestCriterion1GradientOracles:
    def test_finite_difference_suite_20_seeds(self):
        t0 = time.perf_counter()
        worst, ok = run_suite(n_seeds=20)
        elapsed = time.perf_counter() - t0
        failures = {
            name: err
            for name, err in worst.items()
            if err >= (COMPOSED_TOL if name.startswith("pair_loss") else OP_TOL)
        }
        detail = (
            f"(max op err {max(v for k, v in worst.items() if not k.startswith('pair_loss')):.2e}, "
            f"max composed err {max(v for k, v in worst.items() if k.startswith('pair_loss')):.2e}, "
            f"{elapsed:.1f}s)"
        )
        report("criterion 1 (gradient oracle suite)", ok and elapsed < 60.0,
               detail if not failures else f"failures: {failures}")


class TestCriterion2SimulatorFidelity:
    def test_empirical_covariance_matches_kernel(self):
        t0 = time.perf_counter()
        worst_ratio = 0.0
        for xi, ell in [(1.0, 0.5), (4.0, 2.0)]:
            length, n = 8, 2000
            rng = RngState(0)
            trajs = np.stack(
                [sample_gp_trajectory(rng, length, xi, ell) for _ in range(n)]
            )
            emp = trajs.T @ trajs / n
            kernel = rbf_kernel_matrix(np.arange(length, dtype=float), xi, ell)
            worst = float(np.max(np.abs(emp - kernel)))
            bound = 0.1 * xi * xi
            worst_ratio = max(worst_ratio, worst / bound)
            assert worst < bound, f"(xi={xi}, ell={ell}): {worst:.4f} >= {bound:.3f}"
        elapsed = time.perf_counter() - t0
        report(
            "criterion 2 (GP simulator fidelity)",
            elapsed < 60.0,
            f"(worst error at {worst_ratio:.0%} of the bound, {elapsed:.1f}s)",
        )


class TestCriterion3RegressionExperiment:
    def test_full_preset_ordering_and_improvement(self):
        cfg = ExperimentConfig(
            experiment="gp-regression",
            variants=["FCN", "FCN+CM", "FCN+CM+L2Reg"],
            seeds=list(range(10)),
            train=TrainConfig(epochs=500, learning_rate=0.002, batch_size=32,
                              seed=0, lambda1=1e-4, lambda2=10.0),
            context_kind="continuous",
            n_tasks=200,
            samples_per_task=20,
            test_tasks=20,
            workers=2,
        )
        t0 = time.perf_counter()
        reports, table = run_experiment(cfg)
        elapsed = (time.perf_counter() - t0) / 60.0
        by_name = {r.variant: r for r in reports}
        fcn = by_name["FCN"].rmse
        cm = by_name["FCN+CM"].rmse
        l2 = by_name["FCN+CM+L2Reg"].rmse
        improvement = (fcn - l2) / fcn
        print(f"\n{table}")
        print(f"recorded mean RMSE: FCN={fcn:.4f} FCN+CM={cm:.4f} FCN+CM+L2Reg={l2:.4f}")
        print(f"recorded mean STD: "
              f"FCN={by_name['FCN'].std:.4f} FCN+CM={by_name['FCN+CM'].std:.4f} "
              f"FCN+CM+L2Reg={by_name['FCN+CM+L2Reg'].std:.4f}")
        print(f"wall time {elapsed:.1f} min (target < 30 min)")
        report(
            "criterion 3 (regression experiment)",
            (l2 < cm < fcn) and improvement >= 0.05,
            f"(ordering {l2:.4f} < {cm:.4f} < {fcn:.4f}, improvement {improvement:.1%})",
        )


class TestCriterion4ReferenceNumberSpotChecks:
    def test_mm_conversions_round_to_published_values(self):
        ok = (f"{rmse_to_mm(0.222):.2f}" == "4.87" and
              f"{rmse_to_mm(0.330):.2f}" == "7.23")
        report("criterion 4 (mm conversion spot checks)", ok,
               f"(0.222 -> {rmse_to_mm(0.222):.2f}, 0.330 -> {rmse_to_mm(0.330):.2f})")


class TestCriterion5EquivalenceOracles:
    def test_a_masked_ones_matches_plain_fcn_bitwise(self):
        fcn_spec = ModelSpec("FCN", 3, 2, "continuous", context_dim=2,
                             hidden=(16, 16, 16, 16))
        cm_spec = ModelSpec("FCN+CM", 3, 2, "continuous", context_dim=2,
                            hidden=(16, 16, 16, 16), mask_hidden=8)
        gen = np.random.default_rng(0)
        exact = True
        for seed in range(5):
            fcn_store = init_params(fcn_spec, seed)
            cm_store = init_params(cm_spec, seed)
            # perturb the mask head, then force the mask back to exact ones
            cm_store["mask.fc2.w"] = gen.standard_normal((8, 16))
            cm_store["mask.fc2.b"] = gen.standard_normal(16)
            cm_store["mask.fc2.w"] = np.zeros((8, 16))
            cm_store["mask.fc2.b"] = np.zeros(16)
            for _ in range(20):
                x = gen.standard_normal(3)
                c = ContextVector("continuous", gen.uniform(0.1, 10.0, 2))
                p_fcn = forward(x, None, fcn_spec, fcn_store)
                p_cm = forward(x, c, cm_spec, cm_store)
                exact = exact and np.array_equal(p_fcn.mean, p_cm.mean)
                exact = exact and np.array_equal(p_fcn.std, p_cm.std)
        report("criterion 5a (ones-mask equals FCN bitwise)", exact)

    def test_b_zero_lambda1_training_trajectories_bitwise(self):
        from ctxmask.data import simulate_gp_dataset

        data = simulate_gp_dataset(RngState(7), n_tasks=8, samples_per_task=8)
        cfg = TrainConfig(epochs=8, learning_rate=0.002, batch_size=16, seed=3)

        def spec(variant, **kw):
            return ModelSpec(variant, 3, 1, "continuous", context_dim=2,
                             hidden=(12, 12, 12, 12), mask_hidden=6, **kw)

        store_cm, trace_cm = train(spec("FCN+CM"), data, cfg)
        store_l2, trace_l2 = train(spec("FCN+CM+L2Reg", lambda1=0.0), data, cfg)
        store_nr, trace_nr = train(
            spec("FCN+CM+NeuralReg", lambda1=0.0, lambda2=1.0), data, cfg
        )
        exact = trace_cm == trace_l2 == trace_nr
        for name in store_cm.names():
            exact = exact and np.array_equal(store_cm[name], store_l2[name])
            exact = exact and np.array_equal(store_cm[name], store_nr[name])
        report("criterion 5b (lambda1=0 trajectories bitwise)", exact,
               "(FCN+CM vs +L2Reg vs +NeuralReg, 8 epochs)")


class TestCriterion6MaskOrdering:
    def test_mask_distances_track_context_distances(self):
        def toy_dataset(seed):
            gen = np.random.default_rng(seed)
            w0 = np.array([0.8, -0.5, 0.3])
            samples = []
            for cval in (0.0, 1.0, 3.0):
                ctx = ContextVector("continuous", np.array([cval]))
                for _ in range(40):
                    x = gen.standard_normal(3)
                    y = np.array([(1.0 + cval) * (x @ w0)]) + 0.05 * gen.standard_normal(1)
                    samples.append(Sample(x, y, ctx))
            return Dataset(samples)

        wins = 0
        for seed in range(10):
            spec = ModelSpec("FCN+CM+L2Reg", 3, 1, "continuous", context_dim=1,
                             hidden=(16, 16, 16, 16), mask_hidden=8,
                             lambda1=1.0, lambda2=1.0)
            cfg = TrainConfig(epochs=150, learning_rate=0.002, batch_size=24,
                              seed=seed, lambda1=1.0, lambda2=1.0)
            store, _ = train(spec, toy_dataset(seed), cfg)

            def mask_at(cval):
                return context_mask(
                    ContextVector("continuous", np.array([cval])), spec, store
                ).value

            near = np.linalg.norm(mask_at(0.0) - mask_at(1.0))
            far = np.linalg.norm(mask_at(0.0) - mask_at(3.0))
            wins += near < far
        report("criterion 6 (mask-ordering property)", wins >= 8,
               f"({wins}/10 seeds ordered, need >= 8)")


class TestCriterion7SplitInvariants:
    def test_thousand_randomized_fixtures(self):
        failures = 0
        for trial in range(1000):
            gen = np.random.default_rng(trial)
            n_objects = int(gen.integers(2, 12))
            samples = []
            for i in range(n_objects):
                vec = np.zeros(36)
                vec[int(gen.integers(0, 36))] = 1.0
                for _ in range(int(gen.integers(1, 4))):
                    samples.append(Sample(
                        gen.standard_normal(3), gen.standard_normal(3),
                        ContextVector("indicator", vec),
                        object_id=f"o{i}",
                        surface="abs" if gen.random() < 0.6 else "plywood",
                        weight_count=int(gen.integers(0, 3)),
                    ))
            data = Dataset(samples)
            train_d, test_d = split_setup(data, "different-objects", RngState(trial))
            if not set(train_d.object_ids()).isdisjoint(test_d.object_ids()):
                failures += 1
            if len(train_d) + len(test_d) != len(data):
                failures += 1
            surfaces = {s.surface for s in data}
            if surfaces == {"abs", "plywood"}:
                train_d, test_d = split_setup(data, "different-surfaces", RngState(trial))
                if {s.surface for s in train_d} != {"abs"}:
                    failures += 1
                if {s.surface for s in test_d} != {"plywood"}:
                    failures += 1
            weights = {s.weight_count for s in data}
            for k in weights:
                if len(weights) < 2:
                    continue
                train_d, test_d = split_setup(
                    data, "different-weights", RngState(trial), weight_k=k
                )
                if any(s.weight_count == k for s in train_d):
                    failures += 1
                if any(s.weight_count != k for s in test_d):
                    failures += 1
                if len(train_d) + len(test_d) != len(data):
                    failures += 1
        report("criterion 7 (split invariants, 1000 fixtures)", failures == 0,
               f"({failures} violations)")


class TestCriterion8PushPipeline:
    def test_synthetic_fixture_pipeline_end_to_end(self, tmp_path):
        # The published pushing tables need the external dataset, which is
        # declared not desk-scale-reproducible; this runs the identical
        # pipeline on the deterministic 20-object stand-in.
        path = tmp_path / "push.jsonl"
        write_synthetic_push_file(path, RngState(0), n_objects=20,
                                  pushes_per_object=25, plywood_objects=4)
        data = load_push_dataset(path, context_kind="indicator")
        train_d, test_d = split_setup(data, "different-objects", RngState(0))
        disjoint = set(train_d.object_ids()).isdisjoint(test_d.object_ids())

        cfg = ExperimentConfig(
            experiment="push-different-objects",
            variants=["FCN", "FCN+CC", "FCN+CM", "FCN+CM+L2Reg", "FCN+CM+NeuralReg"],
            seeds=[0],
            train=TrainConfig(epochs=40, learning_rate=0.002, batch_size=64,
                              seed=0, lambda1=0.01, lambda2=10.0),
            context_kind="indicator",
            data_path=str(path),
            hidden=(32, 32, 32, 32),
            mask_hidden=16,
            out_dir=str(tmp_path / "out"),
            workers=2,
        )
        reports, table = run_experiment(cfg)
        print(f"\n{table}")
        rows_ok = [r.variant for r in reports] == list(cfg.variants)
        mm_ok = all(abs(r.dist_mm - 21.92 * r.rmse) < 1e-12 for r in reports)
        # training-loss decrease, checked directly on one variant's trace
        spec_probe = ModelSpec("FCN+CM+L2Reg", 3, 3, "indicator",
                               hidden=(32, 32, 32, 32), mask_hidden=16,
                               lambda1=0.01, lambda2=10.0)
        _, trace = train(
            spec_probe, train_d,
            TrainConfig(epochs=40, learning_rate=0.002, batch_size=64, seed=0,
                        lambda1=0.01, lambda2=10.0),
        )
        decreased = trace[-1].mean_loss < trace[0].mean_loss
        files_ok = (tmp_path / "out" / "report.csv").exists()
        report(
            "criterion 8 (pushing pipeline on synthetic fixture)",
            disjoint and rows_ok and mm_ok and decreased and files_ok,
            f"(5 variants, split disjoint={disjoint}, "
            f"loss {trace[0].mean_loss:.3f} -> {trace[-1].mean_loss:.3f})",
        )


class TestCriterion9Determinism:
    def test_experiment_rerun_byte_identical(self, tmp_path):
        def once(tag):
            cfg = ExperimentConfig(
                experiment="gp-regression",
                variants=["FCN", "FCN+CM+L2Reg"],
                seeds=[0, 1],
                train=TrainConfig(epochs=4, learning_rate=0.002, batch_size=8,
                                  seed=0, lambda1=1e-4, lambda2=10.0),
                context_kind="continuous",
                n_tasks=4, samples_per_task=6, test_tasks=2,
                hidden=(8, 8, 8, 8), mask_hidden=4,
                out_dir=str(tmp_path / tag),
                workers=2,
            )
            reports, _ = run_experiment(cfg)
            return (tmp_path / tag / "report.csv").read_bytes(), reports

        csv_a, _ = once("a")
        csv_b, _ = once("b")
        report("criterion 9 (byte-identical rerun)", csv_a == csv_b,
               f"({len(csv_a)} bytes compared)")
