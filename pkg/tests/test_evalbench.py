"""Evaluation protocol tests: AUPRC oracle, fine-tuning loop, benchmark
matrix shape and pairing, aggregation, and report artifacts."""

import itertools
import logging

import numpy as np
import pytest

from metagraph.chemgraph.graphs import Task
from metagraph.chemgraph.registry import build_registry
from metagraph.chemgraph.synthetic import SynthSpec, synthesize_tasks
from metagraph.evalbench import (BenchmarkConfig, BenchmarkMethod, EvalRecord,
                                 FinetuneConfig, UndefinedMetricError,
                                 aggregate, auprc, batch_size_rule, finetune,
                                 load_records, run_benchmark, save_records,
                                 score_on_partition, write_report,
                                 _instance_indices)
from metagraph.ggnn import ModelConfig, init_params


def threshold_oracle(scores, labels):
    """Independent AP computation: enumerate every distinct score as a
    threshold, predict positive at score >= t, accumulate (dR * P)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    positives = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = scores >= t
        tp = float(labels[predicted].sum())
        recall = tp / positives
        precision = tp / float(predicted.sum())
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestAuprc:
    def test_perfect_separation(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_constant_scores_give_prevalence(self):
        assert auprc([0.5] * 8, [1, 0, 0, 0, 1, 0, 0, 0]) == pytest.approx(0.25)

    def test_worked_example(self):
        # blocks: P=1 at R=0.5, then P=2/3 at R=1.0
        got = auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert got == pytest.approx(1.0 * 0.5 + (2.0 / 3.0) * 0.5, abs=1e-12)
        assert got == pytest.approx(threshold_oracle([0.9, 0.8, 0.7, 0.6],
                                                     [1, 0, 1, 0]), abs=1e-12)

    def test_exhaustive_small_lengths(self):
        """Every label vector up to length 9 with tie-heavy random scores."""
        rng = np.random.default_rng(0)
        grid = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        for n in range(2, 10):
            for labels in itertools.product((0, 1), repeat=n):
                if sum(labels) in (0, n):
                    continue
                scores = grid[rng.integers(0, grid.size, size=n)]
                got = auprc(scores, labels)
                want = threshold_oracle(scores, labels)
                assert got == pytest.approx(want, abs=1e-12), (scores, labels)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(1)
        maps = [lambda s: 3.0 * s + 1.0, np.exp, np.tanh,
                lambda s: s ** 3 + 2.0 * s]
        for _ in range(200):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1
                labels[-1] = 0
            scores = rng.normal(size=n)
            base = auprc(scores, labels)
            f = maps[int(rng.integers(0, len(maps)))]
            assert auprc(f(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(UndefinedMetricError):
            auprc([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auprc([0.1, 0.2], [0, 0])

    def test_input_validation(self):
        with pytest.raises(ValueError):
            auprc([0.1], [1, 0])
        with pytest.raises(ValueError):
            auprc([], [])
        with pytest.raises(ValueError):
            auprc([0.1, 0.2], [1, 2])

    def test_batch_size_rule(self):
        assert batch_size_rule(16) == 16
        assert batch_size_rule(64) == 64
        assert batch_size_rule(128) == 64
        assert batch_size_rule(256) == 64
        with pytest.raises(ValueError):
            batch_size_rule(0)


def small_task(seed=0, n=48):
    spec = SynthSpec(task_counts={"B": 1}, instances_per_task=n,
                     min_nodes=3, max_nodes=10)
    instances = synthesize_tasks(spec, np.random.default_rng(seed))["B0000"]
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    return Task(task_id="B0000", task_type="B", instances=instances,
                partitions={"train": tuple(range(n_train)),
                            "val": tuple(range(n_train, n_train + n_val)),
                            "test": tuple(range(n_train + n_val, n))})


def tiny_model():
    return ModelConfig(layers=1, feature_dim=75, hidden_dim=8, dropout_p=0.0)


class TestFinetune:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(lr=-1.0)
        with pytest.raises(ValueError):
            FinetuneConfig(patience=0)
        with pytest.raises(ValueError):
            FinetuneConfig(max_epochs=-1)

    def test_zero_epochs_returns_init(self):
        task = small_task()
        model = tiny_model()
        init = init_params(model, np.random.default_rng(0))
        cfg = FinetuneConfig(max_epochs=0)
        tuned, score = finetune(init, task, 8, cfg, np.random.default_rng(1),
                                model)
        for name in init.names():
            assert np.array_equal(tuned[name].data, init[name].data)
        assert score == pytest.approx(
            score_on_partition(init, task, "test", model), abs=0)

    def test_training_moves_parameters_and_is_deterministic(self):
        task = small_task()
        model = tiny_model()
        init = init_params(model, np.random.default_rng(0))
        cfg = FinetuneConfig(max_epochs=3)
        runs = []
        for _ in range(2):
            tuned, score = finetune(init, task, 8, cfg,
                                    np.random.default_rng(5), model)
            runs.append((tuned, score))
        assert runs[0][1] == runs[1][1]
        moved = [n for n in init.names() if not np.array_equal(
            runs[0][0][n].data, init[n].data)]
        assert moved
        for name in init.names():
            assert np.array_equal(runs[0][0][name].data, runs[1][0][name].data)

    def test_trainable_subset_freezes_rest(self):
        task = small_task()
        model = tiny_model()
        init = init_params(model, np.random.default_rng(0))
        cfg = FinetuneConfig(max_epochs=2)
        tuned, _ = finetune(init, task, 8, cfg, np.random.default_rng(2),
                            model, trainable_names=["head.W", "head.b"])
        for name in init.names():
            same = np.array_equal(tuned[name].data, init[name].data)
            if name in ("head.W", "head.b"):
                assert not same, name
            else:
                assert same, name

    def test_explicit_instance_indices(self):
        task = small_task()
        model = tiny_model()
        init = init_params(model, np.random.default_rng(0))
        cfg = FinetuneConfig(max_epochs=1)
        indices = [0, 3, 5, 7, 9, 11, 13, 15]
        a = finetune(init, task, 8, cfg, np.random.default_rng(1), model,
                     instance_indices=indices)[1]
        b = finetune(init, task, 8, cfg, np.random.default_rng(1), model,
                     instance_indices=indices)[1]
        assert a == b
        with pytest.raises(ValueError, match="indices"):
            finetune(init, task, 8, cfg, np.random.default_rng(1), model,
                     instance_indices=[0, 1])

    def test_errors(self):
        task = small_task()
        model = tiny_model()
        init = init_params(model, np.random.default_rng(0))
        with pytest.raises(ValueError, match="train instances"):
            finetune(init, task, 1000, FinetuneConfig(), np.random.default_rng(0),
                     model)
        with pytest.raises(KeyError, match="unknown"):
            finetune(init, task, 8, FinetuneConfig(max_epochs=1),
                     np.random.default_rng(0), model,
                     trainable_names=["nonexistent"])


def benchmark_registry(seed=0, n=64):
    spec = SynthSpec(task_counts={"B": 2, "F": 2, "P": 1},
                     instances_per_task=n, min_nodes=3, max_nodes=10)
    datasets = synthesize_tasks(spec, np.random.default_rng(seed))
    return build_registry(datasets, min_instances=32,
                          val_counts={"B": 1, "F": 0},
                          test_counts={"B": 1, "F": 1},
                          rng=np.random.default_rng(seed + 1))


class TestRunBenchmark:
    def test_matrix_shape_and_determinism(self):
        registry = benchmark_registry()
        model = tiny_model()
        methods = [
            BenchmarkMethod("random", "finetune",
                            init_params(model, np.random.default_rng(0))),
            BenchmarkMethod("other", "finetune",
                            init_params(model, np.random.default_rng(1))),
        ]
        config = BenchmarkConfig(model=model,
                                 finetune=FinetuneConfig(max_epochs=0),
                                 instance_sets=2, seeds=2)
        records = run_benchmark(methods, registry, [16], config)
        # 2 methods x 3 test tasks x 1 k x 2 sets x 2 seeds
        assert len(records) == 2 * 3 * 1 * 2 * 2
        keys = {r.key for r in records}
        assert len(keys) == len(records)
        again = run_benchmark(methods, registry, [16], config)
        assert records == again

    def test_paired_instance_sets(self):
        registry = benchmark_registry()
        task = registry.split_tasks("test")[0]
        a = _instance_indices(task, 16, 0, base_seed=7)
        b = _instance_indices(task, 16, 0, base_seed=7)
        c = _instance_indices(task, 16, 1, base_seed=7)
        assert a == b
        assert a != c
        assert len(set(a)) == 16

    def test_infeasible_k_skipped_with_warning(self, caplog):
        registry = benchmark_registry()
        model = tiny_model()
        methods = [BenchmarkMethod("random", "finetune",
                                   init_params(model, np.random.default_rng(0)))]
        config = BenchmarkConfig(model=model,
                                 finetune=FinetuneConfig(max_epochs=0),
                                 instance_sets=1, seeds=1)
        with caplog.at_level(logging.WARNING):
            records = run_benchmark(methods, registry, [16, 10_000], config)
        assert len(records) == 3  # only k=16 cells survive
        assert any("skipping task" in m for m in caplog.messages)

    def test_knn_method_kind(self):
        registry = benchmark_registry()
        model = tiny_model()
        methods = [BenchmarkMethod("knn", "knn",
                                   init_params(model, np.random.default_rng(0)))]
        config = BenchmarkConfig(model=model, instance_sets=1, seeds=1)
        records = run_benchmark(methods, registry, [16], config)
        assert len(records) == 3
        assert all(0.0 <= r.auprc <= 1.0 for r in records)

    def test_parallel_jobs_match_serial(self):
        registry = benchmark_registry()
        model = tiny_model()
        methods = [BenchmarkMethod("random", "finetune",
                                   init_params(model, np.random.default_rng(0)))]
        base = BenchmarkConfig(model=model,
                               finetune=FinetuneConfig(max_epochs=1),
                               instance_sets=1, seeds=2)
        parallel = BenchmarkConfig(model=model,
                                   finetune=FinetuneConfig(max_epochs=1),
                                   instance_sets=1, seeds=2, jobs=2)
        assert run_benchmark(methods, registry, [16], base) == \
            run_benchmark(methods, registry, [16], parallel)

    def test_records_round_trip(self, tmp_path):
        registry = benchmark_registry()
        model = tiny_model()
        methods = [BenchmarkMethod("random", "finetune",
                                   init_params(model, np.random.default_rng(0)))]
        config = BenchmarkConfig(model=model,
                                 finetune=FinetuneConfig(max_epochs=0),
                                 instance_sets=2, seeds=1)
        records = run_benchmark(methods, registry, [16], config)
        path = tmp_path / "records.csv"
        save_records(records, path)
        assert load_records(path) == records
        save_records(records, tmp_path / "again.csv")
        assert (tmp_path / "records.csv").read_bytes() == \
            (tmp_path / "again.csv").read_bytes()
        first = path.read_text().splitlines()[0]
        assert first == "method,task,task_type,k,instance_set,seed,auprc"

    def test_load_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("method,task\nx,y\n")
        with pytest.raises(ValueError, match="header"):
            load_records(path)


def make_records(table, repeats=4, noise=0.0, seed=0):
    """table: {(task, task_type, k): {method: mean}} -> EvalRecords."""
    rng = np.random.default_rng(seed)
    records = []
    for (task, task_type, k), per_method in table.items():
        for method, mean in per_method.items():
            for i in range(repeats):
                for s in range(1):
                    value = mean + (noise * rng.normal() if noise else 0.0)
                    records.append(EvalRecord(
                        method=method, task=task, task_type=task_type, k=k,
                        instance_set=i, seed=s,
                        auprc=float(np.clip(value, 0.0, 1.0))))
    return records


class TestAggregate:
    def test_hand_computed_ranks(self):
        table = {
            ("t1", "B", 16): {"a": 0.9, "b": 0.5, "c": 0.1},
            ("t2", "F", 16): {"a": 0.2, "b": 0.8, "c": 0.4},
        }
        report = aggregate(make_records(table))
        # t1 ranks: a=1, b=2, c=3; t2 ranks: b=1, c=2, a=3
        overall = report["average_ranks"]["overall"][16]
        assert overall["a"] == pytest.approx(2.0)
        assert overall["b"] == pytest.approx(1.5)
        assert overall["c"] == pytest.approx(2.5)
        for cell in report["cells"]:
            ranks = [cell["methods"][m]["rank"] for m in cell["methods"]]
            assert sum(ranks) == pytest.approx(3 * 4 / 2)

    def test_tied_means_average_rank(self):
        table = {("t1", "B", 16): {"a": 0.6, "b": 0.6}}
        report = aggregate(make_records(table))
        cell = report["cells"][0]
        assert cell["methods"]["a"]["rank"] == pytest.approx(1.5)
        assert cell["methods"]["b"]["rank"] == pytest.approx(1.5)

    def test_single_method_all_rank_one(self):
        table = {("t1", "B", 16): {"a": 0.6},
                 ("t2", "F", 64): {"a": 0.4}}
        report = aggregate(make_records(table))
        for cell in report["cells"]:
            assert cell["methods"]["a"]["rank"] == 1.0
        assert cell["significant"] is False

    def test_distribution_split(self):
        table = {
            ("t1", "B", 16): {"a": 0.9, "b": 0.5},
            ("t2", "P", 16): {"a": 0.2, "b": 0.8},
        }
        report = aggregate(make_records(table))
        assert report["average_ranks"]["in_distribution"][16]["a"] == 1.0
        assert report["average_ranks"]["out_of_distribution"][16]["a"] == 2.0

    def test_incomplete_matrix_errors(self):
        table = {("t1", "B", 16): {"a": 0.9, "b": 0.5}}
        records = make_records(table)
        records = [r for r in records if not (r.method == "b"
                                              and r.instance_set == 3)]
        with pytest.raises(ValueError, match="uneven|missing"):
            aggregate(records)
        table2 = {("t1", "B", 16): {"a": 0.9},
                  ("t2", "B", 16): {"a": 0.9, "b": 0.5}}
        with pytest.raises(ValueError, match="missing"):
            aggregate(make_records(table2))

    def test_significance_flags(self):
        rng = np.random.default_rng(3)
        records = []
        for m, base in (("good", 0.9), ("bad", 0.2)):
            for i in range(5):
                for s in range(5):
                    records.append(EvalRecord(
                        method=m, task="t", task_type="B", k=16,
                        instance_set=i, seed=s,
                        auprc=float(np.clip(base + 0.01 * rng.normal(), 0, 1))))
        report = aggregate(records)
        cell = report["cells"][0]
        assert cell["best"] == "good"
        assert cell["significant"] is True
        assert cell["p_value"] < 0.05

    def test_identical_samples_not_significant(self):
        table = {("t1", "B", 16): {"a": 0.6, "b": 0.6}}
        report = aggregate(make_records(table))
        cell = report["cells"][0]
        assert cell["significant"] is False
        assert cell["p_value"] is None

    def test_duplicate_records_rejected(self):
        r = EvalRecord("a", "t", "B", 16, 0, 0, 0.5)
        with pytest.raises(ValueError, match="duplicate"):
            aggregate([r, r])

    def test_report_artifacts(self, tmp_path):
        table = {
            ("t1", "B", 16): {"a": 0.9, "b": 0.5},
            ("t1", "B", 64): {"a": 0.8, "b": 0.6},
            ("t2", "P", 16): {"a": 0.3, "b": 0.7},
            ("t2", "P", 64): {"a": 0.4, "b": 0.6},
        }
        report = aggregate(make_records(table))
        paths = write_report(report, tmp_path / "out")
        import json
        loaded = json.loads((tmp_path / "out" / "report.json").read_text())
        assert loaded["metadata"]["methods"] == ["a", "b"]
        ranks_csv = (tmp_path / "out" / "ranks.csv").read_text().splitlines()
        assert ranks_csv[0] == "group,k,method,average_rank"
        assert any(line.startswith("overall,16,a,") for line in ranks_csv)
        svg = (tmp_path / "out" / "ranks.svg").read_text()
        assert "<svg" in svg and "polyline" in svg
        assert "In-distribution" in svg and "Out-of-distribution" in svg
