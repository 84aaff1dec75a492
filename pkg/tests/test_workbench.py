import numpy as np
import pytest

from routeflow import balance
from routeflow.errors import ParameterError
from routeflow.instances import generate_cvrp
from routeflow.network import NetConfig, PolicyNet
from routeflow.trainer import TrainConfig
from routeflow.workbench import (
    BALANCE_MODES,
    BaselineSolutions,
    CSV_COLUMNS,
    ablate_balance,
    ablate_decoding,
    built_in_baseline,
    cross_seed_variance,
    evaluate,
    gap_percent,
    run_verification,
    tsp_brute_force_optimum,
)


@pytest.fixture(scope="module")
def dataset():
    return [generate_cvrp(8, seed=s, capacity=30) for s in (1, 2, 3)]


@pytest.fixture(scope="module")
def baselines(dataset):
    return built_in_baseline(dataset)


@pytest.fixture(scope="module")
def net():
    return PolicyNet.init(NetConfig(layers=1, hidden=8), seed=4)


class TestGap:
    def test_anchor_value(self):
        assert gap_percent(31.26, 28.04) == pytest.approx(11.48, abs=0.01)

    def test_zero_gap(self):
        assert gap_percent(120.53, 120.53) == 0.0


class TestEvaluate:
    def test_report_rows_and_csv(self, net, dataset, baselines):
        report = evaluate(net, dataset, "greedy", baselines, seed=0)
        assert len(report.rows) == len(dataset)
        assert report.reference_label == "nn+2opt"
        csv = report.to_csv()
        assert csv.splitlines()[0] == ",".join(CSV_COLUMNS)
        assert len(csv.splitlines()) == 1 + len(dataset)

    def test_missing_baseline_is_explicit_error(self, net, dataset):
        partial = BaselineSolutions(values={dataset[0].name: 3.0}, provenance="x")
        with pytest.raises(ParameterError, match="missing baseline"):
            evaluate(net, dataset, "greedy", partial)

    def test_reproducible_row_for_row(self, net, dataset, baselines):
        a = evaluate(net, dataset, "depot_guided", baselines, seed=9)
        b = evaluate(net, dataset, "depot_guided", baselines, seed=9)
        for ra, rb in zip(a.rows, b.rows):
            assert (ra.method, ra.instance_id, ra.objective, ra.ref, ra.gap_pct, ra.seed,
                    ra.config_hash) == (
                rb.method, rb.instance_id, rb.objective, rb.ref, rb.gap_pct, rb.seed,
                rb.config_hash)

    def test_threads_do_not_change_results(self, net, dataset, baselines):
        a = evaluate(net, dataset, "greedy", baselines, seed=0, threads=1)
        b = evaluate(net, dataset, "greedy", baselines, seed=0, threads=3)
        assert [r.objective for r in a.rows] == [r.objective for r in b.rows]

    def test_all_modes_produce_rows(self, net, dataset, baselines):
        for mode in ("sample", "greedy", "depot_guided", "aco"):
            report = evaluate(
                net, dataset[:1], mode, baselines, seed=1, aco_iterations=2, n_ants=4,
                n_samples=4,
            )
            assert len(report.rows) == 1
            assert report.rows[0].objective > 0

    def test_rows_sorted_by_method_then_size(self, net, baselines, dataset):
        report = evaluate(net, dataset, "greedy", baselines)
        report.rows = report.rows[::-1]
        csv_first = report.to_csv().splitlines()[1].split(",")[0]
        assert csv_first == "greedy"
        keys = [(r.method, r.size, r.instance_id) for r in report.rows]
        assert keys == sorted(keys)


class TestBaselines:
    def test_built_in_label_and_positive(self, baselines, dataset):
        assert baselines.provenance == "nn+2opt"
        assert all(v > 0 for v in baselines.values.values())
        assert set(baselines.values) == {i.name for i in dataset}

    def test_json_roundtrip(self, baselines):
        again = BaselineSolutions.from_json(baselines.to_json())
        assert again.values == baselines.values
        assert again.provenance == baselines.provenance

    def test_nonpositive_rejected(self):
        with pytest.raises(ParameterError):
            BaselineSolutions(values={"x": 0.0}, provenance="bad")

    def test_tsp_brute_force_small(self):
        from routeflow.instances import generate_tsp

        inst = generate_tsp(5, seed=3)
        best = tsp_brute_force_optimum(inst)
        assert best > 0
        refined = built_in_baseline([inst]).values[inst.name]
        assert refined >= best - 1e-9


class TestAblations:
    def test_balance_mode_mappings(self):
        assert BALANCE_MODES["DB"] == (0.0, 1.0, 1.0)
        assert BALANCE_MODES["TB"] == (1.0, 0.0, 0.0)
        assert BALANCE_MODES["HB"] == (1.0, 1.0, 1.0)

    def test_ablate_balance_emits_three_method_rows(self, dataset, baselines):
        cfg = TrainConfig(n_nodes=8, epochs=1, instances_per_epoch=1, h=3, seed=2,
                          layers=1, hidden=8, stable_timing=True)
        report = ablate_balance(cfg, dataset[:2], baselines)
        methods = {r.method for r in report.rows}
        assert methods == {"DB", "TB", "HB"}
        assert len(report.rows) == 3 * 2

    def test_ablate_decoding_grid(self, net, dataset, baselines):
        report = ablate_decoding(net, dataset[:2], baselines, seeds=(0, 1))
        methods = {r.method for r in report.rows}
        assert methods == {"DS+CG", "DS+CS", "DG+CG", "DG+CS"}
        assert len(report.rows) == 4 * 2 * 2
        assert cross_seed_variance(report, "DG+CG") == 0.0


class TestVerification:
    def test_fast_suite_passes(self):
        report = run_verification(fast=True)
        assert report.ok, report.format()
        names = [c.name for c in report.checks]
        assert "backward-probability-anchors" in names
        assert "forward-factorization" in names

    def test_injected_backward_probability_bug_is_caught(self, monkeypatch):
        monkeypatch.setattr(
            balance, "backward_step_prob",
            lambda a, j, at_depot: -1.0 / (2 * a + j) if at_depot else 1.0,
        )
        report = run_verification(fast=True)
        failed = {c.name for c in report.checks if not c.passed}
        assert "backward-probability-anchors" in failed
        assert not report.ok

    def test_discrepancy_table_is_informational(self):
        report = run_verification(fast=True)
        text = report.format()
        assert "min_prob" in text
        assert "1/6" in text  # the order-dependent sequence probability
        assert report.ok
