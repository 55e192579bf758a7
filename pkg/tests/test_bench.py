"""
Tests for the benchmark grid, gap reports and the signed-rank test
"""
import numpy as np
import pandas as pd
import pytest
from scipy.stats import wilcoxon

from app.services.bench import (
    BenchSuite, load_suite, report_tables, run_benchmark, run_suite, wilcoxon_exact_p, wilcoxon_normal_p,
    wilcoxon_one_tailed,
)
from app.services import bench
from app.services.errors import EdgeSelectorError, MissingBksError
from app.services.instance import load_instance
from app.services.labeling import ConstantSelector
from app.services.metaheuristics import lookup_variant
from app.services.records import BksRegistry, RunRecord
from app.services.solution import compute_gap


def _record(instance, n_customers, gap, elapsed=1.0, variant="ils-baseline", distribution="R"):
    return RunRecord(instance=instance, variant=variant, seed=0, final_cost=100.0, best_cost=100.0, gap=gap,
                     elapsed=elapsed, n_customers=n_customers, customer_distribution=distribution)


@pytest.fixture
def records():
    return [
        _record("A", 150, 0.1, elapsed=1.0, distribution="R"),
        _record("B", 180, 0.2, elapsed=2.0, distribution="C"),
        _record("C", 190, 0.9, elapsed=3.0, distribution="R"),
        _record("D", 300, 1.0, elapsed=4.0, distribution="RC", variant="ils-alpha"),
        _record("E", 700, 2.0, elapsed=5.0, distribution="C", variant="ils-alpha"),
    ]


@pytest.mark.unit
class TestWilcoxon:
    """One-tailed signed-rank test"""

    def test_all_improvements(self):
        """Five positive differences give the smallest exact p-value"""
        p, reject = wilcoxon_one_tailed([10, 11, 12, 13, 14], [9, 9, 9, 9, 9])

        assert p == pytest.approx(1 / 32)
        assert reject

    def test_no_improvement(self):
        """Symmetric differences are far from significant"""
        p, reject = wilcoxon_one_tailed([1, 0, 2, 0, 3, 0], [0, 1, 0, 2, 0, 3])

        assert p >= 0.5
        assert not reject

    def test_ties_use_average_ranks(self):
        """Tied magnitudes still allow the extreme p-value"""
        assert wilcoxon_exact_p([1, 1, 2, 3, 4, 5]) == pytest.approx(1 / 64)

    def test_matches_scipy_exact(self):
        """Without ties the exact tail matches scipy"""
        d = np.array([3.0, -1.0, 4.0, 1.5, -5.0, 9.0, 2.6, 5.3, 5.8, -9.7])

        p, _ = wilcoxon_one_tailed(d, np.zeros_like(d))

        expected = wilcoxon(d, alternative="greater", method="exact").pvalue
        assert p == pytest.approx(expected)

    def test_normal_close_to_exact(self):
        """At twenty pairs both computations agree closely"""
        d = np.arange(1, 21, dtype=float)
        d[[1, 4, 6, 10, 12, 16]] *= -1

        assert abs(wilcoxon_exact_p(d) - wilcoxon_normal_p(d)) < 0.02

    def test_large_sample_uses_normal(self):
        """Above twenty pairs the approximation is used"""
        rng = np.random.default_rng(0)
        a = rng.normal(10, 1, size=40)
        b = a - rng.normal(0.5, 1, size=40)

        p, reject = wilcoxon_one_tailed(a, b)

        assert p == pytest.approx(wilcoxon_normal_p(a - b))
        assert reject

    def test_zero_differences_dropped(self):
        """Ties between paired runs do not count"""
        p, _ = wilcoxon_one_tailed([5, 5, 5, 10, 11, 12, 13, 14], [5, 5, 5, 9, 9, 9, 9, 9])

        assert p == pytest.approx(1 / 32)

    def test_all_zero(self):
        """No differences, no p-value"""
        assert wilcoxon_one_tailed([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == (None, False)

    def test_too_few_pairs(self):
        """Four pairs are not enough"""
        with pytest.raises(EdgeSelectorError, match="at least 5"):
            wilcoxon_one_tailed([1, 2, 3, 4], [0, 0, 0, 0])

    def test_length_mismatch(self):
        """Samples must pair up"""
        with pytest.raises(EdgeSelectorError, match="equal length"):
            wilcoxon_one_tailed([1, 2, 3, 4, 5], [1, 2, 3, 4, 5, 6])


@pytest.mark.unit
class TestReports:
    """Gap tables"""

    def test_size_bands(self, records):
        """Bands are labelled by their smallest and largest instance"""
        table, text = report_tables(records)

        assert list(table["group"]) == ["150 - 190", "300 - 300", "700 - 700"]
        assert list(table["runs"]) == [3, 1, 1]
        assert table.loc[0, "avg_gap"] == pytest.approx(0.4)
        assert table.loc[0, "median_gap"] == pytest.approx(0.2)
        assert table.loc[0, "avg_time"] == pytest.approx(2.0)
        assert "150 - 190" in text

    def test_group_by_distribution(self, records):
        """Distribution groups are sorted by name"""
        table, _ = report_tables(records, group_by="distribution")

        assert list(table["group"]) == ["C", "R", "RC"]
        assert table.loc[0, "avg_gap"] == pytest.approx(1.1)

    def test_group_by_variant(self, records):
        """Variant groups"""
        table, _ = report_tables(records, group_by="variant")

        assert dict(zip(table["group"], table["runs"])) == {"ils-alpha": 2, "ils-baseline": 3}

    def test_csv_written(self, tmp_path, records):
        """The table can be written as CSV"""
        report_tables(records, csv_path=tmp_path / "out" / "table.csv")

        frame = pd.read_csv(tmp_path / "out" / "table.csv")
        assert list(frame.columns) == ["group", "runs", "avg_gap", "median_gap", "avg_time"]

    def test_rejects_bad_input(self, records):
        """Empty input, missing gaps and unknown groupings are errors"""
        with pytest.raises(EdgeSelectorError, match="no records"):
            report_tables([])
        with pytest.raises(EdgeSelectorError, match="unknown grouping"):
            report_tables(records, group_by="colour")
        with pytest.raises(EdgeSelectorError, match="best-known"):
            report_tables(records + [_record("F", 100, None)])


@pytest.mark.unit
class TestBenchmarkGrid:
    """Instance x variant x seed runs"""

    def test_grid_order(self, line5, small_instance):
        """Records come out by instance, then variant, then seed"""
        registry = BksRegistry({"line5": 140.0, small_instance.name: 1.0})
        variants = [lookup_variant(name).with_overrides(max_iterations=3) for name in ("ils", "ils-alpha")]

        records = run_benchmark([line5, small_instance], variants, runs=2, registry=registry,
                                selectors={"ils-alpha": ConstantSelector(0.5)}, threads=1)

        keys = [(r.instance, r.variant, r.seed) for r in records]
        assert keys == [(inst, var, seed)
                        for inst in ("line5", small_instance.name)
                        for var in ("ils-baseline", "ils-alpha")
                        for seed in (0, 1)]
        assert all(r.gap >= 0 for r in records if r.instance == "line5")

    def test_missing_bks(self, line5):
        """Every instance needs a best-known cost"""
        with pytest.raises(MissingBksError):
            run_benchmark([line5], [lookup_variant("ils")], registry=BksRegistry())

    def test_load_suite_relative_paths(self, tmp_path):
        """Paths in a manifest resolve against its directory"""
        (tmp_path / "suite.toml").write_text(
            'instances = ["inst/a.vrp", "/abs/b.vrp"]\nvariants = ["ils-alpha"]\nruns = 3\nbks = "bks.txt"\n'
        )

        suite = load_suite(tmp_path / "suite.toml")

        assert suite.instances == [str(tmp_path / "inst" / "a.vrp"), "/abs/b.vrp"]
        assert suite.bks == str(tmp_path / "bks.txt")
        assert suite.runs == 3

    def test_unknown_manifest_key(self):
        """Manifests reject unknown keys"""
        with pytest.raises(ValueError):
            BenchSuite.model_validate({"instances": [], "repeats": 2})

    def test_run_suite(self, tmp_path, fixtures_dir):
        """A manifest with its own registry runs end to end"""
        (tmp_path / "line5.vrp").write_text((fixtures_dir / "line5.vrp").read_text())
        (tmp_path / "bks.txt").write_text("line5 140\n")
        (tmp_path / "suite.toml").write_text(
            'instances = ["line5.vrp"]\nruns = 2\nmax_iterations = 2\nbks = "bks.txt"\n'
        )

        records = run_suite(load_suite(tmp_path / "suite.toml"), threads=1)

        assert [r.seed for r in records] == [0, 1]
        assert all(r.best_cost >= 140 for r in records)

    def test_suite_solver_table(self, tmp_path, fixtures_dir, mocker):
        """A [solver] table in the manifest reaches every run"""
        (tmp_path / "line5.vrp").write_text((fixtures_dir / "line5.vrp").read_text())
        (tmp_path / "bks.txt").write_text("line5 140\n")
        (tmp_path / "suite.toml").write_text(
            'instances = ["line5.vrp"]\nruns = 1\nmax_iterations = 2\nbks = "bks.txt"\n'
            "[solver]\ngranularity = 3\nperturbation_strength = 1\n"
        )
        spy = mocker.spy(bench, "run_benchmark")

        run_suite(load_suite(tmp_path / "suite.toml"), threads=1)

        defaults = spy.call_args.kwargs["defaults"]
        assert (defaults.granularity, defaults.perturbation_strength) == (3, 1)


@pytest.mark.integration
@pytest.mark.slow
class TestBenchmarkOnX101:
    """Short runs on X-n101-k25 through to the gap report"""

    def test_bench_to_report(self, x101_path, tmp_path):
        """Gaps are measured against the registered best-known cost of 27591"""
        instance = load_instance(x101_path)
        cfg = lookup_variant("ils").with_overrides(max_iterations=20)

        records = run_benchmark([instance], [cfg], runs=2, threads=1)
        table, text = report_tables(records, group_by="instance", csv_path=tmp_path / "gaps.csv")

        assert instance.n_customers == 100
        assert [r.seed for r in records] == [0, 1]
        for record in records:
            assert record.best_cost >= 27591
            assert record.gap == pytest.approx(compute_gap(record.best_cost, 27591))
        row = table.iloc[0]
        assert row["group"] == "X-n101-k25"
        assert row["runs"] == 2
        assert row["avg_gap"] == pytest.approx(np.mean([r.gap for r in records]))
        assert "X-n101-k25" in text
        assert (tmp_path / "gaps.csv").exists()
