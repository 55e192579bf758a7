"""
Tests for variant presets and the path and population drivers
"""
import numpy as np
import pytest
from pydantic import ValidationError

from app.config import SolverDefaults, resolve_solver_defaults
from app.services import metaheuristics
from app.services.construction import savings_construct
from app.services.errors import InvalidInstanceError, ModelFormatError, UnknownVariantError
from app.services.exact import solve_exact
from app.services.labeling import ConstantSelector, ThresholdRule
from app.services.local_search import CostModel
from app.services.metaheuristics import (
    HybridGeneticSearch, Individual, Population, RunTracker, VariantConfig, broken_pairs_distance,
    load_selector, lookup_variant, order_crossover, run_hybrid_hgs, run_hybrid_ils, run_variant,
    variant_table,
)
from app.services.selector_tabular import FnnModel, TabularSelector, save_tabular_model
from app.services.solution import Solution, evaluate, time_warp


@pytest.fixture
def quick_defaults():
    return SolverDefaults(population_size=4, generation_size=4, stall_iterations=15,
                          penalty_adjust_every=5, restart_after=10)


def _ils(name="ils-baseline", **overrides):
    return lookup_variant(name).with_overrides(**{"max_iterations": 25, **overrides})


@pytest.mark.unit
class TestVariants:
    """Preset table and lookup"""

    def test_table_names_unique(self):
        """Twelve presets with distinct names"""
        names = [v.name for v in variant_table()]

        assert len(names) == 12
        assert len(set(names)) == 12

    @pytest.mark.parametrize("query,expected", [
        ("ILS-Alpha", "ils-alpha"),
        ("ils-β", "ils-beta"),
        ("FILO2-γ", "ils-gamma"),
        ("filo2", "ils-baseline"),
        ("ils-μ", "ils-mu-x"),
        ("ils_mu_b", "ils-mu-b"),
        ("hgs", "hgs-baseline"),
        ("HGS-TW", "hgs-tw-baseline"),
    ])
    def test_lookup_aliases(self, query, expected):
        """Lookup ignores case and accepts Greek letters and prefixes"""
        assert lookup_variant(query).name == expected

    def test_hgs_mu_large(self):
        """hgs-mu switches preset at 500 nodes"""
        assert lookup_variant("hgs-mu", n_nodes=499).name == "hgs-mu"
        assert lookup_variant("hgs-μ", n_nodes=500).name == "hgs-mu-large"
        assert lookup_variant("hgs-mu-large").threshold == 0.85

    def test_unknown_variant(self):
        """Unknown names are domain errors"""
        with pytest.raises(UnknownVariantError):
            lookup_variant("ils-omega")

    def test_preset_values(self):
        """Stochastic presets carry their acceptance probabilities"""
        beta, delta = lookup_variant("ils-beta"), lookup_variant("ils-delta")

        assert (beta.selector, beta.rule, beta.acceptance) == ("gbt", "stochastic", 0.9)
        assert (delta.selector, delta.rule, delta.acceptance) == ("fnn", "stochastic", 0.75)
        assert lookup_variant("ils-mu-x").aspiration == 0.6

    def test_overrides(self):
        """None overrides are ignored and values are validated"""
        cfg = lookup_variant("ils-alpha").with_overrides(seed=4, time_limit=None)

        assert cfg.seed == 4
        assert cfg.time_limit is None
        with pytest.raises(ValidationError):
            cfg.with_overrides(threshold=1.5)
        with pytest.raises(ValidationError):
            VariantConfig(name="x", colour="red")

    def test_threshold_rule(self):
        """The variant's rule fields become a ThresholdRule"""
        rule = lookup_variant("ils-delta").threshold_rule()

        assert rule == ThresholdRule("stochastic", 0.8, acceptance=0.75)


@pytest.mark.unit
class TestSelectorLoading:
    """Models behind the presets"""

    def test_baseline_has_no_selector(self):
        """Baselines run unfiltered"""
        assert load_selector(lookup_variant("ils-baseline")) is None

    def test_tabular_from_model_dir(self, tmp_path):
        """fnn presets read fnn.npz from the model directory"""
        save_tabular_model(FnnModel.initialize([4, 3, 1], np.random.default_rng(0)), tmp_path / "fnn.npz")

        selector = load_selector(lookup_variant("ils-gamma"), model_dir=str(tmp_path))

        assert isinstance(selector, TabularSelector)
        assert selector.name == "ils-gamma"

    def test_missing_model(self, tmp_path):
        """A preset whose model is absent fails with a format error"""
        with pytest.raises(ModelFormatError):
            load_selector(lookup_variant("ils-alpha"), model_dir=str(tmp_path))


@pytest.mark.unit
class TestSolverConfiguration:
    """Solver constants from a config file reach the drivers"""

    def test_config_file_epsilon_reaches_selector(self, tmp_path, mocker, small_instance):
        """threshold_epsilon and granularity from TOML shape the selector the driver builds"""
        model_path = save_tabular_model(FnnModel.initialize([4, 3, 1], np.random.default_rng(0)), tmp_path / "fnn.npz")
        config = tmp_path / "solver.toml"
        config.write_text("[solver]\nthreshold_epsilon = 0.2\ngranularity = 7\n")
        defaults = resolve_solver_defaults(config)
        cfg = lookup_variant("ils-delta").with_overrides(max_iterations=2, model_path=str(model_path))
        spy = mocker.spy(metaheuristics, "load_selector")

        run_hybrid_ils(small_instance, cfg, defaults=defaults)

        selector = spy.spy_return
        assert spy.call_count == 1
        assert selector.rule.kind == "stochastic"
        assert selector.rule.epsilon == 0.2
        assert selector.gamma == 7

    def test_variant_gamma_wins_over_config(self):
        """An explicit variant gamma overrides the configured granularity"""
        defaults = SolverDefaults(granularity=7)

        assert lookup_variant("ils").granularity(defaults) == 7
        assert lookup_variant("ils").with_overrides(gamma=4).granularity(defaults) == 4

    def test_config_file_shapes_distance_oracle(self, tmp_path, small_instance):
        """rank_table_size and matrix_cache_limit rebuild the instance's oracle"""
        config = tmp_path / "solver.toml"
        config.write_text("rank_table_size = 5\nmatrix_cache_limit = 3\n")

        solution, _ = run_hybrid_ils(small_instance, _ils(max_iterations=5), defaults=resolve_solver_defaults(config))

        assert small_instance.oracle.rank_size == 5
        assert small_instance.oracle.cache_limit == 3
        assert evaluate(solution).feasible


@pytest.mark.unit
class TestRunTracker:
    """Budgets and trajectories"""

    def test_iteration_budget_disables_clock(self, small_instance):
        """An iteration cap alone means no time limit"""
        tracker = RunTracker(small_instance, _ils(), None, SolverDefaults())

        assert tracker.time_limit is None
        assert not tracker.expired(24)
        assert tracker.expired(25)

    def test_default_budget(self, small_instance):
        """Without caps the budget scales with the node count"""
        defaults = SolverDefaults()
        tracker = RunTracker(small_instance, lookup_variant("ils"), None, defaults)

        assert tracker.time_limit == pytest.approx(defaults.time_limit(small_instance.n_nodes))

    def test_only_feasible_improvements_recorded(self, line5):
        """Infeasible or worse solutions leave the trajectory alone"""
        tracker = RunTracker(line5, _ils(), 140.0, SolverDefaults())

        assert tracker.observe(Solution(line5, [[1, 2, 3], [4, 5]]), 1)
        assert not tracker.observe(Solution(line5, [[1, 2, 3, 4, 5]]), 2)
        assert not tracker.observe(Solution(line5, [[1, 2], [3], [4, 5]]), 3)
        assert tracker.observe(Solution(line5, [[1, 2], [3, 4, 5]]), 4)
        assert [p.gap for p in tracker.trajectory] == [pytest.approx(100 * 20 / 140), 0.0]


@pytest.mark.unit
class TestIteratedLocalSearch:
    """Path driver"""

    def test_feasible_best_matches_record(self, medium_instance):
        """The best solution is feasible and matches the record"""
        solution, record = run_hybrid_ils(medium_instance, _ils())

        assert evaluate(solution).feasible
        assert record.best_cost == solution.cost
        assert record.iterations == 25
        assert record.n_customers == medium_instance.n_customers

    def test_deterministic_under_iteration_budget(self, medium_instance):
        """Same seed and iteration budget, same result"""
        a, _ = run_hybrid_ils(medium_instance, _ils(seed=3))
        b, _ = run_hybrid_ils(medium_instance, _ils(seed=3))

        assert a.route_lists() == b.route_lists()

    def test_trajectory_improves(self, medium_instance):
        """Trajectory costs strictly decrease and carry gaps"""
        _, record = run_hybrid_ils(medium_instance, _ils(), bks=1.0)

        costs = [p.cost for p in record.trajectory]
        assert costs == sorted(costs, reverse=True)
        assert len(set(costs)) == len(costs)
        assert record.trajectory[-1].cost == record.best_cost
        assert all(p.gap is not None for p in record.trajectory)

    def test_filtered_run_with_callback(self, medium_instance):
        """A selector that fixes every customer edge still yields a feasible run"""
        seen = []
        selector = ConstantSelector(0.9, ThresholdRule())

        solution, _ = run_hybrid_ils(medium_instance, _ils(aspiration=1.0), selector=selector,
                                     callback=lambda s, it: seen.append(it))

        assert evaluate(solution).feasible
        assert seen == sorted(seen)

    def test_restarts(self, medium_instance, quick_defaults):
        """Stalls trigger restarts without losing the best solution"""
        solution, record = run_hybrid_ils(medium_instance, _ils(max_iterations=40), defaults=quick_defaults)

        assert evaluate(solution).feasible
        assert record.best_cost <= record.final_cost

    def test_fully_frozen(self, medium_instance):
        """Fixing every edge without aspiration leaves the construction untouched"""
        cfg = _ils(aspiration=1.0)
        constructed = savings_construct(medium_instance, restricted=True, gamma=cfg.granularity())
        selector = ConstantSelector(0.9, include_depot=True)

        solution, _ = run_hybrid_ils(medium_instance, cfg, selector=selector)

        assert solution.cost == constructed.cost

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(5))
    def test_near_optimal_on_tiny(self, small_instance, seed):
        """Unfiltered runs on eight customers end within 5% of the optimum"""
        optimum = solve_exact(small_instance).cost

        solution, _ = run_hybrid_ils(small_instance, _ils(max_iterations=200, seed=seed))

        assert solution.cost <= optimum * 1.05

    def test_rejects_time_windows(self, solomon_toy):
        """The path driver is CVRP only"""
        with pytest.raises(InvalidInstanceError):
            run_hybrid_ils(solomon_toy, _ils())


@pytest.mark.unit
class TestPopulation:
    """Pools, diversity and crossover"""

    def test_broken_pairs_distance(self):
        """Share of edges of the first solution missing from the second"""
        a = frozenset({(0, 1), (1, 2), (0, 2)})

        assert broken_pairs_distance(a, a) == 0.0
        assert broken_pairs_distance(a, frozenset({(0, 1)})) == pytest.approx(2 / 3)
        assert broken_pairs_distance(frozenset(), a) == 0.0

    def test_order_crossover(self):
        """The child is a permutation of the parents"""
        rng = np.random.default_rng(0)
        first, second = list(range(1, 11)), list(range(10, 0, -1))

        for _ in range(20):
            child = order_crossover(first, second, rng)
            assert sorted(child) == first

    def test_pool_bound(self, medium_instance):
        """A pool never holds more than size + generation_size individuals"""
        population = Population(size=3, generation_size=2, n_close=2, n_elite=1)
        rng = np.random.default_rng(0)

        for _ in range(12):
            solution = savings_construct(medium_instance, rng=rng, noise=0.3)
            population.add(Individual(solution, solution.cost))
            assert len(population.feasible) <= 5

        assert len(population.feasible) >= 3
        assert population.best_feasible().solution.cost == min(i.solution.cost for i in population.feasible)

    def test_clones_pruned_first(self, line5):
        """Duplicate solutions are removed before fitness pruning"""
        population = Population(size=1, generation_size=1, n_close=1, n_elite=0)
        same = Solution(line5, [[1, 2, 3], [4, 5]])
        other = Solution(line5, [[1, 2], [3, 4, 5]])

        population.add(Individual(same, same.cost))
        population.add(Individual(same.copy(), same.cost))
        population.add(Individual(other, other.cost))

        assert len(population.feasible) == 1
        assert population.feasible[0].solution is other

    def test_infeasible_pool(self, line5):
        """Overloaded solutions go to the infeasible pool"""
        population = Population(size=2, generation_size=2, n_close=1, n_elite=0)
        bad = Solution(line5, [[1, 2, 3, 4, 5]])

        population.add(Individual(bad, CostModel(penalized=True).cost(bad)))

        assert len(population.infeasible) == 1
        assert population.best_feasible() is None
        assert population.best().solution is bad


@pytest.mark.unit
class TestHybridGeneticSearch:
    """Population driver"""

    def test_cvrp_run(self, small_instance, quick_defaults):
        """A short run returns a feasible best and respects the pool bound"""
        cfg = lookup_variant("hgs").with_overrides(max_iterations=20)
        search = HybridGeneticSearch(small_instance, cfg, None, None, quick_defaults, None)

        solution, record = search.run()

        assert evaluate(solution).feasible
        assert record.iterations == 20
        assert search.max_pool_seen <= quick_defaults.population_size + quick_defaults.generation_size

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_near_optimal_on_tiny(self, small_instance, quick_defaults, seed):
        """Unfiltered population runs on eight customers end within 5% of the optimum"""
        cfg = lookup_variant("hgs").with_overrides(max_iterations=60, seed=seed)

        solution, _ = run_hybrid_hgs(small_instance, cfg, defaults=quick_defaults)

        assert solution.cost <= solve_exact(small_instance).cost * 1.05

    def test_time_window_run(self, solomon_toy, quick_defaults):
        """CVRPTW instances are solved feasibly"""
        cfg = lookup_variant("hgs-tw").with_overrides(max_iterations=15)

        solution, _ = run_hybrid_hgs(solomon_toy, cfg, defaults=quick_defaults)

        assert evaluate(solution).feasible

    def test_per_generation_relabel(self, small_instance, quick_defaults):
        """Relabelling every generation with a selector still yields a feasible best"""
        cfg = lookup_variant("hgs").with_overrides(max_iterations=10, per_generation_relabel=True)

        solution, _ = run_hybrid_hgs(small_instance, cfg, selector=ConstantSelector(0.9), defaults=quick_defaults)

        assert evaluate(solution).feasible

    def test_penalty_grows_when_infeasible(self, small_instance, quick_defaults):
        """Mostly infeasible children raise the capacity penalty"""
        search = HybridGeneticSearch(small_instance, lookup_variant("hgs"), None, None, quick_defaults, None)
        before = search.cost_model.capacity_penalty
        search.recent_feasible = [False] * 10

        search.adjust_penalties()

        assert search.cost_model.capacity_penalty == pytest.approx(before * quick_defaults.penalty_factor)
        assert search.recent_feasible == []

    def test_run_variant_dispatch(self, solomon_toy, quick_defaults):
        """Timed instances always go to the population driver"""
        cfg = lookup_variant("ils").with_overrides(max_iterations=5)

        solution, record = run_variant(solomon_toy, cfg, defaults=quick_defaults)

        assert record.variant == "ils-baseline"
        assert evaluate(solution).feasible

    @pytest.mark.parametrize("seed", range(3))
    def test_solomon_toy_time_windows_respected(self, solomon_toy, quick_defaults, seed):
        """Every route of the best solution meets its windows and capacity"""
        cfg = lookup_variant("hgs-tw").with_overrides(max_iterations=40, seed=seed)

        solution, _ = run_hybrid_hgs(solomon_toy, cfg, defaults=quick_defaults)

        report = evaluate(solution)
        assert report.feasible
        assert all(time_warp(route) == 0 for route in solution.routes)
        assert sorted(c for r in solution.route_lists() for c in r) == list(solomon_toy.customers)


@pytest.mark.unit
class TestSelectorNeutrality:
    """A selector that fixes nothing behaves like the baseline"""

    def test_ils_trajectory_matches_baseline(self, medium_instance):
        """Same seed, same trajectory and best routes as the unfiltered run"""
        baseline, a = run_hybrid_ils(medium_instance, _ils(seed=2))
        silent, b = run_hybrid_ils(medium_instance, _ils(seed=2), selector=ConstantSelector(0.1))

        assert [(p.iteration, p.cost) for p in a.trajectory] == [(p.iteration, p.cost) for p in b.trajectory]
        assert baseline.route_lists() == silent.route_lists()

    def test_hgs_matches_baseline(self, small_instance, quick_defaults):
        """The population driver is equally unaffected"""
        cfg = lookup_variant("hgs").with_overrides(max_iterations=15, seed=1)

        baseline, a = run_hybrid_hgs(small_instance, cfg, defaults=quick_defaults)
        silent, b = run_hybrid_hgs(small_instance, cfg, selector=ConstantSelector(0.1), defaults=quick_defaults)

        assert [(p.iteration, p.cost) for p in a.trajectory] == [(p.iteration, p.cost) for p in b.trajectory]
        assert baseline.cost == silent.cost


@pytest.mark.slow
class TestOptimalityOnTinyInstances:
    """Both drivers against exhaustive search on twenty small instances"""

    def test_ils_finds_optimum(self, tiny_instances):
        """At least 18 of 20 runs end on the exact optimum"""
        hits = 0
        for instance in tiny_instances:
            solution, _ = run_hybrid_ils(instance, _ils(max_iterations=300))
            hits += abs(solution.cost - solve_exact(instance).cost) < 1e-6

        assert hits >= 18

    def test_hgs_finds_optimum(self, tiny_instances, quick_defaults):
        """At least 18 of 20 population runs end on the exact optimum"""
        cfg = lookup_variant("hgs").with_overrides(max_iterations=150)
        hits = 0
        for instance in tiny_instances:
            solution, _ = run_hybrid_hgs(instance, cfg, defaults=quick_defaults)
            hits += abs(solution.cost - solve_exact(instance).cost) < 1e-6

        assert hits >= 18
