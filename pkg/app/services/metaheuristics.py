"""
Hybrid Drivers
Iterated local search with simulated-annealing acceptance and a hybrid
genetic search with feasible / infeasible pools. Both take an edge selector
whose fixed edges filter every local-search and perturbation move.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Tuple
import math
import time
import unicodedata

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import SolverDefaults, settings, solver_defaults
from app.services.construction import greedy_route_estimate, greedy_split, savings_construct
from app.services.errors import InvalidInstanceError, UnknownVariantError
from app.services.instance import Instance
from app.services.labeling import Selector, ThresholdRule
from app.services.local_search import (
    CostModel, SimulatedAnnealing, TabuEdgeFilter, descend, perturb, route_minimize
)
from app.services.records import RunRecord, TrajectoryPoint
from app.services.selector_graph import GraphSelector, load_checkpoint
from app.services.selector_tabular import TabularSelector, load_tabular_model
from app.services.solution import EdgeSet, Solution, compute_gap
from app.utils.logging import logger

Callback = Callable[[Solution, int], None]
IMPROVEMENT_EPS = 1e-9


# ---------------------------------------------------------------------------
# Variants
# ---------------------------------------------------------------------------

class VariantConfig(BaseModel):
    """A named driver / selector / threshold combination"""
    model_config = ConfigDict(extra="forbid")

    name: str
    driver: Literal["ils", "hgs"] = "ils"
    selector: Literal["none", "gbt", "fnn", "convnet"] = "none"
    rule: Literal["deterministic", "stochastic"] = "deterministic"
    threshold: float = Field(default=0.8, gt=0, lt=1)
    acceptance: float = Field(default=0.9, ge=0, le=1)
    aspiration: float = Field(default=0.8, ge=0, le=1)
    gamma: Optional[int] = Field(default=None, ge=1)
    time_limit: Optional[float] = Field(default=None, gt=0)
    max_iterations: Optional[int] = Field(default=None, ge=0)
    seed: int = 0
    per_generation_relabel: bool = False
    model_path: Optional[str] = None

    def granularity(self, defaults: Optional[SolverDefaults] = None) -> int:
        """The variant's own gamma, else the configured granularity"""
        return self.gamma if self.gamma is not None else (defaults or solver_defaults).granularity

    def threshold_rule(self, defaults: Optional[SolverDefaults] = None) -> ThresholdRule:
        epsilon = (defaults or solver_defaults).threshold_epsilon
        return ThresholdRule(self.rule, self.threshold, epsilon=epsilon, acceptance=self.acceptance)

    def with_overrides(self, **overrides) -> "VariantConfig":
        """Copy with validated overrides; None values are ignored"""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return VariantConfig.model_validate(values)


def variant_table() -> List[VariantConfig]:
    return [
        VariantConfig(name="ils-baseline", driver="ils"),
        VariantConfig(name="ils-alpha", driver="ils", selector="gbt", threshold=0.8, aspiration=0.8),
        VariantConfig(name="ils-beta", driver="ils", selector="gbt", rule="stochastic",
                      threshold=0.8, acceptance=0.9, aspiration=0.8),
        VariantConfig(name="ils-gamma", driver="ils", selector="fnn", threshold=0.8, aspiration=0.8),
        VariantConfig(name="ils-delta", driver="ils", selector="fnn", rule="stochastic",
                      threshold=0.8, acceptance=0.75, aspiration=0.8),
        VariantConfig(name="ils-mu-x", driver="ils", selector="convnet", threshold=0.8, aspiration=0.6),
        VariantConfig(name="ils-mu-b", driver="ils", selector="convnet", threshold=0.75, aspiration=0.8),
        VariantConfig(name="hgs-baseline", driver="hgs"),
        VariantConfig(name="hgs-mu", driver="hgs", selector="convnet", threshold=0.75, aspiration=0.7),
        VariantConfig(name="hgs-mu-large", driver="hgs", selector="convnet", threshold=0.85, aspiration=0.7),
        VariantConfig(name="hgs-tw-baseline", driver="hgs"),
        VariantConfig(name="hgs-tw-mu", driver="hgs", selector="convnet", threshold=0.85, aspiration=0.6),
    ]


_GREEK = {"α": "alpha", "β": "beta", "γ": "gamma", "δ": "delta", "μ": "mu", "µ": "mu"}
_ALIASES = {"ils-mu": "ils-mu-x", "ils": "ils-baseline", "hgs": "hgs-baseline", "hgs-tw": "hgs-tw-baseline"}
LARGE_INSTANCE_NODES = 500


def _normalize_name(name: str) -> str:
    key = unicodedata.normalize("NFC", name.strip()).lower().replace("_", "-").replace(" ", "-")
    for letter, word in _GREEK.items():
        key = key.replace(letter, word)
    for prefix in ("filo2", "filo"):
        if key.startswith(prefix):
            key = "ils" + key[len(prefix):]
            break
    return _ALIASES.get(key, key)


def lookup_variant(name: str, n_nodes: Optional[int] = None) -> VariantConfig:
    """
    Case-insensitive preset lookup; Greek suffixes and FILO prefixes are accepted.
    hgs-mu resolves to its large-instance preset when n_nodes >= 500.
    """
    key = _normalize_name(name)
    if key == "hgs-mu" and n_nodes is not None and n_nodes >= LARGE_INSTANCE_NODES:
        key = "hgs-mu-large"
    for variant in variant_table():
        if variant.name == key:
            return variant
    raise UnknownVariantError(f"unknown variant '{name}'")


def load_selector(cfg: VariantConfig, model_dir: Optional[str] = None,
                  defaults: Optional[SolverDefaults] = None) -> Optional[Selector]:
    """Selector for a variant, reading its model from MODEL_DIR unless model_path is set"""
    if cfg.selector == "none":
        return None
    defaults = defaults or solver_defaults
    directory = Path(model_dir or settings.MODEL_DIR)
    if cfg.selector == "convnet":
        model = load_checkpoint(cfg.model_path or directory / "convnet.pt")
        return GraphSelector(model, threshold=cfg.threshold, depot_truncate=defaults.depot_truncate, name=cfg.name)
    model = load_tabular_model(cfg.model_path or directory / f"{cfg.selector}.npz")
    return TabularSelector(model, cfg.threshold_rule(defaults), gamma=cfg.granularity(defaults), name=cfg.name)


def _resolve_selector(cfg: VariantConfig, selector: Optional[Selector],
                      defaults: SolverDefaults) -> Optional[Selector]:
    if selector is not None or cfg.selector == "none":
        return selector
    return load_selector(cfg, defaults=defaults)


def _label(selector: Optional[Selector], reference: Solution, cfg: VariantConfig,
           rng: np.random.Generator, reason: str) -> Optional[TabuEdgeFilter]:
    if selector is None:
        return None
    labeling = selector.label(reference, rng)
    logger.debug("relabelled", reason=reason, fixed=labeling.n_fixed, edges=len(labeling.edges))
    return labeling.tabu_filter(cfg.aspiration, rng)


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------

class RunTracker:
    """Stopping rule and best-so-far trajectory of one run"""

    def __init__(self, instance: Instance, cfg: VariantConfig, bks: Optional[float],
                 defaults: SolverDefaults):
        self.instance = instance
        self.cfg = cfg
        self.bks = bks
        if cfg.time_limit is not None:
            self.time_limit = cfg.time_limit
        elif cfg.max_iterations is not None:
            self.time_limit = None
        else:
            self.time_limit = defaults.time_limit(instance.n_nodes)
        self.started = time.perf_counter()
        self.best_cost = math.inf
        self.iterations = 0
        self.trajectory: List[TrajectoryPoint] = []

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    def gap(self, cost: float) -> Optional[float]:
        return compute_gap(cost, self.bks) if self.bks else None

    def expired(self, iteration: int) -> bool:
        self.iterations = iteration
        if self.cfg.max_iterations is not None and iteration >= self.cfg.max_iterations:
            return True
        return self.time_limit is not None and self.elapsed >= self.time_limit

    def observe(self, solution: Solution, iteration: int) -> bool:
        """Record a feasible solution that beats the best so far"""
        if not solution.is_feasible() or solution.cost >= self.best_cost - IMPROVEMENT_EPS:
            return False
        self.best_cost = solution.cost
        point = TrajectoryPoint(elapsed=self.elapsed, iteration=iteration, cost=float(solution.cost),
                                gap=self.gap(solution.cost))
        self.trajectory.append(point)
        logger.debug("new_best", instance=self.instance.name, variant=self.cfg.name,
                     elapsed=round(point.elapsed, 3), cost=point.cost, gap=point.gap)
        return True

    def record(self, final: Solution, best: Solution) -> RunRecord:
        return RunRecord(
            instance=self.instance.name,
            variant=self.cfg.name,
            seed=self.cfg.seed,
            final_cost=float(final.cost),
            best_cost=float(best.cost),
            gap=self.gap(best.cost),
            elapsed=self.elapsed,
            iterations=self.iterations,
            n_routes=best.n_routes,
            n_customers=self.instance.n_customers,
            customer_distribution=self.instance.customer_distribution.value,
            trajectory=list(self.trajectory),
        )


def _changed_nodes(before: Solution, after: Solution) -> List[int]:
    """Customers incident to an edge present in exactly one of the two solutions"""
    old, new = EdgeSet.from_solution(before).distinct(), EdgeSet.from_solution(after).distinct()
    return sorted({x for e in old ^ new for x in e if x != 0})


# ---------------------------------------------------------------------------
# Iterated local search
# ---------------------------------------------------------------------------

def _ils_start(instance: Instance, start: Solution, cfg: VariantConfig, selector: Optional[Selector],
               rng: np.random.Generator, gamma: int, reason: str) -> Tuple[Solution, Optional[TabuEdgeFilter]]:
    tabu = _label(selector, start, cfg, rng, reason)
    estimate = greedy_route_estimate(instance)
    if start.n_routes > estimate:
        start = route_minimize(start, estimate, tabu)
    return descend(start, tabu, gamma=gamma, rng=rng), tabu


def run_hybrid_ils(
    instance: Instance,
    cfg: VariantConfig,
    selector: Optional[Selector] = None,
    bks: Optional[float] = None,
    defaults: Optional[SolverDefaults] = None,
    callback: Optional[Callback] = None
) -> Tuple[Solution, RunRecord]:
    """
    Savings construction, edge labeling, route minimisation, then perturbation
    and filtered descent under simulated-annealing acceptance. After
    `restart_after` iterations without improvement the run restarts from a
    randomised construction and relabels it.

    Args:
        instance: CVRP instance
        cfg: Variant; selector "none" disables filtering
        selector: Overrides the selector loaded for cfg
        bks: Best-known cost for gap reporting
        defaults: Solver constants
        callback: Called with every accepted current solution and its iteration

    Returns:
        (best solution, run record)
    """
    if instance.is_timed:
        raise InvalidInstanceError("the iterated local search driver handles CVRP instances only")
    defaults = defaults or solver_defaults
    instance.configure_oracle(defaults)
    gamma = cfg.granularity(defaults)
    rng = np.random.default_rng(cfg.seed)
    selector = _resolve_selector(cfg, selector, defaults)
    tracker = RunTracker(instance, cfg, bks, defaults)

    constructed = savings_construct(instance, restricted=True, gamma=gamma)
    current, tabu = _ils_start(instance, constructed, cfg, selector, rng, gamma, "start")
    best = current
    tracker.observe(best, 0)
    annealing = SimulatedAnnealing.for_solution(current, defaults)
    iteration = stall = 0

    while not tracker.expired(iteration):
        iteration += 1
        candidate = perturb(current, tabu, rng, defaults.perturbation_strength, gamma=gamma)
        nodes = _changed_nodes(current, candidate)
        if nodes:
            candidate = descend(candidate, tabu, gamma=gamma, rng=rng, nodes=nodes)
        if annealing.accept(candidate.cost - current.cost, rng):
            current = candidate
            annealing.cool()
            if callback is not None:
                callback(current, iteration)
        if candidate.cost < best.cost - IMPROVEMENT_EPS:
            best = candidate
            stall = 0
            tracker.observe(best, iteration)
        else:
            stall += 1
        if stall >= defaults.restart_after:
            restart = savings_construct(instance, rng=rng, noise=0.1)
            current, tabu = _ils_start(instance, restart, cfg, selector, rng, gamma, "restart")
            annealing = SimulatedAnnealing.for_solution(current, defaults)
            stall = 0
            if callback is not None:
                callback(current, iteration)
            if current.cost < best.cost - IMPROVEMENT_EPS:
                best = current
                tracker.observe(best, iteration)

    record = tracker.record(current, best)
    logger.info("run_complete", driver="ils", instance=instance.name, variant=cfg.name,
                cost=record.best_cost, gap=record.gap, iterations=iteration)
    return best, record


# ---------------------------------------------------------------------------
# Hybrid genetic search
# ---------------------------------------------------------------------------

def broken_pairs_distance(a: frozenset, b: frozenset) -> float:
    """Share of the edges of `a` missing from `b`"""
    if not a:
        return 0.0
    return len(a - b) / len(a)


def order_crossover(first: List[int], second: List[int], rng: np.random.Generator) -> List[int]:
    """OX: keep a slice of the first tour, fill the rest in the second tour's order"""
    n = len(first)
    if n < 2:
        return list(first)
    i, j = sorted(int(x) for x in rng.choice(n, size=2, replace=False))
    child: List[Optional[int]] = [None] * n
    child[i:j + 1] = first[i:j + 1]
    used = set(first[i:j + 1])
    rotation = [(j + 1 + k) % n for k in range(n)]
    fill = [second[p] for p in rotation if second[p] not in used]
    slots = [p for p in rotation if child[p] is None]
    for slot, c in zip(slots, fill):
        child[slot] = c
    return child


@dataclass
class Individual:
    solution: Solution
    penalized_cost: float
    edges: frozenset = field(init=False)
    fitness: float = 0.0

    def __post_init__(self):
        self.edges = frozenset(EdgeSet.from_solution(self.solution).distinct())

    @property
    def feasible(self) -> bool:
        return self.solution.is_feasible()


class Population:
    """
    Feasible and infeasible pools ranked by biased fitness (cost rank plus
    diversity rank). A pool is pruned back to `size` survivors as soon as it
    exceeds size + generation_size.
    """

    def __init__(self, size: int, generation_size: int, n_close: int, n_elite: int):
        self.size = size
        self.generation_size = generation_size
        self.n_close = n_close
        self.n_elite = n_elite
        self.feasible: List[Individual] = []
        self.infeasible: List[Individual] = []

    def __len__(self) -> int:
        return len(self.feasible) + len(self.infeasible)

    @property
    def max_pool_size(self) -> int:
        return self.size + self.generation_size

    def add(self, individual: Individual):
        pool = self.feasible if individual.feasible else self.infeasible
        pool.append(individual)
        if len(pool) > self.max_pool_size:
            self._prune(pool)
        else:
            self._update_fitness(pool)

    def _diversity(self, pool: List[Individual]) -> List[float]:
        scores = []
        for ind in pool:
            dists = sorted(broken_pairs_distance(ind.edges, other.edges) for other in pool if other is not ind)
            close = dists[:self.n_close]
            scores.append(sum(close) / len(close) if close else 0.0)
        return scores

    def _update_fitness(self, pool: List[Individual]):
        n = len(pool)
        if n == 1:
            pool[0].fitness = 0.0
            return
        diversity = self._diversity(pool)
        by_cost = sorted(range(n), key=lambda k: pool[k].penalized_cost)
        by_diversity = sorted(range(n), key=lambda k: -diversity[k])
        cost_rank = {k: r for r, k in enumerate(by_cost)}
        div_rank = {k: r for r, k in enumerate(by_diversity)}
        elite_weight = max(0.0, 1.0 - self.n_elite / n)
        for k, ind in enumerate(pool):
            ind.fitness = cost_rank[k] / (n - 1) + elite_weight * div_rank[k] / (n - 1)

    def _prune(self, pool: List[Individual]):
        while len(pool) > self.size:
            clone = None
            for k, ind in enumerate(pool):
                if any(other.edges == ind.edges for other in pool[k + 1:]):
                    clone = k
                    break
            if clone is not None:
                pool.pop(clone)
                continue
            self._update_fitness(pool)
            worst = max(range(len(pool)), key=lambda k: pool[k].fitness)
            pool.pop(worst)
        self._update_fitness(pool)

    def refresh_costs(self, cost_model: CostModel):
        for pool in (self.feasible, self.infeasible):
            for ind in pool:
                ind.penalized_cost = cost_model.cost(ind.solution)
            if pool:
                self._update_fitness(pool)

    def tournament(self, rng: np.random.Generator) -> Individual:
        members = self.feasible + self.infeasible
        a = members[int(rng.integers(len(members)))]
        b = members[int(rng.integers(len(members)))]
        return a if a.fitness <= b.fitness else b

    def best_feasible(self) -> Optional[Individual]:
        if not self.feasible:
            return None
        return min(self.feasible, key=lambda ind: ind.solution.cost)

    def best(self) -> Individual:
        return self.best_feasible() or min(self.infeasible, key=lambda ind: ind.penalized_cost)

    def clear(self):
        self.feasible.clear()
        self.infeasible.clear()


def _initial_capacity_penalty(instance: Instance) -> float:
    matrix_scale = float(max(instance.distance(0, c) for c in instance.customers))
    max_demand = float(max(1, instance.demands[1:].max()))
    return min(1000.0, max(0.1, matrix_scale / max_demand))


class HybridGeneticSearch:
    """One population run; owns its RNG, penalties and selector state"""

    def __init__(self, instance: Instance, cfg: VariantConfig, selector: Optional[Selector],
                 bks: Optional[float], defaults: SolverDefaults, callback: Optional[Callback]):
        self.instance = instance
        self.cfg = cfg
        self.selector = selector
        self.defaults = defaults
        self.gamma = cfg.granularity(defaults)
        self.callback = callback
        self.rng = np.random.default_rng(cfg.seed)
        self.tracker = RunTracker(instance, cfg, bks, defaults)
        self.cost_model = CostModel(penalized=True, capacity_penalty=_initial_capacity_penalty(instance),
                                    tw_penalty=1.0)
        self.population = Population(defaults.population_size, defaults.generation_size,
                                     defaults.n_close, defaults.n_elite)
        self.tabu: Optional[TabuEdgeFilter] = None
        self.best: Optional[Solution] = None
        self.recent_feasible: List[bool] = []
        self.max_pool_seen = 0

    def educate(self, solution: Solution, cost_model: Optional[CostModel] = None) -> Solution:
        return descend(solution, self.tabu, gamma=self.gamma,
                       cost_model=cost_model or self.cost_model, rng=self.rng)

    def insert(self, solution: Solution, iteration: int) -> bool:
        """Add an individual; True when it improves the best feasible solution"""
        self.population.add(Individual(solution, self.cost_model.cost(solution)))
        self.max_pool_seen = max(self.max_pool_seen, len(self.population.feasible),
                                 len(self.population.infeasible))
        if self.callback is not None:
            self.callback(solution, iteration)
        if solution.is_feasible() and (self.best is None or solution.cost < self.best.cost - IMPROVEMENT_EPS):
            self.best = solution
            self.tracker.observe(solution, iteration)
            return True
        return False

    def relabel(self, reason: str):
        reference = self.best if self.best is not None else self.population.best().solution
        self.tabu = _label(self.selector, reference, self.cfg, self.rng, reason)

    def seed_population(self, iteration: int):
        customers = list(self.instance.customers)
        for k in range(self.defaults.population_size):
            if k == 0:
                # the plain construction is feasible and enters as is
                start = savings_construct(self.instance)
                self.insert(start, iteration)
            elif k % 2:
                start = savings_construct(self.instance, rng=self.rng, noise=0.2)
            else:
                start = greedy_split(self.instance, [int(c) for c in self.rng.permutation(customers)])
            self.insert(self.educate(start), iteration)

    def regenerate(self, iteration: int):
        self.population.clear()
        if self.best is not None:
            self.insert(self.best, iteration)
        self.seed_population(iteration)
        self.relabel("regeneration")
        logger.debug("population_regenerated", instance=self.instance.name, iteration=iteration,
                     best=self.best.cost if self.best else None)

    def adjust_penalties(self):
        if not self.recent_feasible:
            return
        ratio = sum(self.recent_feasible) / len(self.recent_feasible)
        factor = self.defaults.penalty_factor
        if ratio < self.defaults.target_feasible_low:
            scale = factor
        elif ratio > self.defaults.target_feasible_high:
            scale = 1.0 / factor
        else:
            scale = 1.0
        if scale != 1.0:
            self.cost_model.capacity_penalty = min(1e5, max(0.1, self.cost_model.capacity_penalty * scale))
            if self.instance.is_timed:
                self.cost_model.tw_penalty = min(1e5, max(0.1, self.cost_model.tw_penalty * scale))
            self.population.refresh_costs(self.cost_model)
            logger.debug("penalty_adjusted", feasible_ratio=round(ratio, 3),
                         capacity_penalty=self.cost_model.capacity_penalty,
                         tw_penalty=self.cost_model.tw_penalty)
        self.recent_feasible.clear()

    def offspring(self, iteration: int) -> bool:
        first = self.population.tournament(self.rng)
        second = self.population.tournament(self.rng)
        tour = order_crossover(first.solution.giant_tour(), second.solution.giant_tour(), self.rng)
        child = self.educate(greedy_split(self.instance, tour))
        self.recent_feasible.append(child.is_feasible())
        improved = self.insert(child, iteration)
        if not child.is_feasible() and self.rng.random() < self.defaults.repair_probability:
            strict = CostModel(penalized=True, capacity_penalty=10 * self.cost_model.capacity_penalty,
                               tw_penalty=10 * self.cost_model.tw_penalty)
            repaired = self.educate(child, strict)
            if repaired.is_feasible():
                improved = self.insert(repaired, iteration) or improved
        return improved

    def run(self) -> Tuple[Solution, RunRecord]:
        self.seed_population(0)
        self.relabel("start")
        iteration = stall = 0
        while not self.tracker.expired(iteration):
            iteration += 1
            if self.cfg.per_generation_relabel:
                self.relabel("generation")
            if self.offspring(iteration):
                stall = 0
            else:
                stall += 1
            if iteration % self.defaults.penalty_adjust_every == 0:
                self.adjust_penalties()
            if stall >= self.defaults.stall_iterations:
                self.regenerate(iteration)
                stall = 0
        best = self.best if self.best is not None else self.population.best().solution
        record = self.tracker.record(best, best)
        logger.info("run_complete", driver="hgs", instance=self.instance.name, variant=self.cfg.name,
                    cost=record.best_cost, gap=record.gap, iterations=iteration,
                    feasible=best.is_feasible())
        return best, record


def run_hybrid_hgs(
    instance: Instance,
    cfg: VariantConfig,
    selector: Optional[Selector] = None,
    bks: Optional[float] = None,
    defaults: Optional[SolverDefaults] = None,
    callback: Optional[Callback] = None
) -> Tuple[Solution, RunRecord]:
    """
    Population search for CVRP and CVRPTW. The best feasible individual is
    the labeled reference; its fixed edges filter the education of every child.
    """
    defaults = defaults or solver_defaults
    instance.configure_oracle(defaults)
    search = HybridGeneticSearch(instance, cfg, _resolve_selector(cfg, selector, defaults), bks,
                                 defaults, callback)
    return search.run()


def run_variant(
    instance: Instance,
    cfg: VariantConfig,
    selector: Optional[Selector] = None,
    bks: Optional[float] = None,
    defaults: Optional[SolverDefaults] = None,
    callback: Optional[Callback] = None
) -> Tuple[Solution, RunRecord]:
    driver = run_hybrid_hgs if cfg.driver == "hgs" or instance.is_timed else run_hybrid_ils
    return driver(instance, cfg, selector, bks, defaults, callback)

