"""
Edge labelings shared by every selector: per-edge probabilities, the
fixed/free decisions, threshold rules and precision against a reference.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Protocol, Set, runtime_checkable

import numpy as np
import pandas as pd

from app.config import solver_defaults
from app.services.errors import EdgeSelectorError
from app.services.local_search import TabuEdgeFilter
from app.services.solution import DEPOT, Edge, EdgeSet, Solution, canonical


@dataclass(frozen=True)
class ThresholdRule:
    """
    Deterministic: fix iff p > t.
    Stochastic: fix iff p > t + epsilon, or |p - t| < epsilon and a fresh
    uniform draw falls below the acceptance probability.
    """
    kind: Literal["deterministic", "stochastic"] = "deterministic"
    threshold: float = 0.8
    epsilon: float = field(default_factory=lambda: solver_defaults.threshold_epsilon)
    acceptance: float = 0.9

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic"):
            raise EdgeSelectorError(f"unknown threshold rule '{self.kind}'")
        if not 0.0 < self.threshold < 1.0:
            raise EdgeSelectorError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.epsilon <= 0:
            raise EdgeSelectorError("epsilon must be positive")
        if not 0.0 <= self.acceptance <= 1.0:
            raise EdgeSelectorError("acceptance probability must lie in [0, 1]")

    def describe(self) -> str:
        if self.kind == "deterministic":
            return f"deterministic(t={self.threshold})"
        return f"stochastic(t={self.threshold}, eps={self.epsilon}, p={self.acceptance})"


def apply_threshold(prob: float, rule: ThresholdRule, rng: Optional[np.random.Generator] = None) -> int:
    """Binary fixed/free decision for one probability"""
    if rule.kind == "deterministic":
        return int(prob > rule.threshold)
    if prob > rule.threshold + rule.epsilon:
        return 1
    if abs(prob - rule.threshold) < rule.epsilon:
        if rng is None:
            raise EdgeSelectorError("the stochastic threshold rule needs a random generator")
        return int(rng.random() < rule.acceptance)
    return 0


def solution_edges(solution: Solution) -> List[Edge]:
    """Distinct edges of a solution in route order"""
    seen: Dict[Edge, None] = {}
    for route in solution.routes:
        for edge in route.edges():
            seen.setdefault(edge, None)
    return list(seen)


@dataclass
class EdgeLabeling:
    """Per-edge probabilities and decisions over the distinct edges of one solution"""
    edges: List[Edge]
    probabilities: np.ndarray
    decisions: np.ndarray
    selector: str
    rule: str

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.decisions = np.asarray(self.decisions, dtype=np.int8)
        if not (len(self.edges) == len(self.probabilities) == len(self.decisions)):
            raise EdgeSelectorError("edges, probabilities and decisions must have equal length")
        self._index = {canonical(*e): k for k, e in enumerate(self.edges)}

    def fixed_edges(self) -> Set[Edge]:
        return {canonical(*e) for e, d in zip(self.edges, self.decisions) if d == 1}

    @property
    def n_fixed(self) -> int:
        return int(self.decisions.sum())

    def decision(self, edge: Edge) -> int:
        k = self._index.get(canonical(*edge))
        return 0 if k is None else int(self.decisions[k])

    def probability(self, edge: Edge) -> float:
        k = self._index.get(canonical(*edge))
        return 0.0 if k is None else float(self.probabilities[k])

    def tabu_filter(self, aspiration: float, rng: np.random.Generator) -> TabuEdgeFilter:
        return TabuEdgeFilter(self.fixed_edges(), aspiration=aspiration, rng=rng)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "i": [e[0] for e in self.edges],
            "j": [e[1] for e in self.edges],
            "probability": self.probabilities,
            "fixed": self.decisions.astype(int),
        })


def build_labeling(
    solution: Solution,
    probabilities: Dict[Edge, float],
    rule: ThresholdRule,
    selector: str,
    rng: Optional[np.random.Generator] = None,
    include_depot: bool = False
) -> EdgeLabeling:
    """
    Threshold probabilities over a solution's edges. Depot-incident edges get
    probability 0 and are never fixed unless include_depot is set.
    """
    edges = solution_edges(solution)
    probs = np.zeros(len(edges))
    decisions = np.zeros(len(edges), dtype=np.int8)
    for k, edge in enumerate(edges):
        if DEPOT in edge and not include_depot:
            continue
        probs[k] = probabilities.get(edge, 0.0)
        decisions[k] = apply_threshold(probs[k], rule, rng)
    return EdgeLabeling(edges=edges, probabilities=probs, decisions=decisions,
                        selector=selector, rule=rule.describe())


def precision(labeling: EdgeLabeling, truth: EdgeSet) -> Optional[float]:
    """TP / (TP + FP) of fixed edges against a reference edge set; None without positives"""
    fixed = labeling.fixed_edges()
    if not fixed:
        return None
    true_positives = sum(1 for e in fixed if e in truth)
    return true_positives / len(fixed)


@runtime_checkable
class Selector(Protocol):
    name: str

    def label(self, solution: Solution, rng: Optional[np.random.Generator] = None) -> EdgeLabeling:
        ...


class ConstantSelector:
    """Same probability for every edge; pins the extremes of the filtering mechanism"""

    def __init__(self, probability: float, rule: ThresholdRule = None, include_depot: bool = False):
        self.probability = probability
        self.rule = rule or ThresholdRule()
        self.include_depot = include_depot
        self.name = f"constant-{probability:g}"

    def label(self, solution: Solution, rng: Optional[np.random.Generator] = None) -> EdgeLabeling:
        probs = {e: self.probability for e in solution_edges(solution)}
        return build_labeling(solution, probs, self.rule, self.name, rng, include_depot=self.include_depot)
