"""
Solution Model
Routes, solutions, from-scratch evaluation, the undirected edge-multiset view
and the gap metric.
"""
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import vrplib

from app.services.errors import EdgeSelectorError
from app.services.instance import Instance
from app.utils.logging import logger

Edge = Tuple[int, int]
DEPOT = 0


def canonical(i: int, j: int) -> Edge:
    """Undirected edge key (min id, max id)"""
    return (i, j) if i <= j else (j, i)


def route_edges(customers: Sequence[int]) -> List[Edge]:
    """Edges of a depot-to-depot path over the customers, depot legs included"""
    if not customers:
        return []
    path = [DEPOT, *customers, DEPOT]
    return [canonical(a, b) for a, b in zip(path, path[1:])]


def path_length(instance: Instance, customers: Sequence[int]) -> Union[int, float]:
    if not customers:
        return 0
    d = instance.distance
    total = d(DEPOT, customers[0]) + d(customers[-1], DEPOT)
    for a, b in zip(customers, customers[1:]):
        total += d(a, b)
    return total


def schedule(instance: Instance, customers: Sequence[int]) -> Tuple[float, bool]:
    """
    Forward time sweep of a route with waiting allowed

    Returns:
        (time warp, feasible) where time warp sums lateness past each window
        close (the clock is reset to the close time after a late arrival) and
        feasible means no lateness anywhere, return to depot included
    """
    nodes = instance.nodes
    depot = nodes[DEPOT]
    clock = depot.tw_open
    warp = 0.0
    prev = DEPOT
    for c in [*customers, DEPOT]:
        node = nodes[c]
        clock = max(node.tw_open, clock + (nodes[prev].service_time or 0.0) + instance.distance(prev, c))
        if clock > node.tw_close:
            warp += clock - node.tw_close
            clock = node.tw_close
        prev = c
    return warp, warp == 0.0


class Route:
    """Customer sequence with the depot implicit at both ends; caches load, length and time warp"""

    __slots__ = ("instance", "customers", "load", "length", "warp")

    def __init__(self, instance: Instance, customers: Iterable[int]):
        self.instance = instance
        self.customers: List[int] = list(customers)
        self.refresh()

    def refresh(self):
        demands = self.instance.demands
        self.load = int(sum(demands[c] for c in self.customers))
        self.length = path_length(self.instance, self.customers)
        self.warp = schedule(self.instance, self.customers)[0] if self.instance.is_timed else 0.0

    @property
    def tw_ok(self) -> bool:
        return self.warp == 0.0

    @property
    def excess(self) -> int:
        return max(0, self.load - self.instance.capacity)

    def edges(self) -> List[Edge]:
        return route_edges(self.customers)

    def copy(self) -> "Route":
        clone = Route.__new__(Route)
        clone.instance = self.instance
        clone.customers = list(self.customers)
        clone.load, clone.length, clone.warp = self.load, self.length, self.warp
        return clone

    def __len__(self) -> int:
        return len(self.customers)

    def __iter__(self) -> Iterator[int]:
        return iter(self.customers)

    def __repr__(self) -> str:
        return f"Route({self.customers}, load={self.load}, length={self.length})"


class Solution:
    """Ordered routes over one instance; empty routes are dropped on construction and normalize()"""

    def __init__(self, instance: Instance, routes: Iterable[Union[Route, Sequence[int]]] = ()):
        self.instance = instance
        self.routes: List[Route] = []
        for r in routes:
            route = r.copy() if isinstance(r, Route) else Route(instance, r)
            if route.customers:
                self.routes.append(route)

    @property
    def cost(self) -> Union[int, float]:
        return sum(r.length for r in self.routes)

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    def normalize(self) -> "Solution":
        self.routes = [r for r in self.routes if r.customers]
        return self

    def copy(self) -> "Solution":
        clone = Solution(self.instance)
        clone.routes = [r.copy() for r in self.routes]
        return clone

    def route_lists(self) -> List[List[int]]:
        return [list(r.customers) for r in self.routes]

    def positions(self) -> Dict[int, Tuple[int, int]]:
        """customer -> (route index, position in route)"""
        return {c: (ri, pi) for ri, r in enumerate(self.routes) for pi, c in enumerate(r.customers)}

    def giant_tour(self) -> List[int]:
        return [c for r in self.routes for c in r.customers]

    def canonical_routes(self) -> List[Tuple[int, ...]]:
        """Route multiset independent of route order and travel direction"""
        keyed = [tuple(r.customers) if r.customers[0] <= r.customers[-1] else tuple(reversed(r.customers))
                 for r in self.routes]
        return sorted(keyed)

    def total_excess(self) -> int:
        return sum(r.excess for r in self.routes)

    def total_warp(self) -> float:
        return sum(r.warp for r in self.routes)

    def is_feasible(self) -> bool:
        return evaluate(self).feasible

    def __repr__(self) -> str:
        return f"Solution(routes={self.n_routes}, cost={self.cost})"


class EdgeSet:
    """
    Multiset of undirected edges. A single-customer route contributes its
    depot edge twice, so len() equals the number of route legs.
    """

    def __init__(self, edges: Iterable[Edge] = ()):
        self._counts: Counter = Counter(canonical(i, j) for i, j in edges)

    @classmethod
    def from_solution(cls, solution: Solution) -> "EdgeSet":
        return cls(e for r in solution.routes for e in r.edges())

    def __contains__(self, edge: Edge) -> bool:
        return self._counts.get(canonical(*edge), 0) > 0

    def __len__(self) -> int:
        return sum(self._counts.values())

    def __iter__(self) -> Iterator[Edge]:
        return self._counts.elements()

    def __eq__(self, other) -> bool:
        return isinstance(other, EdgeSet) and self._counts == other._counts

    def multiplicity(self, edge: Edge) -> int:
        return self._counts.get(canonical(*edge), 0)

    def distinct(self) -> set:
        return set(self._counts)

    def customer_edges(self) -> "EdgeSet":
        """Edges between two customers (depot-incident edges excluded)"""
        return EdgeSet(e for e in self if DEPOT not in e)

    def cost(self, instance: Instance) -> Union[int, float]:
        return sum(instance.distance(i, j) * m for (i, j), m in self._counts.items())

    def __repr__(self) -> str:
        return f"EdgeSet({len(self)} edges)"


@dataclass(frozen=True)
class Violation:
    kind: str  # capacity | time_window | duplicate | missing | invalid
    detail: str
    route: Optional[int] = None


@dataclass(frozen=True)
class Evaluation:
    cost: Union[int, float]
    feasible: bool
    violations: Tuple[Violation, ...] = field(default_factory=tuple)


def evaluate(solution: Solution) -> Evaluation:
    """Recompute cost and feasibility from the raw customer sequences, ignoring caches"""
    instance = solution.instance
    violations: List[Violation] = []
    seen: Counter = Counter()
    cost = 0

    for index, route in enumerate(solution.routes):
        customers = route.customers
        invalid = [c for c in customers if not 1 <= c < instance.n_nodes]
        if invalid:
            violations.append(Violation("invalid", f"unknown customer ids {invalid}", index))
            continue
        seen.update(customers)
        cost += path_length(instance, customers)
        load = sum(instance.nodes[c].demand for c in customers)
        if load > instance.capacity:
            violations.append(Violation("capacity", f"load {load} exceeds capacity {instance.capacity}", index))
        if instance.is_timed and not tw_feasible(route):
            violations.append(Violation("time_window", "a window close is missed", index))

    for customer, count in sorted(seen.items()):
        if count > 1:
            violations.append(Violation("duplicate", f"customer {customer} visited {count} times"))
    missing = [c for c in instance.customers if c not in seen]
    if missing:
        violations.append(Violation("missing", f"customers never visited: {missing[:10]}"))

    return Evaluation(cost=cost, feasible=not violations, violations=tuple(violations))


def edges_of(solution: Solution) -> EdgeSet:
    """Undirected edges of every route, depot legs included"""
    return EdgeSet.from_solution(solution)


def compute_gap(obtained: float, bks: float) -> float:
    """Percentage deviation of an obtained cost from the best-known cost"""
    if bks <= 0:
        raise EdgeSelectorError(f"best-known cost must be positive, got {bks}")
    return (obtained - bks) / bks * 100.0


def tw_feasible(route: Route) -> bool:
    """True iff every window close (and the depot close on return) is met with waiting allowed"""
    if not route.instance.is_timed:
        return True
    return schedule(route.instance, route.customers)[1]


def time_warp(route: Route) -> float:
    """Total lateness of a route; 0 iff tw_feasible"""
    if not route.instance.is_timed:
        return 0.0
    return schedule(route.instance, route.customers)[0]


def write_solution(path: Union[str, Path], solution: Solution):
    """Write the 'Route #k: ...' + 'Cost' file"""
    vrplib.write_solution(str(path), solution.route_lists(), data={"Cost": solution.cost})
    logger.debug("solution_written", path=str(path), routes=solution.n_routes, cost=solution.cost)


def read_solution(path: Union[str, Path], instance: Instance) -> Solution:
    """Read a 'Route #k: ...' file into a Solution of the given instance"""
    try:
        parsed = vrplib.read_solution(str(path))
    except Exception as e:
        logger.error("solution_read_failed", path=str(path), error=str(e))
        raise EdgeSelectorError(f"cannot read solution file {path}: {e}")
    routes = [[int(c) for c in route] for route in parsed["routes"]]
    return Solution(instance, routes)
