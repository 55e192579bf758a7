"""
Construction heuristics
Clarke-Wright savings (optionally granular and randomised), sweep, greedy
giant-tour split and the greedy route-count estimate.
"""
from typing import Dict, List, Optional, Sequence, Tuple
import math

import numpy as np

from app.config import solver_defaults
from app.services.instance import Instance
from app.services.solution import DEPOT, Solution, schedule
from app.utils.logging import logger


def _tw_ok(instance: Instance, customers: Sequence[int]) -> bool:
    return not instance.is_timed or schedule(instance, customers)[1]


def savings_pairs(
    instance: Instance,
    restricted: bool = False,
    gamma: Optional[int] = None
) -> List[Tuple[float, int, int]]:
    """
    Candidate merges as (saving, i, j) with i < j, sorted by descending saving
    then lexicographic pair. Restricted lists only pairs where one customer is
    within the other's gamma nearest neighbours.
    """
    d = instance.distance
    customers = instance.customers
    if restricted:
        pairs = set()
        for i in customers:
            for j in instance.oracle.neighbors(i, gamma):
                if j != DEPOT:
                    pairs.add((min(i, j), max(i, j)))
    else:
        pairs = {(i, j) for i in customers for j in customers if i < j}
    scored = [(d(DEPOT, i) + d(DEPOT, j) - d(i, j), i, j) for i, j in pairs]
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    return scored


def savings_construct(
    instance: Instance,
    restricted: bool = False,
    gamma: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    noise: float = 0.0
) -> Solution:
    """
    Parallel Clarke-Wright savings

    Args:
        instance: CVRP or CVRPTW instance
        restricted: Only consider pairs inside granular neighbourhoods
        gamma: Neighbourhood size for the restricted variant
        rng: Source for multiplicative noise on saving values
        noise: Noise amplitude; savings are scaled by U(1 - noise, 1 + noise)

    Returns:
        Feasible solution; merges need a positive saving, capacity and, for
        CVRPTW, a time-window feasible orientation
    """
    if restricted and gamma is None:
        gamma = solver_defaults.granularity
    candidates = savings_pairs(instance, restricted, gamma)
    if rng is not None and noise > 0:
        factors = rng.uniform(1.0 - noise, 1.0 + noise, size=len(candidates))
        noisy = [(s * f, s, i, j) for (s, i, j), f in zip(candidates, factors)]
        noisy.sort(key=lambda t: (-t[0], t[2], t[3]))
        candidates = [(s, i, j) for _, s, i, j in noisy]

    demands = instance.demands
    routes: Dict[int, List[int]] = {c: [c] for c in instance.customers}
    loads: Dict[int, int] = {c: int(demands[c]) for c in instance.customers}
    owner: Dict[int, int] = {c: c for c in instance.customers}

    for saving, i, j in candidates:
        if saving <= 0:
            continue
        ri, rj = owner[i], owner[j]
        if ri == rj or loads[ri] + loads[rj] > instance.capacity:
            continue
        a, b = routes[ri], routes[rj]
        if i not in (a[0], a[-1]) or j not in (b[0], b[-1]):
            continue
        left = a if a[-1] == i else a[::-1]
        right = b if b[0] == j else b[::-1]
        merged = left + right
        if not _tw_ok(instance, merged):
            merged = merged[::-1]
            if not _tw_ok(instance, merged):
                continue
        routes[ri] = merged
        loads[ri] += loads.pop(rj)
        del routes[rj]
        for c in right:
            owner[c] = ri

    solution = Solution(instance, [routes[k] for k in sorted(routes)])
    logger.debug(
        "construction_complete",
        method="savings",
        restricted=restricted,
        routes=solution.n_routes,
        cost=solution.cost
    )
    return solution


def sweep_construct(instance: Instance) -> Solution:
    """
    Sweep heuristic: customers ordered by polar angle around the depot starting
    at customer 1, packed greedily into capacity (and time-window) feasible routes
    """
    depot = instance.depot
    angles = {
        c: math.atan2(instance.nodes[c].y - depot.y, instance.nodes[c].x - depot.x)
        for c in instance.customers
    }
    start = angles[1]
    order = sorted(instance.customers, key=lambda c: ((angles[c] - start) % (2 * math.pi), c))

    routes: List[List[int]] = []
    current: List[int] = []
    load = 0
    for c in order:
        q = int(instance.demands[c])
        if current and (load + q > instance.capacity or not _tw_ok(instance, current + [c])):
            routes.append(current)
            current, load = [], 0
        current.append(c)
        load += q
    if current:
        routes.append(current)

    solution = Solution(instance, routes)
    logger.debug("construction_complete", method="sweep", routes=solution.n_routes, cost=solution.cost)
    return solution


def greedy_split(instance: Instance, giant_tour: Sequence[int]) -> Solution:
    """Cut a giant tour into consecutive routes, opening a new route when capacity or windows break"""
    routes: List[List[int]] = []
    current: List[int] = []
    load = 0
    for c in giant_tour:
        q = int(instance.demands[c])
        if current and (load + q > instance.capacity or not _tw_ok(instance, current + [c])):
            routes.append(current)
            current, load = [], 0
        current.append(c)
        load += q
    if current:
        routes.append(current)
    return Solution(instance, routes)


def greedy_route_estimate(instance: Instance) -> int:
    """ceil(total demand / capacity)"""
    return max(1, math.ceil(instance.total_demand / instance.capacity))
