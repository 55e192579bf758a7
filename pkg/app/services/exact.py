"""
Exact solver for small CVRP instances

Held-Karp over every capacity-feasible customer subset gives the best single
route per subset; a second dynamic program partitions the customers into
routes. Exponential in the number of customers, so only for tiny instances
(used as the optimality oracle and as the training reference for n <= 10).
"""
from typing import Dict, List, Tuple

from app.services.errors import InvalidInstanceError
from app.services.instance import Instance
from app.services.solution import Solution
from app.utils.logging import logger

MAX_EXACT_CUSTOMERS = 12
INF = float("inf")


def _best_routes(instance: Instance) -> Tuple[Dict[int, float], Dict[int, List[int]]]:
    n = instance.n_customers
    d = [[instance.distance(i, j) for j in range(n + 1)] for i in range(n + 1)]
    demand = [int(q) for q in instance.demands[1:]]
    capacity = instance.capacity

    load = [0] * (1 << n)
    for mask in range(1, 1 << n):
        low = (mask & -mask).bit_length() - 1
        load[mask] = load[mask & (mask - 1)] + demand[low]

    # dp[mask][j]: cheapest depot -> ... -> customer j+1 path covering mask
    dp: Dict[int, List[float]] = {}
    parent: Dict[int, List[int]] = {}
    for j in range(n):
        dp[1 << j] = [INF] * n
        parent[1 << j] = [-1] * n
        dp[1 << j][j] = d[0][j + 1]

    for mask in range(1, 1 << n):
        if load[mask] > capacity or mask not in dp:
            continue
        row = dp[mask]
        for j in range(n):
            base = row[j]
            if base == INF:
                continue
            for k in range(n):
                if mask & (1 << k):
                    continue
                nxt = mask | (1 << k)
                if load[nxt] > capacity:
                    continue
                if nxt not in dp:
                    dp[nxt] = [INF] * n
                    parent[nxt] = [-1] * n
                value = base + d[j + 1][k + 1]
                if value < dp[nxt][k]:
                    dp[nxt][k] = value
                    parent[nxt][k] = j

    route_cost: Dict[int, float] = {}
    route_seq: Dict[int, List[int]] = {}
    for mask, row in dp.items():
        best, last = INF, -1
        for j in range(n):
            if row[j] < INF:
                value = row[j] + d[j + 1][0]
                if value < best:
                    best, last = value, j
        if last < 0:
            continue
        seq = []
        m, j = mask, last
        while j >= 0:
            seq.append(j + 1)
            prev = parent[m][j]
            m ^= 1 << j
            j = prev
        route_cost[mask] = best
        route_seq[mask] = seq[::-1]
    return route_cost, route_seq


def solve_exact(instance: Instance) -> Solution:
    """
    Optimal CVRP solution by subset dynamic programming

    Args:
        instance: CVRP instance with at most 12 customers

    Returns:
        An optimal Solution (ties broken deterministically)
    """
    if instance.is_timed:
        raise InvalidInstanceError("exact solver supports CVRP instances only")
    n = instance.n_customers
    if n > MAX_EXACT_CUSTOMERS:
        raise InvalidInstanceError(f"exact solver is limited to {MAX_EXACT_CUSTOMERS} customers, got {n}")

    route_cost, route_seq = _best_routes(instance)
    full = (1 << n) - 1
    best = {0: 0.0}
    choice: Dict[int, int] = {}
    for mask in range(1, full + 1):
        low = mask & -mask
        rest = mask ^ low
        value, pick = INF, 0
        # enumerate route subsets containing the lowest customer of mask
        sub = rest
        while True:
            route = sub | low
            cost = route_cost.get(route)
            if cost is not None:
                total = cost + best[mask ^ route]
                if total < value:
                    value, pick = total, route
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best[mask] = value
        choice[mask] = pick

    routes = []
    mask = full
    while mask:
        route = choice[mask]
        routes.append(route_seq[route])
        mask ^= route
    solution = Solution(instance, routes)
    logger.debug("exact_solved", instance=instance.name, customers=n, cost=solution.cost)
    return solution
