"""
Granular Local Search
Relocate, swap, 2-opt and 2-opt* over granular neighbourhoods, with the
tabu-edge filter and its aspiration override, descent or simulated-annealing
acceptance, perturbation and route minimisation.
"""
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple
import math

import numpy as np

from app.config import SolverDefaults, solver_defaults
from app.services.solution import (
    DEPOT, Edge, Route, Solution, canonical, route_edges, schedule
)
from app.utils.logging import logger

IMPROVEMENT_EPS = 1e-9


class MoveKind(str, Enum):
    RELOCATE = "relocate"
    SWAP = "swap"
    TWO_OPT = "two-opt"
    TWO_OPT_STAR = "two-opt-star"
    DOUBLE_BRIDGE = "double-bridge"
    SEGMENT = "segment-move"


ALL_KINDS: Tuple[MoveKind, ...] = (
    MoveKind.RELOCATE, MoveKind.SWAP, MoveKind.TWO_OPT, MoveKind.TWO_OPT_STAR
)


@dataclass(frozen=True)
class Move:
    """
    A candidate modification. removed/added are the net edge multisets, so
    delta = sum d(added) - sum d(removed) is the exact change in solution length.
    """
    kind: MoveKind
    u: int
    v: int
    removed: Tuple[Edge, ...]
    added: Tuple[Edge, ...]
    delta: float
    plan: Tuple = ()
    changes: Optional[Tuple[Tuple[int, Tuple[int, ...]], ...]] = None


class TabuEdgeFilter:
    """Fixed edges that moves may not remove, with probabilistic aspiration"""

    def __init__(
        self,
        fixed: Iterable[Edge] = (),
        aspiration: float = 1.0,
        rng: Optional[np.random.Generator] = None
    ):
        if not 0.0 <= aspiration <= 1.0:
            raise ValueError(f"aspiration probability must be in [0, 1], got {aspiration}")
        self.fixed = frozenset(canonical(i, j) for i, j in fixed)
        self.aspiration = aspiration
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.blocked_count = 0
        self.aspired_count = 0

    def __len__(self) -> int:
        return len(self.fixed)

    def touches(self, removed: Iterable[Edge]) -> bool:
        return any(e in self.fixed for e in removed)


def is_blocked(move: Move, tabu: Optional[TabuEdgeFilter]) -> Tuple[bool, bool]:
    """
    (blocked, aspired) for a move. A uniform draw happens only when the move
    removes a fixed edge; it is aspired (allowed) iff the draw exceeds the aspiration probability.
    """
    if tabu is None or not tabu.fixed or not tabu.touches(move.removed):
        return False, False
    tabu.blocked_count += 1
    aspired = bool(tabu.rng.random() > tabu.aspiration)
    if aspired:
        tabu.aspired_count += 1
    return True, aspired


@dataclass
class CostModel:
    """Hard feasibility, or linear penalties on capacity excess and time warp"""
    penalized: bool = False
    capacity_penalty: float = 1.0
    tw_penalty: float = 1.0

    def penalty(self, excess: float, warp: float) -> float:
        if not self.penalized:
            return 0.0
        return self.capacity_penalty * excess + self.tw_penalty * warp

    def cost(self, solution: Solution) -> float:
        return solution.cost + self.penalty(solution.total_excess(), solution.total_warp())

    def allows(self, load: int, warp: float, capacity: int) -> bool:
        return self.penalized or (load <= capacity and warp == 0.0)


@dataclass
class SimulatedAnnealing:
    """Metropolis acceptance with geometric cooling per accepted move"""
    temperature: float
    cooling: float = 0.999
    floor: float = 1e-6

    @classmethod
    def for_solution(cls, solution: Solution, defaults: SolverDefaults = None) -> "SimulatedAnnealing":
        defaults = defaults or solver_defaults
        t0 = defaults.sa_initial_factor * solution.cost / solution.instance.n_nodes
        return cls(temperature=max(t0, defaults.sa_floor), cooling=defaults.sa_cooling, floor=defaults.sa_floor)

    def accept(self, delta: float, rng: np.random.Generator) -> bool:
        if delta < 0:
            return True
        return bool(rng.random() < math.exp(-delta / self.temperature))

    def cool(self):
        self.temperature = max(self.floor, self.temperature * self.cooling)


# ---------------------------------------------------------------------------
# Move construction
# ---------------------------------------------------------------------------

def _make_move(solution: Solution, kind: MoveKind, u: int, v: int,
               removed: Sequence[Edge], added: Sequence[Edge], plan: Tuple = (),
               changes=None) -> Move:
    rem = Counter(canonical(i, j) for i, j in removed if not (i == DEPOT and j == DEPOT))
    add = Counter(canonical(i, j) for i, j in added if not (i == DEPOT and j == DEPOT))
    net_removed, net_added = rem - add, add - rem
    d = solution.instance.distance
    delta = sum(d(i, j) * m for (i, j), m in net_added.items()) \
        - sum(d(i, j) * m for (i, j), m in net_removed.items())
    return Move(
        kind=kind,
        u=u,
        v=v,
        removed=tuple(net_removed.elements()),
        added=tuple(net_added.elements()),
        delta=delta,
        plan=plan,
        changes=changes,
    )


def generic_move(solution: Solution, kind: MoveKind, changes: Dict[int, List[int]],
                 u: int = DEPOT, v: int = DEPOT) -> Move:
    """Move replacing whole routes (index == n_routes opens a new route); edges diffed route by route"""
    removed: List[Edge] = []
    added: List[Edge] = []
    for ri, customers in changes.items():
        if ri < solution.n_routes:
            removed += solution.routes[ri].edges()
        added += route_edges(customers)
    frozen = tuple(sorted((ri, tuple(c)) for ri, c in changes.items()))
    return _make_move(solution, kind, u, v, removed, added, changes=frozen)


def _neighbours_in_route(customers: List[int], p: int) -> Tuple[int, int]:
    pred = customers[p - 1] if p > 0 else DEPOT
    succ = customers[p + 1] if p + 1 < len(customers) else DEPOT
    return pred, succ


def _relocate_moves(solution, pos, u, v) -> Iterator[Move]:
    ru, pu = pos[u]
    route_u = solution.routes[ru].customers
    a, b = _neighbours_in_route(route_u, pu)
    alone = len(route_u) == 1
    removed_u = [(a, u), (u, b)]
    added_u = [] if alone else [(a, b)]

    if v == DEPOT:
        if not alone:
            yield _make_move(solution, MoveKind.RELOCATE, u, v, removed_u,
                             added_u + [(DEPOT, u), (u, DEPOT)], plan=(ru, pu, solution.n_routes, 0))
        return

    rv, pv = pos[v]
    route_v = solution.routes[rv].customers
    x, w = _neighbours_in_route(route_v, pv)
    # after v; a no-op when v already precedes u
    if not (rv == ru and pv == pu - 1):
        yield _make_move(solution, MoveKind.RELOCATE, u, v, removed_u + [(v, w)],
                         added_u + [(v, u), (u, w)], plan=(ru, pu, rv, pv + 1))
    # before v; a no-op when v already follows u
    if not (rv == ru and pv == pu + 1):
        yield _make_move(solution, MoveKind.RELOCATE, u, v, removed_u + [(x, v)],
                         added_u + [(x, u), (u, v)], plan=(ru, pu, rv, pv))


def _swap_moves(solution, pos, u, v) -> Iterator[Move]:
    if v == DEPOT or u == v:
        return
    ru, pu = pos[u]
    rv, pv = pos[v]
    route_u = solution.routes[ru].customers
    route_v = solution.routes[rv].customers
    a, b = _neighbours_in_route(route_u, pu)
    c, e = _neighbours_in_route(route_v, pv)
    if ru == rv and pv == pu + 1:
        removed, added = [(a, u), (v, e)], [(a, v), (u, e)]
    elif ru == rv and pu == pv + 1:
        removed, added = [(c, v), (u, b)], [(c, u), (v, b)]
    else:
        removed = [(a, u), (u, b), (c, v), (v, e)]
        added = [(a, v), (v, b), (c, u), (u, e)]
    yield _make_move(solution, MoveKind.SWAP, u, v, removed, added, plan=(ru, pu, rv, pv))


def _two_opt_moves(solution, pos, u, v) -> Iterator[Move]:
    if v == DEPOT:
        return
    ru, pu = pos[u]
    rv, pv = pos[v]
    if ru != rv:
        return
    customers = solution.routes[ru].customers
    i, j = min(pu, pv), max(pu, pv)
    if j <= i + 1:
        return
    p, q = customers[i], customers[j]
    b = customers[i + 1]
    e = customers[j + 1] if j + 1 < len(customers) else DEPOT
    yield _make_move(solution, MoveKind.TWO_OPT, u, v, [(p, b), (q, e)], [(p, q), (b, e)],
                     plan=(ru, i + 1, j + 1))
    a = customers[i - 1] if i > 0 else DEPOT
    x = customers[j - 1]
    yield _make_move(solution, MoveKind.TWO_OPT, u, v, [(a, p), (x, q)], [(a, x), (p, q)],
                     plan=(ru, i, j))


def _two_opt_star_moves(solution, pos, u, v) -> Iterator[Move]:
    if v == DEPOT:
        return
    ru, pu = pos[u]
    rv, pv = pos[v]
    if ru == rv:
        return
    r1 = solution.routes[ru].customers
    r2 = solution.routes[rv].customers
    s = r1[pu + 1] if pu + 1 < len(r1) else DEPOT
    x = r2[pv - 1] if pv > 0 else DEPOT
    e = r2[pv + 1] if pv + 1 < len(r2) else DEPOT
    # u -> v, tails exchanged
    yield _make_move(solution, MoveKind.TWO_OPT_STAR, u, v, [(u, s), (x, v)], [(u, v), (x, s)],
                     plan=(ru, pu, rv, pv, "tail"))
    # u -> v with the head of v's route reversed
    yield _make_move(solution, MoveKind.TWO_OPT_STAR, u, v, [(u, s), (v, e)], [(u, v), (s, e)],
                     plan=(ru, pu, rv, pv, "head"))


_GENERATORS = {
    MoveKind.RELOCATE: _relocate_moves,
    MoveKind.SWAP: _swap_moves,
    MoveKind.TWO_OPT: _two_opt_moves,
    MoveKind.TWO_OPT_STAR: _two_opt_star_moves,
}


def moves_for_pair(solution: Solution, pos, kind: MoveKind, u: int, v: int) -> Iterator[Move]:
    return _GENERATORS[kind](solution, pos, u, v)


def enumerate_moves(solution: Solution, kind: MoveKind, gamma: int) -> Iterator[Move]:
    """
    All moves of one kind over granular pairs (u, v) with v among u's gamma
    nearest nodes, in customer then rank order. Capacity is not checked here.
    """
    kind = MoveKind(kind)
    pos = solution.positions()
    oracle = solution.instance.oracle
    for u in solution.instance.customers:
        for v in oracle.neighbors(u, gamma):
            yield from _GENERATORS[kind](solution, pos, u, v)


def materialize(solution: Solution, move: Move) -> Dict[int, List[int]]:
    """New customer lists of the routes a move touches"""
    if move.changes is not None:
        return {ri: list(c) for ri, c in move.changes}
    routes = solution.routes
    if move.kind is MoveKind.RELOCATE:
        ru, pu, rv, k = move.plan
        u = move.u
        if ru == rv:
            lst = list(routes[ru].customers)
            lst.insert(k, u)
            del lst[pu if pu < k else pu + 1]
            return {ru: lst}
        source = routes[ru].customers[:pu] + routes[ru].customers[pu + 1:]
        target = [u] if rv == solution.n_routes else routes[rv].customers[:k] + [u] + routes[rv].customers[k:]
        return {ru: source, rv: target}
    if move.kind is MoveKind.SWAP:
        ru, pu, rv, pv = move.plan
        if ru == rv:
            lst = list(routes[ru].customers)
            lst[pu], lst[pv] = lst[pv], lst[pu]
            return {ru: lst}
        first, second = list(routes[ru].customers), list(routes[rv].customers)
        first[pu], second[pv] = move.v, move.u
        return {ru: first, rv: second}
    if move.kind is MoveKind.TWO_OPT:
        ru, i, j = move.plan
        c = routes[ru].customers
        return {ru: c[:i] + c[i:j][::-1] + c[j:]}
    if move.kind is MoveKind.TWO_OPT_STAR:
        ru, pu, rv, pv, variant = move.plan
        r1, r2 = routes[ru].customers, routes[rv].customers
        if variant == "tail":
            return {ru: r1[:pu + 1] + r2[pv:], rv: r2[:pv] + r1[pu + 1:]}
        return {ru: r1[:pu + 1] + r2[:pv + 1][::-1], rv: r1[pu + 1:][::-1] + r2[pv + 1:]}
    raise ValueError(f"cannot materialise move of kind {move.kind}")


def apply_changes(solution: Solution, changes: Dict[int, List[int]]) -> Solution:
    """Write new route lists in place and drop emptied routes"""
    for ri in sorted(changes):
        customers = changes[ri]
        if ri < solution.n_routes:
            route = solution.routes[ri]
            route.customers = list(customers)
            route.refresh()
        elif customers:
            solution.routes.append(Route(solution.instance, customers))
    return solution.normalize()


def apply_move(solution: Solution, move: Move) -> Solution:
    return apply_changes(solution, materialize(solution, move))


def _change_effect(solution: Solution, changes: Dict[int, List[int]], cost_model: CostModel) -> Tuple[bool, float]:
    """(allowed under the cost model, penalty delta)"""
    instance = solution.instance
    demands = instance.demands
    allowed = True
    penalty_delta = 0.0
    for ri, customers in changes.items():
        load = int(sum(demands[c] for c in customers))
        warp = schedule(instance, customers)[0] if instance.is_timed and customers else 0.0
        if not cost_model.allows(load, warp, instance.capacity):
            allowed = False
        if cost_model.penalized:
            old_excess = old_warp = 0.0
            if ri < solution.n_routes:
                old_excess, old_warp = solution.routes[ri].excess, solution.routes[ri].warp
            penalty_delta += cost_model.penalty(max(0, load - instance.capacity), warp) \
                - cost_model.penalty(old_excess, old_warp)
    return allowed, penalty_delta


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@dataclass
class LocalSearch:
    """
    First-improvement granular local search over one solution at a time.

    Neighbours are scanned in rank order; a move is applied when it improves
    the (possibly penalised) cost, is allowed by the cost model and is not
    blocked by the tabu filter.
    """
    gamma: int = field(default_factory=lambda: solver_defaults.granularity)
    kinds: Tuple[MoveKind, ...] = ALL_KINDS
    tabu: Optional[TabuEdgeFilter] = None
    cost_model: CostModel = field(default_factory=CostModel)
    record: bool = False
    trace: List[Move] = field(default_factory=list)

    def _attempt(self, solution: Solution, move: Move, annealing: Optional[SimulatedAnnealing] = None,
                 rng: Optional[np.random.Generator] = None) -> bool:
        penalized = self.cost_model.penalized
        if annealing is None:
            if penalized:
                slack = sum(
                    self.cost_model.penalty(solution.routes[ri].excess, solution.routes[ri].warp)
                    for ri in _touched_routes(solution, move)
                )
                if move.delta - slack >= -IMPROVEMENT_EPS:
                    return False
            elif move.delta >= -IMPROVEMENT_EPS:
                return False

        changes = materialize(solution, move)
        allowed, penalty_delta = _change_effect(solution, changes, self.cost_model)
        if not allowed:
            return False
        total = move.delta + penalty_delta
        if annealing is None:
            if total >= -IMPROVEMENT_EPS:
                return False
        elif not annealing.accept(total, rng):
            return False

        blocked, aspired = is_blocked(move, self.tabu)
        if blocked and not aspired:
            return False

        apply_changes(solution, changes)
        if self.record:
            self.trace.append(move)
        return True

    def _improve_node(self, solution: Solution, u: int) -> Optional[Move]:
        oracle = solution.instance.oracle
        pos = solution.positions()
        for v in oracle.neighbors(u, self.gamma):
            for kind in self.kinds:
                for move in _GENERATORS[kind](solution, pos, u, v):
                    if self._attempt(solution, move):
                        return move
        return None

    def descend(self, solution: Solution, rng: Optional[np.random.Generator] = None,
                nodes: Optional[Iterable[int]] = None) -> Solution:
        """
        Local optimum reachable by first-improvement descent; the input is not
        modified. With `nodes`, only those customers are scanned at first and
        the endpoints of every applied move are queued again.
        """
        current = solution.copy()
        if self.gamma <= 0 or not self.kinds:
            return current
        if nodes is not None:
            return self._descend_from(current, nodes, rng)
        customers = list(solution.instance.customers)
        improved = True
        while improved:
            improved = False
            order = customers if rng is None else [int(c) for c in rng.permutation(customers)]
            for u in order:
                while self._improve_node(current, u):
                    improved = True
        return current

    def _descend_from(self, current: Solution, nodes: Iterable[int],
                      rng: Optional[np.random.Generator]) -> Solution:
        queue = sorted({int(u) for u in nodes if u != DEPOT})
        if rng is not None:
            queue = [int(u) for u in rng.permutation(queue)]
        queued = set(queue)
        while queue:
            u = queue.pop()
            queued.discard(u)
            move = self._improve_node(current, u)
            if move is None:
                continue
            touched = {u, move.v} | {x for e in move.removed + move.added for x in e}
            for x in sorted(touched - queued - {DEPOT}):
                queue.append(x)
                queued.add(x)
        return current

    def anneal(self, solution: Solution, annealing: SimulatedAnnealing, rng: np.random.Generator,
               steps: Optional[int] = None) -> Solution:
        """
        Random granular walk under Metropolis acceptance followed by a descent
        polish of the best solution seen
        """
        current = solution.copy()
        best, best_cost = current.copy(), self.cost_model.cost(current)
        if self.gamma <= 0 or not self.kinds:
            return best
        instance = solution.instance
        steps = steps if steps is not None else 20 * instance.n_customers
        oracle = instance.oracle
        for _ in range(steps):
            u = int(rng.integers(1, instance.n_nodes))
            neighbours = oracle.neighbors(u, self.gamma)
            if not neighbours:
                continue
            v = neighbours[int(rng.integers(len(neighbours)))]
            kind = self.kinds[int(rng.integers(len(self.kinds)))]
            moves = list(_GENERATORS[kind](current, current.positions(), u, v))
            if not moves:
                continue
            move = moves[int(rng.integers(len(moves)))]
            if self._attempt(current, move, annealing=annealing, rng=rng):
                annealing.cool()
                cost = self.cost_model.cost(current)
                if cost < best_cost - IMPROVEMENT_EPS:
                    best, best_cost = current.copy(), cost
        return self.descend(best, rng)


def _touched_routes(solution: Solution, move: Move) -> List[int]:
    if move.changes is not None:
        return [ri for ri, _ in move.changes if ri < solution.n_routes]
    if move.kind is MoveKind.TWO_OPT:
        return [move.plan[0]]
    touched = {move.plan[0], move.plan[2]}
    return [ri for ri in touched if ri < solution.n_routes]


def descend(
    solution: Solution,
    tabu: Optional[TabuEdgeFilter] = None,
    kinds: Sequence[MoveKind] = ALL_KINDS,
    gamma: Optional[int] = None,
    annealing: Optional[SimulatedAnnealing] = None,
    cost_model: Optional[CostModel] = None,
    rng: Optional[np.random.Generator] = None,
    steps: Optional[int] = None,
    nodes: Optional[Iterable[int]] = None
) -> Solution:
    """
    Improve a solution with the granular local search

    Args:
        solution: Starting solution (left untouched)
        tabu: Fixed-edge filter; None disables filtering
        kinds: Enabled move kinds
        gamma: Granularity; defaults to the configured granularity
        annealing: Simulated-annealing schedule; None means pure descent
        cost_model: Hard feasibility (default) or penalised costs
        rng: Scan-order and Metropolis randomness
        steps: Walk length under annealing
        nodes: Restrict pure descent to these customers and the ones its moves touch

    Returns:
        The improved solution
    """
    engine = LocalSearch(
        gamma=solver_defaults.granularity if gamma is None else gamma,
        kinds=tuple(MoveKind(k) for k in kinds),
        tabu=tabu,
        cost_model=cost_model or CostModel(),
    )
    if annealing is None:
        return engine.descend(solution, rng, nodes)
    return engine.anneal(solution, annealing, rng if rng is not None else np.random.default_rng(0), steps)


# ---------------------------------------------------------------------------
# Perturbation and route minimisation
# ---------------------------------------------------------------------------

def _double_bridge(solution: Solution, rng: np.random.Generator) -> Optional[Dict[int, List[int]]]:
    candidates = [ri for ri, r in enumerate(solution.routes) if len(r) >= 3]
    if not candidates:
        return None
    ri = candidates[int(rng.integers(len(candidates)))]
    c = solution.routes[ri].customers
    i, j, k = sorted(int(x) for x in rng.choice(len(c) + 1, size=3, replace=False))
    return {ri: c[:i] + c[j:k] + c[i:j] + c[k:]}


def _segment_move(solution: Solution, rng: np.random.Generator, gamma: int) -> Optional[Dict[int, List[int]]]:
    if solution.n_routes < 2:
        return None
    r1 = int(rng.integers(solution.n_routes))
    source = solution.routes[r1].customers
    start = int(rng.integers(len(source)))
    length = int(rng.integers(1, min(3, len(source) - start) + 1))
    segment = source[start:start + length]
    pos = solution.positions()
    targets = [v for v in solution.instance.oracle.neighbors(segment[0], max(gamma, 1))
               if v != DEPOT and pos[v][0] != r1]
    if not targets:
        return None
    v = targets[int(rng.integers(len(targets)))]
    r2, pv = pos[v]
    if rng.random() < 0.5:
        segment = segment[::-1]
    dest = solution.routes[r2].customers
    return {
        r1: source[:start] + source[start + length:],
        r2: dest[:pv + 1] + segment + dest[pv + 1:],
    }


def perturb(
    solution: Solution,
    tabu: Optional[TabuEdgeFilter],
    rng: np.random.Generator,
    strength: Optional[int] = None,
    cost_model: Optional[CostModel] = None,
    gamma: Optional[int] = None,
    max_attempts: int = 50
) -> Solution:
    """
    Apply `strength` random double-bridge or segment moves. Each candidate
    goes through the tabu filter, so fixed edges survive unless aspiration fires.
    """
    strength = strength or solver_defaults.perturbation_strength
    gamma = solver_defaults.granularity if gamma is None else gamma
    cost_model = cost_model or CostModel()
    current = solution.copy()
    applied = attempts = 0
    while applied < strength and attempts < strength * max_attempts:
        attempts += 1
        if rng.random() < 0.5:
            kind, changes = MoveKind.DOUBLE_BRIDGE, _double_bridge(current, rng)
        else:
            kind, changes = MoveKind.SEGMENT, _segment_move(current, rng, gamma)
        if not changes:
            continue
        move = generic_move(current, kind, changes)
        if not move.removed:
            continue
        allowed, _ = _change_effect(current, changes, cost_model)
        if not allowed:
            continue
        blocked, aspired = is_blocked(move, tabu)
        if blocked and not aspired:
            continue
        apply_changes(current, changes)
        applied += 1
    return current


def _cheapest_insertion(solution: Solution, u: int, skip_route: int, tabu, cost_model) -> Optional[Move]:
    pos = solution.positions()
    ru, pu = pos[u]
    route_u = solution.routes[ru].customers
    a, b = _neighbours_in_route(route_u, pu)
    removed_u = [(a, u), (u, b)]
    added_u = [] if len(route_u) == 1 else [(a, b)]
    best: Optional[Move] = None
    for rv, route in enumerate(solution.routes):
        if rv == skip_route:
            continue
        customers = route.customers
        for k in range(len(customers) + 1):
            x = customers[k - 1] if k > 0 else DEPOT
            y = customers[k] if k < len(customers) else DEPOT
            move = _make_move(solution, MoveKind.RELOCATE, u, y, removed_u + [(x, y)],
                              added_u + [(x, u), (u, y)], plan=(ru, pu, rv, k))
            if best is not None and move.delta >= best.delta:
                continue
            allowed, _ = _change_effect(solution, materialize(solution, move), cost_model)
            if not allowed:
                continue
            if tabu is not None and tabu.touches(move.removed):
                continue
            best = move
    return best


def route_minimize(
    solution: Solution,
    target: int,
    tabu: Optional[TabuEdgeFilter] = None,
    cost_model: Optional[CostModel] = None
) -> Solution:
    """
    Empty the smallest-load routes by cheapest feasible relocations until the
    route count reaches `target` or no route can be emptied. Relocations that
    remove a fixed edge go through the tabu filter.
    """
    cost_model = cost_model or CostModel()
    current = solution.copy()
    while current.n_routes > target:
        order = sorted(range(current.n_routes), key=lambda ri: (current.routes[ri].load, ri))
        emptied = False
        for ri in order:
            trial = current.copy()
            route = trial.routes[ri]
            success = True
            for u in list(route.customers):
                index = trial.routes.index(route)
                move = _cheapest_insertion(trial, u, index, None, cost_model)
                if move is not None and tabu is not None and tabu.touches(move.removed):
                    blocked, aspired = is_blocked(move, tabu)
                    if blocked and not aspired:
                        move = _cheapest_insertion(trial, u, index, tabu, cost_model)
                if move is None:
                    success = False
                    break
                apply_move(trial, move)
            if success:
                current = trial
                emptied = True
                break
        if not emptied:
            break
    logger.debug("route_min_complete", routes=current.n_routes, target=target, cost=current.cost)
    return current
