"""
Instance Model
CVRP / CVRPTW instances, the CVRPLIB and Solomon parsers, the desk-scale
instance generator and the distance oracle with its neighbour-rank table.
"""
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import math
import re
import threading

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from app.config import SolverDefaults, solver_defaults
from app.services.errors import InstanceParseError, InvalidInstanceError
from app.utils.logging import logger


class InstanceKind(str, Enum):
    CVRP = "CVRP"
    CVRPTW = "CVRPTW"


class DistanceMode(str, Enum):
    ROUNDED = "rounded-euclidean"
    EXACT = "exact-euclidean"


class CustomerDistribution(str, Enum):
    RANDOM = "R"
    CLUSTERED = "C"
    RANDOM_CLUSTERED = "RC"
    UNKNOWN = "unknown"


class DepotPosition(str, Enum):
    CENTRAL = "central"
    ECCENTRIC = "eccentric"
    RANDOM = "random"


class DemandProfile(str, Enum):
    UNIT = "unit"
    SMALL_LARGE_VARIANCE = "1-10"
    SMALL_SMALL_VARIANCE = "5-10"
    LARGE_LARGE_VARIANCE = "1-100"
    LARGE_SMALL_VARIANCE = "50-100"


SENTINEL_RANK = -1


@dataclass(frozen=True)
class Node:
    """A depot (id 0) or customer"""
    id: int
    x: float
    y: float
    demand: int = 0
    tw_open: Optional[float] = None
    tw_close: Optional[float] = None
    service_time: Optional[float] = None

    @property
    def has_time_window(self) -> bool:
        return self.tw_open is not None


class DistanceOracle:
    """
    Symmetric distances between nodes plus a k-nearest-neighbour rank table.

    The full matrix is cached only up to `cache_limit` nodes; larger instances
    compute distances on demand and build the rank table from a KD-tree.
    Ties in the rank table are broken by lower node id.

    Ranks beyond the table are computed per node on first use and cached under
    a lock, so one oracle can serve several threads. The lock is dropped when
    the oracle is pickled for worker processes.
    """

    def __init__(
        self,
        coords: np.ndarray,
        mode: DistanceMode = DistanceMode.ROUNDED,
        cache_limit: int = None,
        rank_size: int = None
    ):
        self.mode = DistanceMode(mode)
        self._coords = np.asarray(coords, dtype=np.float64)
        self.n_nodes = len(self._coords)
        self.cache_limit = cache_limit or solver_defaults.matrix_cache_limit
        self.rank_size = min(rank_size or solver_defaults.rank_table_size, max(self.n_nodes - 1, 0))

        self._matrix: Optional[np.ndarray] = None
        if self.n_nodes <= self.cache_limit:
            self._matrix = self._finish(cdist(self._coords, self._coords))

        self._table = self._build_rank_table()
        self._rank_of: List[Dict[int, int]] = [
            {int(j): r + 1 for r, j in enumerate(row)} for row in self._table
        ]
        self._full_rank_cache: Dict[int, Dict[int, int]] = {}
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _finish(self, raw: np.ndarray) -> np.ndarray:
        if self.mode is DistanceMode.ROUNDED:
            # nearest integer, halves rounded up (CVRPLIB nint)
            return np.floor(raw + 0.5).astype(np.int64)
        return raw

    @property
    def matrix(self) -> Optional[np.ndarray]:
        return self._matrix

    def distance(self, i: int, j: int):
        """Distance between nodes i and j (int in rounded mode, float otherwise)"""
        if self._matrix is not None:
            return self._matrix[i, j].item()
        if i == j:
            return 0 if self.mode is DistanceMode.ROUNDED else 0.0
        dx = self._coords[i, 0] - self._coords[j, 0]
        dy = self._coords[i, 1] - self._coords[j, 1]
        raw = math.hypot(dx, dy)
        if self.mode is DistanceMode.ROUNDED:
            return int(math.floor(raw + 0.5))
        return raw

    def row(self, i: int) -> np.ndarray:
        """Distances from node i to every node"""
        if self._matrix is not None:
            return self._matrix[i]
        return self._finish(np.hypot(*(self._coords - self._coords[i]).T))

    def _ranked_row(self, i: int, candidates: np.ndarray, dists: np.ndarray) -> np.ndarray:
        keep = candidates != i
        candidates, dists = candidates[keep], dists[keep]
        order = np.lexsort((candidates, dists))
        return candidates[order]

    def _build_rank_table(self) -> np.ndarray:
        k = self.rank_size
        if k == 0:
            return np.zeros((self.n_nodes, 0), dtype=np.int64)
        if self._matrix is not None:
            order = np.argsort(self._matrix, axis=1, kind="stable")
            ids = np.arange(self.n_nodes)
            off_diagonal = order != ids[:, None]
            order = order[off_diagonal].reshape(self.n_nodes, self.n_nodes - 1)
            return order[:, :k]

        # Query a margin beyond k so rounded-distance ties at the boundary still sort by id
        tree = cKDTree(self._coords)
        query_k = min(self.n_nodes, k + 1 + 16)
        _, neigh = tree.query(self._coords, k=query_k)
        table = np.empty((self.n_nodes, k), dtype=np.int64)
        for i in range(self.n_nodes):
            cand = np.asarray(neigh[i], dtype=np.int64)
            dists = np.array([self.distance(i, int(j)) for j in cand])
            table[i] = self._ranked_row(i, cand, dists)[:k]
        return table

    def _full_ranks(self, i: int) -> Dict[int, int]:
        with self._lock:
            ranks = self._full_rank_cache.get(i)
            if ranks is None:
                ids = np.arange(self.n_nodes)
                ordered = self._ranked_row(i, ids, self.row(i))
                ranks = {int(j): r + 1 for r, j in enumerate(ordered)}
                self._full_rank_cache[i] = ranks
        return ranks

    def neighbors(self, i: int, gamma: int) -> List[int]:
        """The gamma nearest nodes of i (depot included), nearest first"""
        if gamma <= self.rank_size:
            return [int(j) for j in self._table[i, :gamma]]
        ranks = self._full_ranks(i)
        return [j for j, r in sorted(ranks.items(), key=lambda kv: kv[1]) if r <= gamma]

    def neighbor_rank(self, i: int, j: int, gamma: int) -> int:
        """1-based rank of j among i's nearest nodes if within gamma, else -1"""
        if gamma <= self.rank_size:
            rank = self._rank_of[i].get(j)
        else:
            rank = self._full_ranks(i).get(j)
        if rank is None or rank > gamma:
            return SENTINEL_RANK
        return rank


@dataclass(frozen=True)
class Instance:
    """
    A CVRP or CVRPTW instance. Node 0 is the depot; customers are 1..N-1.
    Immutable after construction and safe to share between workers.
    """
    name: str
    capacity: int
    nodes: Tuple[Node, ...]
    kind: InstanceKind = InstanceKind.CVRP
    distance_mode: Optional[DistanceMode] = None
    customer_distribution: CustomerDistribution = CustomerDistribution.UNKNOWN
    vehicles: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "kind", InstanceKind(self.kind))
        if self.distance_mode is None:
            default = DistanceMode.EXACT if self.kind is InstanceKind.CVRPTW else DistanceMode.ROUNDED
            object.__setattr__(self, "distance_mode", default)
        else:
            object.__setattr__(self, "distance_mode", DistanceMode(self.distance_mode))
        self._validate()

    def _validate(self):
        if self.capacity <= 0:
            raise InvalidInstanceError(f"capacity must be positive, got {self.capacity}")
        if len(self.nodes) < 2:
            raise InvalidInstanceError("an instance needs a depot and at least one customer")
        timed = self.kind is InstanceKind.CVRPTW
        for index, node in enumerate(self.nodes):
            if node.id != index:
                raise InvalidInstanceError(f"node ids must be contiguous from 0, found {node.id} at {index}")
            if not (math.isfinite(node.x) and math.isfinite(node.y)):
                raise InvalidInstanceError(f"node {node.id} has non-finite coordinates")
            if node.demand < 0:
                raise InvalidInstanceError(f"node {node.id} has negative demand")
            if node.demand > self.capacity:
                raise InvalidInstanceError(
                    f"customer {node.id} demand {node.demand} exceeds capacity {self.capacity}"
                )
            if node.has_time_window != timed:
                raise InvalidInstanceError(f"node {node.id}: time windows must be present iff kind is CVRPTW")
            if timed and node.tw_open > node.tw_close:
                raise InvalidInstanceError(f"node {node.id}: window opens after it closes")
        if self.nodes[0].demand != 0:
            raise InvalidInstanceError("depot demand must be 0")

    @property
    def depot(self) -> Node:
        return self.nodes[0]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_customers(self) -> int:
        return len(self.nodes) - 1

    @property
    def customers(self) -> range:
        return range(1, len(self.nodes))

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([(n.x, n.y) for n in self.nodes], dtype=np.float64)

    @cached_property
    def demands(self) -> np.ndarray:
        return np.array([n.demand for n in self.nodes], dtype=np.int64)

    @cached_property
    def total_demand(self) -> int:
        return int(self.demands.sum())

    @cached_property
    def oracle(self) -> DistanceOracle:
        return DistanceOracle(self.coords, self.distance_mode)

    def distance(self, i: int, j: int):
        return self.oracle.distance(i, j)

    def neighbor_rank(self, i: int, j: int, gamma: int) -> int:
        return self.oracle.neighbor_rank(i, j, gamma)

    def edge_rank(self, i: int, j: int, gamma: int) -> int:
        """Closer of the two neighbour ranks of an undirected edge, or -1 when neither is within gamma"""
        ranks = [r for r in (self.neighbor_rank(i, j, gamma), self.neighbor_rank(j, i, gamma))
                 if r != SENTINEL_RANK]
        return min(ranks) if ranks else SENTINEL_RANK

    def configure_oracle(self, defaults: SolverDefaults) -> DistanceOracle:
        """Rebuild the distance oracle when its cache limit or rank-table size differs from defaults"""
        current = self.__dict__.get("oracle")
        rank_size = min(defaults.rank_table_size, max(self.n_nodes - 1, 0))
        if current is not None and current.cache_limit == defaults.matrix_cache_limit \
                and current.rank_size == rank_size:
            return current
        oracle = DistanceOracle(self.coords, self.distance_mode, defaults.matrix_cache_limit,
                                defaults.rank_table_size)
        # cached_property storage; the dataclass fields stay frozen
        self.__dict__["oracle"] = oracle
        return oracle

    @property
    def is_timed(self) -> bool:
        return self.kind is InstanceKind.CVRPTW


# ---------------------------------------------------------------------------
# Public distance operations
# ---------------------------------------------------------------------------

def distance(instance: Instance, i: int, j: int):
    """Distance between two node ids of an instance"""
    return instance.distance(i, j)


def neighbor_rank(instance: Instance, i: int, j: int, gamma: int) -> int:
    """Rank of j among i's nearest neighbours, or -1 beyond gamma"""
    return instance.neighbor_rank(i, j, gamma)


# ---------------------------------------------------------------------------
# CVRPLIB format
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^([A-Z_]+_SECTION)\s*$")


def _numbers(line: str, lineno: int, count: int) -> List[str]:
    parts = line.split()
    if len(parts) < count:
        raise InstanceParseError(f"expected {count} fields, got {len(parts)}", lineno)
    return parts[:count]


def _as_int(token: str, lineno: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise InstanceParseError(f"'{token}' is not a number", lineno)
    if not value.is_integer():
        raise InstanceParseError(f"'{token}' is not an integer", lineno)
    return int(value)


def _as_float(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise InstanceParseError(f"'{token}' is not a number", lineno)
    if not math.isfinite(value):
        raise InstanceParseError(f"'{token}' is not finite", lineno)
    return value


def parse_cvrplib(text: str, distance_mode: Optional[DistanceMode] = None) -> Instance:
    """
    Parse a CVRPLIB (TSPLIB-like) CVRP file

    Args:
        text: File contents with NAME, DIMENSION, CAPACITY, NODE_COORD_SECTION,
              DEMAND_SECTION and DEPOT_SECTION
        distance_mode: Override of the rounded-euclidean default

    Returns:
        Instance with the depot relocated to index 0 and customers renumbered
        in file order
    """
    header: Dict[str, Tuple[str, int]] = {}
    coords: Dict[int, Tuple[float, float]] = {}
    demand: Dict[int, Tuple[int, int]] = {}
    depots: List[int] = []
    section: Optional[str] = None
    depot_done = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        upper = line.upper()
        if upper == "EOF":
            break
        match = _SECTION_RE.match(upper)
        if match:
            section = match.group(1)
            if section not in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
                raise InstanceParseError(f"unsupported section {section}", lineno)
            continue
        is_header = ":" in line and not (line[0].isdigit() or line[0] == "-")
        if section is None or is_header:
            if ":" not in line:
                raise InstanceParseError(f"unexpected line '{line}' outside a section", lineno)
            key, value = line.split(":", 1)
            header[key.strip().upper()] = (value.strip(), lineno)
            section = None
            continue
        if section == "NODE_COORD_SECTION":
            node_id, x, y = _numbers(line, lineno, 3)
            nid = _as_int(node_id, lineno)
            if nid in coords:
                raise InstanceParseError(f"duplicate node id {nid}", lineno)
            coords[nid] = (_as_float(x, lineno), _as_float(y, lineno))
        elif section == "DEMAND_SECTION":
            node_id, q = _numbers(line, lineno, 2)
            nid = _as_int(node_id, lineno)
            if nid in demand:
                raise InstanceParseError(f"duplicate demand for node {nid}", lineno)
            demand[nid] = (_as_int(q, lineno), lineno)
        elif section == "DEPOT_SECTION":
            if depot_done:
                continue
            value = _as_int(line.split()[0], lineno)
            if value == -1:
                depot_done = True
            else:
                depots.append(value)

    if "CAPACITY" not in header:
        raise InstanceParseError("missing CAPACITY")
    capacity = _as_int(header["CAPACITY"][0], header["CAPACITY"][1])
    edge_type = header.get("EDGE_WEIGHT_TYPE", ("EUC_2D", 0))[0].upper()
    if edge_type != "EUC_2D":
        raise InstanceParseError(f"unsupported EDGE_WEIGHT_TYPE {edge_type}", header["EDGE_WEIGHT_TYPE"][1])
    if not coords:
        raise InstanceParseError("missing or empty NODE_COORD_SECTION")
    if "DIMENSION" in header:
        dimension = _as_int(header["DIMENSION"][0], header["DIMENSION"][1])
        if dimension != len(coords):
            raise InstanceParseError(
                f"DIMENSION {dimension} but {len(coords)} coordinates", header["DIMENSION"][1]
            )
    if set(coords) != set(demand):
        missing = sorted(set(coords) ^ set(demand))
        raise InstanceParseError(f"nodes without matching coordinates/demand: {missing[:5]}")
    if len(depots) != 1:
        raise InstanceParseError(f"expected exactly one depot, found {len(depots)}")
    depot_id = depots[0]
    if depot_id not in coords:
        raise InstanceParseError(f"depot {depot_id} has no coordinates")
    if demand[depot_id][0] != 0:
        raise InstanceParseError("depot demand must be 0", demand[depot_id][1])

    order = [depot_id] + sorted(nid for nid in coords if nid != depot_id)
    nodes = []
    for new_id, nid in enumerate(order):
        q, q_line = demand[nid]
        if q > capacity:
            raise InstanceParseError(f"demand {q} of node {nid} exceeds capacity {capacity}", q_line)
        if q < 0:
            raise InstanceParseError(f"negative demand at node {nid}", q_line)
        x, y = coords[nid]
        nodes.append(Node(id=new_id, x=x, y=y, demand=q))

    name = header.get("NAME", ("unnamed", 0))[0]
    vehicles = None
    match = re.search(r"-k(\d+)", name, flags=re.IGNORECASE)
    if match:
        vehicles = int(match.group(1))

    instance = Instance(
        name=name,
        capacity=capacity,
        nodes=tuple(nodes),
        kind=InstanceKind.CVRP,
        distance_mode=distance_mode,
        customer_distribution=CustomerDistribution.UNKNOWN,
        vehicles=vehicles,
    )
    logger.debug("instance_parsed", name=name, format="cvrplib", nodes=instance.n_nodes)
    return instance


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def render_cvrplib(instance: Instance) -> str:
    """Serialise a CVRP instance to CVRPLIB text (depot written as node 1)"""
    lines = [
        f"NAME : {instance.name}",
        "COMMENT : generated by edge-selector",
        "TYPE : CVRP",
        f"DIMENSION : {instance.n_nodes}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {instance.capacity}",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{n.id + 1} {_fmt(n.x)} {_fmt(n.y)}" for n in instance.nodes]
    lines.append("DEMAND_SECTION")
    lines += [f"{n.id + 1} {n.demand}" for n in instance.nodes]
    lines += ["DEPOT_SECTION", "1", "-1", "EOF", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Solomon / Gehring-Homberger format
# ---------------------------------------------------------------------------

def _distribution_from_name(name: str) -> CustomerDistribution:
    match = re.match(r"^(RC|R|C)\d", name.strip().upper())
    if not match:
        return CustomerDistribution.UNKNOWN
    return CustomerDistribution(match.group(1))


def parse_solomon(text: str, distance_mode: Optional[DistanceMode] = None) -> Instance:
    """
    Parse a Solomon / Gehring-Homberger CVRPTW file

    Args:
        text: Name line, VEHICLE block (number and capacity) and CUSTOMER block
              with rows CUST XCOORD YCOORD DEMAND READY DUE SERVICE
        distance_mode: Override of the exact-euclidean default

    Returns:
        Instance of kind CVRPTW
    """
    lines = text.splitlines()
    name = None
    vehicles = capacity = None
    in_vehicle = in_customer = False
    rows: List[Tuple[int, List[str]]] = []

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        upper = line.upper()
        if name is None:
            name = line
            continue
        if upper.startswith("VEHICLE"):
            in_vehicle, in_customer = True, False
            continue
        if upper.startswith("CUSTOMER"):
            in_vehicle, in_customer = False, True
            continue
        if upper.startswith("NUMBER") or upper.startswith("CUST"):
            continue
        if in_vehicle and vehicles is None:
            parts = line.split()
            if len(parts) < 2:
                raise InstanceParseError("VEHICLE block needs NUMBER and CAPACITY", lineno)
            vehicles, capacity = _as_int(parts[0], lineno), _as_int(parts[1], lineno)
            continue
        if in_customer:
            rows.append((lineno, _numbers(line, lineno, 7)))
            continue
        raise InstanceParseError(f"unexpected line '{line}'", lineno)

    if capacity is None:
        raise InstanceParseError("missing VEHICLE capacity")
    if len(rows) < 2:
        raise InstanceParseError("no customers in CUSTOMER block")

    nodes = []
    for expected, (lineno, (cid, x, y, q, ready, due, service)) in enumerate(rows):
        node_id = _as_int(cid, lineno)
        if node_id != expected:
            if any(_as_int(r[1][0], r[0]) == node_id for r in rows[:expected]):
                raise InstanceParseError(f"duplicate customer id {node_id}", lineno)
            raise InstanceParseError(f"expected customer id {expected}, got {node_id}", lineno)
        tw_open, tw_close = _as_float(ready, lineno), _as_float(due, lineno)
        if tw_open > tw_close:
            raise InstanceParseError(f"READY {ready} after DUE {due}", lineno)
        demand_value = _as_int(q, lineno)
        if demand_value > capacity:
            raise InstanceParseError(f"demand {demand_value} exceeds capacity {capacity}", lineno)
        if expected == 0 and demand_value != 0:
            raise InstanceParseError("depot demand must be 0", lineno)
        nodes.append(Node(
            id=node_id,
            x=_as_float(x, lineno),
            y=_as_float(y, lineno),
            demand=demand_value,
            tw_open=tw_open,
            tw_close=tw_close,
            service_time=_as_float(service, lineno),
        ))

    instance = Instance(
        name=name,
        capacity=capacity,
        nodes=tuple(nodes),
        kind=InstanceKind.CVRPTW,
        distance_mode=distance_mode,
        customer_distribution=_distribution_from_name(name),
        vehicles=vehicles,
    )
    logger.debug("instance_parsed", name=name, format="solomon", nodes=instance.n_nodes)
    return instance


def render_solomon(instance: Instance) -> str:
    """Serialise a CVRPTW instance to Solomon text"""
    if not instance.is_timed:
        raise InvalidInstanceError("only CVRPTW instances can be written in Solomon format")
    vehicles = instance.vehicles if instance.vehicles is not None else instance.n_customers
    lines = [
        instance.name,
        "",
        "VEHICLE",
        "NUMBER     CAPACITY",
        f"  {vehicles}         {instance.capacity}",
        "",
        "CUSTOMER",
        "CUST NO.  XCOORD.   YCOORD.    DEMAND   READY TIME  DUE DATE   SERVICE TIME",
        "",
    ]
    for n in instance.nodes:
        lines.append(
            f"{n.id:5d} {_fmt(n.x):>10} {_fmt(n.y):>10} {n.demand:>10} "
            f"{_fmt(n.tw_open):>10} {_fmt(n.tw_close):>10} {_fmt(n.service_time):>10}"
        )
    lines.append("")
    return "\n".join(lines)


def parse_instance(text: str, source: str = "<text>") -> Instance:
    """Parse CVRPLIB or Solomon text, sniffing the format from its header"""
    head = text[:2000].upper()
    if "NODE_COORD_SECTION" in head or "DIMENSION" in head:
        return parse_cvrplib(text)
    if "VEHICLE" in head and "CUSTOMER" in head:
        return parse_solomon(text)
    raise InstanceParseError(f"cannot recognise instance format of {source}")


def load_instance(path: Union[str, Path]) -> Instance:
    return parse_instance(Path(path).read_text(encoding="utf-8", errors="replace"), str(path))


def render_instance(instance: Instance) -> str:
    return render_solomon(instance) if instance.is_timed else render_cvrplib(instance)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

GRID = 1000
CLUSTER_SPREAD = 40.0
MIN_SEED_SEPARATION = 250.0


def _sample_depot(rng: np.random.Generator, depot_pos: DepotPosition) -> Tuple[float, float]:
    if depot_pos is DepotPosition.CENTRAL:
        return (GRID / 2, GRID / 2)
    if depot_pos is DepotPosition.ECCENTRIC:
        return (0.0, 0.0)
    return tuple(float(v) for v in rng.integers(0, GRID + 1, size=2))


def _sample_cluster_seeds(rng: np.random.Generator, count: int) -> np.ndarray:
    seeds: List[np.ndarray] = []
    attempts = 0
    while len(seeds) < count:
        candidate = rng.uniform(100, GRID - 100, size=2)
        attempts += 1
        if all(np.hypot(*(candidate - s)) >= MIN_SEED_SEPARATION for s in seeds) or attempts > 1000:
            seeds.append(candidate)
    return np.array(seeds)


def _sample_clustered(rng: np.random.Generator, n: int) -> np.ndarray:
    n_seeds = int(rng.integers(3, 7))
    seeds = _sample_cluster_seeds(rng, n_seeds)
    owners = rng.integers(0, n_seeds, size=n)
    points = seeds[owners] + rng.normal(0.0, CLUSTER_SPREAD, size=(n, 2))
    return np.clip(np.rint(points), 0, GRID)


def _sample_demands(rng: np.random.Generator, n: int, profile: DemandProfile) -> np.ndarray:
    if profile is DemandProfile.UNIT:
        return np.ones(n, dtype=np.int64)
    low, high = (int(v) for v in profile.value.split("-"))
    return rng.integers(low, high + 1, size=n)


def generate_instance(
    seed: int,
    n: int,
    depot_pos: Union[DepotPosition, str] = DepotPosition.CENTRAL,
    customer_dist: Union[CustomerDistribution, str] = CustomerDistribution.RANDOM,
    demand_profile: Union[DemandProfile, str] = DemandProfile.SMALL_LARGE_VARIANCE,
    avg_route_size: Optional[float] = None,
) -> Instance:
    """
    Generate a CVRP instance on a 1000x1000 integer grid

    Args:
        seed: RNG seed; the instance is a pure function of all arguments
        n: Number of customers (>= 1)
        depot_pos: central, eccentric (corner) or random depot
        customer_dist: R uniform, C Gaussian blobs around separated seeds, RC half/half
        demand_profile: Demand distribution
        avg_route_size: Average customers per route, drawn from U(3, 12) when None

    Returns:
        Instance with capacity ceil(avg_route_size * mean demand)
    """
    if n < 1:
        raise InvalidInstanceError("n must be at least 1")
    depot_pos = DepotPosition(depot_pos)
    customer_dist = CustomerDistribution(customer_dist)
    demand_profile = DemandProfile(demand_profile)
    rng = np.random.default_rng(seed)

    depot = _sample_depot(rng, depot_pos)
    if customer_dist is CustomerDistribution.RANDOM:
        points = rng.integers(0, GRID + 1, size=(n, 2)).astype(np.float64)
    elif customer_dist is CustomerDistribution.CLUSTERED:
        points = _sample_clustered(rng, n)
    elif customer_dist is CustomerDistribution.RANDOM_CLUSTERED:
        n_clustered = n // 2
        clustered = _sample_clustered(rng, n_clustered) if n_clustered else np.zeros((0, 2))
        uniform = rng.integers(0, GRID + 1, size=(n - n_clustered, 2)).astype(np.float64)
        points = np.vstack([clustered, uniform])
    else:
        raise InvalidInstanceError(f"cannot generate distribution {customer_dist.value}")

    demands = _sample_demands(rng, n, demand_profile)
    route_size = avg_route_size if avg_route_size is not None else float(rng.uniform(3, 12))
    capacity = max(int(demands.max()), int(math.ceil(route_size * demands.mean())))

    nodes = [Node(id=0, x=float(depot[0]), y=float(depot[1]), demand=0)]
    nodes += [
        Node(id=i + 1, x=float(points[i, 0]), y=float(points[i, 1]), demand=int(demands[i]))
        for i in range(n)
    ]
    name = f"gen-{customer_dist.value}-{depot_pos.value}-{demand_profile.value}-n{n}-s{seed}"
    return Instance(
        name=name,
        capacity=capacity,
        nodes=tuple(nodes),
        kind=InstanceKind.CVRP,
        customer_distribution=customer_dist,
    )


def infer_distribution(name: str) -> CustomerDistribution:
    """Customer distribution tag from a generated or Solomon-style instance name"""
    match = re.match(r"^gen-(RC|R|C)-", name)
    if match:
        return CustomerDistribution(match.group(1))
    return _distribution_from_name(name)
