"""
Graph Edge Selector
Anisotropic gated graph ConvNet over node features (normalised coordinates,
demand / capacity) and edge features (normalised distance, edge type). Edges
are processed in both directions and the two directed logits are averaged,
which keeps the output independent of node numbering.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import solver_defaults
from app.services.errors import ConvNetError, InvalidInstanceError, ModelFormatError
from app.services.instance import Instance
from app.services.labeling import EdgeLabeling, ThresholdRule, build_labeling
from app.services.solution import DEPOT, Edge, EdgeSet, Solution, canonical
from app.utils.logging import logger

ETA_EPS = 1e-20
CHECKPOINT_FORMAT = "edge-selector-convnet"
CHECKPOINT_VERSION = 1

EDGE_TYPE_FULL = 0
EDGE_TYPE_KNN = 1
EDGE_TYPE_SOLUTION = 2


@dataclass
class GraphBatch:
    """
    One instance as a sparse graph.

    node_ids maps batch rows back to instance node ids; edges holds distinct
    undirected pairs of batch rows (i < j) with their distance feature and type.
    """
    node_ids: np.ndarray
    node_features: torch.Tensor
    edges: torch.Tensor
    edge_distance: torch.Tensor
    edge_type: torch.Tensor
    targets: Optional[torch.Tensor] = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def instance_edges(self) -> List[Edge]:
        ids = self.node_ids
        return [canonical(int(ids[a]), int(ids[b])) for a, b in self.edges.tolist()]

    def directed(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Source and destination rows of both directions of every edge"""
        src = torch.cat([self.edges[:, 0], self.edges[:, 1]])
        dst = torch.cat([self.edges[:, 1], self.edges[:, 0]])
        return src, dst


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(axis=0), values.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (values - lo) / span


def truncate_nodes(instance: Instance, depot_truncate: Optional[int]) -> np.ndarray:
    """Depot plus its depot_truncate - 1 nearest nodes (all nodes when not truncating)"""
    if depot_truncate is None or instance.n_nodes <= depot_truncate:
        return np.arange(instance.n_nodes)
    keep = [DEPOT] + instance.oracle.neighbors(DEPOT, depot_truncate - 1)
    return np.array(sorted(keep))


def build_graph(
    instance: Instance,
    mode: str = "full",
    k: Optional[int] = None,
    solution: Optional[Solution] = None,
    depot_truncate: Optional[int] = None,
    extra_solution: Optional[Solution] = None,
    truth: Optional[EdgeSet] = None
) -> GraphBatch:
    """
    Build a graph batch

    Args:
        instance: The instance
        mode: "full" (all pairs), "knn" (k nearest per node) or "solution" (edges of `solution`)
        k: Neighbours per node in knn mode; must be below the node count
        solution: S_0 for solution mode
        depot_truncate: Keep only the depot-nearest nodes and their induced edges
        extra_solution: Solution whose edges are added (typed as solution edges) to a full/knn graph
        truth: Reference edges used to fill `targets`

    Returns:
        GraphBatch with min-max normalised node and distance features
    """
    keep = truncate_nodes(instance, depot_truncate)
    row_of = {int(n): r for r, n in enumerate(keep)}
    n = len(keep)
    pairs: Dict[Edge, int] = {}

    if mode == "full":
        for a in range(n):
            for b in range(a + 1, n):
                pairs[(a, b)] = EDGE_TYPE_FULL
    elif mode == "knn":
        if k is None or k >= n:
            raise InvalidInstanceError(f"k must be below the node count {n}, got {k}")
        widest = instance.n_nodes - 1
        for node in keep:
            ra = row_of[int(node)]
            window = min(widest, 2 * k + 8)
            while True:
                kept = [j for j in instance.oracle.neighbors(int(node), window) if j in row_of][:k]
                if len(kept) == k or window >= widest:
                    break
                window = min(widest, 2 * window)
            for j in kept:
                pairs[canonical(ra, row_of[j])] = EDGE_TYPE_KNN
    elif mode == "solution":
        if solution is None:
            raise InvalidInstanceError("solution mode needs a solution")
    else:
        raise InvalidInstanceError(f"unknown graph mode '{mode}'")

    for source in (solution if mode == "solution" else None, extra_solution):
        if source is None:
            continue
        for route in source.routes:
            for i, j in route.edges():
                if i in row_of and j in row_of and i != j:
                    pairs[canonical(row_of[i], row_of[j])] = EDGE_TYPE_SOLUTION

    coords = instance.coords[keep]
    demand = (instance.demands[keep] / instance.capacity)[:, None]
    node_features = np.hstack([_minmax(coords), np.clip(demand, 0.0, 1.0)])

    edge_list = sorted(pairs)
    if edge_list:
        dist = np.array([instance.distance(int(keep[a]), int(keep[b])) for a, b in edge_list], dtype=np.float64)
        span = dist.max() - dist.min()
        dist = (dist - dist.min()) / span if span > 0 else np.zeros_like(dist)
    else:
        dist = np.zeros(0)

    batch = GraphBatch(
        node_ids=keep,
        node_features=torch.tensor(node_features, dtype=torch.float64),
        edges=torch.tensor(edge_list, dtype=torch.long).reshape(-1, 2),
        edge_distance=torch.tensor(dist, dtype=torch.float64)[:, None],
        edge_type=torch.tensor([pairs[e] for e in edge_list], dtype=torch.long),
    )
    if truth is not None:
        batch.targets = torch.tensor([float(e in truth) for e in batch.instance_edges()], dtype=torch.float64)
    return batch


class GatedLayer(nn.Module):
    """
    One residual message-passing layer:
        x_i <- x_i + ReLU(BN(W1 x_i + Σ_j η_ij ⊙ W2 x_j))
        e_ij <- e_ij + ReLU(BN(W3 e_ij + W4 x_i + W5 x_j))
    with η_ij = σ(e_ij) / (Σ_j' σ(e_ij') + ε).
    """

    def __init__(self, hidden: int):
        super().__init__()
        self.W1 = nn.Linear(hidden, hidden)
        self.W2 = nn.Linear(hidden, hidden)
        self.W3 = nn.Linear(hidden, hidden)
        self.W4 = nn.Linear(hidden, hidden)
        self.W5 = nn.Linear(hidden, hidden)
        self.bn_nodes = nn.BatchNorm1d(hidden)
        self.bn_edges = nn.BatchNorm1d(hidden)

    def gates(self, e: torch.Tensor, dst: torch.Tensor, n_nodes: int) -> torch.Tensor:
        gate = torch.sigmoid(e)
        denom = torch.zeros(n_nodes, e.shape[1], dtype=e.dtype).index_add(0, dst, gate)
        return gate / (denom[dst] + ETA_EPS)

    def forward(self, x: torch.Tensor, e: torch.Tensor, src: torch.Tensor, dst: torch.Tensor):
        eta = self.gates(e, dst, x.shape[0])
        messages = torch.zeros_like(x).index_add(0, dst, eta * self.W2(x)[src])
        x_new = x + F.relu(self.bn_nodes(self.W1(x) + messages))
        e_new = e + F.relu(self.bn_edges(self.W3(e) + self.W4(x)[dst] + self.W5(x)[src]))
        return x_new, e_new


class ConvNetModel(nn.Module):
    """Embedders, gated layers and a two-layer edge head producing one logit per directed edge"""

    def __init__(self, hidden: int = 64, layers: int = 4):
        super().__init__()
        if hidden % 2:
            raise ModelFormatError("hidden width must be even")
        self.hidden = hidden
        self.n_layers = layers
        # graph the weights were trained on; restored from the checkpoint header
        self.graph_mode = "solution"
        self.graph_k: Optional[int] = None
        self.node_embedding = nn.Linear(3, hidden)
        self.distance_embedding = nn.Linear(1, hidden // 2)
        self.type_embedding = nn.Embedding(3, hidden // 2)
        self.layers = nn.ModuleList([GatedLayer(hidden) for _ in range(layers)])
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.double()

    def edge_logits(self, batch: GraphBatch) -> torch.Tensor:
        """Undirected logit per edge (mean of its two directions)"""
        src, dst = batch.directed()
        x = self.node_embedding(batch.node_features)
        dist = torch.cat([batch.edge_distance, batch.edge_distance])
        etype = torch.cat([batch.edge_type, batch.edge_type])
        e = torch.cat([self.distance_embedding(dist), self.type_embedding(etype)], dim=1)
        for index, layer in enumerate(self.layers):
            x, e = layer(x, e, src, dst)
            if not (torch.isfinite(x).all() and torch.isfinite(e).all()):
                raise ConvNetError("non-finite activation", layer=index)
        logits = self.head(e)[:, 0]
        m = batch.n_edges
        return 0.5 * (logits[:m] + logits[m:])

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        return torch.sigmoid(self.edge_logits(batch))


def convnet_forward(model: ConvNetModel, batch: GraphBatch) -> np.ndarray:
    """Per-edge probabilities in inference mode (batch norm uses running statistics)"""
    if model.training:
        model.eval()
    with torch.no_grad():
        probs = model(batch)
    return probs.numpy()


def convnet_backward(model: ConvNetModel, batch: GraphBatch, targets=None) -> Tuple[float, Dict[str, torch.Tensor]]:
    """
    Binary cross-entropy over the batch edges and its gradient for every
    parameter; batch norm runs in training mode on batch statistics
    """
    targets = batch.targets if targets is None else torch.as_tensor(targets, dtype=torch.float64)
    if targets is None:
        raise ModelFormatError("targets are required for the backward pass")
    model.train()
    model.zero_grad()
    loss = F.binary_cross_entropy_with_logits(model.edge_logits(batch), targets)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters() if p.grad is not None}
    return float(loss.item()), grads


def label_solution_graph(
    solution: Solution,
    model: ConvNetModel,
    threshold: float = 0.8,
    depot_truncate: Optional[int] = None,
    selector: str = "convnet",
    mode: str = "solution",
    k: Optional[int] = None,
    include_depot: bool = False
) -> EdgeLabeling:
    """
    Score the solution's own edges and fix those with probability above the
    threshold. Edges outside a truncated batch are never fixed; depot edges
    are never fixed unless include_depot is set.

    mode "solution" scores a graph of the solution edges alone. "full" and
    "knn" score the solution edges inside the same context graph the
    curriculum trains on, and keep only the solution edges' probabilities.
    """
    if depot_truncate is None:
        depot_truncate = solver_defaults.depot_truncate
    instance = solution.instance
    if mode == "solution":
        batch = build_graph(instance, mode="solution", solution=solution, depot_truncate=depot_truncate)
    else:
        if mode == "knn":
            kept = min(instance.n_nodes, depot_truncate) if depot_truncate else instance.n_nodes
            k = min(k or 25, kept - 1)
        batch = build_graph(instance, mode=mode, k=k, extra_solution=solution, depot_truncate=depot_truncate)
    probs: Dict[Edge, float] = {}
    if batch.n_edges:
        probs = dict(zip(batch.instance_edges(), convnet_forward(model, batch).tolist()))
    return build_labeling(solution, probs, ThresholdRule("deterministic", threshold), selector,
                          include_depot=include_depot)


class GraphSelector:
    """
    ConvNet labeling behind the selector protocol. The model is switched to
    inference mode once here; labeling never toggles it, so one selector can
    be shared by threads that only run inference. mode and k default to the
    graph the model was trained on.
    """

    def __init__(self, model: ConvNetModel, threshold: float = 0.8, depot_truncate: Optional[int] = None,
                 name: str = "convnet", mode: Optional[str] = None, k: Optional[int] = None):
        self.model = model.eval()
        self.threshold = threshold
        self.depot_truncate = depot_truncate
        self.name = name
        self.mode = mode or model.graph_mode
        self.k = k if k is not None else model.graph_k

    def label(self, solution: Solution, rng: Optional[np.random.Generator] = None) -> EdgeLabeling:
        return label_solution_graph(solution, self.model, self.threshold, self.depot_truncate, self.name,
                                    mode=self.mode, k=self.k)


def save_checkpoint(model: ConvNetModel, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """torch file holding a header (format, version, hidden, layers) and the state dict"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "convnet",
        "hidden": model.hidden,
        "layers": model.n_layers,
        "mode": model.graph_mode,
        "k": model.graph_k,
        **(extra or {}),
    }
    torch.save({"header": header, "state_dict": model.state_dict()}, path)
    logger.info("model_saved", path=str(path), kind="convnet")
    return path


def load_checkpoint(path: Union[str, Path]) -> ConvNetModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        logger.error("model_load_failed", path=str(path), error=str(e))
        raise ModelFormatError(f"cannot read checkpoint {path}: {e}")
    header = payload.get("header", {}) if isinstance(payload, dict) else {}
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ModelFormatError(f"{path} is not a version {CHECKPOINT_VERSION} ConvNet checkpoint")
    model = ConvNetModel(hidden=int(header["hidden"]), layers=int(header["layers"]))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ModelFormatError(f"checkpoint shapes do not match: {e}")
    model.graph_mode = header.get("mode") or "solution"
    model.graph_k = header.get("k")
    model.eval()
    return model
