"""
Tabular Edge Selector
Four hand-crafted features per customer-customer solution edge, a gradient
boosted tree ensemble and a feed-forward network over them, and the npz model
file format.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import zipfile

import numpy as np
from scipy.special import expit

from app.config import solver_defaults
from app.services.errors import EdgeSelectorError, ModelFormatError
from app.services.labeling import EdgeLabeling, ThresholdRule, build_labeling
from app.services.solution import DEPOT, Edge, Solution, canonical
from app.utils.logging import logger

FEATURE_COLUMNS = ("x1", "x2", "x3", "x4")
N_FEATURES = len(FEATURE_COLUMNS)
MODEL_FORMAT = "edge-selector-tabular"
MODEL_VERSION = 1
# fixed member timestamp so equal models give equal files
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class EdgeFeatures:
    """
    x1 percentage load, x2 utilization edge, x3 neighbourhood rank (closer end,
    -1 beyond gamma), x4 percentage distance
    """
    x1: float
    x2: float
    x3: int
    x4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3, self.x4], dtype=np.float64)


def _features(solution: Solution, i: int, j: int, route_load: int, gamma: int) -> EdgeFeatures:
    instance = solution.instance
    pair_demand = int(instance.demands[i] + instance.demands[j])
    total = instance.total_demand
    cost = solution.cost
    return EdgeFeatures(
        x1=pair_demand / total if total > 0 else 0.0,
        x2=pair_demand / route_load if route_load > 0 else 0.0,
        x3=instance.edge_rank(i, j, gamma),
        x4=instance.distance(i, j) / cost if cost > 0 else 0.0,
    )


def extract_features(solution: Solution, edge: Edge, gamma: Optional[int] = None) -> EdgeFeatures:
    """
    Features of one customer-customer edge of a solution. x3 is the closer of
    the two neighbour ranks, so both orientations of an edge give the same row
    """
    gamma = solver_defaults.granularity if gamma is None else gamma
    i, j = edge
    if DEPOT in (i, j):
        raise EdgeSelectorError(f"edge {edge} is depot-incident; features are defined between customers")
    key = canonical(i, j)
    for route in solution.routes:
        c = route.customers
        if any(canonical(a, b) == key for a, b in zip(c, c[1:])):
            return _features(solution, i, j, route.load, gamma)
    raise EdgeSelectorError(f"edge {edge} is not in the solution")


def solution_features(solution: Solution, gamma: Optional[int] = None) -> Tuple[List[Edge], np.ndarray]:
    """Distinct customer-customer edges in route order with their feature matrix"""
    gamma = solver_defaults.granularity if gamma is None else gamma
    edges: List[Edge] = []
    rows: List[np.ndarray] = []
    seen = set()
    for route in solution.routes:
        c = route.customers
        for a, b in zip(c, c[1:]):
            key = canonical(a, b)
            if key in seen:
                continue
            seen.add(key)
            edges.append(key)
            rows.append(_features(solution, a, b, route.load, gamma).as_array())
    matrix = np.vstack(rows) if rows else np.zeros((0, N_FEATURES))
    return edges, matrix


# ---------------------------------------------------------------------------
# Gradient boosted trees
# ---------------------------------------------------------------------------

@dataclass
class GbtModel:
    """
    Boosted regression trees on the log-odds. Trees are stored as padded node
    arrays: feature < 0 marks a leaf, samples go left iff x[feature] <= threshold.
    """
    init_score: float
    learning_rates: np.ndarray
    features: np.ndarray
    thresholds: np.ndarray
    left: np.ndarray
    right: np.ndarray
    values: np.ndarray
    n_features: int = N_FEATURES

    @property
    def n_estimators(self) -> int:
        return len(self.learning_rates)

    @classmethod
    def from_sklearn(cls, classifier) -> "GbtModel":
        """Convert a fitted binary GradientBoostingClassifier"""
        trees = [est[0].tree_ for est in classifier.estimators_]
        width = max(t.node_count for t in trees)
        m = len(trees)
        features = np.full((m, width), -1, dtype=np.int64)
        thresholds = np.zeros((m, width))
        left = np.full((m, width), -1, dtype=np.int64)
        right = np.full((m, width), -1, dtype=np.int64)
        values = np.zeros((m, width))
        for k, t in enumerate(trees):
            n = t.node_count
            is_leaf = t.children_left[:n] == -1
            features[k, :n] = np.where(is_leaf, -1, t.feature[:n])
            thresholds[k, :n] = t.threshold[:n]
            left[k, :n] = t.children_left[:n]
            right[k, :n] = t.children_right[:n]
            values[k, :n] = t.value[:n, 0, 0]
        prior = float(classifier.init_.class_prior_[1])
        return cls(
            init_score=float(np.log(prior / (1.0 - prior))),
            learning_rates=np.full(m, float(classifier.learning_rate)),
            features=features,
            thresholds=thresholds,
            left=left,
            right=right,
            values=values,
            n_features=int(classifier.n_features_in_),
        )

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ModelFormatError(f"expected {self.n_features} features, got {X.shape[1]}")
        # trees were grown on float32 inputs
        X = X.astype(np.float32).astype(np.float64)
        rows = np.arange(len(X))
        score = np.full(len(X), self.init_score)
        for k in range(self.n_estimators):
            node = np.zeros(len(X), dtype=np.int64)
            while True:
                feat = self.features[k, node]
                internal = feat >= 0
                if not internal.any():
                    break
                go_left = X[rows, np.maximum(feat, 0)] <= self.thresholds[k, node]
                nxt = np.where(go_left, self.left[k, node], self.right[k, node])
                node = np.where(internal, nxt, node)
            score += self.learning_rates[k] * self.values[k, node]
        return score

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))


def gbt_predict(model: GbtModel, feat: EdgeFeatures) -> float:
    """σ(init + Σ γ_m h_m(x)) for one edge"""
    return float(model.predict_proba(feat.as_array()[None, :])[0])


# ---------------------------------------------------------------------------
# Feed-forward network
# ---------------------------------------------------------------------------

def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


@dataclass
class FnnModel:
    """ReLU hidden layers and a single sigmoid output; weights[l] has shape (fan_in, fan_out)"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelFormatError("weights and biases must be non-empty and paired")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelFormatError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k > 0 and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ModelFormatError(f"layer {k}: input width {w.shape[0]} does not follow previous layer")
        if self.weights[-1].shape[1] != 1:
            raise ModelFormatError("output layer must have one unit")

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "FnnModel":
        """He-initialised network, e.g. layer_sizes=(4, 256, 256, 1)"""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ModelFormatError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = self._check(X)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.logits(X))

    def loss_and_gradients(self, X: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
        """Mean binary cross-entropy and its exact gradients by backpropagation"""
        X = self._check(X)
        y = np.asarray(y, dtype=np.float64)
        activations = [X]
        pre = []
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0)
            activations.append(h)
        z_out = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        loss = _bce_with_logits(z_out, y)

        n = len(X)
        delta = ((expit(z_out) - y) / n)[:, None]
        grad_w: List[np.ndarray] = [None] * len(self.weights)
        grad_b: List[np.ndarray] = [None] * len(self.biases)
        for k in range(len(self.weights) - 1, -1, -1):
            grad_w[k] = activations[k].T @ delta
            grad_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * (pre[k - 1] > 0)
        return loss, grad_w, grad_b


def fnn_predict(model: FnnModel, feat: Union[EdgeFeatures, np.ndarray]) -> float:
    """Probability for one edge; raises on a feature-width mismatch"""
    x = feat.as_array() if isinstance(feat, EdgeFeatures) else np.asarray(feat, dtype=np.float64)
    return float(model.predict_proba(x[None, :])[0])


TabularModel = Union[GbtModel, FnnModel]


# ---------------------------------------------------------------------------
# Labeling
# ---------------------------------------------------------------------------

def label_solution_tabular(
    solution: Solution,
    model: TabularModel,
    rule: ThresholdRule,
    gamma: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    selector: Optional[str] = None
) -> EdgeLabeling:
    """Score every customer-customer edge and threshold it; depot edges stay free"""
    edges, X = solution_features(solution, gamma)
    probs: Dict[Edge, float] = {}
    if edges:
        probs = dict(zip(edges, model.predict_proba(X).tolist()))
    name = selector or ("gbt" if isinstance(model, GbtModel) else "fnn")
    return build_labeling(solution, probs, rule, name, rng)


class TabularSelector:
    def __init__(self, model: TabularModel, rule: ThresholdRule, gamma: Optional[int] = None, name: str = None):
        self.model = model
        self.rule = rule
        self.gamma = solver_defaults.granularity if gamma is None else gamma
        self.name = name or ("gbt" if isinstance(model, GbtModel) else "fnn")

    def label(self, solution: Solution, rng: Optional[np.random.Generator] = None) -> EdgeLabeling:
        return label_solution_tabular(solution, self.model, self.rule, self.gamma, rng, self.name)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_tabular_model(model: TabularModel, path: Union[str, Path]) -> Path:
    """
    Write a model as .npz: a JSON 'header' entry (format, version, kind,
    n_features, n_estimators or layer_sizes) plus named arrays
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "n_features": int(model.n_features)}
    if isinstance(model, GbtModel):
        header.update(kind="gbt", n_estimators=model.n_estimators, init_score=model.init_score)
        arrays = {
            "learning_rates": model.learning_rates,
            "features": model.features,
            "thresholds": model.thresholds,
            "left": model.left,
            "right": model.right,
            "values": model.values,
        }
    else:
        header.update(kind="fnn", layer_sizes=model.layer_sizes)
        arrays = {}
        for k, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
    _write_npz(path, {"header": np.array(json.dumps(header)), **arrays})
    logger.info("model_saved", path=str(path), kind=header["kind"])
    return path


def _write_npz(path: Path, arrays: Dict[str, np.ndarray]):
    """np.savez layout with stable member order and timestamps; np.load reads it back"""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, array in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asanyarray(array), allow_pickle=False)


def load_tabular_model(path: Union[str, Path]) -> TabularModel:
    """Read a model written by save_tabular_model, validating its header"""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            arrays = {k: data[k] for k in data.files if k != "header"}
    except (OSError, KeyError, ValueError) as e:
        logger.error("model_load_failed", path=str(path), error=str(e))
        raise ModelFormatError(f"cannot read model file {path}: {e}")

    if header.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path} is not a tabular selector model")
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {header.get('version')}")

    kind = header.get("kind")
    try:
        return _build_tabular_model(kind, header, arrays)
    except KeyError as e:
        raise ModelFormatError(f"model file {path} is missing entry {e}")


def _build_tabular_model(kind: str, header: dict, arrays: Dict[str, np.ndarray]) -> TabularModel:
    if kind == "gbt":
        model = GbtModel(
            init_score=float(header["init_score"]),
            learning_rates=arrays["learning_rates"],
            features=arrays["features"],
            thresholds=arrays["thresholds"],
            left=arrays["left"],
            right=arrays["right"],
            values=arrays["values"],
            n_features=int(header["n_features"]),
        )
        if model.n_estimators != header["n_estimators"]:
            raise ModelFormatError("n_estimators does not match the stored trees")
        return model
    if kind == "fnn":
        sizes = header["layer_sizes"]
        n_layers = len(sizes) - 1
        model = FnnModel(
            weights=[arrays[f"W{k}"] for k in range(n_layers)],
            biases=[arrays[f"b{k}"] for k in range(n_layers)],
        )
        if model.layer_sizes != sizes:
            raise ModelFormatError(f"layer sizes {model.layer_sizes} do not match header {sizes}")
        return model
    raise ModelFormatError(f"unknown model kind '{kind}'")
