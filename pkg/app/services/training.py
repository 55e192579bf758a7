"""
Training Pipeline
Desk-scale corpora, reference solutions, the labeled edge dataset for the
tabular selectors, the graph dataset, and the GBT / FNN / ConvNet training loops.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import json

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.model_selection import GroupShuffleSplit

from app.config import SolverDefaults, settings, solver_defaults
from app.services.construction import savings_construct, sweep_construct
from app.services.errors import DatasetError
from app.services.exact import solve_exact
from app.services.instance import (
    CustomerDistribution, DemandProfile, DepotPosition, Instance, generate_instance,
    load_instance, render_instance,
)
from app.services.local_search import descend, perturb
from app.services.selector_graph import (
    ConvNetModel, build_graph, convnet_backward, label_solution_graph, save_checkpoint,
)
from app.services.selector_tabular import (
    FEATURE_COLUMNS, FnnModel, GbtModel, save_tabular_model, solution_features,
)
from app.services.solution import EdgeSet, Solution, evaluate, read_solution, write_solution
from app.utils.logging import logger

ReferenceSolver = Callable[[Instance, int], Solution]
SOURCES = ("savings", "sweep", "perturbed", "optimal")
DATASET_COLUMNS = [*FEATURE_COLUMNS, "label", "instance_id", "source", "i", "j"]


# ---------------------------------------------------------------------------
# Corpus and reference solutions
# ---------------------------------------------------------------------------

def generate_corpus(count: int, n_range: Tuple[int, int] = (20, 100), seed: int = 0) -> List[Instance]:
    """Mixed R / C / RC instances with random depot placement and demand profile"""
    rng = np.random.default_rng(seed)
    distributions = [CustomerDistribution.RANDOM, CustomerDistribution.CLUSTERED,
                     CustomerDistribution.RANDOM_CLUSTERED]
    depots = list(DepotPosition)
    profiles = list(DemandProfile)
    corpus = []
    for k in range(count):
        corpus.append(generate_instance(
            seed=int(rng.integers(0, 2**31 - 1)),
            n=int(rng.integers(n_range[0], n_range[1] + 1)),
            depot_pos=depots[int(rng.integers(len(depots)))],
            customer_dist=distributions[k % len(distributions)],
            demand_profile=profiles[int(rng.integers(len(profiles)))],
        ))
    return corpus


def reference_solution(instance: Instance, seed: int = 0, restarts: int = 10, rounds: int = 50) -> Solution:
    """
    High-quality reference: exact for CVRP with at most 10 customers, otherwise
    the best of `restarts` runs of savings plus perturbation / descent rounds
    """
    if instance.n_customers <= 10 and not instance.is_timed:
        return solve_exact(instance)
    rng = np.random.default_rng(seed)
    best: Optional[Solution] = None
    for restart in range(restarts):
        start = savings_construct(instance, rng=rng, noise=0.1 if restart else 0.0)
        current = descend(start, rng=rng)
        for _ in range(rounds):
            candidate = descend(perturb(current, None, rng), rng=rng)
            if candidate.cost < current.cost:
                current = candidate
        if best is None or current.cost < best.cost:
            best = current
    return best


def perturbed_solution(reference: Solution, rng: np.random.Generator, strength: int = None,
                       defaults: Optional[SolverDefaults] = None) -> Solution:
    """Random double-bridge / segment perturbation of a reference solution"""
    defaults = defaults or solver_defaults
    return perturb(reference, None, rng, strength or defaults.perturbation_strength, gamma=defaults.granularity)


def _source_solutions(instance: Instance, reference: Solution, generators: Sequence[str],
                      rng: np.random.Generator, defaults: SolverDefaults) -> Dict[str, Solution]:
    built = {}
    for name in generators:
        if name == "savings":
            built[name] = savings_construct(instance)
        elif name == "sweep":
            built[name] = sweep_construct(instance)
        elif name == "perturbed":
            built[name] = perturbed_solution(reference, rng, defaults=defaults)
        elif name == "optimal":
            built[name] = reference
        else:
            raise DatasetError(f"unknown solution generator '{name}'")
    return built


def _instance_rows(args) -> Optional[pd.DataFrame]:
    instance, instance_id, generators, seed, reference_solver, defaults = args
    gamma = defaults.granularity
    reference = reference_solver(instance, seed)
    if not evaluate(reference).feasible:
        logger.warning("reference_infeasible", instance=instance.name)
        return None
    truth = EdgeSet.from_solution(reference).customer_edges()
    rng = np.random.default_rng(seed)
    frames = []
    for source, solution in _source_solutions(instance, reference, generators, rng, defaults).items():
        edges, X = solution_features(solution, gamma)
        if not edges:
            continue
        frame = pd.DataFrame(X, columns=list(FEATURE_COLUMNS))
        frame["label"] = [int(e in truth) for e in edges]
        frame["instance_id"] = instance_id
        frame["source"] = source
        frame["i"] = [e[0] for e in edges]
        frame["j"] = [e[1] for e in edges]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else None


def build_tabular_dataset(
    instances: Sequence[Instance],
    reference_solver: ReferenceSolver = reference_solution,
    generators: Sequence[str] = ("savings", "sweep", "perturbed"),
    seed: int = 0,
    gamma: Optional[int] = None,
    threads: Optional[int] = None,
    defaults: Optional[SolverDefaults] = None
) -> pd.DataFrame:
    """
    One row per customer-customer edge of every generated solution

    Args:
        instances: Instances to label
        reference_solver: (instance, seed) -> reference solution
        generators: Solution sources among savings, sweep, perturbed, optimal
        seed: Base seed; instance k uses seed + k
        gamma: Granularity for the rank feature; overrides defaults.granularity
        threads: Worker processes (defaults to the THREADS setting)
        defaults: Solver constants for the perturbed solutions and the rank feature

    Returns:
        DataFrame with x1..x4, label, instance_id, source, i, j
    """
    defaults = defaults or solver_defaults
    if gamma is not None:
        defaults = defaults.model_copy(update={"granularity": gamma})
    threads = threads or settings.THREADS
    jobs = [(inst, inst.name, tuple(generators), seed + k, reference_solver, defaults)
            for k, inst in enumerate(instances)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_instance_rows, jobs))
    else:
        parts = [_instance_rows(job) for job in jobs]
    parts = [p for p in parts if p is not None]
    dataset = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=DATASET_COLUMNS)
    ratio = class_ratio(dataset)
    logger.info("dataset_built", instances=len(instances), rows=len(dataset), **ratio)
    return dataset


def class_ratio(dataset: pd.DataFrame) -> Dict[str, float]:
    positives = int((dataset["label"] == 1).sum()) if len(dataset) else 0
    negatives = int(len(dataset) - positives)
    return {
        "positives": positives,
        "negatives": negatives,
        "positive_share": positives / len(dataset) if len(dataset) else 0.0,
    }


def split_dataset(dataset: pd.DataFrame, validation_fraction: float = 0.2,
                  seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Instance-disjoint train / validation split"""
    if dataset["instance_id"].nunique() < 2:
        raise DatasetError("an instance-disjoint split needs at least two instances")
    splitter = GroupShuffleSplit(n_splits=1, test_size=validation_fraction, random_state=seed)
    train_idx, val_idx = next(splitter.split(dataset, groups=dataset["instance_id"]))
    return dataset.iloc[train_idx].reset_index(drop=True), dataset.iloc[val_idx].reset_index(drop=True)


def save_dataset(dataset: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_csv(path, index=False)
    return path


def load_dataset(path: Union[str, Path]) -> pd.DataFrame:
    dataset = pd.read_csv(path)
    missing = [c for c in (*FEATURE_COLUMNS, "label") if c not in dataset.columns]
    if missing:
        raise DatasetError(f"dataset {path} lacks columns {missing}")
    return dataset


# ---------------------------------------------------------------------------
# Tabular training
# ---------------------------------------------------------------------------

def _xy(dataset) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, pd.DataFrame):
        X = dataset[list(FEATURE_COLUMNS)].to_numpy(dtype=np.float64)
        y = dataset["label"].to_numpy(dtype=np.float64)
    else:
        X, y = dataset
        X, y = np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise DatasetError("dataset is empty")
    if len(np.unique(y)) < 2:
        raise DatasetError("dataset contains a single class")
    return X, y


def train_gbt(dataset, n_estimators: int = 100, max_depth: int = 3, learning_rate: float = 0.1,
              seed: int = 0) -> GbtModel:
    """Gradient boosting on logistic loss, converted to the serialisable tree arrays"""
    X, y = _xy(dataset)
    classifier = GradientBoostingClassifier(
        n_estimators=n_estimators,
        max_depth=max_depth,
        learning_rate=learning_rate,
        random_state=seed,
    )
    classifier.fit(X, y.astype(int))
    logger.info("gbt_trained", rows=len(X), n_estimators=n_estimators)
    return GbtModel.from_sklearn(classifier)


class Adam:
    """
    Adam over a list of numpy parameter arrays, updated in place. The FNN keeps
    its own backpropagation in numpy, so it cannot use torch.optim; the ConvNet
    trains with torch.optim.Adam.
    """

    def __init__(self, params: List[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]):
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_fnn(dataset, hidden_layers: int = 2, width: int = 256, epochs: int = 30, batch_size: int = 256,
              learning_rate: float = 1e-3, seed: int = 0, history: Optional[List[float]] = None) -> FnnModel:
    """
    Mini-batch Adam on unweighted binary cross-entropy

    Args:
        dataset: DataFrame with x1..x4 and label, or an (X, y) pair
        hidden_layers: Number of ReLU hidden layers
        width: Units per hidden layer
        epochs: Passes over the data
        batch_size: Rows per step
        learning_rate: Adam step size
        seed: Initialisation and shuffling seed
        history: If given, receives the mean training loss of every epoch

    Returns:
        Trained FnnModel
    """
    X, y = _xy(dataset)
    rng = np.random.default_rng(seed)
    model = FnnModel.initialize([X.shape[1]] + [width] * hidden_layers + [1], rng)
    optimizer = Adam(model.weights + model.biases, lr=learning_rate)
    n_layers = len(model.weights)
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            loss, grad_w, grad_b = model.loss_and_gradients(X[idx], y[idx])
            optimizer.step(grad_w + grad_b)
            losses.append(loss * len(idx))
        epoch_loss = float(sum(losses) / len(X))
        if history is not None:
            history.append(epoch_loss)
        logger.debug("fnn_epoch", epoch=epoch, loss=epoch_loss, layers=n_layers)
    logger.info("fnn_trained", rows=len(X), epochs=epochs)
    return model


def train_tabular(dataset: pd.DataFrame, kind: str, model_path: Union[str, Path], seed: int = 0,
                  **params) -> Path:
    """Train a gbt or fnn selector and write it to model_path"""
    if kind == "gbt":
        model = train_gbt(dataset, seed=seed, **params)
    elif kind == "fnn":
        model = train_fnn(dataset, seed=seed, **params)
    else:
        raise DatasetError(f"unknown tabular model kind '{kind}'")
    return save_tabular_model(model, model_path)


# ---------------------------------------------------------------------------
# Graph dataset and ConvNet training
# ---------------------------------------------------------------------------

@dataclass
class GraphExample:
    instance: Instance
    reference: Solution
    initial: Solution


@dataclass
class CurriculumStage:
    """Examples trained together; later stages warm-start from earlier ones"""
    name: str
    examples: List[GraphExample]
    epochs: int = 5
    mode: str = "full"
    k: Optional[int] = None
    validation: List[GraphExample] = field(default_factory=list)


def build_graph_dataset(instances: Sequence[Instance], seed: int = 0,
                        reference_solver: ReferenceSolver = reference_solution,
                        defaults: Optional[SolverDefaults] = None) -> List[GraphExample]:
    """Reference solution and a perturbed starting solution per instance"""
    examples = []
    for k, instance in enumerate(instances):
        reference = reference_solver(instance, seed + k)
        if not evaluate(reference).feasible:
            logger.warning("reference_infeasible", instance=instance.name)
            continue
        initial = perturbed_solution(reference, np.random.default_rng(seed + k), defaults=defaults)
        examples.append(GraphExample(instance, reference, initial))
    logger.info("dataset_built", kind="graph", instances=len(examples))
    return examples


def save_graph_dataset(examples: Sequence[GraphExample], directory: Union[str, Path]) -> Path:
    """manifest.json plus one instance file and two solution files per example"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for k, ex in enumerate(examples):
        stem = f"{k:05d}"
        suffix = ".txt" if ex.instance.is_timed else ".vrp"
        (directory / f"{stem}{suffix}").write_text(render_instance(ex.instance), encoding="utf-8")
        write_solution(directory / f"{stem}.ref.sol", ex.reference)
        write_solution(directory / f"{stem}.init.sol", ex.initial)
        items.append({
            "name": ex.instance.name,
            "instance": f"{stem}{suffix}",
            "reference": f"{stem}.ref.sol",
            "initial": f"{stem}.init.sol",
        })
    manifest = {"format": "edge-selector-graph-dataset", "version": 1, "items": items}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return directory


def load_graph_dataset(directory: Union[str, Path]) -> List[GraphExample]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{directory} has no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    examples = []
    for item in manifest.get("items", []):
        instance = load_instance(directory / item["instance"])
        examples.append(GraphExample(
            instance=instance,
            reference=read_solution(directory / item["reference"], instance),
            initial=read_solution(directory / item["initial"], instance),
        ))
    return examples


def curriculum_from_examples(examples: Sequence[GraphExample], epochs: int = 5, split_at: int = 100,
                             k: int = 25) -> List[CurriculumStage]:
    """Small instances on full graphs first, then larger ones on k-NN graphs"""
    small = [ex for ex in examples if ex.instance.n_nodes <= split_at]
    large = [ex for ex in examples if ex.instance.n_nodes > split_at]
    stages = []
    if small:
        stages.append(CurriculumStage("small", small, epochs=epochs, mode="full"))
    if large:
        k_eff = min(k, min(ex.instance.n_nodes for ex in large) - 1)
        stages.append(CurriculumStage("large", large, epochs=epochs, mode="knn", k=k_eff))
    return stages


def _example_batches(examples: Sequence[GraphExample], mode: str, k: Optional[int] = None):
    batches = []
    for ex in examples:
        truth = EdgeSet.from_solution(ex.reference)
        if mode == "solution":
            batch = build_graph(ex.instance, mode="solution", solution=ex.initial, truth=truth)
        else:
            batch = build_graph(ex.instance, mode=mode, k=k, extra_solution=ex.initial, truth=truth)
        if batch.n_edges:
            batches.append(batch)
    return batches


def _stage_batches(stage: CurriculumStage):
    return _example_batches(stage.examples, stage.mode, stage.k)


def validation_loss(model: ConvNetModel, batches) -> Optional[float]:
    """Mean cross-entropy with batch norm on its running statistics"""
    if not batches:
        return None
    model.eval()
    with torch.no_grad():
        losses = [float(F.binary_cross_entropy_with_logits(model.edge_logits(b), b.targets)) for b in batches]
    return float(np.mean(losses))


def evaluate_precision(model: ConvNetModel, examples: Sequence[GraphExample], threshold: float = 0.8,
                       depot_truncate: Optional[int] = None, mode: str = "solution",
                       k: Optional[int] = None, include_depot: bool = False) -> Optional[float]:
    """
    Pooled precision of the fixed edges over the examples' starting solutions.
    mode selects the graph the edges are scored in ("solution", "full" or
    "knn"), matching label_solution_graph.
    """
    fixed = hits = 0
    for ex in examples:
        labeling = label_solution_graph(ex.initial, model, threshold, depot_truncate,
                                        mode=mode, k=k, include_depot=include_depot)
        truth = EdgeSet.from_solution(ex.reference)
        chosen = labeling.fixed_edges()
        fixed += len(chosen)
        hits += sum(1 for e in chosen if e in truth)
    return hits / fixed if fixed else None


METRIC_COLUMNS = ["stage", "mode", "epoch", "loss", "validation_loss", "precision"]


def train_convnet(
    stages: Sequence[CurriculumStage],
    hidden: int = 64,
    layers: int = 4,
    learning_rate: float = 1e-3,
    seed: int = 0,
    model: Optional[ConvNetModel] = None,
    threshold: float = 0.8,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    metrics_path: Optional[Union[str, Path]] = None
) -> Tuple[ConvNetModel, pd.DataFrame]:
    """
    Curriculum training of the ConvNet

    Every stage continues from the model left by the previous one with a fresh
    Adam optimiser; the batch order is shuffled with a per-epoch seed.
    Validation precision is scored in the stage's own graph mode, so a model
    trained on full or k-NN graphs is not judged on solution-only graphs.

    Returns:
        (model, metrics) where metrics has one row per stage and epoch with the
        graph mode, the mean training loss, the validation loss and the
        validation precision
    """
    for stage in stages:
        if not stage.examples:
            raise DatasetError(f"curriculum stage '{stage.name}' has no examples")
    torch.manual_seed(seed)
    model = model or ConvNetModel(hidden=hidden, layers=layers)
    rows = []
    for stage_index, stage in enumerate(stages):
        batches = _stage_batches(stage)
        if not batches:
            raise DatasetError(f"curriculum stage '{stage.name}' produced no edges")
        validation = stage.validation or stage.examples
        validation_batches = _example_batches(validation, stage.mode, stage.k)
        model.graph_mode, model.graph_k = stage.mode, stage.k
        optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
        for epoch in range(stage.epochs):
            order = np.random.default_rng(seed + 1000 * stage_index + epoch).permutation(len(batches))
            losses = []
            for b in order:
                loss, _ = convnet_backward(model, batches[b])
                optimizer.step()
                losses.append(loss)
            rows.append({
                "stage": stage.name,
                "mode": stage.mode,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "validation_loss": validation_loss(model, validation_batches),
                "precision": evaluate_precision(model, validation, threshold, mode=stage.mode, k=stage.k),
            })
        logger.info("stage_complete", stage=stage.name, mode=stage.mode, loss=rows[-1]["loss"],
                    validation_loss=rows[-1]["validation_loss"], precision=rows[-1]["precision"])
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"stage-{stage_index}-{stage.name}.pt",
                            extra={"stage": stage.name})
    model.eval()
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(metrics_path, index=False)
    return model, metrics
