"""
Tests for graph construction, the gated ConvNet and checkpoints
"""
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.services.construction import savings_construct
from app.services.errors import InvalidInstanceError, ModelFormatError
from app.services.selector_graph import (
    EDGE_TYPE_KNN, EDGE_TYPE_SOLUTION, ConvNetModel, GraphSelector, build_graph, convnet_backward,
    convnet_forward, label_solution_graph, load_checkpoint, save_checkpoint, truncate_nodes,
)
from app.services.instance import generate_instance
from app.services.labeling import precision
from app.services.solution import EdgeSet, Solution, edges_of


@pytest.fixture
def model():
    torch.manual_seed(0)
    return ConvNetModel(hidden=16, layers=2)


@pytest.fixture
def line_solution(line5):
    return Solution(line5, [[1, 2, 3], [4, 5]])


@pytest.mark.unit
class TestBuildGraph:
    """Sparse graph batches"""

    def test_full_graph(self, line5):
        """All pairs of the six nodes"""
        batch = build_graph(line5, mode="full")

        assert batch.n_nodes == 6
        assert batch.n_edges == 15
        assert batch.node_features.shape == (6, 3)
        assert float(batch.edge_distance.min()) == 0.0
        assert float(batch.edge_distance.max()) == 1.0

    def test_knn_graph(self, medium_instance):
        """Every node keeps at least its k nearest neighbours"""
        batch = build_graph(medium_instance, mode="knn", k=4)

        degree = np.bincount(batch.edges.reshape(-1).numpy(), minlength=batch.n_nodes)
        assert degree.min() >= 4
        assert batch.n_edges <= 4 * batch.n_nodes
        assert set(batch.edge_type.tolist()) == {EDGE_TYPE_KNN}

    def test_knn_needs_small_k(self, line5):
        """k must be below the node count"""
        with pytest.raises(InvalidInstanceError):
            build_graph(line5, mode="knn", k=6)

    def test_solution_graph(self, line_solution):
        """Solution mode holds exactly the solution's distinct edges"""
        batch = build_graph(line_solution.instance, mode="solution", solution=line_solution)

        assert set(batch.instance_edges()) == edges_of(line_solution).distinct()
        assert set(batch.edge_type.tolist()) == {EDGE_TYPE_SOLUTION}

    def test_extra_solution_edges_typed(self, medium_instance):
        """Starting-solution edges added to a k-NN graph carry the solution type"""
        customers = list(medium_instance.customers)
        solution = Solution(medium_instance, [customers[:20], customers[20:]])

        batch = build_graph(medium_instance, mode="knn", k=3, extra_solution=solution)

        typed = {e for e, t in zip(batch.instance_edges(), batch.edge_type.tolist()) if t == EDGE_TYPE_SOLUTION}
        assert typed == edges_of(solution).distinct()

    def test_targets_from_truth(self, line_solution):
        """Targets mark reference edges"""
        truth = edges_of(line_solution)

        batch = build_graph(line_solution.instance, mode="full", truth=truth)

        assert float(batch.targets.sum()) == len(truth.distinct())

    def test_truncation(self, medium_instance):
        """Only the depot and its nearest nodes survive truncation"""
        keep = truncate_nodes(medium_instance, 10)
        batch = build_graph(medium_instance, mode="full", depot_truncate=10)

        assert len(keep) == 10
        assert 0 in keep
        assert batch.n_edges == 45

    def test_unknown_mode(self, line5):
        """Only full, knn and solution graphs exist"""
        with pytest.raises(InvalidInstanceError):
            build_graph(line5, mode="delaunay")


@pytest.mark.unit
class TestConvNet:
    """Forward and backward passes"""

    def test_odd_hidden_width(self):
        """Hidden width is split between distance and type embeddings"""
        with pytest.raises(ModelFormatError):
            ConvNetModel(hidden=15)

    def test_probabilities_per_edge(self, model, medium_instance):
        """One probability in (0, 1) per edge"""
        batch = build_graph(medium_instance, mode="knn", k=5)

        probs = convnet_forward(model, batch)

        assert probs.shape == (batch.n_edges,)
        assert np.all((probs > 0) & (probs < 1))

    def test_numbering_invariance(self, model, make_instance, small_instance):
        """Relabelling the customers does not change any edge probability"""
        perm = [0] + list(range(small_instance.n_customers, 0, -1))
        nodes = [small_instance.nodes[p] for p in perm]
        relabelled = make_instance([(n.x, n.y) for n in nodes], [n.demand for n in nodes], small_instance.capacity)

        a = build_graph(small_instance, mode="full")
        b = build_graph(relabelled, mode="full")
        pa = dict(zip(a.instance_edges(), convnet_forward(model, a)))
        pb = dict(zip(b.instance_edges(), convnet_forward(model, b)))

        new_id = {old: new for new, old in enumerate(perm)}
        for (i, j), p in pa.items():
            key = tuple(sorted((new_id[i], new_id[j])))
            assert pb[key] == pytest.approx(p, abs=1e-9)

    def test_backward_gives_gradients(self, model, line_solution):
        """Every parameter receives a finite gradient"""
        batch = build_graph(line_solution.instance, mode="full", truth=edges_of(line_solution))

        loss, grads = convnet_backward(model, batch)

        assert np.isfinite(loss)
        assert set(grads) == {name for name, _ in model.named_parameters()}
        assert all(torch.isfinite(g).all() for g in grads.values())

    def test_gradients_match_finite_differences(self):
        """Backpropagated gradients agree with central differences of the training loss"""
        torch.manual_seed(1)
        model = ConvNetModel(hidden=8, layers=2)
        instance = generate_instance(seed=5, n=11)
        batch = build_graph(instance, mode="full", truth=edges_of(savings_construct(instance)))
        assert batch.n_nodes == 12

        _, grads = convnet_backward(model, batch)

        def loss():
            return float(F.binary_cross_entropy_with_logits(model.edge_logits(batch), batch.targets))

        rng = np.random.default_rng(0)
        h = 1e-6
        worst = 0.0
        with torch.no_grad():
            for name, param in model.named_parameters():
                flat = param.view(-1)
                for idx in map(int, rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False)):
                    original = float(flat[idx])
                    flat[idx] = original + h
                    up = loss()
                    flat[idx] = original - h
                    down = loss()
                    flat[idx] = original
                    numeric = (up - down) / (2 * h)
                    analytic = float(grads[name].view(-1)[idx])
                    error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)
                    worst = max(worst, error)

        assert model.training
        assert worst < 1e-4

    def test_backward_needs_targets(self, model, line5):
        """A batch without targets cannot be trained on"""
        with pytest.raises(ModelFormatError):
            convnet_backward(model, build_graph(line5, mode="full"))

    def test_loss_decreases(self, model, medium_instance):
        """A few Adam steps on one batch reduce its loss"""
        customers = list(medium_instance.customers)
        truth = edges_of(Solution(medium_instance, [customers[k:k + 5] for k in range(0, len(customers), 5)]))
        batch = build_graph(medium_instance, mode="knn", k=5, truth=truth)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)

        first, _ = convnet_backward(model, batch)
        optimizer.step()
        for _ in range(40):
            last, _ = convnet_backward(model, batch)
            optimizer.step()

        assert last < first


@pytest.mark.unit
class TestGraphLabeling:
    """Labelings and checkpoints"""

    def test_depot_edges_never_fixed(self, model, line_solution):
        """With a threshold just above zero every customer edge is fixed and no depot edge"""
        labeling = label_solution_graph(line_solution, model, threshold=1e-9)

        assert labeling.fixed_edges() == {(1, 2), (2, 3), (4, 5)}
        assert labeling.selector == "convnet"

    def test_selector_object(self, model, line_solution):
        """GraphSelector labels with its threshold"""
        labeling = GraphSelector(model, threshold=1 - 1e-9).label(line_solution)

        assert labeling.n_fixed == 0

    def test_checkpoint_round_trip(self, tmp_path, model, medium_instance):
        """A reloaded checkpoint gives the same probabilities"""
        batch = build_graph(medium_instance, mode="knn", k=5)
        before = convnet_forward(model, batch)

        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "convnet.pt"))

        assert loaded.hidden == 16 and loaded.n_layers == 2
        np.testing.assert_allclose(convnet_forward(loaded, batch), before)

    def test_foreign_checkpoint(self, tmp_path):
        """Files without the checkpoint header are rejected"""
        path = tmp_path / "other.pt"
        torch.save({"weights": torch.zeros(2)}, path)

        with pytest.raises(ModelFormatError):
            load_checkpoint(path)

    def test_missing_checkpoint(self, tmp_path):
        """A missing file is a format error"""
        with pytest.raises(ModelFormatError, match="cannot read"):
            load_checkpoint(tmp_path / "absent.pt")

    def test_checkpoint_keeps_graph_mode(self, tmp_path, model, line_solution):
        """The training graph mode survives a checkpoint and becomes the selector's default"""
        model.graph_mode, model.graph_k = "knn", 3

        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "convnet.pt"))
        selector = GraphSelector(loaded)

        assert (loaded.graph_mode, loaded.graph_k) == ("knn", 3)
        assert (selector.mode, selector.k) == ("knn", 3)
        assert len(selector.label(line_solution).edges) == len(edges_of(line_solution).distinct())

    def test_context_modes_fix_same_edges_at_low_threshold(self, model, line_solution):
        """Scoring inside a full or k-NN graph still labels only the solution's own edges"""
        solution_mode = label_solution_graph(line_solution, model, threshold=1e-9)
        full_mode = label_solution_graph(line_solution, model, threshold=1e-9, mode="full")
        knn_mode = label_solution_graph(line_solution, model, threshold=1e-9, mode="knn", k=2)

        assert full_mode.fixed_edges() == solution_mode.fixed_edges() == knn_mode.fixed_edges()

    def test_labeling_keeps_inference_mode(self, model, line_solution):
        """A selector switches the model to inference once and labeling leaves it there"""
        selector = GraphSelector(model)

        selector.label(line_solution)

        assert not model.training


@pytest.mark.training
class TestRingHarness:
    """Four ring routes, 26 distinct edges, against a two-route ground truth"""

    def test_all_edges_fixed_and_true_positives_counted(self, ring_solution):
        """A model trained to keep every edge fixes all 26; 22 of them are in the merged truth"""
        instance = ring_solution.instance
        truth = EdgeSet.from_solution(Solution(instance, [list(range(1, 13)), list(range(13, 23))]))
        torch.manual_seed(0)
        model = ConvNetModel(hidden=8, layers=2)
        batch = build_graph(instance, mode="solution", solution=ring_solution)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
        for _ in range(300):
            convnet_backward(model, batch, targets=np.ones(batch.n_edges))
            optimizer.step()

        labeling = label_solution_graph(ring_solution, model, threshold=0.8, include_depot=True)

        assert batch.n_edges == 26
        assert labeling.n_fixed == 26
        assert sum(1 for e in labeling.fixed_edges() if e in truth) == 22
        assert precision(labeling, truth) == pytest.approx(22 / 26)
