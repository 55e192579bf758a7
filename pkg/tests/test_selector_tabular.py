"""
Tests for edge features, the GBT and FNN selectors and their model files
"""
import json

import numpy as np
import pytest
from sklearn.ensemble import GradientBoostingClassifier

from app.services.errors import EdgeSelectorError, ModelFormatError
from app.services.labeling import ThresholdRule
from app.services.selector_tabular import (
    EdgeFeatures, FnnModel, GbtModel, TabularSelector, extract_features, fnn_predict, gbt_predict,
    label_solution_tabular, load_tabular_model, save_tabular_model, solution_features,
)
from app.services.solution import Solution


@pytest.fixture
def line_solution(line5):
    return Solution(line5, [[1, 2, 3], [4, 5]])


@pytest.fixture
def toy_xy():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, size=(400, 4))
    X[:, 2] = rng.integers(-1, 26, size=400)
    y = ((X[:, 0] + X[:, 3] > 1.0) & (X[:, 2] <= 5)).astype(int)
    return X, y


@pytest.mark.unit
class TestFeatures:
    """Per-edge features"""

    def test_line_edge_features(self, line_solution):
        """Load shares, rank and relative distance of edge (1, 2)"""
        feat = extract_features(line_solution, (1, 2), gamma=5)

        assert feat.x1 == pytest.approx(20 / 50)
        assert feat.x2 == pytest.approx(20 / 30)
        assert feat.x3 == 1
        assert feat.x4 == pytest.approx(10 / 160)

    def test_rank_takes_closer_end(self, line5):
        """x3 is the smaller of the two neighbour ranks and -1 when both exceed gamma"""
        solution = Solution(line5, [[1, 5], [2, 3, 4]])

        assert extract_features(solution, (1, 5), gamma=5).x3 == 4
        assert extract_features(solution, (5, 1), gamma=5).x3 == 4
        assert extract_features(solution, (1, 5), gamma=3).x3 == -1
        assert extract_features(Solution(line5, [[1, 2, 3], [4, 5]]), (1, 2), gamma=1).x3 == 1

    def test_reversed_routes_give_same_features(self, medium_instance):
        """Traversing every route backwards leaves every edge's feature row unchanged"""
        customers = list(medium_instance.customers)
        routes = [customers[k:k + 7] for k in range(0, len(customers), 7)]
        forward = Solution(medium_instance, routes)
        backward = Solution(medium_instance, [list(reversed(r)) for r in reversed(routes)])

        edges_f, X_f = solution_features(forward, gamma=5)
        edges_b, X_b = solution_features(backward, gamma=5)
        rows_f = {e: tuple(row) for e, row in zip(edges_f, X_f)}
        rows_b = {e: tuple(row) for e, row in zip(edges_b, X_b)}

        assert rows_f == rows_b
        assert any(row[2] == -1 for row in rows_f.values())

    def test_depot_and_foreign_edges_rejected(self, line_solution):
        """Features exist only for customer edges of the solution"""
        with pytest.raises(EdgeSelectorError, match="depot"):
            extract_features(line_solution, (0, 1))
        with pytest.raises(EdgeSelectorError, match="not in the solution"):
            extract_features(line_solution, (3, 4))

    def test_solution_features(self, line_solution):
        """One row per distinct customer edge"""
        edges, X = solution_features(line_solution, gamma=5)

        assert edges == [(1, 2), (2, 3), (4, 5)]
        assert X.shape == (3, 4)

    def test_singleton_routes_have_no_rows(self, line5):
        """Routes of one customer contribute no feature rows"""
        edges, X = solution_features(Solution(line5, [[1], [2], [3], [4], [5]]))

        assert edges == []
        assert X.shape == (0, 4)


@pytest.mark.unit
class TestGbt:
    """Gradient boosted trees"""

    def test_matches_sklearn(self, toy_xy):
        """Converted trees reproduce the classifier's probabilities"""
        X, y = toy_xy
        clf = GradientBoostingClassifier(n_estimators=20, max_depth=3, random_state=0).fit(X, y)

        model = GbtModel.from_sklearn(clf)

        assert model.n_estimators == 20
        np.testing.assert_allclose(model.predict_proba(X), clf.predict_proba(X)[:, 1], atol=1e-8)

    def test_single_edge_prediction(self, toy_xy):
        """gbt_predict agrees with the batch path"""
        X, y = toy_xy
        model = GbtModel.from_sklearn(GradientBoostingClassifier(n_estimators=5, random_state=0).fit(X, y))
        feat = EdgeFeatures(*X[0][:2], int(X[0][2]), X[0][3])

        assert gbt_predict(model, feat) == pytest.approx(float(model.predict_proba(feat.as_array())[0]))

    def test_feature_width_checked(self, toy_xy):
        """Three columns do not fit a four-feature model"""
        X, y = toy_xy
        model = GbtModel.from_sklearn(GradientBoostingClassifier(n_estimators=2, random_state=0).fit(X, y))

        with pytest.raises(ModelFormatError):
            model.predict_proba(X[:, :3])


@pytest.mark.unit
class TestFnn:
    """Feed-forward network"""

    def test_shapes_validated(self):
        """Mismatched layers are rejected"""
        with pytest.raises(ModelFormatError):
            FnnModel(weights=[np.zeros((4, 3)), np.zeros((2, 1))], biases=[np.zeros(3), np.zeros(1)])
        with pytest.raises(ModelFormatError, match="one unit"):
            FnnModel(weights=[np.zeros((4, 2))], biases=[np.zeros(2)])

    def test_probabilities_in_range(self):
        """Outputs are probabilities"""
        model = FnnModel.initialize([4, 8, 8, 1], np.random.default_rng(0))

        probs = model.predict_proba(np.random.default_rng(1).normal(size=(10, 4)))

        assert probs.shape == (10,)
        assert np.all((probs > 0) & (probs < 1))

    def test_gradients_match_finite_differences(self):
        """Backpropagation agrees with central differences"""
        rng = np.random.default_rng(3)
        model = FnnModel.initialize([4, 5, 1], rng)
        X = rng.normal(size=(12, 4))
        y = rng.integers(0, 2, size=12).astype(float)

        _, grad_w, grad_b = model.loss_and_gradients(X, y)

        h = 1e-6
        for params, grads in ((model.weights, grad_w), (model.biases, grad_b)):
            for p, g in zip(params, grads):
                flat, gflat = p.reshape(-1), g.reshape(-1)
                for k in range(0, flat.size, 3):
                    original = flat[k]
                    flat[k] = original + h
                    up = model.loss_and_gradients(X, y)[0]
                    flat[k] = original - h
                    down = model.loss_and_gradients(X, y)[0]
                    flat[k] = original
                    assert gflat[k] == pytest.approx((up - down) / (2 * h), abs=1e-5)

    def test_width_mismatch(self):
        """fnn_predict refuses a feature vector of the wrong width"""
        model = FnnModel.initialize([4, 3, 1], np.random.default_rng(0))

        with pytest.raises(ModelFormatError):
            fnn_predict(model, np.zeros(5))


@pytest.mark.unit
class TestTabularLabeling:
    """Labeling with tabular models"""

    def test_labels_only_customer_edges(self, line_solution):
        """Depot edges are never fixed"""
        model = FnnModel(weights=[np.zeros((4, 1))], biases=[np.array([5.0])])

        labeling = label_solution_tabular(line_solution, model, ThresholdRule())

        assert labeling.fixed_edges() == {(1, 2), (2, 3), (4, 5)}
        assert labeling.selector == "fnn"

    def test_selector_object(self, line_solution):
        """TabularSelector wraps the model and rule"""
        model = FnnModel(weights=[np.zeros((4, 1))], biases=[np.array([-5.0])])
        selector = TabularSelector(model, ThresholdRule(), gamma=5)

        labeling = selector.label(line_solution)

        assert labeling.n_fixed == 0
        assert selector.name == "fnn"


@pytest.mark.unit
class TestModelFiles:
    """npz model format"""

    def test_fnn_file(self, tmp_path):
        """A saved network predicts identically after loading"""
        model = FnnModel.initialize([4, 6, 1], np.random.default_rng(0))
        X = np.random.default_rng(1).normal(size=(5, 4))

        loaded = load_tabular_model(save_tabular_model(model, tmp_path / "fnn.npz"))

        np.testing.assert_allclose(loaded.predict_proba(X), model.predict_proba(X))

    def test_gbt_file(self, tmp_path, toy_xy):
        """A saved tree ensemble predicts identically after loading"""
        X, y = toy_xy
        model = GbtModel.from_sklearn(GradientBoostingClassifier(n_estimators=5, random_state=0).fit(X, y))

        loaded = load_tabular_model(save_tabular_model(model, tmp_path / "gbt.npz"))

        assert isinstance(loaded, GbtModel)
        np.testing.assert_allclose(loaded.predict_proba(X), model.predict_proba(X))

    def test_foreign_file(self, tmp_path):
        """Files without the selector header are rejected"""
        path = tmp_path / "other.npz"
        np.savez(path, header=np.array(json.dumps({"format": "other"})))

        with pytest.raises(ModelFormatError, match="not a tabular"):
            load_tabular_model(path)

    def test_unreadable_file(self, tmp_path):
        """Garbage bytes are a format error"""
        path = tmp_path / "broken.npz"
        path.write_bytes(b"not a zip")

        with pytest.raises(ModelFormatError, match="cannot read"):
            load_tabular_model(path)
