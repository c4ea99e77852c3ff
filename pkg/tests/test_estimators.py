import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from poolprobe.data import gen_synthetic
from poolprobe.estimators import (GraphPoolingClassifier, GraphPoolingRegressor, MeanFeatures,
                                  check_graphs, make_structure_agnostic_baseline)
from poolprobe.graph import Graph


@pytest.fixture(scope="module")
def cycles():
    graphs, _ = gen_synthetic("cycles_vs_grids", 60, noise=0.1, seed=0)
    return graphs, np.array([g.label for g in graphs])


def test_check_graphs():
    a = np.array([[0, 1], [1, 0]])
    graphs, y = check_graphs([(a, np.ones((2, 2))), Graph(a, np.zeros((2, 2)))], [0, 1])
    assert len(graphs) == 2 and y.tolist() == [0, 1]
    with pytest.raises(ValueError):
        check_graphs([])
    with pytest.raises(ValueError):
        check_graphs([Graph(a, np.ones((2, 1))), Graph(a, np.ones((2, 2)))])
    with pytest.raises(ValueError):
        check_graphs([Graph(a)], [0, 1])
    with pytest.raises(TypeError):
        check_graphs(Graph(a))
    with pytest.raises(TypeError):
        check_graphs([np.eye(2)])


def test_get_params_and_clone():
    clf = GraphPoolingClassifier(family="gmn", variant="distance", hidden_dim=8)
    params = clf.get_params()
    assert params["family"] == "gmn" and params["hidden_dim"] == 8
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    clf.set_params(max_epochs=3)
    assert clf.max_epochs == 3


def test_classifier_fit_predict(cycles):
    graphs, y = cycles
    labels = np.where(y == 0, "cycle", "grid")
    clf = GraphPoolingClassifier(hidden_dim=8, max_epochs=5, lr_init=1e-2)
    with pytest.raises(NotFittedError):
        clf.predict(graphs)
    clf.fit(graphs[:45], labels[:45])
    assert list(clf.classes_) == ["cycle", "grid"]
    proba = clf.predict_proba(graphs[45:])
    assert proba.shape == (15, 2) and np.allclose(proba.sum(axis=1), 1)
    assert set(clf.predict(graphs[45:])) <= {"cycle", "grid"}
    assert clf.transform(graphs[:3]).shape == (3, 8)
    assert 0 <= clf.score(graphs[45:], labels[45:]) <= 1
    assert clf.n_features_in_ == 3


def test_classifier_eval_set_and_cv(cycles):
    graphs, y = cycles
    clf = GraphPoolingClassifier(family="global_mean_baseline", hidden_dim=4, max_epochs=2)
    clf.fit(graphs[:40], y[:40], eval_set=(graphs[40:50], y[40:50]))
    assert len(clf.run_result_.history) == 2
    scores = cross_val_score(clone(clf), graphs, y, cv=2)
    assert scores.shape == (2,)
    with pytest.raises(ValueError):
        GraphPoolingClassifier().fit(graphs[:20], np.zeros(20))


def test_regressor(cycles):
    graphs, _ = gen_synthetic("triangle_count_regression", 30, seed=1)
    y = np.array([g.label for g in graphs])
    reg = GraphPoolingRegressor(hidden_dim=8, max_epochs=3).fit(graphs, y)
    assert reg.predict(graphs).shape == (30,)
    assert reg.run_result_.metric_name == "mae"


def test_random_variant_rejects_oversized_graphs(cycles):
    graphs, y = cycles
    clf = GraphPoolingClassifier(family="diffpool", variant="uniform", hidden_dim=4,
                                 max_epochs=1).fit(graphs, y)
    a = np.zeros((40, 40))
    with pytest.raises(ValueError, match="n_max"):
        clf.predict([Graph(a, np.ones((40, 3)))])


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_mean_features_and_baseline(cycles):
    graphs, y = cycles
    mf = MeanFeatures().fit(graphs)
    out = mf.transform(graphs[:2])
    assert np.allclose(out[0], graphs[0].features.mean(axis=0))
    with pytest.raises(ValueError):
        mf.transform([Graph(np.zeros((2, 2)), np.ones((2, 5)))])
    pipe = make_structure_agnostic_baseline(random_state=0).fit(graphs, y)
    assert pipe.predict(graphs).shape == (60,)
    assert make_structure_agnostic_baseline("regression").steps[-1][0] == "mlp"
