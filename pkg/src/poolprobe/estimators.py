"""scikit-learn compatible wrappers around the pooling networks.

Inputs are sequences of graphs: :class:`~poolprobe.graph.Graph` objects or
``(adjacency, features)`` pairs. Estimators support ``get_params`` /
``set_params`` / ``clone`` and compose with sklearn pipelines and model
selection utilities.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.neural_network import MLPClassifier, MLPRegressor
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .graph import Graph
from .losses import LossWeights
from .models import DatasetStats, ModelSpec, build_model, forward
from .training import TrainConfig, predict_raw, train_run

__all__ = [
    "check_graphs", "GraphPoolingClassifier", "GraphPoolingRegressor",
    "MeanFeatures", "make_structure_agnostic_baseline",
]


def check_graphs(X, y=None, *, allow_empty=False):
    """Coerce ``X`` to a list of Graphs with a common feature width.

    When ``y`` is given it must have one entry per graph; otherwise labels
    are taken from the graphs themselves.
    """
    if isinstance(X, Graph):
        raise TypeError("expected a sequence of graphs, got a single Graph")
    graphs = []
    for i, item in enumerate(X):
        if isinstance(item, Graph):
            graphs.append(item)
        elif isinstance(item, (tuple, list)) and len(item) in (2, 3):
            graphs.append(Graph(*item))
        else:
            raise TypeError(f"item {i} is neither a Graph nor an (adjacency, features) pair")
    if not graphs and not allow_empty:
        raise ValueError("need at least one graph")
    widths = {g.d for g in graphs}
    if len(widths) > 1:
        raise ValueError(f"graphs disagree on feature width: {sorted(widths)}")
    if y is None:
        return graphs, None
    y = np.asarray(y)
    if y.shape != (len(graphs),):
        raise ValueError(f"y has shape {y.shape}, expected ({len(graphs)},)")
    return graphs, y


class _GraphPoolingBase(BaseEstimator):
    _task = None

    def __init__(self, family="graclus", variant=None, initial_convs=2, pool_layers=2,
                 hidden_dim=32, mlp_hidden=None, cluster_ratio=None, keys_per_layer=None,
                 heads=None, tau=None, lambda_link=1.0, lambda_entropy=1.0,
                 gmn_update_period=5, gmn_kl_weight=1.0, lr_init=1e-3, lr_min=1e-5,
                 lr_patience=10, early_stop_patience=50, max_epochs=100, batch_size=16,
                 validation_fraction=0.1, n_max=None, random_state=0):
        self.family = family
        self.variant = variant
        self.initial_convs = initial_convs
        self.pool_layers = pool_layers
        self.hidden_dim = hidden_dim
        self.mlp_hidden = mlp_hidden
        self.cluster_ratio = cluster_ratio
        self.keys_per_layer = keys_per_layer
        self.heads = heads
        self.tau = tau
        self.lambda_link = lambda_link
        self.lambda_entropy = lambda_entropy
        self.gmn_update_period = gmn_update_period
        self.gmn_kl_weight = gmn_kl_weight
        self.lr_init = lr_init
        self.lr_min = lr_min
        self.lr_patience = lr_patience
        self.early_stop_patience = early_stop_patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.n_max = n_max
        self.random_state = random_state

    def _model_spec(self):
        return ModelSpec(
            family=self.family, variant=self.variant, initial_convs=self.initial_convs,
            pool_layers=self.pool_layers, hidden_dim=self.hidden_dim,
            mlp_hidden=self.mlp_hidden, cluster_ratio=self.cluster_ratio,
            keys_per_layer=self.keys_per_layer, heads=self.heads, tau=self.tau,
            task=self._task)

    def _train_config(self):
        weights = LossWeights(self.lambda_link, self.lambda_entropy,
                              self.gmn_update_period, self.gmn_kl_weight)
        return TrainConfig(lr_init=self.lr_init, lr_min=self.lr_min,
                           lr_patience=self.lr_patience,
                           early_stop_patience=self.early_stop_patience,
                           max_epochs=self.max_epochs, batch_size=self.batch_size,
                           seed=int(self.random_state or 0), loss_weights=weights)

    def _encode(self, y):
        return y

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X``; ``eval_set=(X_val, y_val)`` drives early stopping.

        Without ``eval_set`` a ``validation_fraction`` of ``X`` is held out.
        """
        graphs, y = check_graphs(X, y)
        if y is None:
            y = np.array([g.label for g in graphs])
        targets = self._fit_targets(y)
        train = [g.with_label(t) for g, t in zip(graphs, targets)]
        val = []
        if eval_set is not None:
            vg, vy = check_graphs(*eval_set) if isinstance(eval_set, tuple) else check_graphs(eval_set)
            if vy is None:
                vy = np.array([g.label for g in vg])
            val = [g.with_label(t) for g, t in zip(vg, self._encode(vy))]
        elif self.validation_fraction and len(train) >= 10:
            order = np.random.default_rng(self.random_state).permutation(len(train))
            n_val = max(1, int(round(self.validation_fraction * len(train))))
            val = [train[i] for i in order[:n_val]]
            train = [train[i] for i in order[n_val:]]
        n_max = self.n_max or max(g.n for g in train + val)
        self.n_features_in_ = graphs[0].d
        stats = DatasetStats(n_max, self.n_features_in_, self._n_outputs())
        self.model_ = build_model(self._model_spec(), stats, int(self.random_state or 0))
        self.run_result_ = train_run(self.model_, (train, val, []), self._train_config())
        return self

    def _raw(self, X):
        check_is_fitted(self, "model_")
        graphs, _ = check_graphs(X)
        too_big = [g.n for g in graphs if g.n > self.model_.stats.n_max]
        if too_big and self.model_.spec.family in ("diffpool", "gmn") and \
                self.model_.spec.variant in ("uniform", "normal", "bernoulli", "random"):
            raise ValueError(
                f"graphs with {max(too_big)} nodes exceed n_max={self.model_.stats.n_max} "
                "of the fixed random assignment")
        return predict_raw(self.model_, graphs)

    def transform(self, X):
        """Graph-level embeddings (the readout vector fed to the MLP head)."""
        check_is_fitted(self, "model_")
        graphs, _ = check_graphs(X)
        return np.vstack([forward(self.model_, g)[1].readout for g in graphs])


class GraphPoolingClassifier(ClassifierMixin, _GraphPoolingBase):
    """Hierarchical-pooling GNN classifier.

    Parameters
    ----------
    family : {"graclus", "complement", "diffpool", "gmn", "global_mean_baseline"}
    variant : str, optional
        DiffPool: learned, uniform, normal, bernoulli, invariant_normal.
        GMN: kernel, distance, random.
    initial_convs, pool_layers, hidden_dim : int
        Convolutions before the first pooling layer, pooling layers, width.
    lambda_link, lambda_entropy : float
        DiffPool auxiliary loss weights.
    gmn_update_period : int
        Epoch period of the key-only purity-loss updates.
    max_epochs, batch_size, early_stop_patience : int
    random_state : int
        Seeds weights, random assignments, shuffling and hold-out split.

    Attributes
    ----------
    classes_ : ndarray
    model_ : poolprobe.models.Model
    run_result_ : poolprobe.training.RunResult
    """

    _task = "classification"

    def _fit_targets(self, y):
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return encoded

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[idx], np.asarray(y)):
            raise ValueError("eval_set contains labels unseen in training")
        return idx

    def _n_outputs(self):
        return len(self.classes_)

    def decision_function(self, X):
        return self._raw(X)

    def predict_proba(self, X):
        raw = self._raw(X)
        z = np.exp(raw - raw.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        raw = self._raw(X)
        return self.classes_[raw.argmax(axis=1)]


class GraphPoolingRegressor(RegressorMixin, _GraphPoolingBase):
    """Hierarchical-pooling GNN regressor trained on absolute error.

    Takes the same parameters as :class:`GraphPoolingClassifier`.
    """

    _task = "regression"

    def _fit_targets(self, y):
        return np.asarray(y, dtype=np.float64)

    def _encode(self, y):
        return np.asarray(y, dtype=np.float64)

    def _n_outputs(self):
        return None

    def predict(self, X):
        return self._raw(X)[:, 0]


class MeanFeatures(TransformerMixin, BaseEstimator):
    """Average node features per graph, discarding the adjacency."""

    def fit(self, X, y=None):
        graphs, _ = check_graphs(X)
        self.n_features_in_ = graphs[0].d
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        graphs, _ = check_graphs(X)
        if graphs[0].d != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {graphs[0].d}")
        return np.vstack([g.features.mean(axis=0) for g in graphs])


def make_structure_agnostic_baseline(task="classification", hidden=32, random_state=0):
    """MLP on mean node features; it never sees the graph structure."""
    if task == "classification":
        head = MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=1000, random_state=random_state)
    else:
        head = MLPRegressor(hidden_layer_sizes=(hidden,), max_iter=1000, random_state=random_state)
    return Pipeline([("mean", MeanFeatures()), ("scale", StandardScaler()), ("mlp", head)])
