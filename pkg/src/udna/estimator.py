"""scikit-learn style wrapper: decentralized nonconvex logistic regression."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .directions import SchemeParams
from .engine import make_config, run
from .network import build_graph, metropolis_weights, path_graph
from .problems import Dataset, logistic_problem

__all__ = ["DecentralizedLogisticRegression"]


class DecentralizedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary classifier trained by simulated decentralized optimization.

    The training set is split over ``n_nodes`` agents connected by a random
    graph; the agents minimize the average nonconvex logistic loss with the
    chosen preset and agree (up to the consensus error) on one weight vector.

    Parameters
    ----------
    n_nodes : int
        Number of simulated agents.
    density : float
        Edge density of the random communication graph (ignored for ``topology="path"``).
    topology : {"random", "path"}
    preset : str
        Method name, e.g. ``"udna2"`` or ``"non-atc-gt"``.
    alpha : float or "auto"
        Step size; ``"auto"`` uses the largest provably safe value.
    reg : float
        Weight of the nonconvex regularizer ``sum z^2 / (1 + z^2)``.
    max_iter, tol : int, float
        Iteration budget and stationarity tolerance.
    scheme_params : dict, optional
        Safeguard constants passed to :class:`~udna.directions.SchemeParams`.
    partition : {"contiguous", "strided"}
    random_state : int
        Seed of the graph (and of the strided shuffle).

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
        Node-averaged weights.
    node_coef_ : ndarray of shape (n_nodes, n_features)
    classes_ : ndarray of shape (2,)
    result_ : RunResult
    n_iter_ : int
    """

    def __init__(
        self,
        n_nodes=5,
        density=0.8,
        topology="random",
        preset="udna2",
        alpha="auto",
        reg=1.0,
        max_iter=1000,
        tol=0.0,
        scheme_params=None,
        partition="contiguous",
        random_state=0,
    ):
        self.n_nodes = n_nodes
        self.density = density
        self.topology = topology
        self.preset = preset
        self.alpha = alpha
        self.reg = reg
        self.max_iter = max_iter
        self.tol = tol
        self.scheme_params = scheme_params
        self.partition = partition
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, accept_sparse="csr", dtype=float)
        self.classes_ = unique_labels(y)
        if self.classes_.size != 2:
            raise ValueError(f"binary problems only; got {self.classes_.size} classes")
        if X.shape[0] < self.n_nodes:
            raise ValueError("need at least one sample per node")
        labels = np.where(y == self.classes_[1], 1.0, -1.0)
        data = Dataset(labels, sp.csr_matrix(X))
        problem = logistic_problem(data, self.n_nodes, self.reg, self.partition, self.random_state)
        graph = path_graph(self.n_nodes) if self.topology == "path" else build_graph(
            self.n_nodes, self.density, self.random_state
        )
        cfg = make_config(
            self.preset,
            SchemeParams(**(self.scheme_params or {})),
            alpha=self.alpha,
            max_iters=self.max_iter,
            stop_tol=self.tol,
        )
        self.result_ = run(cfg, problem, metropolis_weights(graph))
        self.node_coef_ = self.result_.state.x.copy()
        self.coef_ = self.node_coef_.mean(axis=0)
        self.n_iter_ = self.result_.state.t
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, accept_sparse="csr", dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.asarray(X @ self.coef_).ravel()

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
