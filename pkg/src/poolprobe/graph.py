"""Graph container and the structural operators used by the pooling layers."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

__all__ = [
    "Graph", "Partition", "check_permutation", "check_adjacency",
    "complement", "degrees", "permute", "max_pool_features",
    "coarsen_hard", "coarsen_soft", "is_row_stochastic",
]


def check_adjacency(a):
    """Validate a symmetric, binary, zero-diagonal adjacency; return it as float64."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0.0, 1.0)).all():
        raise ContractError("adjacency entries must be 0 or 1")
    if not np.array_equal(a, a.T):
        raise ContractError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ContractError("adjacency must have a zero diagonal")
    return a


class Graph:
    """An undirected graph ``(A, X)`` with an optional target.

    Arrays are copied and frozen on construction, so a Graph can be shared
    read-only between runs.
    """

    __slots__ = ("adjacency", "features", "label")

    def __init__(self, adjacency, features=None, label=None):
        a = check_adjacency(adjacency).copy()
        if features is None:
            features = np.ones((a.shape[0], 1))
        x = np.array(features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] != a.shape[0]:
            raise DimensionError(
                f"features must have {a.shape[0]} rows, got shape {x.shape}")
        a.flags.writeable = False
        x.flags.writeable = False
        self.adjacency = a
        self.features = x
        self.label = label

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def edges(self):
        """Undirected edges as sorted ``(i, j)`` pairs with ``i < j``."""
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    def with_label(self, label):
        return Graph(self.adjacency, self.features, label)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (np.array_equal(self.adjacency, other.adjacency)
                and np.array_equal(self.features, other.features)
                and self.label == other.label)

    __hash__ = None

    def __repr__(self):
        return f"Graph(n={self.n}, edges={int(self.adjacency.sum() // 2)}, d={self.d}, label={self.label!r})"


@dataclass(frozen=True, eq=False)
class Partition:
    """Hard cluster map: node ``i`` belongs to cluster ``assign[i]`` in ``[0, k)``."""

    assign: np.ndarray
    k: int

    def __post_init__(self):
        assign = np.asarray(self.assign, dtype=np.intp)
        if assign.ndim != 1:
            raise DimensionError("partition assignment must be a vector")
        k = int(self.k)
        if assign.size and (assign.min() < 0 or assign.max() >= k):
            raise ContractError(f"cluster indices must lie in [0, {k})")
        counts = np.bincount(assign, minlength=k)
        if np.any(counts == 0):
            raise ContractError(
                f"partition has empty clusters: {np.flatnonzero(counts == 0).tolist()}")
        assign.flags.writeable = False
        object.__setattr__(self, "assign", assign)
        object.__setattr__(self, "k", k)

    @classmethod
    def from_labels(cls, labels):
        """Relabel arbitrary cluster ids to ``0..k-1`` in order of first appearance."""
        _, first, inverse = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return cls(order[inverse], len(first))

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assign, other.assign)

    __hash__ = None

    @property
    def n(self):
        return self.assign.size

    def one_hot(self):
        s = np.zeros((self.n, self.k))
        s[np.arange(self.n), self.assign] = 1.0
        return s

    def clusters(self):
        return [np.flatnonzero(self.assign == c).tolist() for c in range(self.k)]


def check_permutation(perm, n=None):
    perm = np.asarray(perm, dtype=np.intp)
    if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
        raise ContractError("permutation must be a bijection on 0..n-1")
    if n is not None and perm.size != n:
        raise ContractError(f"permutation has length {perm.size}, graph has {n} nodes")
    return perm


def is_row_stochastic(s, atol=1e-9):
    s = s.data if isinstance(s, ad.Tensor) else np.asarray(s)
    return bool(np.all(s >= 0) and np.allclose(s.sum(axis=1), 1.0, rtol=0, atol=atol))


def complement(g):
    """Flip every off-diagonal entry; features and label are kept."""
    a = 1.0 - g.adjacency
    np.fill_diagonal(a, 0.0)
    return Graph(a, g.features, g.label)


def degrees(g):
    a = g.adjacency if isinstance(g, Graph) else np.asarray(g)
    return a.sum(axis=1)


def permute(g, perm):
    """Relabel nodes so that new node ``i`` is old node ``perm[i]``.

    Equivalent to ``(P A P^T, P X)`` with ``P[i, perm[i]] = 1``.
    """
    perm = check_permutation(perm, g.n)
    a = g.adjacency[np.ix_(perm, perm)]
    return Graph(a, g.features[perm], g.label)


def max_pool_features(z, part):
    """Coarsen node features by taking the column max inside each cluster."""
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    if z.rows != part.n:
        raise DimensionError(f"features have {z.rows} rows, partition covers {part.n} nodes")
    return ad.segment_max(z, part.assign, part.k)


def coarsen_hard(a, part):
    """Binary coarse adjacency: clusters are linked iff an edge crosses them.

    ``a`` may carry leading batch axes (``... x n x n``).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-2:] != (part.n, part.n):
        raise DimensionError(f"adjacency shape {a.shape} does not match partition of {part.n} nodes")
    s = part.one_hot()
    coarse = (s.T @ a @ s > 0).astype(np.float64)
    idx = np.arange(part.k)
    coarse[..., idx, idx] = 0.0
    return coarse


def coarsen_soft(a, s):
    """Weighted coarse adjacency ``S^T A S``; the diagonal is kept."""
    a = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
    s = s if isinstance(s, ad.Tensor) else ad.Tensor(s)
    if a.rows != a.cols or a.rows != s.rows:
        raise DimensionError(f"coarsen_soft: adjacency {a.shape} vs assignment {s.shape}")
    return ad.matmul(ad.transpose(s), ad.matmul(a, s))
