"""Cluster assignments for every pooling variant.

Hard assignments come from greedy heavy-edge matching (optionally on the
complement graph). Soft random assignments are sampled once per run from
a fixed distribution and never trained.

Random streams use numpy's PCG64 bit generator (``numpy.random.default_rng``),
which is specified and reproducible across platforms for a given seed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .graph import Graph, Partition

__all__ = [
    "make_rng", "graclus_matching", "complement_matching",
    "RandomAssignmentSpec", "sample_random_assignment",
    "invariant_random_assignment",
]

DISTRIBUTION_DEFAULTS = {
    "uniform": {"a": 0.0, "b": 1.0},
    "normal": {"mu": 0.0, "sigma2": 1.0},
    "bernoulli": {"alpha": 0.3},
}


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _adjacency(g):
    return g.adjacency if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)


def graclus_matching(g, rng):
    """Greedy normalized-cut heavy-edge matching.

    Nodes are visited in a random order; each unmatched node is paired with
    the unmatched neighbour maximizing ``1/deg(i) + 1/deg(j)`` (ties go to
    the lowest index). Nodes without a free neighbour stay singletons.
    Clusters are numbered by their smallest member.
    """
    a = _adjacency(g)
    n = a.shape[0]
    if n == 0:
        raise ContractError("cannot match an empty graph")
    rng = make_rng(rng)
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    mate = np.full(n, -1, dtype=np.intp)
    for i in rng.permutation(n):
        if mate[i] >= 0:
            continue
        nbrs = np.flatnonzero((a[i] > 0) & (mate < 0))
        nbrs = nbrs[nbrs != i]
        if nbrs.size == 0:
            mate[i] = i
            continue
        j = nbrs[np.argmax(inv[i] + inv[nbrs])]
        mate[i] = j
        mate[j] = i
    return Partition.from_labels(np.minimum(np.arange(n), mate))


def complement_matching(g, rng):
    """Matching computed on the complement graph, so pairs are non-adjacent."""
    a = _adjacency(g)
    comp = 1.0 - a
    np.fill_diagonal(comp, 0.0)
    return graclus_matching(comp, rng)


@dataclass(frozen=True)
class RandomAssignmentSpec:
    """Distribution and shape of a fixed random assignment matrix."""

    distribution: str
    shape: tuple
    seed: int = 0
    params: dict = field(default_factory=dict)

    def resolved_params(self):
        if self.distribution not in DISTRIBUTION_DEFAULTS:
            raise ContractError(f"unknown distribution {self.distribution!r}")
        params = dict(DISTRIBUTION_DEFAULTS[self.distribution])
        unknown = set(self.params) - set(params)
        if unknown:
            raise ContractError(f"unknown parameters for {self.distribution}: {sorted(unknown)}")
        params.update(self.params)
        return params


def sample_random_assignment(spec, rng=None):
    """Draw the raw (pre-softmax) assignment matrix as a frozen Tensor."""
    p = spec.resolved_params()
    rows, cols = spec.shape
    if rows < 1 or cols < 1:
        raise ContractError(f"invalid assignment shape {spec.shape}")
    rng = make_rng(spec.seed if rng is None else rng)
    if spec.distribution == "uniform":
        if not p["b"] > p["a"]:
            raise ContractError("uniform needs a < b")
        data = rng.uniform(p["a"], p["b"], size=(rows, cols))
    elif spec.distribution == "normal":
        if not p["sigma2"] > 0:
            raise ContractError("normal needs sigma2 > 0")
        data = rng.normal(p["mu"], np.sqrt(p["sigma2"]), size=(rows, cols))
    else:
        if not 0.0 <= p["alpha"] <= 1.0:
            raise ContractError("bernoulli needs alpha in [0, 1]")
        data = (rng.random((rows, cols)) < p["alpha"]).astype(np.float64)
    return ad.Tensor(data, trainable=False, name=f"random_{spec.distribution}")


def invariant_random_assignment(x, s_prime):
    """Feature-projected random assignment ``X @ S'`` (raw, pre-softmax).

    Permuting the rows of ``x`` permutes the result identically, which makes
    the pooled outputs invariant to node order.
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    s_prime = s_prime if isinstance(s_prime, ad.Tensor) else ad.Tensor(s_prime)
    if x.cols != s_prime.rows:
        raise DimensionError(
            f"cannot project features {x.shape} with random matrix {s_prime.shape}")
    return ad.matmul(ad.detach(x), ad.detach(s_prime))
