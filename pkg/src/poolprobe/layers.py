"""Differentiable layers: convolution, DiffPool, memory pooling, readout, head."""

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .graph import coarsen_soft

__all__ = [
    "ConvParams", "DiffPoolParams", "GmnLayerParams", "MlpParams",
    "glorot", "init_conv", "init_mlp",
    "basic_conv", "diffpool_layer", "gmn_kernel_assign", "gmn_memory_layer",
    "feature_norm", "global_mean_readout", "mlp_head",
    "FEATURE_NORM_EPS", "DISTANCE_EPS",
]

FEATURE_NORM_EPS = 1e-5
# keeps sqrt differentiable when a query sits exactly on a key
DISTANCE_EPS = 1e-12


def glorot(rng, d_in, d_out, name=None):
    limit = math.sqrt(6.0 / (d_in + d_out))
    return ad.Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), trainable=True, name=name)


@dataclass
class ConvParams:
    w1: ad.Tensor
    w2: ad.Tensor

    def tensors(self):
        return [self.w1, self.w2]


def init_conv(rng, d_in, d_out, prefix="conv"):
    return ConvParams(glorot(rng, d_in, d_out, f"{prefix}.w1"),
                      glorot(rng, d_in, d_out, f"{prefix}.w2"))


@dataclass
class DiffPoolParams:
    gnn1: ConvParams  # assignment GNN, output width k
    gnn2: ConvParams  # embedding GNN
    k: int

    def __post_init__(self):
        if self.gnn1.w1.cols != self.k:
            raise DimensionError(
                f"assignment GNN outputs {self.gnn1.w1.cols} columns, expected k={self.k}")

    def tensors(self):
        return self.gnn1.tensors() + self.gnn2.tensors()


@dataclass
class GmnLayerParams:
    keys: list
    head_weights: ad.Tensor
    w: ad.Tensor
    tau: float = 1.0
    variant: str = "kernel"
    fixed_assignment: ad.Tensor = None

    def __post_init__(self):
        if self.variant not in ("kernel", "distance", "random"):
            raise ContractError(f"unknown memory-layer variant {self.variant!r}")
        if not self.tau > 0:
            raise ContractError("tau must be positive")
        if self.variant != "random" and len(self.keys) < 1:
            raise ContractError("at least one head is required")
        if self.variant == "distance" and any(k.trainable for k in self.keys):
            raise ContractError("distance variant keys must be frozen")
        if self.variant == "random":
            if self.fixed_assignment is None:
                raise ContractError("random variant needs a fixed assignment")
            if self.fixed_assignment.trainable:
                raise ContractError("fixed assignment must not be trainable")

    @property
    def heads(self):
        return len(self.keys)

    @property
    def k(self):
        if self.variant == "random":
            return self.fixed_assignment.cols
        return self.keys[0].rows

    def tensors(self):
        if self.variant == "random":
            return [self.w]
        return list(self.keys) + [self.head_weights, self.w]


@dataclass
class MlpParams:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_mlp(rng, d_in, d_hidden, d_out, prefix="mlp"):
    return MlpParams(
        glorot(rng, d_in, d_hidden, f"{prefix}.w1"),
        ad.Tensor(np.zeros((1, d_hidden)), trainable=True, name=f"{prefix}.b1"),
        glorot(rng, d_hidden, d_out, f"{prefix}.w2"),
        ad.Tensor(np.zeros((1, d_out)), trainable=True, name=f"{prefix}.b2"),
    )


def _t(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def basic_conv(a, x, p, relu=True):
    """``ReLU(X W1 + A X W2)``; ``relu=False`` gives the linear pre-activation."""
    a, x = _t(a), _t(x)
    if a.rows != a.cols or a.rows != x.rows:
        raise DimensionError(f"basic_conv: adjacency {a.shape} vs features {x.shape}")
    if p.w1.rows != x.cols or p.w2.shape != p.w1.shape:
        raise DimensionError(
            f"basic_conv: features {x.shape} vs weights {p.w1.shape}/{p.w2.shape}")
    out = ad.add(ad.matmul(x, p.w1), ad.matmul(a, ad.matmul(x, p.w2)))
    return ad.relu(out) if relu else out


def diffpool_layer(a, x, p, override_s=None):
    """One DiffPool coarsening step.

    Returns ``(A', X', S)`` with ``S = softmax(GNN1(A, X))`` (or of the first
    ``n`` rows of ``override_s``), ``X' = S^T GNN2(A, X)`` and ``A' = S^T A S``.
    A supplied ``override_s`` is treated as a constant.
    """
    a, x = _t(a), _t(x)
    n = x.rows
    if override_s is None:
        logits = basic_conv(a, x, p.gnn1, relu=False)
    else:
        override_s = _t(override_s)
        if override_s.rows < n:
            raise ContractError(
                f"override assignment has {override_s.rows} rows, graph has {n} nodes")
        if override_s.cols < p.k:
            raise ContractError(
                f"override assignment has {override_s.cols} columns, layer needs k={p.k}")
        logits = ad.Tensor._wrap(override_s.data[:n, :p.k].copy())
    s = ad.softmax_rows(logits)
    h = basic_conv(a, x, p.gnn2)
    x_new = ad.matmul(ad.transpose(s), h)
    a_new = coarsen_soft(a, s)
    return a_new, x_new, s


def gmn_kernel_assign(q, keys, tau):
    """Row-normalized Student-t kernel between queries and one head of keys."""
    if not tau > 0:
        raise ContractError("tau must be positive")
    d2 = ad.sq_dists(q, keys)
    u = ad.power(ad.shift(ad.scale(d2, 1.0 / tau), 1.0), -(tau + 1.0) / 2.0)
    return ad.div(u, ad.tile_cols(ad.sum_rows(u), u.cols))


def _mix_heads(per_head, head_weights):
    total = None
    for h, s_h in enumerate(per_head):
        term = ad.scale_by(s_h, ad.pick(head_weights, 0, h))
        total = term if total is None else ad.add(total, term)
    return total


def gmn_memory_layer(q, p):
    """Memory-layer pooling ``Q' = ReLU(S^T Q W)``; returns ``(Q', S)``."""
    q = _t(q)
    if q.cols != p.w.rows:
        raise DimensionError(f"memory layer: queries {q.shape} vs weight {p.w.shape}")
    if p.variant == "random":
        if p.fixed_assignment is None:
            raise ContractError("random variant needs a fixed assignment")
        if p.fixed_assignment.rows < q.rows:
            raise ContractError(
                f"fixed assignment has {p.fixed_assignment.rows} rows, input has {q.rows}")
        s = ad.softmax_rows(ad.Tensor._wrap(p.fixed_assignment.data[:q.rows].copy()))
    else:
        if p.head_weights.shape != (1, p.heads):
            raise DimensionError(
                f"head weights {p.head_weights.shape} do not match {p.heads} heads")
        if p.variant == "kernel":
            per_head = [gmn_kernel_assign(q, k, p.tau) for k in p.keys]
        else:
            per_head = [ad.neg(ad.sqrt(ad.shift(ad.sq_dists(q, k), DISTANCE_EPS)))
                        for k in p.keys]
        s = ad.softmax_rows(_mix_heads(per_head, p.head_weights))
    q_new = ad.relu(ad.matmul(ad.transpose(s), ad.matmul(q, p.w)))
    return q_new, s


def feature_norm(x):
    """Standardize each column over the nodes of one graph (no affine part)."""
    x = _t(x)
    n = x.rows
    if n < 1:
        raise ContractError("feature_norm needs at least one node")
    centered = ad.sub(x, ad.tile_rows(ad.mean_cols(x), n))
    var = ad.mean_cols(ad.mul(centered, centered))
    denom = ad.sqrt(ad.shift(var, FEATURE_NORM_EPS))
    return ad.div(centered, ad.tile_rows(denom, n))


def global_mean_readout(x):
    x = _t(x)
    if x.rows < 1:
        raise ContractError("readout needs at least one node")
    return ad.mean_cols(x)


def mlp_head(x, p):
    """Single-hidden-layer MLP on a 1 x d graph embedding."""
    x = _t(x)
    if x.cols != p.w1.rows:
        raise DimensionError(f"mlp_head: input {x.shape} vs weight {p.w1.shape}")
    h = ad.relu(ad.add(ad.matmul(x, p.w1), p.b1))
    return ad.add(ad.matmul(h, p.w2), p.b2)
