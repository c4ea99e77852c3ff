"""Embedding homogeneity, permutation-invariance gaps and the conv-depth ablation."""

from dataclasses import dataclass, field

import numpy as np

from .graph import permute
from .models import ModelSpec, forward
from .training import fit_and_evaluate

__all__ = [
    "homogeneity", "HomogeneityReport", "homogeneity_report",
    "invariance_gap", "InvarianceReport", "invariance_report",
    "conv_depth_ablation",
]


def homogeneity(z):
    """``(normalized column variance, mean pairwise row cosine)`` of an embedding.

    The variance term is ``mean_j Var_i z_ij / (mean z^2 + 1e-12)``; cosine
    with a zero row counts as 0, and a single row gives cosine 1.
    """
    z = np.asarray(getattr(z, "data", z), dtype=np.float64)
    n = z.shape[0]
    col_var = z.var(axis=0).mean() / ((z * z).mean() + 1e-12)
    if n == 1:
        return float(col_var), 1.0
    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = z / safe[:, None]
    unit[norms == 0] = 0.0
    cos = unit @ unit.T
    iu = np.triu_indices(n, 1)
    return float(col_var), float(cos[iu].mean())


@dataclass
class HomogeneityReport:
    """One row per (graph, layer tag)."""

    rows: list = field(default_factory=list)

    def by_layer(self):
        out = {}
        for r in self.rows:
            out.setdefault(r["layer"], []).append(r)
        return {tag: {"norm_col_variance": float(np.mean([r["norm_col_variance"] for r in rs])),
                      "mean_pairwise_cosine": float(np.mean([r["mean_pairwise_cosine"] for r in rs])),
                      "graphs": len(rs)}
                for tag, rs in out.items()}


def homogeneity_report(model, graphs, dump=None):
    """Score every layer embedding of every graph.

    When ``dump`` is a list, raw embeddings are appended to it as
    ``(graph_index, layer, matrix)`` for external heatmaps.
    """
    report = HomogeneityReport()
    for gi, g in enumerate(graphs):
        _, diag = forward(model, g)
        for tag, z in diag.embeddings:
            var, cos = homogeneity(z)
            report.rows.append({"graph": gi, "layer": tag, "n_nodes": z.shape[0],
                                "norm_col_variance": var, "mean_pairwise_cosine": cos})
            if dump is not None:
                dump.append((gi, tag, z))
    return report


def _output(model, g):
    return forward(model, g, keep_diagnostics=False)[0].data


def invariance_gap(model, g, m, rng, identity_only=False):
    """Max relative output change over ``m`` node permutations of ``g``.

    ``max ||f(Pg) - f(g)||_inf / (||f(g)||_inf + 1e-12)``.
    """
    if m < 1:
        raise ValueError("need at least one permutation")
    rng = np.random.default_rng(rng)
    ref = _output(model, g)
    scale = np.abs(ref).max() + 1e-12
    gap = 0.0
    for _ in range(m):
        perm = np.arange(g.n) if identity_only else rng.permutation(g.n)
        out = _output(model, permute(g, perm))
        gap = max(gap, float(np.abs(out - ref).max() / scale))
    return gap


@dataclass
class InvarianceReport:
    per_graph: list
    m: int

    @property
    def max_gap(self):
        return float(max(self.per_graph)) if self.per_graph else 0.0

    @property
    def mean_gap(self):
        return float(np.mean(self.per_graph)) if self.per_graph else 0.0


def invariance_report(model, graphs, m, seed=0, identity_only=False):
    gaps = [invariance_gap(model, g, m, [seed, i], identity_only) for i, g in enumerate(graphs)]
    return InvarianceReport(gaps, m)


def conv_depth_ablation(spec, dataset, seeds, cfg, deep=None):
    """Train ``spec`` with one initial convolution and with ``deep`` of them.

    Returns ``{"runs": [...], "table": {...}}``; each run row carries the
    seed, the conv count and the test metric. ``deep`` defaults to
    ``spec.initial_convs``, which must exceed 1.
    """
    graphs, meta = dataset
    deep = spec.initial_convs if deep is None else deep
    if deep <= 1:
        raise ValueError("the deep configuration needs more than one initial convolution")
    runs = []
    for convs in (1, deep):
        variant = ModelSpec(**{**spec.to_dict(), "initial_convs": convs})
        for seed in seeds:
            _, result = fit_and_evaluate(variant, graphs, meta, cfg, seed)
            runs.append({"seed": seed, "initial_convs": convs, "result": result,
                         "test_metric": result.test_metric})
    shallow_scores = [r["test_metric"] for r in runs if r["initial_convs"] == 1]
    deep_scores = [r["test_metric"] for r in runs if r["initial_convs"] == deep]
    table = {"family": spec.family, "variant": spec.variant, "=1": float(np.mean(shallow_scores)),
             ">1": float(np.mean(deep_scores)), "deep_convs": deep}
    table["difference"] = table[">1"] - table["=1"]
    return {"runs": runs, "table": table}
