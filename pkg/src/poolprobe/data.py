"""Dataset ingestion, synthetic task generators and result emission."""

from dataclasses import asdict, dataclass
import csv
import json
import math
import os

import numpy as np

from .errors import ContractError
from .graph import Graph

__all__ = [
    "DatasetMeta", "TUFormatError", "load_tu_dataset", "gen_synthetic",
    "SYNTHETIC_TASKS", "dataset_meta", "count_triangles",
    "RESULT_FIELDS", "RESULTS_SCHEMA", "write_results", "read_results",
    "format_value",
]

SYNTHETIC_TASKS = ("cycles_vs_grids", "triangle_count_regression", "feature_smoothness_task")


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    n_graphs: int
    classes: int  # None for regression
    n_max: int
    d: int
    feature_source: str

    @property
    def regression(self):
        return self.classes is None

    def to_dict(self):
        return asdict(self)


class TUFormatError(ValueError):
    """Malformed TU dataset file; the message names the file and line."""


def dataset_meta(name, graphs, feature_source, regression=False):
    classes = None if regression else len({g.label for g in graphs})
    return DatasetMeta(name, len(graphs), classes, max(g.n for g in graphs),
                       graphs[0].d, feature_source)


def _read_lines(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing TU dataset file: {path}")
    with open(path) as fh:
        return [(i + 1, line.strip()) for i, line in enumerate(fh) if line.strip()]


def _ints(path, line_no, text, count):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != count:
        raise TUFormatError(f"{path}:{line_no}: expected {count} value(s), got {text!r}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise TUFormatError(f"{path}:{line_no}: not an integer: {text!r}") from None


def load_tu_dataset(directory, name):
    """Load ``<name>_A.txt`` and friends from ``directory``.

    Node features are one-hot node labels when ``<name>_node_labels.txt``
    exists, else a single constant column. Graph labels are remapped to
    contiguous classes ``0..c-1`` in sorted order.
    """
    def path(suffix):
        return os.path.join(directory, f"{name}_{suffix}.txt")

    edge_path, ind_path, lab_path = path("A"), path("graph_indicator"), path("graph_labels")
    edge_lines = _read_lines(edge_path)
    ind_lines = _read_lines(ind_path)
    lab_lines = _read_lines(lab_path)

    raw_labels = [_ints(lab_path, no, t, 1)[0] for no, t in lab_lines]
    n_graphs = len(raw_labels)
    indicator = np.empty(len(ind_lines), dtype=np.intp)
    for idx, (no, text) in enumerate(ind_lines):
        gid = _ints(ind_path, no, text, 1)[0]
        if not 1 <= gid <= n_graphs:
            raise TUFormatError(f"{ind_path}:{no}: node refers to nonexistent graph id {gid}")
        indicator[idx] = gid - 1
    n_nodes = indicator.size

    counts = np.bincount(indicator, minlength=n_graphs)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0]) + 1
        raise TUFormatError(f"{ind_path}: graph id {empty} has no nodes")
    # local index = rank of the node among its graph's nodes in file order
    local = np.empty(n_nodes, dtype=np.intp)
    seen = np.zeros(n_graphs, dtype=np.intp)
    for node, gid in enumerate(indicator):
        local[node] = seen[gid]
        seen[gid] += 1

    adjs = [np.zeros((c, c)) for c in counts]
    for no, text in edge_lines:
        u, v = _ints(edge_path, no, text, 2)
        for node in (u, v):
            if not 1 <= node <= n_nodes:
                raise TUFormatError(f"{edge_path}:{no}: node {node} out of range 1..{n_nodes}")
        u, v = u - 1, v - 1
        if indicator[u] != indicator[v]:
            raise TUFormatError(f"{edge_path}:{no}: edge ({u + 1}, {v + 1}) joins different graphs")
        if u == v:
            continue
        a = adjs[indicator[u]]
        a[local[u], local[v]] = a[local[v], local[u]] = 1.0

    node_path = path("node_labels")
    if os.path.exists(node_path):
        node_lines = _read_lines(node_path)
        if len(node_lines) != n_nodes:
            raise TUFormatError(
                f"{node_path}: {len(node_lines)} node labels for {n_nodes} nodes")
        node_labels = np.array([_ints(node_path, no, t, 1)[0] for no, t in node_lines])
        values, codes = np.unique(node_labels, return_inverse=True)
        feats = np.eye(len(values))[codes]
        source = "one-hot node labels"
    else:
        feats = np.ones((n_nodes, 1))
        source = "constant ones"

    classes = {lab: c for c, lab in enumerate(sorted(set(raw_labels)))}
    graphs = []
    for gid in range(n_graphs):
        members = np.flatnonzero(indicator == gid)
        x = np.empty((counts[gid], feats.shape[1]))
        x[local[members]] = feats[members]
        graphs.append(Graph(adjs[gid], x, classes[raw_labels[gid]]))
    return graphs, dataset_meta(name, graphs, source)


# ---------------------------------------------------------------------------
# Synthetic tasks


def _cycle(n):
    a = np.zeros((n, n))
    idx = np.arange(n)
    a[idx, (idx + 1) % n] = 1.0
    return np.maximum(a, a.T)


def _grid(n):
    """First ``n`` cells of a near-square grid filled row by row."""
    cols = math.ceil(math.sqrt(n))
    a = np.zeros((n, n))
    for i in range(n):
        r, c = divmod(i, cols)
        if c + 1 < cols and i + 1 < n:
            a[i, i + 1] = a[i + 1, i] = 1.0
        if i + cols < n:
            a[i, i + cols] = a[i + cols, i] = 1.0
    return a


def _erdos_renyi(n, p, rng):
    upper = np.triu(rng.random((n, n)) < p, 1).astype(np.float64)
    return upper + upper.T


def count_triangles(adjacency):
    a = np.asarray(adjacency, dtype=np.float64)
    return int(round(np.trace(a @ a @ a) / 6.0))


def gen_synthetic(task, n_graphs, size_range=(8, 16), noise=0.0, seed=0, d=3, edge_prob=0.3):
    """Seeded synthetic graph-level tasks.

    ``cycles_vs_grids``
        class 0 cycles, class 1 partial near-square grids, sizes uniform in
        ``size_range``. Features are constant ones plus gaussian noise, so
        only structure separates the classes.
    ``triangle_count_regression``
        Erdos-Renyi graphs; target is the exact triangle count.
    ``feature_smoothness_task``
        Erdos-Renyi graphs with a random binary signal ``s``; the label says
        whether the mean two-hop sum ``mean(A (A s))`` exceeds the dataset
        median, so it takes two aggregation rounds to read off.
    """
    if task not in SYNTHETIC_TASKS:
        raise ContractError(f"unknown synthetic task {task!r}; expected one of {SYNTHETIC_TASKS}")
    lo, hi = size_range
    if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))) or not 3 <= lo <= hi:
        raise ContractError(f"invalid size range {size_range}; need integers 3 <= lo <= hi")
    if n_graphs < 10:
        raise ContractError(f"need at least 10 graphs, got {n_graphs}")
    if noise < 0 or d < 1:
        raise ContractError("noise must be >= 0 and d >= 1")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(lo, hi + 1, size=n_graphs)

    def features(n, base=None):
        x = np.ones((n, d)) if base is None else base
        if noise > 0:
            x = x + noise * rng.standard_normal(x.shape)
        return x

    graphs = []
    if task == "cycles_vs_grids":
        labels = rng.permutation(np.arange(n_graphs) % 2)
        for n, y in zip(sizes, labels):
            a = _cycle(n) if y == 0 else _grid(n)
            graphs.append(Graph(a, features(n), int(y)))
        return graphs, dataset_meta(task, graphs, "constant ones + noise")
    if task == "triangle_count_regression":
        for n in sizes:
            a = _erdos_renyi(n, edge_prob, rng)
            graphs.append(Graph(a, features(n), float(count_triangles(a))))
        return graphs, dataset_meta(task, graphs, "constant ones + noise", regression=True)

    raw = []
    for n in sizes:
        a = _erdos_renyi(n, edge_prob, rng)
        signal = (rng.random(n) < 0.5).astype(np.float64)
        score = float((a @ (a @ signal)).mean())
        base = np.column_stack([signal] + [np.ones(n)] * (d - 1))
        raw.append((a, features(n, base), score))
    threshold = float(np.median([s for _, _, s in raw]))
    for a, x, score in raw:
        graphs.append(Graph(a, x, int(score > threshold)))
    return graphs, dataset_meta(task, graphs, "binary signal + ones")


# ---------------------------------------------------------------------------
# Result emission

RESULT_FIELDS = ("run_id", "seed", "family", "variant", "epoch", "split",
                 "metric_name", "metric_value")
RESULTS_SCHEMA = {"name": "poolprobe-results", "version": 1, "fields": list(RESULT_FIELDS)}


def format_value(v):
    """Text form used in CSV cells: ``repr`` for floats (shortest round-trip)."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _normalize(record):
    out = {}
    for name in RESULT_FIELDS:
        v = record.get(name)
        if isinstance(v, np.generic):
            v = v.item()
        out[name] = v
    return out


def write_results(records, path, fmt="csv"):
    """Write result records with the fixed field order of ``RESULT_FIELDS``."""
    if fmt not in ("csv", "json"):
        raise ContractError(f"unknown result format {fmt!r}")
    rows = [_normalize(r) for r in records]
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(RESULT_FIELDS)
                for r in rows:
                    writer.writerow([format_value(r[f]) for f in RESULT_FIELDS])
            elif fmt == "json":
                json.dump({"schema": RESULTS_SCHEMA, "records": rows}, fh, indent=1)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def read_results(path, fmt=None):
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    with open(path) as fh:
        if fmt == "json":
            return json.load(fh)["records"]
        return list(csv.DictReader(fh))
