"""Config-driven experiment runners behind the command line.

A config is one JSON document::

    {
      "dataset":  {"source": "synthetic", "task": "cycles_vs_grids", "n_graphs": 200,
                   "size_range": [8, 16], "noise": 0.1, "seed": 0}
                  | {"source": "tu", "dir": "data/NCI1", "name": "NCI1"},
      "model":    {ModelSpec fields},
      "train":    {TrainConfig fields; loss weights inline or under "loss_weights"},
      "analysis": {"homogeneity": true, "invariance_m": 20, "identity_only": false,
                   "graphs": "test", "checkpoint": "ckpt/run.json"},
      "seeds":    [0, 1, 2],
      "output":   {"path": "results.csv", "format": "csv",
                   "checkpoint_dir": null, "analysis_dir": "analysis"},
      "sweep":    {"grid": {"model.pool_layers": [1, 2]},
                   "compare": {"a": {"model.family": "graclus"},
                               "b": {"model.family": "complement"}}}
    }

A relative ``dataset.dir`` that does not exist is looked up under
``$POOLPROBE_DATA_DIR``.
"""

from concurrent.futures import ProcessPoolExecutor
import copy
import csv
from dataclasses import dataclass, field
import itertools
import json
import os

import numpy as np

from .analysis import homogeneity_report, invariance_report
from .data import (SYNTHETIC_TASKS, format_value, gen_synthetic, load_tu_dataset,
                   write_results)
from .errors import ConfigError
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit_and_evaluate, split_dataset

__all__ = [
    "ExperimentConfig", "load_config", "parse_config", "load_dataset",
    "run_records", "run_train", "run_sweep", "run_analyze", "DATA_DIR_ENV",
]

DATA_DIR_ENV = "POOLPROBE_DATA_DIR"
_SECTIONS = ("dataset", "model", "train", "analysis", "seeds", "output", "sweep")


@dataclass
class ExperimentConfig:
    dataset: dict
    model: ModelSpec
    train: TrainConfig
    analysis: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    output: dict = field(default_factory=dict)
    sweep: dict = None
    raw: dict = None

    @property
    def out_path(self):
        return self.output.get("path", "results.csv")

    @property
    def out_format(self):
        return self.output.get("format", "csv")


def _resolve_dataset(ds):
    ds = dict(ds)
    source = ds.get("source")
    if source == "synthetic":
        if ds.get("task") not in SYNTHETIC_TASKS:
            raise ConfigError(f"dataset.task must be one of {SYNTHETIC_TASKS}", ["dataset.task"])
        allowed = {"source", "task", "n_graphs", "size_range", "noise", "seed", "d", "edge_prob"}
        extra = sorted(set(ds) - allowed)
        if extra:
            raise ConfigError(f"unknown dataset fields: {', '.join(extra)}",
                              [f"dataset.{e}" for e in extra])
        n = ds.get("n_graphs", 200)
        if not isinstance(n, int) or n < 10:
            raise ConfigError("dataset.n_graphs must be an integer >= 10", ["dataset.n_graphs"])
        return ds
    if source == "tu":
        if "name" not in ds:
            raise ConfigError("dataset.name is required for TU datasets", ["dataset.name"])
        directory = ds.get("dir")
        root = os.environ.get(DATA_DIR_ENV)
        if directory is None and root:
            directory = os.path.join(root, ds["name"])
        elif directory is not None and not os.path.isabs(directory) and \
                not os.path.isdir(directory) and root:
            directory = os.path.join(root, directory)
        if directory is None or not os.path.isdir(directory):
            raise ConfigError(f"dataset directory not found: {directory}", ["dataset.dir"])
        for suffix in ("A", "graph_indicator", "graph_labels"):
            p = os.path.join(directory, f"{ds['name']}_{suffix}.txt")
            if not os.path.exists(p):
                raise ConfigError(f"dataset file not found: {p}", ["dataset.dir"])
        ds["dir"] = directory
        return ds
    raise ConfigError("dataset.source must be 'synthetic' or 'tu'", ["dataset.source"])


def parse_config(doc):
    """Validate a config mapping; every problem surfaces as ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}", unknown)
    if "dataset" not in doc:
        raise ConfigError("missing dataset section", ["dataset"])
    dataset = _resolve_dataset(doc["dataset"])
    try:
        model = ModelSpec.from_dict(doc.get("model", {}))
        model.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), [f"model.{f}" for f in exc.fields]) from None
    except TypeError as exc:
        raise ConfigError(f"model: {exc}", ["model"]) from None
    try:
        train = TrainConfig.from_dict(doc.get("train", {}))
    except ConfigError as exc:
        raise ConfigError(str(exc), [f"train.{f}" for f in exc.fields]) from None
    except TypeError as exc:
        raise ConfigError(f"train: {exc}", ["train"]) from None
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers", ["seeds"])
    output = dict(doc.get("output", {}))
    if output.get("format", "csv") not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'", ["output.format"])
    sweep = doc.get("sweep")
    if sweep is not None:
        grid = sweep.get("grid", {})
        if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
            raise ConfigError("sweep.grid must map 'section.field' to non-empty lists", ["sweep.grid"])
        for key in list(grid) + [k for arm in ("a", "b") for k in sweep.get("compare", {}).get(arm, {})]:
            section = key.split(".", 1)[0]
            if section not in ("model", "train") or "." not in key:
                raise ConfigError(f"sweep axis {key!r} must be model.<field> or train.<field>",
                                  ["sweep"])
        compare = sweep.get("compare")
        if compare is not None and not ({"a", "b"} <= set(compare)):
            raise ConfigError("sweep.compare needs arms 'a' and 'b'", ["sweep.compare"])
        arms = [compare["a"], compare["b"]] if compare else [{}]
        for cell in itertools.product(*grid.values()):
            for arm in arms:
                try:
                    spec, _ = _apply(model, train, {**dict(zip(grid, cell)), **arm})
                    spec.validate()
                except (ConfigError, TypeError) as exc:
                    raise ConfigError(f"sweep cell {dict(zip(grid, cell))} arm {arm}: {exc}",
                                      ["sweep"]) from None
    return ExperimentConfig(dataset, model, train, dict(doc.get("analysis", {})), seeds,
                            output, sweep, copy.deepcopy(doc))


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", ["config"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", ["config"]) from None
    return parse_config(doc)


def load_dataset(ds):
    if ds["source"] == "tu":
        return load_tu_dataset(ds["dir"], ds["name"])
    size = tuple(ds.get("size_range", (8, 16)))
    return gen_synthetic(ds["task"], ds.get("n_graphs", 200), size, ds.get("noise", 0.0),
                         ds.get("seed", 0), ds.get("d", 3), ds.get("edge_prob", 0.3))


def _dataset_name(ds):
    return ds.get("name") or ds.get("task")


def _spec_for(meta, spec):
    task = "classification" if meta.classes is not None else "regression"
    return ModelSpec(**{**spec.to_dict(), "task": task})


def run_records(result, run_id, family, variant):
    """Flatten a RunResult into result rows."""
    rows = []
    base = {"run_id": run_id, "seed": result.seed, "family": family, "variant": variant}
    for rec in result.history:
        for key, value in rec.items():
            if key in ("epoch", "update"):
                continue
            split, name = ("train", "lr") if key == "lr" else key.split("_", 1)
            rows.append({**base, "epoch": rec["epoch"], "split": split,
                         "metric_name": name, "metric_value": value})
    if result.test_metric is not None:
        for name, value in ((result.metric_name, result.test_metric), ("loss", result.test_loss)):
            rows.append({**base, "epoch": result.best_epoch, "split": "test",
                         "metric_name": name, "metric_value": value})
    return rows


def _one_run(args):
    spec, train, graphs, meta, seed, run_id, ckpt_dir, dataset = args
    model, result = fit_and_evaluate(spec, graphs, meta, train, seed)
    if ckpt_dir:
        save_checkpoint(model, os.path.join(ckpt_dir, f"{run_id}.json"),
                        extra={"dataset": dataset, "run_id": run_id})
    return run_id, result


def _execute(jobs, tasks):
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_one_run, tasks))
    return [_one_run(t) for t in tasks]


def _run_id(spec, seed, cell=""):
    name = f"{spec.family}-{spec.variant}" if spec.variant else spec.family
    return f"{name}{cell}-s{seed}"


def run_train(cfg, jobs=1):
    """Train one model per seed; write result rows. Returns ``(rows, results)``."""
    graphs, meta = load_dataset(cfg.dataset)
    spec = _spec_for(meta, cfg.model).validate()
    train = cfg.train
    if cfg.analysis.get("permuted_validation"):
        train = TrainConfig.from_dict(
            {**train.to_dict(), "permuted_validation": int(cfg.analysis["permuted_validation"])})
    ckpt_dir = cfg.output.get("checkpoint_dir")
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    tasks = [(spec, train, graphs, meta, seed, _run_id(spec, seed), ckpt_dir, cfg.dataset)
             for seed in cfg.seeds]
    done = _execute(jobs, tasks)
    rows, results = [], {}
    for run_id, result in done:
        rows += run_records(result, run_id, spec.family, spec.variant)
        results[run_id] = result
    write_results(rows, cfg.out_path, cfg.out_format)
    return rows, results


def _apply(spec, train, overrides):
    model_d = spec.to_dict()
    train_d = train.to_dict()
    for key, value in overrides.items():
        section, name = key.split(".", 1)
        if section == "model":
            model_d[name] = value
        elif name in train_d["loss_weights"]:
            train_d["loss_weights"][name] = value
        else:
            train_d[name] = value
    return ModelSpec.from_dict(model_d), TrainConfig.from_dict(train_d)


def _stem(path):
    root, _ = os.path.splitext(path)
    return root


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([format_value(v) for v in r])


def run_sweep(cfg, jobs=1):
    """Cross product of grid cells x compare arms x seeds.

    Identical arms are trained once. Writes the merged rows to the output
    path, a gap table (arm a minus arm b per cell) to ``<stem>_gaps.csv`` and,
    when the grid has a ``model.initial_convs`` axis, the paired ``=1`` /
    ``>1`` table to ``<stem>_depth.csv``.
    """
    graphs, meta = load_dataset(cfg.dataset)
    sweep = cfg.sweep or {}
    grid = sweep.get("grid", {})
    axes = list(grid)
    compare = sweep.get("compare") or {"a": {}, "b": {}}
    arms = {"a": compare["a"], "b": compare["b"]}
    distinct = {}
    for arm, overrides in arms.items():
        distinct.setdefault(json.dumps(overrides, sort_keys=True), []).append(arm)

    tasks, cell_of = [], {}
    cells = list(itertools.product(*[grid[a] for a in axes])) if axes else [()]
    for cell in cells:
        cell_over = dict(zip(axes, cell))
        for arm_key, names in distinct.items():
            spec, train = _apply(cfg.model, cfg.train, {**cell_over, **json.loads(arm_key)})
            spec = _spec_for(meta, spec).validate()
            tag = "".join(f"-{a.split('.', 1)[1]}={v}" for a, v in cell_over.items())
            for seed in cfg.seeds:
                run_id = _run_id(spec, seed, tag)
                cell_of[run_id] = (cell, arm_key, spec)
                tasks.append((spec, train, graphs, meta, seed, run_id, None, cfg.dataset))
    done = _execute(jobs, tasks)

    rows, scores = [], {}
    for run_id, result in done:
        cell, arm_key, spec = cell_of[run_id]
        rows += run_records(result, run_id, spec.family, spec.variant)
        scores.setdefault((cell, arm_key), []).append(result.test_metric)
    write_results(rows, cfg.out_path, cfg.out_format)

    key_a = json.dumps(arms["a"], sort_keys=True)
    key_b = json.dumps(arms["b"], sort_keys=True)
    gap_rows = []
    for cell in cells:
        ma = float(np.mean(scores[(cell, key_a)]))
        mb = float(np.mean(scores[(cell, key_b)]))
        gap_rows.append(list(cell) + [ma, mb, ma - mb])
    _write_table(_stem(cfg.out_path) + "_gaps.csv", axes + ["metric_a", "metric_b", "gap"], gap_rows)

    depth_rows = []
    if "model.initial_convs" in axes:
        pos = axes.index("model.initial_convs")
        others = [a for a in axes if a != "model.initial_convs"]
        groups = {}
        for (cell, arm_key), vals in scores.items():
            rest = tuple(v for i, v in enumerate(cell) if i != pos)
            bucket = "=1" if cell[pos] == 1 else ">1"
            groups.setdefault((arm_key, rest), {"=1": [], ">1": []})[bucket] += vals
        for (arm_key, rest), b in sorted(groups.items(),
                                         key=lambda kv: (distinct[kv[0][0]], kv[0][1])):
            label = ",".join(distinct[arm_key])
            shallow = float(np.mean(b["=1"])) if b["=1"] else None
            deep = float(np.mean(b[">1"])) if b[">1"] else None
            depth_rows.append([_dataset_name(cfg.dataset), label] + list(rest) + [shallow, deep])
        _write_table(_stem(cfg.out_path) + "_depth.csv",
                     ["dataset", "arm"] + others + ["=1", ">1"], depth_rows)
    return {"rows": rows, "runs": len(done), "gaps": gap_rows, "depth": depth_rows}


def run_analyze(cfg, checkpoint, out_dir=None):
    """Homogeneity table, raw embedding dump and invariance report for a checkpoint."""
    try:
        model = load_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {exc}", ["checkpoint"]) from None
    graphs, meta = load_dataset(cfg.dataset)
    stats = model.stats
    if stats.d != meta.d or stats.classes != meta.classes or stats.n_max < meta.n_max:
        raise ConfigError(
            f"checkpoint expects d={stats.d}, classes={stats.classes}, n_max>={meta.n_max}; "
            f"dataset has d={meta.d}, classes={meta.classes}, n_max={meta.n_max}", ["checkpoint"])
    which = cfg.analysis.get("graphs", "test")
    if which == "all":
        chosen = graphs
    else:
        train, val, test = split_dataset(graphs, model.seed or 0)
        chosen = {"train": train, "val": val, "test": test}.get(which)
        if chosen is None:
            raise ConfigError("analysis.graphs must be train, val, test or all", ["analysis.graphs"])
    out_dir = out_dir or cfg.output.get("analysis_dir", "analysis")
    os.makedirs(out_dir, exist_ok=True)

    files = {}
    if cfg.analysis.get("homogeneity", True):
        dump = []
        report = homogeneity_report(model, chosen, dump)
        files["homogeneity"] = os.path.join(out_dir, "homogeneity.csv")
        _write_table(files["homogeneity"],
                     ["graph", "layer", "n_nodes", "norm_col_variance", "mean_pairwise_cosine"],
                     [[r["graph"], r["layer"], r["n_nodes"], r["norm_col_variance"],
                       r["mean_pairwise_cosine"]] for r in report.rows])
        files["embeddings"] = os.path.join(out_dir, "embeddings.csv")
        emb_rows = [[gi, tag, i, j, float(z[i, j])]
                    for gi, tag, z in dump for i in range(z.shape[0]) for j in range(z.shape[1])]
        _write_table(files["embeddings"], ["graph", "layer", "node", "dim", "value"], emb_rows)
    m = int(cfg.analysis.get("invariance_m", 20))
    if m > 0:
        inv = invariance_report(model, chosen, m, seed=model.seed or 0,
                                identity_only=bool(cfg.analysis.get("identity_only", False)))
        files["invariance"] = os.path.join(out_dir, "invariance.json")
        with open(files["invariance"], "w") as fh:
            json.dump({"m": m, "max_gap": inv.max_gap, "mean_gap": inv.mean_gap,
                       "per_graph": inv.per_graph}, fh, indent=1)
    return files
