"""Full networks for each pooling family, assembled from a declarative spec.

Architectures (``C`` = :func:`~poolprobe.layers.basic_conv`)::

    graclus / complement   C x initial_convs -> pool -> (C -> pool) x (L-1) -> mean -> MLP
    diffpool               C x initial_convs -> DiffPool x L -> mean -> MLP
    gmn                    C x initial_convs -> feature_norm -> memory x L -> mean -> MLP
    global_mean_baseline   C x (initial_convs + L - 1) -> mean -> MLP
"""

from dataclasses import asdict, dataclass, field, fields
import json
import math
import zlib

import numpy as np

from . import autodiff as ad
from . import layers
from .clustering import (RandomAssignmentSpec, complement_matching, graclus_matching,
                         invariant_random_assignment, make_rng, sample_random_assignment)
from .errors import ConfigError, ContractError, DimensionError
from .graph import coarsen_hard, max_pool_features

__all__ = [
    "ModelSpec", "DatasetStats", "Model", "Diagnostics", "FAMILIES", "VARIANTS",
    "build_model", "forward", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_FORMAT", "CHECKPOINT_VERSION",
]

FAMILIES = ("graclus", "complement", "diffpool", "gmn", "global_mean_baseline")
VARIANTS = {
    "diffpool": ("learned", "uniform", "normal", "bernoulli", "invariant_normal"),
    "gmn": ("kernel", "distance", "random"),
}
DEFAULT_VARIANT = {"diffpool": "learned", "gmn": "kernel"}
CHECKPOINT_FORMAT = "poolprobe-checkpoint"
CHECKPOINT_VERSION = 1

_GMN_FIELDS = ("keys_per_layer", "heads", "tau")


@dataclass
class ModelSpec:
    family: str = "graclus"
    variant: str = None
    initial_convs: int = 2
    pool_layers: int = 2
    hidden_dim: int = 32
    mlp_hidden: int = None
    cluster_ratio: float = None
    keys_per_layer: list = None
    heads: int = None
    tau: float = None
    task: str = "classification"

    def validate(self):
        """Return a copy with family defaults filled in; raise ConfigError otherwise."""
        bad = []
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}", ["family"])
        variant = self.variant
        if self.family in VARIANTS:
            variant = variant or DEFAULT_VARIANT[self.family]
            if variant not in VARIANTS[self.family]:
                bad.append("variant")
        elif variant is not None:
            bad.append("variant")
        if self.family != "gmn":
            bad += [name for name in _GMN_FIELDS if getattr(self, name) is not None]
        if self.family not in ("diffpool", "gmn") and self.cluster_ratio is not None:
            bad.append("cluster_ratio")
        if not (isinstance(self.initial_convs, int) and self.initial_convs >= 1):
            bad.append("initial_convs")
        min_pool = 0 if self.family == "global_mean_baseline" else 1
        if not (isinstance(self.pool_layers, int) and self.pool_layers >= min_pool):
            bad.append("pool_layers")
        if not (isinstance(self.hidden_dim, int) and self.hidden_dim >= 1):
            bad.append("hidden_dim")
        if self.mlp_hidden is not None and not self.mlp_hidden >= 1:
            bad.append("mlp_hidden")
        ratio = self.cluster_ratio if self.cluster_ratio is not None else 0.25
        if not 0 < ratio <= 1:
            bad.append("cluster_ratio")
        if self.task not in ("classification", "regression"):
            bad.append("task")
        heads = tau = keys = None
        if self.family == "gmn":
            heads = self.heads if self.heads is not None else 2
            tau = self.tau if self.tau is not None else 1.0
            keys = self.keys_per_layer
            if not heads >= 1:
                bad.append("heads")
            if not tau > 0:
                bad.append("tau")
            if keys is not None and (len(keys) != self.pool_layers or min(keys) < 1):
                bad.append("keys_per_layer")
        if bad:
            raise ConfigError(
                f"inconsistent model spec for family {self.family!r}: {', '.join(bad)}", bad)
        ratio_out = ratio if self.family in ("diffpool", "gmn") else None
        return ModelSpec(self.family, variant, self.initial_convs, self.pool_layers,
                         self.hidden_dim, self.mlp_hidden, ratio_out,
                         list(keys) if keys is not None else None, heads, tau, self.task)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model fields: {', '.join(unknown)}", unknown)
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DatasetStats:
    n_max: int
    d: int
    classes: int = None  # None for regression

    def output_width(self):
        return 1 if self.classes is None else self.classes


@dataclass
class Diagnostics:
    """Per-forward intermediate values.

    ``embeddings`` is a list of ``(tag, array)``: ``"pre_pool"`` is the input of
    the first pooling layer, ``"post_pool_l"`` the output of pooling layer l.
    ``aux`` holds the differentiable ingredients of the auxiliary losses.
    """

    embeddings: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    aux: list = field(default_factory=list)
    # hard-pooling families: coarse adjacency produced by each pooling layer
    adjacencies: list = field(default_factory=list)
    pooled_with_original_adjacency: bool = True
    readout: np.ndarray = None


class Model:
    """Parameters plus frozen random objects for one network."""

    def __init__(self, spec, stats, seed):
        self.spec = spec
        self.stats = stats
        self.seed = seed
        self.params = {}
        self.frozen = {}
        self.cluster_sizes = []
        self._partition_cache = {}

    def _param(self, t):
        if t.name in self.params or t.name in self.frozen:
            raise ContractError(f"duplicate tensor name {t.name}")
        (self.params if t.trainable else self.frozen)[t.name] = t
        return t

    def register(self, *groups):
        for g in groups:
            for t in g.tensors():
                self._param(t)

    def trainable(self):
        return list(self.params.values())

    def is_key(self, name):
        return ".keys" in name

    def n_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def state(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, state):
        for name, data in state.items():
            self.params[name].data = data.copy()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def __repr__(self):
        s = self.spec
        return (f"Model(family={s.family!r}, variant={s.variant!r}, "
                f"params={self.n_parameters()})")


def _cluster_counts(n_max, ratio, layers_):
    sizes, n = [], n_max
    for _ in range(layers_):
        n = max(1, math.ceil(ratio * n))
        sizes.append(n)
    return sizes


def build_model(spec, stats, rng=0):
    """Instantiate weights and sample any frozen random objects once."""
    spec = spec.validate()
    if spec.task == "classification" and not (stats.classes and stats.classes >= 2):
        raise ConfigError("classification needs at least 2 classes", ["task"])
    if spec.task == "regression" and stats.classes is not None:
        raise ConfigError("regression dataset must not declare classes", ["task"])
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = make_rng(rng)
    model = Model(spec, stats, seed)
    h = spec.hidden_dim
    n_convs = spec.initial_convs
    if spec.family == "global_mean_baseline":
        n_convs = spec.initial_convs + spec.pool_layers - 1 if spec.pool_layers else spec.initial_convs
    model.convs = []
    d_in = stats.d
    for i in range(n_convs):
        p = layers.init_conv(rng, d_in, h, f"conv{i}")
        model.register(p)
        model.convs.append(p)
        d_in = h

    model.pool_convs = []
    model.diffpool = []
    model.overrides = []
    model.memory = []
    fam = spec.family
    if fam in ("graclus", "complement"):
        for l in range(1, spec.pool_layers):
            p = layers.init_conv(rng, h, h, f"pool{l}.conv")
            model.register(p)
            model.pool_convs.append(p)
    elif fam == "diffpool":
        model.cluster_sizes = _cluster_counts(stats.n_max, spec.cluster_ratio, spec.pool_layers)
        n_in = stats.n_max
        for l, k in enumerate(model.cluster_sizes):
            p = layers.DiffPoolParams(layers.init_conv(rng, h, k, f"dp{l}.assign"),
                                      layers.init_conv(rng, h, h, f"dp{l}.embed"), k)
            model.register(p)
            model.diffpool.append(p)
            override = None
            if spec.variant in ("uniform", "normal", "bernoulli"):
                sample = RandomAssignmentSpec(spec.variant, (n_in, k))
                override = sample_random_assignment(sample, rng)
            elif spec.variant == "invariant_normal":
                override = sample_random_assignment(RandomAssignmentSpec("normal", (h, k)), rng)
            if override is not None:
                override.name = f"dp{l}.random"
                model._param(override)
            model.overrides.append(override)
            n_in = k
    elif fam == "gmn":
        keys = spec.keys_per_layer or _cluster_counts(stats.n_max, spec.cluster_ratio, spec.pool_layers)
        model.cluster_sizes = list(keys)
        n_in = stats.n_max
        for l, k in enumerate(keys):
            variant = spec.variant
            key_list, fixed, hw = [], None, None
            if variant == "random":
                fixed = sample_random_assignment(RandomAssignmentSpec("uniform", (n_in, k)), rng)
                fixed.name = f"mem{l}.random"
                hw = ad.Tensor(np.ones((1, 1)), name=f"mem{l}.head_unused")
            else:
                for head in range(spec.heads):
                    if variant == "kernel":
                        key = ad.Tensor(rng.normal(0.0, 1.0, size=(k, h)), trainable=True)
                    else:
                        key = ad.Tensor(rng.uniform(0.0, 1.0, size=(k, h)))
                    key.name = f"mem{l}.keys{head}"
                    key_list.append(key)
                hw = ad.Tensor(np.full((1, spec.heads), 1.0 / spec.heads), trainable=True,
                               name=f"mem{l}.heads")
            w = layers.glorot(rng, h, h, f"mem{l}.w")
            p = layers.GmnLayerParams(key_list, hw, w, spec.tau, variant, fixed)
            for t in key_list + [hw, w] + ([fixed] if fixed is not None else []):
                if variant == "random" and t is hw:
                    continue
                model._param(t)
            model.memory.append(p)
            n_in = k
    mlp_hidden = spec.mlp_hidden or h
    model.mlp = layers.init_mlp(rng, h, mlp_hidden, stats.output_width())
    model.register(model.mlp)
    return model


def _graph_rng(model, adjacency, level):
    digest = zlib.crc32(np.ascontiguousarray(adjacency).tobytes())
    return np.random.default_rng([model.seed or 0, level, digest, adjacency.shape[0]])


def _partition(model, adjacency, level):
    key = (level, adjacency.shape[0], adjacency.tobytes())
    part = model._partition_cache.get(key)
    if part is None:
        rng = _graph_rng(model, adjacency, level)
        match = complement_matching if model.spec.family == "complement" else graclus_matching
        part = match(adjacency, rng)
        model._partition_cache[key] = part
    return part


def forward(model, g, keep_diagnostics=True):
    """Run the network on one graph; returns ``(prediction, Diagnostics)``."""
    if g.d != model.stats.d:
        raise DimensionError(f"graph has {g.d} feature columns, model expects {model.stats.d}")
    spec = model.spec
    diag = Diagnostics()
    a_np = g.adjacency
    a = ad.Tensor._wrap(a_np)
    x = ad.Tensor._wrap(g.features)
    for p in model.convs:
        x = layers.basic_conv(a, x, p)
    fam = spec.family
    if fam != "global_mean_baseline" and keep_diagnostics:
        diag.embeddings.append(("pre_pool", x.data.copy()))

    if fam in ("graclus", "complement"):
        for l in range(spec.pool_layers):
            if l > 0:
                x = layers.basic_conv(a, x, model.pool_convs[l - 1])
            part = _partition(model, a_np, l)
            x = max_pool_features(x, part)
            # the complement is only used to pick clusters; coarsening uses a_np itself
            a_np = coarsen_hard(a_np, part)
            a = ad.Tensor._wrap(a_np)
            if keep_diagnostics:
                diag.adjacencies.append(a_np.copy())
                diag.assignments.append(part.one_hot())
                diag.embeddings.append((f"post_pool_{l + 1}", x.data.copy()))
    elif fam == "diffpool":
        for l, p in enumerate(model.diffpool):
            override = model.overrides[l]
            if override is not None and spec.variant == "invariant_normal":
                override = invariant_random_assignment(x, override)
            if override is not None and override.rows < x.rows:
                raise ContractError(
                    f"graph with {x.rows} nodes exceeds the sampled assignment ({override.rows} rows)")
            a_in = a
            a, x, s = layers.diffpool_layer(a, x, p, override)
            diag.aux.append({"adjacency": a_in, "assignment": s})
            if keep_diagnostics:
                diag.assignments.append(s.data.copy())
                diag.embeddings.append((f"post_pool_{l + 1}", x.data.copy()))
    elif fam == "gmn":
        x = layers.feature_norm(x)
        if keep_diagnostics:
            diag.embeddings[-1] = ("pre_pool", x.data.copy())
        for l, p in enumerate(model.memory):
            x, s = layers.gmn_memory_layer(x, p)
            diag.aux.append({"adjacency": None, "assignment": s})
            if keep_diagnostics:
                diag.assignments.append(s.data.copy())
                diag.embeddings.append((f"post_pool_{l + 1}", x.data.copy()))

    r = layers.global_mean_readout(x)
    diag.readout = r.data.copy()
    return layers.mlp_head(r, model.mlp), diag


def save_checkpoint(model, path, extra=None):
    """Write a JSON checkpoint holding spec, dataset stats, seed and every tensor."""
    tensors = {}
    for group, trainable in ((model.params, True), (model.frozen, False)):
        for name, t in group.items():
            tensors[name] = {"shape": list(t.shape), "trainable": trainable,
                             "data": t.data.ravel().tolist()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "dataset_stats": asdict(model.stats),
        "seed": model.seed,
        "tensors": tensors,
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild a model from :func:`save_checkpoint` output."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a poolprobe checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = ModelSpec.from_dict(doc["spec"])
    stats = DatasetStats(**doc["dataset_stats"])
    model = build_model(spec, stats, doc["seed"] if doc["seed"] is not None else 0)
    everything = {**model.params, **model.frozen}
    if set(everything) != set(doc["tensors"]):
        raise ContractError(f"{path}: tensor names do not match the spec")
    for name, entry in doc["tensors"].items():
        t = everything[name]
        data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != t.shape:
            raise ContractError(f"{path}: tensor {name} has shape {data.shape}, expected {t.shape}")
        t.data = data
    model.extra = doc.get("extra", {})
    return model
