"""Optimization loop: Adam, plateau learning-rate decay, early stopping."""

from dataclasses import asdict, dataclass, field, fields
import time

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, TrainingError
from .graph import permute
from .losses import LossWeights, UpdateMask, cross_entropy, mae, total_loss
from .models import forward

__all__ = [
    "TrainConfig", "AdamState", "PlateauScheduler", "EarlyStopping", "RunResult",
    "split_dataset", "adam_step", "lr_scheduler_step", "train_run",
    "evaluate", "predict_raw", "fit_and_evaluate", "IMPROVEMENT_TOL",
]

IMPROVEMENT_TOL = 1e-6


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    lr_factor: float = 0.5
    lr_patience: int = 10
    early_stop_patience: int = 50
    max_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # >0: also score the validation set on this many random permutations per epoch
    permuted_validation: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        bad = []
        if not 0 < self.lr_min <= self.lr_init:
            bad += ["lr_min", "lr_init"]
        if not 0 < self.lr_factor < 1:
            bad.append("lr_factor")
        for name in ("lr_patience", "early_stop_patience", "batch_size"):
            if not int(getattr(self, name)) >= 1:
                bad.append(name)
        if not int(self.max_epochs) >= 0:
            bad.append("max_epochs")
        if bad:
            raise ConfigError(f"invalid training config: {', '.join(bad)}", bad)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        lw_known = {f.name for f in fields(LossWeights)}
        unknown = sorted(k for k in d if k not in known and k not in lw_known)
        if unknown:
            raise ConfigError(f"unknown train fields: {', '.join(unknown)}", unknown)
        lw = dict(d.get("loss_weights") or {})
        lw.update({k: v for k, v in d.items() if k in lw_known})
        kw = {k: v for k, v in d.items() if k in known and k != "loss_weights"}
        return cls(loss_weights=LossWeights(**lw), **kw)

    def to_dict(self):
        return asdict(self)


def split_dataset(graphs, seed):
    """Seeded shuffle, then 80% / 10% / remainder."""
    n = len(graphs)
    if n < 10:
        raise ContractError(f"need at least 10 graphs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    pick = [graphs[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays
    (a missing entry counts as zero gradient).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class _Tracker:
    def __init__(self, mode):
        if mode not in ("max", "min"):
            raise ContractError("metric mode must be 'max' or 'min'")
        self.mode = mode
        self.best = None
        self.bad_epochs = 0

    def improved(self, value):
        if self.best is None:
            return True
        if self.mode == "max":
            return value > self.best + IMPROVEMENT_TOL
        return value < self.best - IMPROVEMENT_TOL

    def update(self, value):
        if self.improved(value):
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False


class PlateauScheduler(_Tracker):
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, lr, mode="max", factor=0.5, patience=10, min_lr=1e-5):
        super().__init__(mode)
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr

    def step(self, metric):
        if not self.update(metric) and self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr


def lr_scheduler_step(sched, val_metric):
    return sched.step(val_metric)


class EarlyStopping(_Tracker):
    """Patience counter over the validation metric.

    Epochs that tie the best metric (within ``IMPROVEMENT_TOL``) but lower the
    validation loss also count as improvements, so a saturated accuracy still
    selects the better-fitted checkpoint.
    """

    def __init__(self, mode="max", patience=50):
        super().__init__(mode)
        self.patience = patience
        self.best_loss = None

    def update(self, value, loss=None):
        tie = (self.best is not None and not self.improved(value)
               and abs(value - self.best) <= IMPROVEMENT_TOL)
        if tie and loss is not None and self.best_loss is not None \
                and loss < self.best_loss - IMPROVEMENT_TOL:
            self.best_loss = loss
            self.bad_epochs = 0
            return True
        better = super().update(value)
        if better:
            self.best_loss = loss
        return better

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class RunResult:
    seed: int
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = None
    test_metric: float = None
    test_loss: float = None
    metric_name: str = "accuracy"
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _supervised(model, pred, target):
    if model.spec.task == "classification":
        return cross_entropy(pred, target)
    return mae(pred, target)


def predict_raw(model, graphs):
    """Stacked raw outputs (logits or scalar predictions), one row per graph."""
    if not graphs:
        return np.zeros((0, model.stats.output_width()))
    return np.vstack([forward(model, g, keep_diagnostics=False)[0].data for g in graphs])


def _score(model, raw, targets):
    targets = np.asarray(targets)
    if model.spec.task == "classification":
        z = raw - raw.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(len(targets)), targets.astype(int)].mean())
        return float((raw.argmax(axis=1) == targets).mean()), loss
    err = float(np.abs(raw[:, 0] - targets).mean())
    return err, err


def evaluate(model, graphs):
    """``(metric, supervised loss)``: accuracy/CE or MAE/MAE."""
    if not graphs:
        return float("nan"), float("nan")
    raw = predict_raw(model, graphs)
    return _score(model, raw, [g.label for g in graphs])


def _permuted_metric(model, graphs, m, rng):
    scores = []
    for _ in range(m):
        perm = [permute(g, rng.permutation(g.n)) for g in graphs]
        scores.append(evaluate(model, perm)[0])
    return float(np.mean(scores))


def train_run(model, splits, cfg):
    """Train ``model`` on ``splits = (train, val, test)`` and return a RunResult.

    The test split (may be empty) is scored exactly once, after the best
    validation weights are restored.
    """
    train, val, test = splits
    if not train:
        raise ContractError("training split is empty")
    start = time.perf_counter()
    classification = model.spec.task == "classification"
    mode = "max" if classification else "min"
    metric_name = "accuracy" if classification else "mae"
    rng = np.random.default_rng(cfg.seed)
    sched = PlateauScheduler(cfg.lr_init, mode, cfg.lr_factor, cfg.lr_patience, cfg.lr_min)
    stopper = EarlyStopping(mode, cfg.early_stop_patience)
    w = cfg.loss_weights
    family = model.spec.family
    key_names = [n for n in model.params if model.is_key(n)]
    optimizers = {mask: AdamState() for mask in UpdateMask}
    result = RunResult(seed=cfg.seed, metric_name=metric_name)

    best_state = model.state()
    val_metric, val_loss = evaluate(model, val) if val else (float("nan"), float("nan"))
    result.best_val_metric = val_metric
    for epoch in range(1, int(cfg.max_epochs) + 1):
        lr = sched.lr
        order = rng.permutation(len(train))
        total, n_seen, correct = 0.0, 0, 0.0
        masks_used = set()
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
            model.zero_grad()
            mask = UpdateMask.ALL
            for g in batch:
                with ad.Tape() as tape:
                    pred, diag = forward(model, g, keep_diagnostics=False)
                    sup = _supervised(model, pred, g.label)
                    loss, mask = total_loss(sup, diag.aux, w, epoch, family)
                    loss = ad.scale(loss, 1.0 / len(batch))
                    value = loss.item() * len(batch)
                    if not np.isfinite(value):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
                    tape.backward(loss)
                total += sup.item()
                n_seen += 1
                if classification:
                    correct += float(int(pred.data.argmax()) == int(g.label))
                else:
                    correct += abs(pred.item() - float(g.label))
            if mask is UpdateMask.KEYS_ONLY and not key_names:
                # no trainable keys: the purity epoch falls back to supervised training
                mask = UpdateMask.EXCEPT_KEYS
                model.zero_grad()
                for g in batch:
                    with ad.Tape() as tape:
                        pred, _ = forward(model, g, keep_diagnostics=False)
                        tape.backward(ad.scale(_supervised(model, pred, g.label), 1.0 / len(batch)))
            masks_used.add(mask)
            params = {n: t for n, t in model.params.items() if mask.allows(model.is_key(n))}
            grads = {n: t.grad for n, t in params.items() if t.grad is not None}
            adam_step(params, grads, optimizers[mask], lr)

        record = {"epoch": epoch, "lr": lr, "train_loss": total / n_seen,
                  f"train_{metric_name}": correct / n_seen,
                  "update": ",".join(sorted(m.value for m in masks_used))}
        if val:
            val_metric, val_loss = evaluate(model, val)
            record[f"val_{metric_name}"] = val_metric
            record["val_loss"] = val_loss
            if cfg.permuted_validation:
                record[f"val_permuted_{metric_name}"] = _permuted_metric(
                    model, val, int(cfg.permuted_validation), np.random.default_rng([cfg.seed, epoch]))
        else:
            val_metric = -record["train_loss"] if classification else record["train_loss"]
            val_loss = record["train_loss"]
        result.history.append(record)
        sched.step(val_metric)
        if stopper.update(val_metric, val_loss):
            best_state = model.state()
            result.best_epoch = epoch
            result.best_val_metric = val_metric
        if stopper.should_stop:
            break

    model.load_state(best_state)
    if test:
        result.test_metric, result.test_loss = evaluate(model, test)
    result.wall_time = time.perf_counter() - start
    return result


def fit_and_evaluate(spec, graphs, meta, cfg, seed=None):
    """Split, build and train one model with every random choice tied to ``seed``.

    Returns ``(model, RunResult)``.
    """
    from .models import DatasetStats, build_model

    seed = cfg.seed if seed is None else seed
    if seed != cfg.seed:
        cfg = TrainConfig(**{**cfg.to_dict(), "loss_weights": cfg.loss_weights, "seed": seed})
    splits = split_dataset(graphs, seed)
    stats = DatasetStats(meta.n_max, meta.d, meta.classes)
    model = build_model(spec, stats, seed)
    return model, train_run(model, splits, cfg)
