"""Supervised and auxiliary objectives."""

from dataclasses import dataclass
import enum

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "LossWeights", "UpdateMask", "PROB_EPS",
    "cross_entropy", "mae", "link_prediction_loss", "entropy_loss",
    "kl_purity_loss", "total_loss",
]

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_link: float = 1.0
    lambda_entropy: float = 1.0
    gmn_update_period: int = 5
    gmn_kl_weight: float = 1.0
    # "alternate": purity loss on every p-th epoch, keys only; "combined": weighted sum
    gmn_schedule: str = "alternate"
    normalize_link: bool = True

    def __post_init__(self):
        bad = [name for name in ("lambda_link", "lambda_entropy", "gmn_kl_weight")
               if not getattr(self, name) >= 0]
        if not int(self.gmn_update_period) >= 1:
            bad.append("gmn_update_period")
        if self.gmn_schedule not in ("alternate", "combined"):
            bad.append("gmn_schedule")
        if bad:
            raise ConfigError(f"invalid loss weights: {', '.join(bad)}", bad)


class UpdateMask(enum.Enum):
    """Which parameter group an optimizer step may touch."""

    ALL = "all"
    KEYS_ONLY = "keys_only"
    EXCEPT_KEYS = "except_keys"

    def allows(self, is_key):
        if self is UpdateMask.ALL:
            return True
        return is_key if self is UpdateMask.KEYS_ONLY else not is_key


def cross_entropy(logits, label):
    c = logits.cols
    if logits.rows != 1:
        raise DimensionError(f"cross_entropy expects 1 x c logits, got {logits.shape}")
    label = int(label)
    if not 0 <= label < c:
        raise ContractError(f"label {label} out of range for {c} classes")
    return ad.neg(ad.pick(ad.log_softmax_rows(logits), 0, label))


def mae(pred, target):
    if pred.shape != (1, 1):
        raise DimensionError(f"mae expects a scalar prediction, got {pred.shape}")
    return ad.absolute(ad.shift(pred, -float(target)))


def link_prediction_loss(a, s, normalize=True):
    """``||A - S S^T||_F``, divided by ``n^2`` when ``normalize``."""
    a = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
    n = a.rows
    if a.shape != (n, n) or s.rows != n:
        raise DimensionError(f"link loss: adjacency {a.shape} vs assignment {s.shape}")
    loss = ad.frobenius_norm(ad.sub(a, ad.matmul(s, ad.transpose(s))))
    return ad.scale(loss, 1.0 / n ** 2) if normalize else loss


def entropy_loss(s):
    """Mean per-node entropy of the assignment rows."""
    plogp = ad.mul(s, ad.log(ad.shift(s, PROB_EPS)))
    return ad.scale(ad.sum_all(plogp), -1.0 / s.rows)


def kl_purity_loss(s):
    """KL term between assignments and their self-normalized squares.

    ``P_ij = (S_ij^2 / f_j) / sum_j' (S_ij'^2 / f_j')`` with cluster
    frequencies ``f_j = sum_i S_ij``; returns ``sum_ij P_ij log(P_ij / S_ij)``.
    """
    n, k = s.shape
    s = ad.clamp_min(s, PROB_EPS)
    freq = ad.tile_rows(ad.sum_cols(s), n)
    weighted = ad.div(ad.mul(s, s), freq)
    p = ad.div(weighted, ad.tile_cols(ad.sum_rows(weighted), k))
    return ad.sum_all(ad.mul(p, ad.sub(ad.log(p), ad.log(s))))


def total_loss(supervised, aux, w, epoch, family="diffpool"):
    """Combine the supervised loss with the family's auxiliary terms.

    ``aux`` is a list of per-layer dicts with ``"adjacency"`` and
    ``"assignment"`` tensors. Returns ``(loss, UpdateMask)``; the mask says
    which parameters the optimizer may update for this step. ``epoch``
    counts from 1.
    """
    if family == "diffpool":
        loss = supervised
        if w.lambda_link > 0:
            for layer in aux:
                term = link_prediction_loss(layer["adjacency"], layer["assignment"], w.normalize_link)
                loss = ad.add(loss, ad.scale(term, w.lambda_link))
        if w.lambda_entropy > 0:
            for layer in aux:
                loss = ad.add(loss, ad.scale(entropy_loss(layer["assignment"]), w.lambda_entropy))
        return loss, UpdateMask.ALL
    if family == "gmn":
        if w.gmn_schedule == "combined":
            loss = supervised
            for layer in aux:
                loss = ad.add(loss, ad.scale(kl_purity_loss(layer["assignment"]), w.gmn_kl_weight))
            return loss, UpdateMask.ALL
        if epoch % int(w.gmn_update_period) == 0:
            loss = None
            for layer in aux:
                term = kl_purity_loss(layer["assignment"])
                loss = term if loss is None else ad.add(loss, term)
            if loss is None:
                loss = ad.Tensor(np.zeros((1, 1)))
            return loss, UpdateMask.KEYS_ONLY
        return supervised, UpdateMask.EXCEPT_KEYS
    return supervised, UpdateMask.ALL
