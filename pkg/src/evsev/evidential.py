"""Dirichlet evidence head: concentrations, uncertainty split and training loss.

The numpy functions act on a single K-vector or on an N x K batch. The
``*_tensor`` variants put the same math on the gradient tape with analytic
backward rules (derivatives w.r.t. alpha).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nncore as nn
from .nncore import Tensor
from .specfun import digamma, lgamma, trigamma

KL_WEIGHT = 0.1   # lambda_1
AOD_WEIGHT = 0.1  # lambda_2


class DomainError(ValueError):
    pass


@dataclass
class DirichletOutput:
    alpha: np.ndarray
    total_evidence: float
    probs: np.ndarray
    vacuity: float
    dissonance: float
    aod_pred: float

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.alpha))

    @property
    def confidence(self) -> float:
        return float(np.max(self.probs))


@dataclass
class LossBreakdown:
    edl: float
    kl: float
    aod: float
    anneal_coeff: float
    total: float
    ce: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def evidence_from_logits(logits) -> np.ndarray:
    """alpha_k = softplus(logit_k) + 1."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DomainError("need at least two classes")
    if not np.isfinite(z).all():
        raise DomainError("logits must be finite")
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) + 1.0


def _alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape[-1] < 2:
        raise DomainError("need at least two classes")
    if np.any(~(a >= 1.0)):
        raise DomainError(f"Dirichlet concentrations must be >= 1, got {a}")
    return a


def _onehot(target, k: int) -> np.ndarray:
    y = np.asarray(target, dtype=np.float64)
    if y.shape[-1] != k or np.any((y != 0) & (y != 1)) or np.any(y.sum(axis=-1) != 1):
        raise DomainError(f"target must be one-hot over {k} classes, got {target}")
    return y


def one_hot(labels, k: int = 3) -> np.ndarray:
    return np.eye(k)[np.asarray(labels, dtype=int)]


def decompose_uncertainty(alpha):
    """Return (probs, vacuity, dissonance).

    Dissonance sums p_k p_j (1 - |a_k - a_j| / (a_k + a_j)) over ordered pairs k != j.
    """
    a = _alpha(alpha)
    k = a.shape[-1]
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    vacuity = k / s[..., 0]
    ak, aj = a[..., :, None], a[..., None, :]
    balance = 1.0 - np.abs(ak - aj) / (ak + aj)
    pair = p[..., :, None] * p[..., None, :] * balance
    diag = np.einsum("...kk->...k", pair).sum(axis=-1)
    dissonance = pair.sum(axis=(-2, -1)) - diag
    if a.ndim == 1:
        return p, float(vacuity), float(dissonance)
    return p, vacuity, dissonance


def dirichlet_output(alpha, aod_pred: float = 0.0) -> DirichletOutput:
    a = _alpha(alpha)
    probs, vac, dis = decompose_uncertainty(a)
    return DirichletOutput(a.copy(), float(a.sum()), probs, vac, dis, float(aod_pred))


# ------------------------------------------------------------------- losses

def edl_mse_loss(alpha, target, variance_term: bool = True):
    """Sum_k (y_k - p_k)^2 + p_k (1 - p_k) / (S + 1); per sample for batches."""
    a = _alpha(alpha)
    y = _onehot(target, a.shape[-1])
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    loss = ((y - p) ** 2).sum(axis=-1)
    if variance_term:
        loss = loss + (p * (1 - p)).sum(axis=-1) / (s[..., 0] + 1)
    return float(loss) if a.ndim == 1 else loss


def _edl_grad(a: np.ndarray, y: np.ndarray, variance_term: bool) -> np.ndarray:
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    dp = -2.0 * (y - p)
    ds = np.zeros_like(s)
    if variance_term:
        dp = dp + (1 - 2 * p) / (s + 1)
        ds = -(p * (1 - p)).sum(axis=-1, keepdims=True) / (s + 1) ** 2
    return (dp - (dp * p).sum(axis=-1, keepdims=True)) / s + ds


def _tilde(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y + (1 - y) * a


def kl_regularizer(alpha, target):
    """KL(Dir(alpha_tilde) || Dir(1)) with the true-class evidence removed from alpha."""
    a = _alpha(alpha)
    y = _onehot(target, a.shape[-1])
    at = _tilde(a, y)
    if np.any(at < 1):
        raise DomainError("alpha_tilde below 1")
    k = a.shape[-1]
    st = at.sum(axis=-1)
    kl = (lgamma(st) - math.lgamma(k) - lgamma(at).sum(axis=-1)
          + ((at - 1) * (digamma(at) - np.expand_dims(digamma(st), -1))).sum(axis=-1))
    # exactly zero at the uniform Dirichlet; tiny negatives nearby are rounding noise
    kl = np.where(np.all(at == 1.0, axis=-1), 0.0, np.maximum(kl, 0.0))
    return float(kl) if a.ndim == 1 else kl


def _kl_grad(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    at = _tilde(a, y)
    k = a.shape[-1]
    st = at.sum(axis=-1, keepdims=True)
    return (1 - y) * ((at - 1) * trigamma(at) - (st - k) * trigamma(st))


def anneal_coefficient(epoch: int, ramp_epochs: int) -> float:
    if ramp_epochs < 1:
        raise ValueError("ramp_epochs must be >= 1")
    return min(1.0, max(0.0, epoch / ramp_epochs))


def total_loss(alpha, target, aod_pred: float, aod_true: float, epoch: int,
               ramp_epochs: int = 10, variance_term: bool = True) -> LossBreakdown:
    edl = edl_mse_loss(alpha, target, variance_term)
    kl = kl_regularizer(alpha, target)
    aod = (float(aod_pred) - float(aod_true)) ** 2
    c = anneal_coefficient(epoch, ramp_epochs)
    return LossBreakdown(edl, kl, aod, c, edl + c * KL_WEIGHT * kl + AOD_WEIGHT * aod)


# ------------------------------------------------------------- tape variants

def alpha_tensor(logits: Tensor) -> Tensor:
    sp = nn.softplus(logits)
    return nn.custom_op("plus_one", (sp,), sp.data + 1.0, lambda g: (g,))


def total_loss_tensor(alpha: Tensor, targets: np.ndarray, aod_pred: Tensor, aod_true: np.ndarray,
                      anneal: float, variance_term: bool = True,
                      ce_weight: float = 0.0, class_weights: np.ndarray | None = None
                      ) -> tuple[Tensor, LossBreakdown]:
    """Batch-mean objective on the tape; ``targets`` is N x K one-hot, ``aod_pred`` has shape (N,).

    ``ce_weight`` adds an optional class-weighted cross-entropy on the Dirichlet
    mean (off by default).
    """
    a = _alpha(alpha.data)
    y = _onehot(targets, a.shape[-1])
    n = a.shape[0]
    aod_true = np.asarray(aod_true, dtype=np.float64)
    if aod_pred.shape != (n,) or aod_true.shape != (n,):
        raise nn.ShapeError(f"aod shapes {aod_pred.shape}/{aod_true.shape} do not match batch {n}")

    edl = edl_mse_loss(a, y, variance_term)
    kl = kl_regularizer(a, y)
    resid = aod_pred.data - aod_true
    aod = resid ** 2
    total = edl + anneal * KL_WEIGHT * kl + AOD_WEIGHT * aod
    ce_mean = 0.0
    w = None
    if ce_weight:
        w = np.ones(a.shape[-1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        s = a.sum(axis=-1)
        ce = -(w * y).sum(axis=-1) * (np.log((a * y).sum(axis=-1)) - np.log(s))
        total = total + ce_weight * ce
        ce_mean = float(ce.mean())

    def backward(g):
        g = float(g) / n
        ga = _edl_grad(a, y, variance_term) + anneal * KL_WEIGHT * _kl_grad(a, y)
        if w is not None:
            s = a.sum(axis=-1, keepdims=True)
            wy = (w * y).sum(axis=-1, keepdims=True)
            ga = ga + ce_weight * wy * (1.0 / s - y / a)
        return g * ga, g * AOD_WEIGHT * 2.0 * resid

    out = nn.custom_op("evidential_loss", (alpha, aod_pred), np.array(total.mean()), backward)
    parts = LossBreakdown(float(edl.mean()), float(kl.mean()), float(aod.mean()), anneal,
                          float(total.mean()), ce_mean)
    return out, parts
