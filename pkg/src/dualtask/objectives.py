"""Training objectives: hardest-negative triplet ranking loss and the
class-sensitive binary cross-entropy used by the concept decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoNegativesError, ShapeError
from .numeric import l2_normalize_backward, l2_normalize_forward


@dataclass
class LossHyperParams:
    margin: float = 0.2
    lam: float = 0.2
    prediction_clip: float = 1e-7
    reduction: str = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 < self.prediction_clip < 0.1:
            raise ValueError("prediction_clip must lie in (0, 0.1)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


@dataclass(frozen=True)
class LabelVector:
    values: np.ndarray

    @classmethod
    def from_indices(cls, indices, m: int) -> "LabelVector":
        v = np.zeros(m)
        v[list(indices)] = 1.0
        return cls(v)

    @property
    def positive_count(self) -> int:
        return int(self.values.sum())

    @property
    def m(self) -> int:
        return self.values.shape[0]


def _labels(y) -> np.ndarray:
    return y.values if isinstance(y, LabelVector) else np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# Matching loss
# ---------------------------------------------------------------------------


def ranking_loss_terms(phi, tau, margin: float, video_ids=None):
    """Per-pair hinge terms and bookkeeping for the hardest-negative loss.

    Row ``i`` of ``phi`` and ``tau`` form a positive pair.  A negative is
    any other row whose video id differs (every other row when
    ``video_ids`` is None).  Returns ``(per_pair, cache)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if phi.shape != tau.shape or phi.ndim != 2:
        raise ShapeError(f"phi {phi.shape} and tau {tau.shape} must be equal 2-d shapes")
    B = phi.shape[0]
    if B < 2:
        raise NoNegativesError("ranking loss needs a batch of at least two pairs")
    A, ca = l2_normalize_forward(phi)
    Q, cq = l2_normalize_forward(tau)
    S = A @ Q.T
    if video_ids is None:
        neg = ~np.eye(B, dtype=bool)
    else:
        ids = np.asarray(video_ids)
        neg = ids[:, None] != ids[None, :]
    masked = np.where(neg, S, -np.inf)
    pos = np.diag(S)
    has_neg = neg.any(axis=0)
    v_neg = masked.argmax(axis=0)  # hardest video for each query (column)
    q_neg = masked.argmax(axis=1)  # hardest query for each video (row)
    idx = np.arange(B)
    h_video = np.where(has_neg, np.maximum(0.0, margin + S[v_neg, idx] - pos), 0.0)
    h_query = np.where(has_neg, np.maximum(0.0, margin + S[idx, q_neg] - pos), 0.0)
    return h_video + h_query, (A, Q, ca, cq, v_neg, q_neg, h_video, h_query)


def ranking_loss(phi, tau, margin: float = 0.2, video_ids=None, reduction: str = "mean"):
    """Hardest-in-batch triplet ranking loss on cosine similarity.

    Returns ``(loss, dphi, dtau)``.
    """
    per_pair, cache = ranking_loss_terms(phi, tau, margin, video_ids)
    scale = 1.0 / per_pair.shape[0] if reduction == "mean" else 1.0
    dphi, dtau = ranking_loss_backward(scale * np.ones_like(per_pair), cache)
    return float(per_pair.sum() * scale), dphi, dtau


def ranking_loss_backward(dper_pair, cache):
    A, Q, ca, cq, v_neg, q_neg, h_video, h_query = cache
    B = A.shape[0]
    idx = np.arange(B)
    dS = np.zeros((B, B))
    w1 = dper_pair * (h_video > 0)
    w2 = dper_pair * (h_query > 0)
    np.add.at(dS, (v_neg, idx), w1)
    np.add.at(dS, (idx, q_neg), w2)
    dS[idx, idx] -= w1 + w2
    dA = dS @ Q
    dQ = dS.T @ A
    return l2_normalize_backward(dA, ca), l2_normalize_backward(dQ, cq)


# ---------------------------------------------------------------------------
# Classification losses
# ---------------------------------------------------------------------------


def bce_per_class(y_hat, y, clip: float = 1e-7) -> np.ndarray:
    p = np.clip(np.asarray(y_hat, dtype=np.float64), clip, 1.0 - clip)
    t = _labels(y)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def _class_weights(Y: np.ndarray, lam: float) -> np.ndarray:
    """Per-element weights of the two normalized BCE terms; empty terms weigh 0."""
    pos = Y.sum(axis=-1, keepdims=True)
    neg = Y.shape[-1] - pos
    w_pos = np.divide(lam, pos, out=np.zeros_like(pos), where=pos > 0)
    w_neg = np.divide(1.0 - lam, neg, out=np.zeros_like(neg), where=neg > 0)
    return Y * w_pos + (1.0 - Y) * w_neg


def _logit_grad(P: np.ndarray, Y: np.ndarray, clip: float) -> np.ndarray:
    inside = (P > clip) & (P < 1.0 - clip)
    return (P - Y) * inside


def class_sensitive_loss(y_hat, y, lam: float = 0.2, clip: float = 1e-7):
    """Positive-class mean BCE weighted by ``lam`` plus negative-class mean
    BCE weighted by ``1 - lam``.

    ``y_hat`` are sigmoid outputs; returns ``(loss, dloss/dlogits)``.
    Works on a single vector or row-wise on a ``(B, m)`` batch (then the
    loss is a per-row array).
    """
    P = np.asarray(y_hat, dtype=np.float64)
    Y = _labels(y)
    if P.shape != Y.shape:
        raise ShapeError(f"predictions {P.shape} and labels {Y.shape} differ")
    W = _class_weights(Y, lam)
    loss = (W * bce_per_class(P, Y, clip)).sum(axis=-1)
    return (float(loss) if np.ndim(loss) == 0 else loss), W * _logit_grad(P, Y, clip)


def plain_bce_loss(y_hat, y, clip: float = 1e-7):
    """Mean BCE over all classes, the unweighted baseline."""
    P = np.asarray(y_hat, dtype=np.float64)
    Y = _labels(y)
    m = P.shape[-1]
    loss = bce_per_class(P, Y, clip).mean(axis=-1)
    return (float(loss) if np.ndim(loss) == 0 else loss), _logit_grad(P, Y, clip) / m


CLASSIFICATION_LOSSES = {
    "class_sensitive": lambda P, Y, hp: class_sensitive_loss(P, Y, hp.lam, hp.prediction_clip),
    "bce": lambda P, Y, hp: plain_bce_loss(P, Y, hp.prediction_clip),
}


def combined_loss(matching, classification):
    """Unweighted sum of the two task losses; arrays are averaged over the batch."""
    total = np.asarray(matching, dtype=np.float64) + np.asarray(classification, dtype=np.float64)
    return float(total.mean()) if total.ndim else float(total)
