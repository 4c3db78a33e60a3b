"""Training objectives with analytic gradients.

All losses return a LossValue carrying the scalar and the gradient arrays
for each input they differentiate through. Similarities are cosine-based;
the pairwise similarity head is sigmoid(cosine / temperature) clamped away
from 0 and 1 so the log terms stay bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, InsufficientBatchError

PROB_CLAMP = 1e-7
DEFAULT_PAIR_TEMPERATURE = 0.5
DEFAULT_INFONCE_TEMPERATURE = 0.07


@dataclass
class PairBatch:
    """B pairs of hidden features with same-class flags and class ids."""

    features_a: np.ndarray  # (B, h)
    features_b: np.ndarray  # (B, h)
    same_class: np.ndarray  # (B,) bool
    class_pair: np.ndarray  # (B, 2) int

    def __post_init__(self):
        b = self.features_a.shape[0]
        if not (self.features_b.shape[0] == b == len(self.same_class) == len(self.class_pair)):
            raise DimensionError("pair batch fields disagree on batch size")

    @property
    def size(self) -> int:
        return self.features_a.shape[0]


@dataclass
class LossValue:
    value: float
    gradients: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500))),
                    np.exp(np.clip(z, -500, 500)) / (1.0 + np.exp(np.clip(z, -500, 500))))


def _row_cosines(a: np.ndarray, b: np.ndarray):
    """Row-wise cosines with gradients; zero rows give cosine 0 and zero
    gradient and are counted in the returned flag mask."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    na_safe = np.where(na == 0, 1.0, na)
    nb_safe = np.where(nb == 0, 1.0, nb)
    cos = np.einsum("ij,ij->i", a, b) / (na_safe * nb_safe)
    cos = np.where(zero, 0.0, cos)
    # d cos / da = b/(|a||b|) - cos * a/|a|^2
    da = b / (na_safe * nb_safe)[:, None] - cos[:, None] * a / (na_safe**2)[:, None]
    db = a / (na_safe * nb_safe)[:, None] - cos[:, None] * b / (nb_safe**2)[:, None]
    da[zero] = 0.0
    db[zero] = 0.0
    return cos, da, db, zero


def similarity_fp(f_i: np.ndarray, f_j: np.ndarray,
                  temperature: float = DEFAULT_PAIR_TEMPERATURE) -> float:
    """Pairwise similarity in (0,1): clamped sigmoid of scaled cosine."""
    cos, _, _, _ = _row_cosines(f_i[None, :], f_j[None, :])
    s = _sigmoid(cos / temperature)
    return float(np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)[0])


def _pair_bce_terms(batch: PairBatch, temperature: float):
    """Per-pair binary cross-entropy through the similarity head, plus the
    gradient of each term with respect to both feature rows."""
    cos, dca, dcb, zero = _row_cosines(batch.features_a, batch.features_b)
    s_raw = _sigmoid(cos / temperature)
    s = np.clip(s_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = batch.same_class.astype(np.float64)
    terms = -y * np.log(s) - (1.0 - y) * np.log(1.0 - s)
    # d/dcos of BCE(sigmoid(cos/T)) collapses to (s - y)/T; flat where the
    # clamp is active since the computed value no longer depends on cos.
    clamped = (s_raw <= PROB_CLAMP) | (s_raw >= 1.0 - PROB_CLAMP)
    dcos = np.where(clamped, 0.0, (s_raw - y) / temperature)
    return terms, dcos, dca, dcb, zero


def confusion_loss(batch: PairBatch,
                   temperature: float = DEFAULT_PAIR_TEMPERATURE) -> LossValue:
    """Mean pairwise BCE: attracts same-class pairs, repels cross-class."""
    terms, dcos, dca, dcb, zero = _pair_bce_terms(batch, temperature)
    b = batch.size
    scale = (dcos / b)[:, None]
    return LossValue(
        value=float(terms.mean()),
        gradients={"features_a": scale * dca, "features_b": scale * dcb},
        diagnostics={"zero_vectors": int(zero.sum())},
    )


def dynamic_confusion_loss(batch: PairBatch, normalized_confusion: np.ndarray,
                           temperature: float = DEFAULT_PAIR_TEMPERATURE,
                           positive_weight: float = 1.0) -> LossValue:
    """Confusion loss with each cross-class pair scaled by its normalized
    confusion degree. Same-class pairs keep a fixed positive weight: the
    weight matrix has a zero diagonal, which would otherwise silence all
    attraction terms."""
    m_hat = np.asarray(normalized_confusion, dtype=np.float64)
    i = batch.class_pair[:, 0]
    j = batch.class_pair[:, 1]
    c = m_hat.shape[0]
    if (i < 0).any() or (i >= c).any() or (j < 0).any() or (j >= c).any():
        raise IndexError("class pair id outside the confusion matrix")
    weights = np.where(batch.same_class, positive_weight, m_hat[i, j])
    terms, dcos, dca, dcb, zero = _pair_bce_terms(batch, temperature)
    b = batch.size
    scale = (weights * dcos / b)[:, None]
    return LossValue(
        value=float((weights * terms).mean()),
        gradients={"features_a": scale * dca, "features_b": scale * dcb},
        diagnostics={"zero_vectors": int(zero.sum()),
                     "mean_weight": float(weights.mean())},
    )


def info_nce(anchors: np.ndarray, positives: np.ndarray,
             temperature: float = DEFAULT_INFONCE_TEMPERATURE) -> LossValue:
    """Softmax contrastive loss over cosine similarities; row k's positive
    is row k of ``positives``, all other rows are negatives."""
    b = anchors.shape[0]
    if b < 2:
        raise InsufficientBatchError(f"info_nce needs a batch of at least 2, got {b}")
    na = np.maximum(np.linalg.norm(anchors, axis=1, keepdims=True), 1e-12)
    np_ = np.maximum(np.linalg.norm(positives, axis=1, keepdims=True), 1e-12)
    an = anchors / na
    pn = positives / np_
    logits = an @ pn.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    value = float(-np.mean(np.log(softmax[np.arange(b), np.arange(b)])))
    d_logits = (softmax - np.eye(b)) / b
    d_an = d_logits @ pn / temperature
    d_pn = d_logits.T @ an / temperature
    # back through row normalization: project out the radial component
    d_anchors = (d_an - np.einsum("ij,ij->i", d_an, an)[:, None] * an) / na
    d_positives = (d_pn - np.einsum("ij,ij->i", d_pn, pn)[:, None] * pn) / np_
    return LossValue(
        value=value,
        gradients={"anchors": d_anchors, "positives": d_positives},
    )


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean softmax cross-entropy with max-subtraction stabilization."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if (labels < 0).any() or (labels >= c).any():
        raise IndexError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    value = float(-log_probs[np.arange(b), labels].mean())
    grad = softmax.copy()
    grad[np.arange(b), labels] -= 1.0
    return LossValue(value=value, gradients={"logits": grad / b})


def total_loss(components: dict, coefficients: dict) -> LossValue:
    """Coefficient-weighted sum of named LossValues. Gradients are merged
    under '<component>.<input>' keys; a zero coefficient drops a term
    entirely (the ablation switch)."""
    value = 0.0
    gradients = {}
    for name, lv in components.items():
        coef = coefficients.get(name, 0.0)
        value += coef * lv.value
        for key, grad in lv.gradients.items():
            gradients[f"{name}.{key}"] = coef * grad
    return LossValue(value=float(value), gradients=gradients)
