"""Similarity classifier over class-text embeddings, losses and metrics.

Class ids are 0-based throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import f1_score

from . import tensor as T
from .backbone import FrozenBackbone
from .tensor import Tensor

PROB_CLAMP = 1e-12
DEFAULT_TAU = 0.07


@dataclass
class ClassTextBank:
    tokens: np.ndarray  # (K, L) class description token ids
    embeddings: np.ndarray  # (K, d)

    @property
    def n_classes(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def build(cls, backbone: FrozenBackbone, tokens: np.ndarray) -> "ClassTextBank":
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[0] < 2:
            raise ValueError("class bank needs K >= 2")
        # class descriptions never see temporal prompts, so one frozen pass suffices
        with T.no_grad():
            emb = backbone.encode_text(tokens).data.copy()
        return cls(tokens, emb)

    @classmethod
    def random(cls, backbone: FrozenBackbone, n_classes: int,
               rng: np.random.Generator) -> "ClassTextBank":
        cfg = backbone.cfg
        tokens = rng.integers(0, cfg.vocab_size, size=(n_classes, cfg.text_len))
        return cls.build(backbone, tokens)


@dataclass
class PredictionLogits:
    probs: Tensor  # (B, K)
    tau: float | Tensor


def cosine_matrix(x: Tensor, h: Tensor | np.ndarray) -> Tensor:
    """Row-wise cosine similarity of x (B, d) with every row of h (K, d)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    xn = x / T.sqrt(T.sum_over_axis(x * x, axis=-1, keepdims=True))
    hn = h / T.sqrt(T.sum_over_axis(h * h, axis=-1, keepdims=True))
    return xn @ T.transpose(hn)


def _tau_value(tau: float | Tensor) -> float:
    return tau.item() if isinstance(tau, Tensor) else float(tau)


def _scaled(sims: Tensor, tau: float | Tensor) -> Tensor:
    if _tau_value(tau) <= 0:
        raise ValueError(f"temperature must be positive, got {_tau_value(tau)}")
    return sims / tau if isinstance(tau, Tensor) else sims * (1.0 / float(tau))


def predict_from_sims(sims: Tensor, tau: float | Tensor = DEFAULT_TAU) -> PredictionLogits:
    return PredictionLogits(T.softmax(_scaled(sims, tau), axis=-1), tau)


def predict(x: Tensor, bank: ClassTextBank | np.ndarray,
            tau: float | Tensor = DEFAULT_TAU) -> PredictionLogits:
    """Softmax over cosine similarities divided by tau."""
    h = bank.embeddings if isinstance(bank, ClassTextBank) else bank
    return predict_from_sims(cosine_matrix(x, h), tau)


def multilabel_probs(x: Tensor, bank: ClassTextBank | np.ndarray,
                     tau: float | Tensor = DEFAULT_TAU) -> Tensor:
    """Independent per-class probabilities sigmoid(cos / tau)."""
    h = bank.embeddings if isinstance(bank, ClassTextBank) else bank
    return T.sigmoid(_scaled(cosine_matrix(x, h), tau))


def _clamped_log(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _probs(p) -> Tensor:
    if isinstance(p, PredictionLogits):
        return p.probs
    return p if isinstance(p, Tensor) else Tensor(np.atleast_2d(p))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def binary_cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean over every entry of -[y log p + (1 - y) log(1 - p)]."""
    y = Tensor(y)
    terms = y * _clamped_log(p) + (1.0 - y) * _clamped_log(1.0 - p)
    return -T.mean(terms)


def loss_uni(probs, labels, literal: bool = False) -> Tensor:
    """Cross-entropy of the true class, averaged over the batch.

    ``literal=True`` instead averages the binary cross-entropy over every
    (sample, class) indicator, which equals the default for K = 2.
    """
    p = _probs(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    y = one_hot(labels, p.shape[-1])
    if literal:
        return binary_cross_entropy(p, y)
    picked = T.sum_over_axis(p * Tensor(y), axis=-1)
    return -T.mean(_clamped_log(picked))


def loss_multi(probs, labels, literal: bool = False) -> Tensor:
    """Per-class binary cross-entropy averaged over samples and classes.

    ``literal=True`` gives -(1/N) sum_i sum_c y_ic log p_ic, which ignores
    negative labels entirely.
    """
    p = _probs(probs)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if literal:
        n = y.shape[0]
        return -T.sum_over_axis(Tensor(y) * _clamped_log(p)) * (1.0 / n)
    return binary_cross_entropy(p, y)


def metrics(predictions: np.ndarray, labels: np.ndarray, task: str) -> dict[str, float]:
    """Accuracy for single-label tasks, F1-micro/macro for multi-label.

    ``predictions`` holds per-class probabilities ``(N, K)``.  Multi-label
    decisions threshold at 0.5; classes with neither positives nor
    predictions contribute F1 = 0 to the macro average.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if predictions.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if task == "multi":
        decided = (predictions >= 0.5).astype(int)
        labels = labels.astype(int)
        return {
            "f1_micro": float(f1_score(labels, decided, average="micro", zero_division=0)),
            "f1_macro": float(f1_score(labels, decided, average="macro", zero_division=0)),
        }
    return {"accuracy": float(np.mean(predictions.argmax(axis=-1) == labels))}
