"""Distillation, task and total losses (plain-array and tape forms)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .errors import ConfigError, DataError

PROB_FLOOR = 1e-12
LAMBDA_GRID = (1, 3, 4, 5, 6, 7, 9)


@dataclass(frozen=True)
class LossBreakdown:
    distill: float
    task: float
    total: float
    lam: float


def distill_loss(aape, p_a) -> float:
    """Squared Euclidean distance between the generated embedding and its target."""
    a = np.asarray(aape, dtype=np.float64)
    b = np.asarray(p_a, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"distill_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def task_ce_loss(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[0]:
        raise DataError(f"label {label} out of range for {probs.shape[0]} classes")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def _symmetric_infonce(logits: np.ndarray) -> float:
    diag = np.arange(logits.shape[0])
    row = logits - logits.max(axis=1, keepdims=True)
    row_lp = row - np.log(np.exp(row).sum(axis=1, keepdims=True))
    col = logits - logits.max(axis=0, keepdims=True)
    col_lp = col - np.log(np.exp(col).sum(axis=0, keepdims=True))
    return float(-(row_lp[diag, diag].mean() + col_lp[diag, diag].mean()) / 2)


def contrastive_clip_loss(aape_batch, caption_batch, tau: float) -> float:
    """Symmetric InfoNCE over the B x B cosine / tau matrix; matched pairs on the diagonal."""
    a = np.asarray(aape_batch, dtype=np.float64)
    c = np.asarray(caption_batch, dtype=np.float64)
    if a.ndim != 2 or a.shape != c.shape:
        raise ConfigError(f"batch shapes differ: {a.shape} vs {c.shape}")
    if a.shape[0] < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2 pairs")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    return _symmetric_infonce(a @ c.T / tau)


def total_loss(distill: float, task: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    return LossBreakdown(distill, task, lam * distill + task, lam)


# ---------------------------------------------------------------------------
# tape forms (batch means)


def distill_node(aape: Node, target: np.ndarray) -> Node:
    """Mean over the batch of squared distance; the target enters as a constant."""
    diff = aape - aape.tape.constant(target)
    return dc.mean(dc.total(diff * diff, axis=-1))


def ce_node(logits: Node, labels: np.ndarray) -> Node:
    """Mean of -log softmax(logits)[label]."""
    lp = dc.log_softmax(logits, axis=-1)
    B = logits.value.shape[0]
    onehot = np.zeros_like(logits.value)
    onehot[np.arange(B), labels] = 1.0
    return -dc.mean(dc.total(lp * onehot, axis=-1))


def infonce_node(aape: Node, captions: np.ndarray, tau: float) -> Node:
    tape = aape.tape
    a = dc.l2_normalize(aape)
    c = captions / np.linalg.norm(captions, axis=1, keepdims=True)
    logits = dc.matmul(a, tape.constant(c.T)) * (1.0 / tau)
    B = logits.value.shape[0]
    eye = np.eye(B)
    rows = dc.total(dc.log_softmax(logits, axis=1) * eye)
    cols = dc.total(dc.log_softmax(logits, axis=0) * eye)
    return (rows + cols) * (-0.5 / B)
