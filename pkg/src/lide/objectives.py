"""Training objectives: episodic classification, caption cross-entropy,
and a symmetric contrastive term aligning gold- and generated-caption
class means.
"""

from dataclasses import dataclass

import numpy as np

from .synthdata import PAD
from .tensor import (
    as_tensor,
    clip_min,
    log,
    log_softmax,
    matmul,
    sqrt,
    take_along_last,
    tmean,
    transpose,
    tsum,
)

LOG_EPS = 1e-12


@dataclass
class LossConfig:
    lambda_text: float = 10.0
    lambda_contrastive: float = 0.1
    temperature: float = 0.05
    phase: str = "episodic"  # "episodic" | "pretrain"

    def __post_init__(self):
        if self.phase not in ("episodic", "pretrain"):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass
class LossReport:
    total: float
    classification_gold: float = 0.0
    classification_generated: float = 0.0
    text_generation: float = 0.0
    contrastive: float = 0.0

    def as_dict(self):
        return {
            "total": self.total,
            "class_gold": self.classification_gold,
            "class_gen": self.classification_generated,
            "text": self.text_generation,
            "contrastive": self.contrastive,
        }


def classification_loss(probs, labels):
    """Mean negative log probability of the true class.

    probs:  (Q, N) predicted class probabilities (rows sum to 1)
    labels: (Q, N) one-hot
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} vs labels {labels.shape}")
    p_true = tsum(probs * labels, axis=1)
    return -tmean(log(clip_min(p_true, LOG_EPS)))


def text_generation_loss(logits, targets):
    """Teacher-forced cross-entropy, averaged over real (non-pad) tokens.

    logits:  (B, L, V)
    targets: (B, L) ints, PAD marking positions past the caption end
    """
    targets = np.asarray(targets)
    lp = log_softmax(as_tensor(logits), axis=-1)
    tok_lp = take_along_last(lp, targets)
    mask = (targets != PAD).astype(np.float64)
    n_real = mask.sum()
    if n_real == 0:
        raise ValueError("text loss needs at least one real target token")
    return -tsum(tok_lp * mask) / n_real


def _row_normalize(x):
    sq = tsum(x * x, axis=1, keepdims=True)
    return x / sqrt(clip_min(sq, 1e-24))


def contrastive_loss(gold_means, gen_means, temperature):
    """Symmetric InfoNCE between per-class gold and generated text means.

    gold_means, gen_means: (N, d).  Cosine similarities over class pairs are
    scaled by 1/temperature; both matching directions are averaged, each
    weighted 1/(2N).  With a single class the loss is exactly zero.
    """
    g = _row_normalize(as_tensor(gold_means))
    e = _row_normalize(as_tensor(gen_means))
    sim = matmul(g, transpose(e)) * (1.0 / temperature)  # (N, N): gold rows, gen cols
    n = sim.shape[0]
    eye = np.eye(n)
    rows = tsum(log_softmax(sim, axis=1) * eye)
    cols = tsum(log_softmax(sim, axis=0) * eye)
    return -(rows + cols) * (1.0 / (2.0 * n))


def combine_losses(parts, cfg):
    """Weighted total for the active phase plus a float report.

    parts maps loss names (class_gold, class_gen, text, contrastive) to
    scalar tensors; pieces a phase or ablation does not produce are simply
    absent and contribute nothing.
    """
    weights = {"class_gold": 1.0, "class_gen": 1.0, "text": cfg.lambda_text,
               "contrastive": cfg.lambda_contrastive}
    if cfg.phase == "pretrain":
        weights = {"class_gen": 1.0, "text": cfg.lambda_text}
    unknown = set(parts) - set(weights)
    if unknown:
        raise ValueError(f"loss parts {sorted(unknown)} not used in phase {cfg.phase!r}")
    total = None
    for name, term in parts.items():
        piece = weights[name] * term
        total = piece if total is None else total + piece
    if total is None:
        raise ValueError("no loss parts given")
    report = LossReport(
        total=total.item(),
        classification_gold=parts["class_gold"].item() if "class_gold" in parts else 0.0,
        classification_generated=parts["class_gen"].item() if "class_gen" in parts else 0.0,
        text_generation=parts["text"].item() if "text" in parts else 0.0,
        contrastive=parts["contrastive"].item() if "contrastive" in parts else 0.0,
    )
    return total, report
