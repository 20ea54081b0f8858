"""Loss functions: closed-form identities, masking, and gradient checks."""

import numpy as np
import pytest

from lide.objectives import (
    LossConfig,
    classification_loss,
    combine_losses,
    contrastive_loss,
    text_generation_loss,
)
from lide.synthdata import PAD
from lide.tensor import Parameter, softmax, log_softmax

from gradcheck import fd_gradcheck


def one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def test_classification_loss_uniform_is_log_n():
    for n in (2, 5, 9):
        probs = np.full((7, n), 1.0 / n)
        labels = one_hot(np.arange(7) % n, n)
        got = classification_loss(probs, labels).item()
        assert abs(got - np.log(n)) < 1e-9


def test_classification_loss_matches_manual():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    labels = one_hot(rng.integers(4, size=6), 4)
    want = -np.mean(np.log((probs * labels).sum(axis=1)))
    assert abs(classification_loss(probs, labels).item() - want) < 1e-12


def test_classification_loss_guards():
    with pytest.raises(ValueError):
        classification_loss(np.ones((3, 4)) / 4, np.ones((3, 5)))
    # zero probability at the true class stays finite via clipping
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    labels = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.isfinite(classification_loss(probs, labels).item())


def test_classification_loss_gradients():
    rng = np.random.default_rng(1)
    scores = Parameter(rng.normal(size=(5, 3)))
    labels = one_hot(rng.integers(3, size=5), 3)
    fd_gradcheck(lambda: classification_loss(softmax(scores, axis=-1), labels),
                 [scores], rng)


def test_text_loss_matches_manual_and_ignores_pads():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 4, 6))
    targets = np.array([[3, 5, 2, PAD], [4, 2, PAD, PAD]])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    mask = targets != PAD
    want = -lp[np.arange(2)[:, None], np.arange(4)[None, :], targets][mask].mean()
    got = text_generation_loss(logits, targets).item()
    assert abs(got - want) < 1e-12

    # logits at padded positions are irrelevant
    bent = logits.copy()
    bent[0, 3] += rng.normal(size=6)
    bent[1, 2:] = 0.0
    assert abs(text_generation_loss(bent, targets).item() - got) < 1e-15

    with pytest.raises(ValueError):
        text_generation_loss(logits, np.full((2, 4), PAD))


def test_text_loss_gradients():
    rng = np.random.default_rng(3)
    logits = Parameter(rng.normal(size=(2, 3, 5)))
    targets = np.array([[4, 1, PAD], [2, 3, 1]])
    fd_gradcheck(lambda: text_generation_loss(logits, targets), [logits], rng)


def test_contrastive_single_class_is_exactly_zero():
    rng = np.random.default_rng(4)
    gold = rng.normal(size=(1, 8))
    gen = rng.normal(size=(1, 8))
    assert contrastive_loss(gold, gen, temperature=0.05).item() == 0.0


def brute_contrastive(gold, gen, tau):
    g = gold / np.linalg.norm(gold, axis=1, keepdims=True)
    e = gen / np.linalg.norm(gen, axis=1, keepdims=True)
    sim = g @ e.T / tau
    n = len(sim)
    rows = sim - np.log(np.exp(sim).sum(axis=1, keepdims=True))
    cols = sim - np.log(np.exp(sim).sum(axis=0, keepdims=True))
    return -(np.trace(rows) + np.trace(cols)) / (2 * n)


def test_contrastive_matches_brute_force():
    rng = np.random.default_rng(5)
    for n in (2, 4, 7):
        gold = rng.normal(size=(n, 6))
        gen = rng.normal(size=(n, 6))
        got = contrastive_loss(gold, gen, temperature=0.07).item()
        assert abs(got - brute_contrastive(gold, gen, 0.07)) < 1e-10


def test_contrastive_cosine_scale_invariance():
    rng = np.random.default_rng(6)
    gold = rng.normal(size=(3, 5))
    gen = rng.normal(size=(3, 5))
    a = contrastive_loss(gold, gen, 0.05).item()
    b = contrastive_loss(gold * 4.0, gen * 0.25, 0.05).item()
    assert a == b  # power-of-two scaling cancels bitwise in the normalizer


def test_contrastive_gradients():
    rng = np.random.default_rng(7)
    gold = Parameter(rng.normal(size=(3, 4)))
    gen = Parameter(rng.normal(size=(3, 4)))
    fd_gradcheck(lambda: contrastive_loss(gold, gen, 0.1), [gold, gen], rng)


def scalar(x):
    return Parameter(np.array(float(x)))


def test_combine_losses_weighted_sum_identity():
    rng = np.random.default_rng(8)
    cfg = LossConfig(lambda_text=10.0, lambda_contrastive=0.1, phase="episodic")
    vals = {name: float(rng.uniform(0.1, 2.0))
            for name in ("class_gold", "class_gen", "text", "contrastive")}
    parts = {k: scalar(v) for k, v in vals.items()}
    total, report = combine_losses(parts, cfg)
    want = (vals["class_gold"] + vals["class_gen"]
            + 10.0 * vals["text"] + 0.1 * vals["contrastive"])
    assert abs(total.item() - want) < 1e-9
    assert report.total == total.item()
    assert report.classification_gold == vals["class_gold"]
    assert report.contrastive == vals["contrastive"]


def test_combine_losses_pretrain_phase():
    cfg = LossConfig(phase="pretrain")
    total, report = combine_losses({"class_gen": scalar(0.5), "text": scalar(0.2)}, cfg)
    assert abs(total.item() - (0.5 + 10.0 * 0.2)) < 1e-12
    assert report.classification_gold == 0.0

    with pytest.raises(ValueError):
        combine_losses({"class_gold": scalar(1.0)}, cfg)
    with pytest.raises(ValueError):
        combine_losses({}, cfg)


def test_combine_losses_partial_parts():
    cfg = LossConfig(phase="episodic")
    total, _ = combine_losses({"class_gold": scalar(0.7)}, cfg)
    assert total.item() == 0.7
