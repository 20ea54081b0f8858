"""Caption metrics against hand-worked values, noise transforms, and the
few-shot evaluation protocol on a miniature model."""

import json
import math

import numpy as np
import pytest

from lide.evaluation import (EvalConfig, bleu4, caption_metrics, fewshot_eval,
                             fewshot_eval_modes, fgsm_perturb, grayscale,
                             noisy_eval, rouge_l, save_eval_result,
                             select_gold_caption)
from lide.model import LideModel, ModelConfig
from lide.objectives import classification_loss
from lide.synthdata import EOS, TokenSeq, build_dataset, default_schema
from lide.tensor import Tensor, no_grad
from lide.textgen import DecodeConfig


def test_bleu_rouge_identity():
    cand = [[5, 6, 7, 8, 9]]
    refs = [[[5, 6, 7, 8, 9]]]
    assert bleu4(cand, refs) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l(cand, refs) == pytest.approx(1.0, abs=1e-12)
    # EOS and other specials are stripped before matching
    assert bleu4([[5, 6, 7, 8, EOS]], [[[5, 6, 7, 8]]]) == pytest.approx(1.0, abs=1e-12)


def test_bleu_rouge_disjoint_vocab_near_zero():
    cand = [[3, 3, 3, 3]]
    refs = [[[4, 5, 6, 7]]]
    assert bleu4(cand, refs) < 1e-3
    assert rouge_l(cand, refs) == 0.0


def test_bleu_hand_computed_pair_with_partial_overlap():
    # candidate [5,6,7,8] vs reference [5,6,9,8,10]:
    #   1-grams 3/4 (5,6,8), 2-grams 1/3 ((5,6)), 3- and 4-grams 0 -> eps
    #   smoothing over denominators 2 and 1; BP = exp(1 - 5/4).
    got = bleu4([[5, 6, 7, 8]], [[[5, 6, 9, 8, 10]]])
    log_p = 0.25 * (math.log(3 / 4) + math.log(1 / 3)
                    + math.log(1e-9 / 2) + math.log(1e-9 / 1))
    want = math.exp(1 - 5 / 4) * math.exp(log_p)
    assert got == pytest.approx(want, rel=1e-12)


def test_bleu_hand_computed_multi_reference():
    # candidate [3,4,5]; refs [3,4,5,6] and [3,9,5].  Closest-length ref is
    # the second (len 3), so BP = 1.  Precisions: 3/3, 2/2, 1/1 from the
    # first reference, no 4-grams -> eps/1.  BLEU = (1e-9)**0.25 = 10**-2.25.
    got = bleu4([[3, 4, 5]], [[[3, 4, 5, 6], [3, 9, 5]]])
    assert got == pytest.approx(10 ** -2.25, rel=1e-12)


def test_rouge_hand_computed_pairs():
    # [5,6,7,8] vs [5,6,9,8,10]: LCS [5,6,8] = 3, P=3/4, R=3/5, F1 = 2/3.
    assert rouge_l([[5, 6, 7, 8]], [[[5, 6, 9, 8, 10]]]) == pytest.approx(2 / 3, rel=1e-12)
    # best reference wins: [3,4,5] vs {[3,4,5,6]: F1=6/7, [3,9,5]: F1=2/3}.
    assert rouge_l([[3, 4, 5]], [[[3, 4, 5, 6], [3, 9, 5]]]) == pytest.approx(6 / 7, rel=1e-12)


def test_caption_metrics_validates_alignment():
    with pytest.raises(ValueError):
        caption_metrics([[1]], [])


def test_select_gold_caption_bigram_precision():
    generated = [5, 6, 7]
    golds = [[9, 9], [5, 6, 9], [5, 6, 7, 8]]
    # precisions: 0/1, 1/2, 2/3 -> third caption
    assert select_gold_caption(golds, generated) is golds[2]
    # ties break to the lowest index
    tied = [[5, 6], [5, 6]]
    assert select_gold_caption(tied, generated) is tied[0]
    # captions shorter than a bigram score zero but are still legal
    assert select_gold_caption([[4]], generated) == [4]
    with pytest.raises(ValueError):
        select_gold_caption([], generated)


def test_grayscale_luma_and_idempotence():
    img = np.zeros((1, 2, 2, 3))
    img[0, 0, 0] = [1.0, 0.0, 0.0]
    img[0, 0, 1] = [0.0, 1.0, 0.0]
    g = grayscale(img)
    assert g.shape == img.shape
    np.testing.assert_allclose(g[0, 0, 0], 0.299, rtol=1e-12)
    np.testing.assert_allclose(g[0, 0, 1], 0.587, rtol=1e-12)
    assert np.ptp(g[0, 0, 0]) == 0.0  # all three channels equal
    np.testing.assert_allclose(grayscale(g), g, atol=1e-12)


@pytest.fixture(scope="module")
def schema():
    return default_schema()


@pytest.fixture(scope="module")
def tiny_world(schema):
    splits = build_dataset(schema, (5, 2, 4), per_class=3, seed=77)
    cfg = ModelConfig(image_size=32, vocab_size=schema.vocab_size, max_len=12,
                      d_img=12, d_text=8, conv_channels=(4, 8),
                      decoder_layers=1, decoder_heads=2, encoder_layers=1,
                      encoder_heads=2, ffn_mult=2)
    model = LideModel(cfg, np.random.default_rng(123))
    return model, splits


def eval_cfg(**kw):
    base = dict(n_tasks=3, n_way=3, k_shot=1, m_query=2, seed=9)
    base.update(kw)
    return EvalConfig(**base)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(n_tasks=0)
    with pytest.raises(ValueError):
        EvalConfig(description_mode="oracle")
    with pytest.raises(ValueError):
        EvalConfig(noise="blur")
    with pytest.raises(ValueError):
        EvalConfig(epsilon=-0.1)


def test_fgsm_perturb_epsilon_zero_is_identity(schema, tiny_world):
    model, splits = tiny_world
    rng = np.random.default_rng(4)
    imgs = rng.uniform(0.2, 0.8, size=(4, 32, 32, 3))
    protos = Tensor(rng.normal(size=(3, model.cfg.d_img)))
    labels = np.eye(3)[rng.integers(3, size=4)]
    adv = fgsm_perturb(model, protos, imgs, labels, None, 0.0)
    np.testing.assert_array_equal(adv, imgs)


def test_fgsm_perturb_step_size_and_clipping(tiny_world):
    model, _ = tiny_world
    rng = np.random.default_rng(5)
    imgs = rng.uniform(0.2, 0.8, size=(4, 32, 32, 3))
    protos = Tensor(rng.normal(size=(3, model.cfg.d_img)))
    labels = np.eye(3)[rng.integers(3, size=4)]
    eps = 0.03
    adv = fgsm_perturb(model, protos, imgs, labels, None, eps)
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    delta = np.abs(adv - imgs)
    assert delta.max() <= eps + 1e-12
    # interior pixels move by exactly eps wherever the gradient is nonzero
    moved = delta[delta > 0]
    assert moved.size > 0
    np.testing.assert_allclose(moved, eps, rtol=1e-9)


def test_fgsm_perturb_raises_loss(tiny_world):
    model, _ = tiny_world
    rng = np.random.default_rng(6)
    imgs = rng.uniform(0.2, 0.8, size=(6, 32, 32, 3))
    protos_arr = rng.normal(size=(3, model.cfg.d_img))
    labels = np.eye(3)[rng.integers(3, size=6)]

    def loss_of(x):
        with no_grad():
            probs = model.classify(Tensor(protos_arr), model.encode_image(x))
            return float(classification_loss(probs, labels).data)

    adv = fgsm_perturb(model, Tensor(protos_arr), imgs, labels, None, 0.005)
    assert loss_of(adv) > loss_of(imgs)


def test_fewshot_eval_deterministic(schema, tiny_world):
    model, splits = tiny_world
    dcfg = DecodeConfig(max_len=12)
    a = fewshot_eval(model, splits[2], eval_cfg(), schema, dcfg)
    b = fewshot_eval(model, splits[2], eval_cfg(), schema, dcfg)
    assert a.mean == b.mean and a.ci_half == b.ci_half
    assert a.per_task == b.per_task


def test_fewshot_eval_modes_share_decode_and_report(schema, tiny_world, tmp_path):
    model, splits = tiny_world
    dcfg = DecodeConfig(max_len=12)
    dump = tmp_path / "captions.ndjson"
    res = fewshot_eval_modes(model, splits[2], eval_cfg(), schema, dcfg,
                             ["generated", "gold", "random"], dump_path=dump)
    assert set(res) == {"generated", "gold", "random"}
    cfg_n = eval_cfg()
    for mode, r in res.items():
        assert 0.0 <= r.mean <= 1.0
        assert len(r.per_task) == cfg_n.n_tasks
        assert r.config["description_mode"] == mode
        # per-task accuracies are logged rounded to 6 decimals
        accs = [t["accuracy"] for t in r.per_task]
        assert r.mean == pytest.approx(np.mean(accs), abs=1e-5)
        stderr = np.std(accs, ddof=1) / np.sqrt(len(accs))
        assert r.ci_half == pytest.approx(1.96 * stderr, abs=1e-5)
    lines = dump.read_text().splitlines()
    per_task = cfg_n.n_way * (cfg_n.k_shot + cfg_n.m_query)
    assert len(lines) == cfg_n.n_tasks * per_task
    rec = json.loads(lines[0])
    assert {"task", "instance", "tokens", "p", "score"} <= set(rec)


def test_fewshot_eval_modes_rejects_unknown_mode(schema, tiny_world):
    model, splits = tiny_world
    with pytest.raises(ValueError):
        fewshot_eval_modes(model, splits[2], eval_cfg(), schema,
                           DecodeConfig(max_len=12), ["typo"])


def test_fgsm_eval_requires_single_mode(schema, tiny_world):
    model, splits = tiny_world
    cfg = eval_cfg(noise="fgsm", epsilon=0.03)
    with pytest.raises(ValueError):
        fewshot_eval_modes(model, splits[2], cfg, schema,
                           DecodeConfig(max_len=12), ["generated", "gold"])


def test_noisy_eval_grayscale_and_fgsm_run(schema, tiny_world):
    model, splits = tiny_world
    dcfg = DecodeConfig(max_len=12)
    for noise in ("grayscale", "fgsm"):
        res = noisy_eval(model, splits[2], eval_cfg(n_tasks=2, noise=noise),
                         schema, dcfg)
        assert 0.0 <= res.mean <= 1.0


def test_no_text_model_ignores_caption_modes(schema, tiny_world):
    _, splits = tiny_world
    cfg = ModelConfig(image_size=32, vocab_size=schema.vocab_size, max_len=12,
                      d_img=12, d_text=8, conv_channels=(4, 8),
                      decoder_layers=1, decoder_heads=2, encoder_layers=1,
                      encoder_heads=2, ffn_mult=2, ablation="no_text")
    model = LideModel(cfg, np.random.default_rng(11))
    res = fewshot_eval(model, splits[2], eval_cfg(n_tasks=2), schema,
                       DecodeConfig(max_len=12))
    assert 0.0 <= res.mean <= 1.0


def test_save_eval_result_roundtrip(schema, tiny_world, tmp_path):
    model, splits = tiny_world
    res = fewshot_eval(model, splits[2], eval_cfg(n_tasks=2), schema,
                       DecodeConfig(max_len=12))
    out = tmp_path / "deep" / "result.json"
    save_eval_result(out, res)
    doc = json.loads(out.read_text())
    assert doc["mean"] == res.mean
    assert doc["ci_half"] == res.ci_half
    assert len(doc["per_task"]) == 2
