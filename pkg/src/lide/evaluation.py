"""Few-shot evaluation: task sampling, the three description modes
(generated / gold / random), caption quality metrics, and noise
robustness (grayscale, FGSM).

Caption decoding is the expensive part, so a single decode pass per task
is shared across all requested modes.
"""

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .objectives import classification_loss
from .synthdata import BOS, EOS, PAD, TokenSeq, sample_episode
from .tensor import Tensor, concat, no_grad
from .textgen import DecoderStream, beam_decode, pad_token_batch, seqs_from_batch

MODES = ("generated", "gold", "random")
NOISES = ("none", "grayscale", "fgsm")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class EvalConfig:
    n_tasks: int = 300          # paper runs 600
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    description_mode: str = "generated"
    noise: str = "none"
    epsilon: float = 0.03
    confidence: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if self.description_mode not in MODES:
            raise ValueError(f"unknown description mode {self.description_mode!r}")
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise {self.noise!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class EvalResult:
    mean: float
    ci_half: float
    per_task: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def as_dict(self):
        return {"mean": self.mean, "ci_half": self.ci_half,
                "config": self.config, "per_task": self.per_task}


# ---------------------------------------------------------------------------
# Caption metrics
# ---------------------------------------------------------------------------

def _content_tokens(seq):
    toks = seq.tokens if isinstance(seq, TokenSeq) else np.asarray(seq)
    return [int(t) for t in toks if t not in (PAD, BOS, EOS)]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references, eps=1e-9):
    """Corpus BLEU with up-to-4-gram precision, brevity penalty, and +eps
    numerator smoothing for zero match counts."""
    match = np.zeros(4)
    total = np.zeros(4)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        c = _content_tokens(cand)
        rs = [_content_tokens(r) for r in refs]
        cand_len += len(c)
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, 5):
            cg = _ngrams(c, n)
            total[n - 1] += sum(cg.values())
            best = Counter()
            for r in rs:
                rg = _ngrams(r, n)
                for g, cnt in cg.items():
                    best[g] = max(best[g], min(cnt, rg[g]))
            match[n - 1] += sum(best.values())
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(4):
        num = match[n] if match[n] > 0 else eps
        den = total[n] if total[n] > 0 else 1.0
        log_p += 0.25 * np.log(num / den)
    bp = 1.0 if cand_len > ref_len else np.exp(1.0 - ref_len / max(cand_len, 1))
    return float(bp * np.exp(log_p))


def _lcs_len(a, b):
    m, n = len(a), len(b)
    dp = np.zeros((m + 1, n + 1), dtype=np.int64)
    for i in range(m):
        for j in range(n):
            dp[i + 1, j + 1] = dp[i, j] + 1 if a[i] == b[j] else max(dp[i, j + 1], dp[i + 1, j])
    return int(dp[m, n])


def rouge_l(candidates, references):
    """Mean over instances of the best-reference LCS F-measure (beta = 1)."""
    scores = []
    for cand, refs in zip(candidates, references):
        c = _content_tokens(cand)
        best = 0.0
        for r in refs:
            rr = _content_tokens(r)
            if not c or not rr:
                continue
            lcs = _lcs_len(c, rr)
            if lcs == 0:
                continue
            p, rec = lcs / len(c), lcs / len(rr)
            best = max(best, 2 * p * rec / (p + rec))
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def caption_metrics(candidates, references):
    """(BLEU4, ROUGE_L) over aligned candidate/reference-list pairs."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    return bleu4(candidates, references), rouge_l(candidates, references)


def select_gold_caption(gold_captions, generated):
    """The gold caption with the highest bigram precision against the
    generated caption; ties break to the lowest index."""
    if not gold_captions:
        raise ValueError("need at least one gold caption")
    gen_bigrams = _ngrams(_content_tokens(generated), 2)
    best_i, best_p = 0, -1.0
    for i, gold in enumerate(gold_captions):
        g = _content_tokens(gold)
        gb = _ngrams(g, 2)
        n_gold = sum(gb.values())
        if n_gold == 0:
            prec = 0.0
        else:
            inter = sum(min(cnt, gen_bigrams[big]) for big, cnt in gb.items())
            prec = inter / n_gold
        if prec > best_p:
            best_i, best_p = i, prec
    return gold_captions[best_i]


# ---------------------------------------------------------------------------
# Noise transforms
# ---------------------------------------------------------------------------

def grayscale(images):
    """Luma conversion replicated back to three channels."""
    y = np.tensordot(np.asarray(images), LUMA, axes=([-1], [0]))
    return np.repeat(y[..., None], 3, axis=-1)


def fgsm_perturb(model, support_feats_const, query_images, labels, seqs_by_query, epsilon):
    """One-step FGSM on query images against the task classification loss.

    The attack differentiates through the image encoder and fusion with
    the generated captions (token ids and their probabilities) held
    fixed; prototypes stay constant.  Returns clipped adversarial images.
    """
    x = Tensor(np.asarray(query_images, dtype=np.float64), requires_grad=True)
    h_q = model.encode_image(x)
    if model.cfg.uses_text_encoder and seqs_by_query is not None:
        tokens, probs, weights = pad_token_batch(seqs_by_query)
        bundle = model.bundle(h_q, tokens, probs, weights)
        feats = bundle.fused_feat
    else:
        feats = h_q
    probs_cls = model.classify(support_feats_const, feats)
    loss = classification_loss(probs_cls, labels)
    loss.backward()
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    adv = np.clip(x.data + epsilon * np.sign(grad), 0.0, 1.0)
    return adv


# ---------------------------------------------------------------------------
# Few-shot protocol
# ---------------------------------------------------------------------------

def _beam_caption_seqs(model, images, schema, decode_cfg):
    """Beam-decode captions for a stack of images; p_j from a second
    teacher-forced pass.  Returns (seqs, scores)."""
    from .textgen import generation_probs

    with no_grad():
        h = model.encode_image(images)
        memory = model.decoder_memory(h)
        tokens, scores, truncated = beam_decode(
            lambda: DecoderStream(model.decoder, memory.data), len(images), decode_cfg)
        probs = generation_probs(model.decoder, memory, tokens).data
    seqs = seqs_from_batch(tokens, probs, truncated, schema.stop_token_ids())
    return seqs, scores


def _mode_seqs(mode, gen_seqs, instances, pool, rng):
    if mode == "generated":
        return gen_seqs
    if mode == "gold":
        return [select_gold_caption(inst.captions, gen)
                for inst, gen in zip(instances, gen_seqs)]
    return [pool[rng.integers(len(pool))] for _ in instances]


def _classify_with_seqs(model, h_sup, h_qry, seqs, n, k):
    cfg = model.cfg
    gate = None
    with no_grad():
        if cfg.uses_text_encoder and seqs is not None:
            tokens, probs, weights = pad_token_batch(seqs)
            h_all = concat([h_sup, h_qry], axis=0)
            fb = model.bundle(h_all, tokens, probs, weights)
            feats = fb.fused_feat.data
            f_sup, f_qry = feats[:h_sup.shape[0]], feats[h_sup.shape[0]:]
            if fb.gate is not None:
                gate = fb.gate.data
        else:
            f_sup, f_qry = h_sup.data, h_qry.data
        protos = model.compute_prototypes(Tensor(f_sup.reshape(n, k, cfg.d_img)))
        return model.classify(protos, Tensor(f_qry)).data, protos.data, gate


def evaluate_task(model, task, schema, decode_cfg, modes, pool, rng, noise="none",
                  epsilon=0.03):
    """Per-mode correct flags for one task, plus caption records."""
    cfg = model.cfg
    n, k, m = task.n_way, len(task.supports[0]), len(task.queries[0])
    sup_insts = task.flat_supports()
    qry_insts = task.flat_queries()
    sup_imgs = np.stack([i.image for i in sup_insts])
    qry_imgs = np.stack([i.image for i in qry_insts])
    if noise == "grayscale":
        sup_imgs, qry_imgs = grayscale(sup_imgs), grayscale(qry_imgs)

    if noise == "fgsm" and epsilon > 0:
        if len(modes) != 1:
            raise ValueError("fgsm evaluation is description-mode specific; pass one mode")
        qry_imgs = _fgsm_queries(model, task, schema, decode_cfg, sup_imgs, qry_imgs,
                                 epsilon, modes[0], pool, rng)

    with no_grad():
        h_sup = model.encode_image(sup_imgs)
        h_qry = model.encode_image(qry_imgs)

    gen_seqs, beam_scores = (None, None)
    if cfg.uses_text:
        all_imgs = np.concatenate([sup_imgs, qry_imgs], axis=0)
        gen_seqs, beam_scores = _beam_caption_seqs(model, all_imgs, schema, decode_cfg)

    labels_idx = task.labels.argmax(axis=1)
    out = {}
    for mode in modes:
        if cfg.uses_text_encoder and cfg.uses_text:
            seqs = _mode_seqs(mode, gen_seqs, sup_insts + qry_insts, pool, rng)
        else:
            seqs = None
        probs, _, _ = _classify_with_seqs(model, h_sup, h_qry, seqs, n, k)
        out[mode] = probs.argmax(axis=1) == labels_idx

    records = None
    if gen_seqs is not None:
        query_seqs = gen_seqs[n * k:]
        bleu_each = [
            bleu4([s], [inst.captions]) for s, inst in zip(query_seqs, qry_insts)
        ]
        records = {
            "ids": [inst.uid for inst in sup_insts + qry_insts],
            "tokens": [s.tokens.tolist() for s in gen_seqs],
            "probs": [np.round(s.probs, 6).tolist() for s in gen_seqs],
            "scores": np.round(beam_scores, 6).tolist(),
            "query_bleu": np.round(bleu_each, 6).tolist(),
        }
    return out, records


def _fgsm_queries(model, task, schema, decode_cfg, sup_imgs, qry_imgs, epsilon,
                  mode, pool, rng):
    """Craft adversarial query images against the classification loss with
    the text channel of the given description mode held fixed (captions and
    probabilities computed from the clean images)."""
    n, k = task.n_way, len(task.supports[0])
    with no_grad():
        h_sup = model.encode_image(sup_imgs)
        if model.cfg.uses_text and model.cfg.uses_text_encoder:
            all_imgs = np.concatenate([sup_imgs, qry_imgs], axis=0)
            gen_seqs, _ = _beam_caption_seqs(model, all_imgs, schema, decode_cfg)
            seqs = _mode_seqs(mode, gen_seqs,
                              task.flat_supports() + task.flat_queries(), pool, rng)
            tokens, probs, weights = pad_token_batch(seqs[:n * k])
            f_sup = model.bundle(h_sup, tokens, probs, weights).fused_feat.data
            qry_seqs = seqs[n * k:]
        else:
            qry_seqs = None
            f_sup = h_sup.data
        protos = model.compute_prototypes(
            Tensor(f_sup.reshape(n, k, model.cfg.d_img))).detach()
    return fgsm_perturb(model, protos, qry_imgs, task.labels, qry_seqs, epsilon)


def fewshot_eval_modes(model, split, config, schema, decode_cfg, modes=None,
                       dump_path=None):
    """Evaluate several description modes sharing one decode per task.

    Returns {mode: EvalResult}.  Per-task records include the task seed,
    per-query correctness, and caption scores; generated-caption dumps go
    to dump_path (NDJSON) when given.
    """
    modes = list(modes) if modes is not None else [config.description_mode]
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown description mode {mode!r}")
        if mode in ("gold", "random") and any(not inst.captions for inst in split.instances):
            raise ValueError(f"mode {mode!r} requires captions on every instance")
    pool = split.all_captions()
    acc = {mode: [] for mode in modes}
    tasks_rec = {mode: [] for mode in modes}
    dump = open(dump_path, "w") if dump_path else None
    try:
        for t in range(config.n_tasks):
            seed_key = [config.seed, 7, t]
            rng = np.random.default_rng(np.random.SeedSequence(seed_key))
            task = sample_episode(split, config.n_way, config.k_shot, config.m_query, rng)
            flags, records = evaluate_task(
                model, task, schema, decode_cfg, modes, pool, rng,
                noise=config.noise, epsilon=config.epsilon)
            for mode in modes:
                correct = flags[mode]
                acc[mode].append(float(correct.mean()))
                rec = {"task_seed": seed_key, "accuracy": round(float(correct.mean()), 6),
                       "correct": correct.astype(int).tolist()}
                if records is not None:
                    rec["caption_scores"] = records["query_bleu"]
                tasks_rec[mode].append(rec)
            if dump and records is not None:
                for i, uid in enumerate(records["ids"]):
                    dump.write(json.dumps({
                        "task": t, "instance": uid, "tokens": records["tokens"][i],
                        "p": records["probs"][i], "score": records["scores"][i],
                    }) + "\n")
    finally:
        if dump:
            dump.close()
    out = {}
    for mode in modes:
        arr = np.asarray(acc[mode])
        stderr = arr.std(ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else 0.0
        cfg_echo = asdict(config)
        cfg_echo["description_mode"] = mode
        out[mode] = EvalResult(float(arr.mean()), float(1.96 * stderr),
                               tasks_rec[mode], cfg_echo)
    return out


def fewshot_eval(model, split, config, schema, decode_cfg, dump_path=None):
    """Single-mode evaluation per the config; see fewshot_eval_modes."""
    res = fewshot_eval_modes(model, split, config, schema, decode_cfg,
                             [config.description_mode], dump_path)
    return res[config.description_mode]


def noisy_eval(model, split, config, schema, decode_cfg, dump_path=None):
    """Evaluation under the config's noise model (grayscale or FGSM)."""
    return fewshot_eval(model, split, config, schema, decode_cfg, dump_path)


def save_eval_result(path, result):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(result.as_dict(), indent=2))
