"""Caption decoding.

Training-time generation picks, once per optimizer step, between greedy
decoding and top-k sampling.  Evaluation uses batched beam search with a
length-penalized score and finalizes hypotheses on EOS.  All decoding
runs on the numpy fast path with cached keys/values; per-token
probabilities for pooling come from a separate teacher-forced pass so the
graph only ever sees fixed token ids.

Decoders are driven through a small stepper interface (``step`` /
``reorder``) so the same search code runs against the real model or any
toy scorer.
"""

from dataclasses import dataclass

import numpy as np

from .synthdata import BOS, EOS, PAD, TokenSeq
from .tensor import no_grad, softmax, take_along_last

BANNED = (PAD, BOS)  # never generated


@dataclass
class DecodeConfig:
    beam_width: int = 5
    length_penalty: float = 0.5
    top_k: int = 20
    max_len: int = 12


class DecoderStream:
    """Stepper over a TextDecoder with a fixed per-sequence memory."""

    def __init__(self, decoder, memory_np):
        self.decoder = decoder
        self.cache = decoder.begin_stream(np.asarray(memory_np, dtype=np.float64))

    def step(self, tokens):
        return self.decoder.step(self.cache, tokens)

    def reorder(self, idx):
        self.cache = self.decoder.reorder_stream(self.cache, idx)


def _mask_banned(logits):
    logits = logits.copy()
    logits[:, list(BANNED)] = -1e30
    return logits


def _log_softmax_np(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _autoregress(stream, batch, cfg, pick):
    """Shared greedy/sampling loop; pick maps logits (B, V) -> token ids."""
    last = np.full(batch, BOS, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    columns = []
    for _ in range(cfg.max_len):
        logits = _mask_banned(stream.step(last))
        chosen = pick(logits)
        chosen = np.where(finished, PAD, chosen)
        columns.append(chosen)
        finished |= chosen == EOS
        if finished.all():
            break
        last = chosen
    tokens = np.stack(columns, axis=1)
    return tokens, ~finished


def greedy_decode(stream, batch, cfg):
    with no_grad():
        return _autoregress(stream, batch, cfg, lambda lg: lg.argmax(axis=-1))


def sample_decode(stream, batch, cfg, rng):
    """Top-k sampling restricted to the cfg.top_k highest-logit tokens."""

    def pick(logits):
        b, v = logits.shape
        k = min(cfg.top_k, v)
        order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
        top = np.take_along_axis(logits, order, axis=-1)
        top -= top.max(axis=-1, keepdims=True)
        p = np.exp(top)
        p /= p.sum(axis=-1, keepdims=True)
        cum = np.cumsum(p, axis=-1)
        u = rng.random((b, 1))
        slot = (u > cum).sum(axis=-1).clip(max=k - 1)
        return order[np.arange(b), slot]

    with no_grad():
        return _autoregress(stream, batch, cfg, pick)


def decode_training(stream, batch, cfg, rng, mode=None):
    """One training-time decode; mode is chosen uniformly when not forced."""
    if mode is None:
        mode = "greedy" if rng.random() < 0.5 else "sample"
    if mode == "greedy":
        tokens, truncated = greedy_decode(stream, batch, cfg)
    elif mode == "sample":
        tokens, truncated = sample_decode(stream, batch, cfg, rng)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return tokens, truncated, mode


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------

def _penalized(score, length, alpha):
    return score / length ** alpha


def _lex_smaller(a, b):
    """True if token sequence a orders before b (shorter prefix wins ties)."""
    for x, y in zip(a, b):
        if x != y:
            return x < y
    return len(a) < len(b)


def _select_top(cand_scores, cand_seqs, width):
    """Indices of the top scores, ties broken by lexicographic token order."""
    keys = [cand_seqs[:, j] for j in range(cand_seqs.shape[1] - 1, -1, -1)]
    keys.append(-cand_scores)
    order = np.lexsort(keys)
    return order[:width]


def beam_decode(make_stream, batch, cfg):
    """Length-penalized beam search over a batch of sequences.

    Beam width 1 is exactly greedy decoding, rescored with the penalty.
    For wider beams, each step ranks every expansion of the live
    hypotheses by cumulative log probability; the EOS expansion of each
    live hypothesis is finalized into a per-sequence pool with score
    (sum log p) / l**alpha, and the top w non-EOS expansions become the
    next beam.  A beam wide enough to hold all prefixes therefore
    degenerates to exhaustive search.  The greedy rollout is also offered
    to the pool, so the returned score never falls below the greedy
    score.  Ties anywhere break toward the lexicographically smaller
    token sequence.

    make_stream: zero-argument callable returning a fresh stepper.
    Returns (tokens, scores, truncated): tokens (batch, L) PAD-padded,
    the penalized score of each winner, and a truncation flag set when a
    sequence never produced EOS within max_len (then the best running
    prefix is returned).
    """
    w, alpha = cfg.beam_width, cfg.length_penalty
    if w == 1:
        with no_grad():
            tokens, truncated = greedy_decode(make_stream(), batch, cfg)
            raw = sequence_logprob(make_stream(), tokens)
        lengths = (tokens != PAD).sum(axis=1)
        scores = _penalized(raw, np.maximum(lengths, 1), alpha)
        return tokens, scores, truncated

    with no_grad():
        stream = make_stream()
        logits = stream.step(np.full(batch, BOS, dtype=np.int64))
        vocab = logits.shape[1]
        lp = _log_softmax_np(logits)
        lp[:, list(BANNED)] = -np.inf
        best = [None] * batch  # (penalized_score, token_tuple)

        seqs = np.full((batch, w, 1), PAD, dtype=np.int64)
        scores = np.full((batch, w), -np.inf)
        for b in range(batch):
            live = np.flatnonzero(np.isfinite(lp[b]))
            ranked = _select_top(lp[b, live], live[:, None], live.size)
            slot = 0
            for t in ranked:
                tok = live[t]
                if tok == EOS:
                    _offer(best, b, _penalized(lp[b, tok], 1, alpha), (EOS,))
                elif slot < w:
                    seqs[b, slot, 0] = tok
                    scores[b, slot] = lp[b, tok]
                    slot += 1
        stream.reorder(np.repeat(np.arange(batch), w))

        for pos in range(1, cfg.max_len):
            alive = np.isfinite(scores)
            if not alive.any():
                break
            last = np.where(alive, seqs[:, :, pos - 1], PAD).reshape(-1)
            lp = _log_softmax_np(stream.step(last)).reshape(batch, w, vocab)
            lp[:, :, list(BANNED)] = -np.inf
            cand = scores[:, :, None] + lp  # (batch, w, vocab)
            cand[~alive] = -np.inf

            new_seqs = np.full((batch, w, pos + 1), PAD, dtype=np.int64)
            new_scores = np.full((batch, w), -np.inf)
            pick_rows = np.full((batch, w), 0, dtype=np.int64)
            for b in range(batch):
                flat = cand[b].reshape(-1)
                live = np.flatnonzero(np.isfinite(flat))
                pick_rows[b] = b * w
                if live.size == 0:
                    continue
                slots, toks = live // vocab, live % vocab
                cseq = np.concatenate([seqs[b, slots], toks[:, None]], axis=1)
                ranked = _select_top(flat[live], cseq, live.size)
                slot = 0
                for t in ranked:
                    if toks[t] == EOS:
                        _offer(best, b, _penalized(flat[live[t]], pos + 1, alpha),
                               tuple(cseq[t]))
                    elif slot < w:
                        new_seqs[b, slot] = cseq[t]
                        new_scores[b, slot] = flat[live[t]]
                        pick_rows[b, slot] = b * w + slots[t]
                        slot += 1
            seqs, scores = new_seqs, new_scores
            if pos < cfg.max_len - 1 and np.isfinite(scores).any():
                stream.reorder(pick_rows.reshape(-1))

        g_tokens, g_trunc = greedy_decode(make_stream(), batch, cfg)
        g_lp = sequence_logprob(make_stream(), g_tokens)
        for b in range(batch):
            if not g_trunc[b]:
                seq = tuple(g_tokens[b][g_tokens[b] != PAD])
                _offer(best, b, _penalized(g_lp[b], len(seq), alpha), seq)

        chosen = []
        truncated = np.zeros(batch, dtype=bool)
        out_scores = np.zeros(batch)
        for b in range(batch):
            if best[b] is not None:
                out_scores[b], seq = best[b]
                chosen.append(seq)
            else:
                slot = int(np.argmax(np.where(np.isfinite(scores[b]), scores[b], -np.inf)))
                seq = tuple(seqs[b, slot])
                chosen.append(seq)
                out_scores[b] = _penalized(scores[b, slot], len(seq), alpha)
                truncated[b] = True
        out_len = max(len(s) for s in chosen)
        tokens = np.full((batch, out_len), PAD, dtype=np.int64)
        for b, seq in enumerate(chosen):
            tokens[b, :len(seq)] = seq
        return tokens, out_scores, truncated


def sequence_logprob(stream, tokens):
    """Cumulative log probability of fixed token rows (PAD ignored)."""
    tokens = np.asarray(tokens)
    batch, length = tokens.shape
    with no_grad():
        total = np.zeros(batch)
        last = np.full(batch, BOS, dtype=np.int64)
        for j in range(length):
            lp = _log_softmax_np(stream.step(last))
            real = tokens[:, j] != PAD
            total[real] += lp[np.arange(batch), tokens[:, j].clip(min=0)][real]
            last = np.where(real, tokens[:, j], last)
        return total


def _offer(best, b, penalized, seq):
    cur = best[b]
    if cur is None or penalized > cur[0] or (penalized == cur[0] and _lex_smaller(seq, cur[1])):
        best[b] = (penalized, seq)


# ---------------------------------------------------------------------------
# Probabilities and batching
# ---------------------------------------------------------------------------

def generation_probs(decoder, memory, tokens):
    """Teacher-forced per-token probabilities of already chosen tokens.

    decoder: TextDecoder; memory: (B, 1, d) Tensor (graph) or array;
    tokens: (B, L) ints, PAD after EOS.  Returns a (B, L) tensor whose
    gradient reaches the decoder; PAD positions carry garbage and must be
    masked by the caller's weights.
    """
    tokens = np.asarray(tokens)
    inputs = np.concatenate(
        [np.full((tokens.shape[0], 1), BOS, dtype=np.int64), tokens[:, :-1]], axis=1
    )
    logits = decoder.logits(inputs, memory)
    return take_along_last(softmax(logits, axis=-1), tokens)


def seqs_from_batch(tokens, probs, truncated, stop_ids):
    """Wrap decoded rows as TokenSeq objects, trimming trailing PAD."""
    out = []
    probs = np.asarray(probs)
    for i, row in enumerate(np.asarray(tokens)):
        real = row != PAD
        toks = row[real]
        w = np.array([0.0 if t in stop_ids else 1.0 for t in toks])
        out.append(TokenSeq(toks, probs[i][real], w, bool(truncated[i])))
    return out


def pad_token_batch(seqs, max_len=None):
    """Stack TokenSeqs into padded arrays (tokens, probs, weights)."""
    length = max(len(s) for s in seqs)
    if max_len is not None:
        length = min(length, max_len)
    b = len(seqs)
    tokens = np.full((b, length), PAD, dtype=np.int64)
    probs = np.zeros((b, length))
    weights = np.zeros((b, length))
    for i, s in enumerate(seqs):
        l = min(len(s), length)
        tokens[i, :l] = s.tokens[:l]
        probs[i, :l] = s.probs[:l]
        weights[i, :l] = s.weights[:l]
    return tokens, probs, weights
