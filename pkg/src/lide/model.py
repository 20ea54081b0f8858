"""The full few-shot classifier: a CNN image encoder, a caption decoder
conditioned on the image feature, a text encoder that re-reads the caption,
a gate that fuses image and text features, and a bilinear prototype head.

Ablations drop parts of the pipeline:
  full            image + generated text, gated fusion
  no_text         image feature only
  no_image        classification from the re-encoded caption alone
  no_text_encoder image feature only, but the caption decoder still trains
"""

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv2d,
    DecoderBlock,
    Embedding,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    causal_mask,
    padding_mask,
    uniform_init,
)
from .synthdata import PAD
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    matmul,
    relu,
    softmax,
    take,
    tmean,
    transpose,
    tsum,
)

ABLATIONS = ("full", "no_text", "no_image", "no_text_encoder")


@dataclass
class ModelConfig:
    image_size: int = 32
    vocab_size: int = 30
    max_len: int = 12
    d_img: int = 256
    d_text: int = 128
    conv_channels: tuple = (32, 64, 64, 64)
    decoder_layers: int = 3
    decoder_heads: int = 4
    encoder_layers: int = 2
    encoder_heads: int = 4
    ffn_mult: int = 2
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    @property
    def uses_text(self):
        return self.ablation != "no_text"

    @property
    def uses_text_encoder(self):
        return self.ablation in ("full", "no_image")


@dataclass
class FeatureBundle:
    """Per-instance features produced by one forward pass."""

    image_feat: np.ndarray          # or Tensor, (B, d_img)
    text_feat: object = None        # (B, d_text) or None
    fused_feat: object = None       # (B, d_img); equals image_feat w/o text
    gate: object = None             # (B, 2) fusion weights or None


class ImageEncoder(Module):
    """Four stride-2 3x3 conv+ReLU stages followed by a linear projection."""

    def __init__(self, cfg, rng):
        self.convs = []
        c_in, size = 3, cfg.image_size
        for c_out in cfg.conv_channels:
            self.convs.append(Conv2d(c_in, c_out, kernel=3, stride=2, padding=1, rng=rng))
            c_in = c_out
            size = (size + 2 - 3) // 2 + 1
        self.proj = Linear(c_in * size * size, cfg.d_img, rng)
        self._flat = c_in * size * size

    def __call__(self, images):
        """images: (B, H, W, 3) in [0, 1]; returns (B, d_img)."""
        x = as_tensor(images)
        x = transpose(x, (0, 3, 1, 2))
        for conv in self.convs:
            x = relu(conv(x))
        b = x.shape[0]
        return self.proj(x.reshape(b, self._flat))


class ImageToText(Module):
    """LayerNorm + linear map from image feature space to decoder memory."""

    def __init__(self, d_img, d_text, rng):
        self.norm = LayerNorm(d_img)
        self.proj = Linear(d_img, d_text, rng)

    def __call__(self, h_img):
        return self.proj(self.norm(h_img))

    def fwd_np(self, h_img):
        return self.proj.fwd_np(self.norm.fwd_np(h_img))


class TextToImage(Module):
    """Three-layer ReLU feed-forward map from text space to image space."""

    def __init__(self, d_text, d_img, rng):
        self.fc1 = Linear(d_text, d_img, rng)
        self.fc2 = Linear(d_img, d_img, rng)
        self.fc3 = Linear(d_img, d_img, rng)

    def __call__(self, h_text):
        return self.fc3(relu(self.fc2(relu(self.fc1(h_text)))))


class TextDecoder(Module):
    """Unidirectional transformer producing caption logits, cross-attending
    to a length-1 memory holding the mapped image feature.

    Two execution paths: `logits` builds the autodiff graph (teacher
    forcing); `begin_stream`/`step` run incremental numpy-only decoding
    with cached keys/values.
    """

    def __init__(self, cfg, rng):
        d, h = cfg.d_text, cfg.decoder_heads
        self.tok_emb = Embedding(cfg.vocab_size, d, rng)
        self.pos_emb = Embedding(cfg.max_len, d, rng)
        self.blocks = [
            DecoderBlock(d, h, cfg.ffn_mult * d, rng) for _ in range(cfg.decoder_layers)
        ]
        self.final_norm = LayerNorm(d)
        self.out_proj = Linear(d, cfg.vocab_size, rng)
        self.max_len = cfg.max_len

    def logits(self, tokens_in, memory):
        """tokens_in: (B, L) int array of BOS-shifted inputs; memory: (B, 1, d)."""
        tokens_in = np.asarray(tokens_in)
        b, length = tokens_in.shape
        if length > self.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {self.max_len}")
        x = self.tok_emb(tokens_in) + self.pos_emb(np.arange(length)[None, :].repeat(b, 0))
        mask = causal_mask(length)
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.out_proj(self.final_norm(x))

    def begin_stream(self, memory_np):
        """Start incremental decoding; memory_np: (B, 1, d) numpy."""
        return {
            "length": 0,
            "blocks": [
                {"k": None, "v": None, "memory_kv": blk.cross_attn.project_kv_np(memory_np)}
                for blk in self.blocks
            ],
        }

    def step(self, cache, token_ids):
        """Feed one token per sequence; returns next-token logits (B, V)."""
        pos = cache["length"]
        if pos >= self.max_len:
            raise ShapeError(f"decoder stream exhausted max_len {self.max_len}")
        token_ids = np.asarray(token_ids)
        x = self.tok_emb.fwd_np(token_ids[:, None]) + self.pos_emb.table.data[pos][None, None, :]
        for blk, bc in zip(self.blocks, cache["blocks"]):
            x = blk.step(x, bc, bc["memory_kv"])
        cache["length"] = pos + 1
        out = self.out_proj.fwd_np(self.final_norm.fwd_np(x))
        return out[:, 0, :]

    def reorder_stream(self, cache, idx):
        """Reindex the batch dimension of every cached array (beam search)."""
        out = {"length": cache["length"], "blocks": []}
        for bc in cache["blocks"]:
            mk, mv = bc["memory_kv"]
            out["blocks"].append({
                "k": None if bc["k"] is None else bc["k"][idx],
                "v": None if bc["v"] is None else bc["v"][idx],
                "memory_kv": (mk[idx], mv[idx]),
            })
        return out


class TextEncoder(Module):
    """Bidirectional transformer over caption tokens, trained from scratch."""

    def __init__(self, cfg, rng):
        d, h = cfg.d_text, cfg.encoder_heads
        self.tok_emb = Embedding(cfg.vocab_size, d, rng)
        self.pos_emb = Embedding(cfg.max_len, d, rng)
        self.blocks = [
            EncoderBlock(d, h, cfg.ffn_mult * d, rng) for _ in range(cfg.encoder_layers)
        ]
        self.final_norm = LayerNorm(d)
        self.max_len = cfg.max_len

    def __call__(self, tokens, pad_bool):
        """tokens: (B, L) ints padded with PAD; pad_bool: (B, L) True at pads."""
        tokens = np.asarray(tokens)
        b, length = tokens.shape
        if length > self.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {self.max_len}")
        x = self.tok_emb(tokens) + self.pos_emb(np.arange(length)[None, :].repeat(b, 0))
        mask = padding_mask(pad_bool)
        for block in self.blocks:
            x = block(x, mask)
        return self.final_norm(x)


class FusionGate(Module):
    """Softmax gate over [image; text] deciding how to mix the two features."""

    def __init__(self, d_img, d_text, rng):
        self.proj = Linear(d_img + d_text, 2, rng)

    def __call__(self, h_img, h_text):
        return softmax(self.proj(concat([h_img, h_text], axis=-1)), axis=-1)


class LideModel(Module):
    """Wires the pieces together; which pieces exist depends on the ablation."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg, rng)
        if cfg.uses_text:
            self.i2t = ImageToText(cfg.d_img, cfg.d_text, rng)
            self.decoder = TextDecoder(cfg, rng)
        if cfg.uses_text_encoder:
            self.text_encoder = TextEncoder(cfg, rng)
            self.t2i = TextToImage(cfg.d_text, cfg.d_img, rng)
        if cfg.ablation == "full":
            self.gate = FusionGate(cfg.d_img, cfg.d_text, rng)
        self.w_proto = Parameter(uniform_init(rng, (cfg.d_img, cfg.d_img), cfg.d_img))

    # -- feature extraction ------------------------------------------------

    def encode_image(self, images):
        return self.image_encoder(images)

    def decoder_memory(self, h_img):
        """(B, d_img) -> (B, 1, d_text) memory for the caption decoder."""
        m = self.i2t(h_img)
        b, d = m.shape
        return m.reshape(b, 1, d)

    def encode_text_pooled(self, tokens, probs, weights):
        """Weighted-average caption feature.

        tokens:  (B, L) int, PAD-padded
        probs:   (B, L) Tensor or array of per-token generation probabilities
        weights: (B, L) array, 0 at stop words and pads, 1 elsewhere

        Rows whose informative weight mass is zero (all real tokens are stop
        words) fall back to a plain average over the real tokens.
        """
        tokens = np.asarray(tokens)
        real = (tokens != PAD).astype(np.float64)
        weights = np.asarray(weights, dtype=np.float64) * real
        row_dead = weights.sum(axis=1) == 0.0
        if row_dead.any():
            weights = weights + row_dead[:, None] * real
        hidden = self.text_encoder(tokens, tokens == PAD)
        w = as_tensor(probs) * as_tensor(weights)
        b, length = tokens.shape
        num = tsum(hidden * w.reshape(b, length, 1), axis=1)
        den = tsum(w, axis=1).reshape(b, 1)
        return num / den

    def fuse_features(self, h_img, h_text):
        """Gated mix of the image feature and the mapped text feature."""
        if self.cfg.ablation != "full":
            raise ShapeError(f"fusion is undefined under ablation {self.cfg.ablation!r}")
        g = self.gate(h_img, h_text)
        mapped = self.t2i(h_text)
        b = g.shape[0]
        w_img = g[:, 0:1]
        w_text = g[:, 1:2]
        return w_img * h_img + w_text * mapped, g

    def bundle(self, h_img, tokens=None, probs=None, weights=None):
        """Assemble the classification feature for the active ablation."""
        abl = self.cfg.ablation
        if abl in ("no_text", "no_text_encoder") or tokens is None:
            return FeatureBundle(h_img, fused_feat=h_img)
        h_text = self.encode_text_pooled(tokens, probs, weights)
        if abl == "no_image":
            return FeatureBundle(h_img, h_text, self.t2i(h_text))
        fused, g = self.fuse_features(h_img, h_text)
        return FeatureBundle(h_img, h_text, fused, g)

    # -- prototype head ------------------------------------------------------

    def compute_prototypes(self, support_feats):
        """support_feats: (N, K, d) Tensor; returns (N, d) class prototypes.

        Support rows are put in a canonical order before averaging so the
        result is bit-identical under support permutation.
        """
        n, k, d = support_feats.shape
        flat = support_feats.reshape(n * k, d)
        keys = flat.data if isinstance(flat, Tensor) else np.asarray(flat)
        order = np.concatenate([
            c * k + np.lexsort(keys[c * k:(c + 1) * k].T[::-1]) for c in range(n)
        ])
        sorted_flat = take(as_tensor(flat), order)
        mean = tmean(sorted_flat.reshape(n, k, d), axis=1)
        return matmul(mean, transpose(self.w_proto))

    def scores(self, prototypes, query_feats):
        """Bilinear scores s[q, c] = z_c . (W h_q); shapes (N,d),(Q,d) -> (Q,N)."""
        wh = matmul(as_tensor(query_feats), transpose(self.w_proto))
        return matmul(wh, transpose(as_tensor(prototypes)))

    def classify(self, prototypes, query_feats):
        return softmax(self.scores(prototypes, query_feats), axis=-1)

    # -- parameter groups ----------------------------------------------------

    def parameter_groups(self):
        """Named groups used for per-module learning rates."""
        groups = {"main": [], "text_decoder": [], "text_encoder": []}
        for name, p in self.named_parameters():
            if name.startswith("decoder."):
                groups["text_decoder"].append((name, p))
            elif name.startswith("text_encoder."):
                groups["text_encoder"].append((name, p))
            else:
                groups["main"].append((name, p))
        return {k: v for k, v in groups.items() if v}
