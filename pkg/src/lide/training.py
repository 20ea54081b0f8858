"""Two training phases: supervised pretraining over all training classes,
then episodic fine-tuning with dev-split model selection.

Both phases run the same per-step recipe: encode images, decode captions
(one algorithm per step, chosen uniformly between greedy and top-k
sampling), recompute token probabilities with a differentiable pass,
build the phase's loss, clip the global gradient norm, Adam step.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .layers import Linear
from .model import LideModel
from .objectives import (
    LossConfig,
    classification_loss,
    combine_losses,
    contrastive_loss,
    text_generation_loss,
)
from .synthdata import BOS, PAD, sample_episode
from .tensor import Tensor, concat, no_grad, softmax, tmean
from .textgen import (
    DecodeConfig,
    DecoderStream,
    decode_training,
    generation_probs,
    pad_token_batch,
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    grad_clip: float = 5.0
    # pretraining (paper scale: batch 128, 100 epochs)
    pretrain_epochs: int = 20
    pretrain_batch: int = 32
    pretrain_lr_main: float = 1e-3
    pretrain_lr_text_encoder: float = 1e-3
    pretrain_lr_text_decoder: float = 1e-5
    # episodic phase (paper scale: 1500 epochs of episodes, batch 100)
    episodic_steps: int = 3000
    episode_batch: int = 4
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    lr_main: float = 1e-3
    lr_text_encoder: float = 1e-4
    lr_text_decoder: float = 1e-5
    eval_every: int = 250
    eval_tasks: int = 100

    def __post_init__(self):
        lrs = (self.pretrain_lr_main, self.pretrain_lr_text_encoder,
               self.pretrain_lr_text_decoder, self.lr_main,
               self.lr_text_encoder, self.lr_text_decoder)
        if any(lr <= 0 for lr in lrs):
            raise ValueError("learning rates must be positive")
        if self.episode_batch < 1:
            raise ValueError("episode batch must be >= 1")


class Adam:
    """Adam with named parameter groups carrying their own learning rates."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        # groups: {name: {"lr": float, "params": [(pname, Parameter), ...]}}
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        for gname, g in groups.items():
            for pname, p in g["params"]:
                key = f"{gname}/{pname}"
                self.m[key] = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)

    def iter_params(self):
        for gname, g in self.groups.items():
            for pname, p in g["params"]:
                yield f"{gname}/{pname}", g["lr"], p

    def zero_grad(self):
        for _, _, p in self.iter_params():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for key, lr, p in self.iter_params():
            g = p.grad
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.isfinite(p.data).all():
                raise TrainingDiverged(f"non-finite parameter after update: {key}")

    def state(self):
        enc = lambda d: {k: ckpt.encode_state({"x": a}, dtype="<f8")["params"]["x"]
                         for k, a in d.items()}
        return {"t": self.t, "m": enc(self.m), "v": enc(self.v)}

    def load_state(self, state):
        self.t = state["t"]
        for field_name, store in (("m", self.m), ("v", self.v)):
            for k, rec in state[field_name].items():
                arr, _ = ckpt.decode_state({"params": {"x": rec}})
                store[k][...] = arr["x"]


def clip_gradients(params, max_norm):
    """Global-norm clip across all given parameters; returns the raw norm."""
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def make_optimizer(model, cfg, phase, extra_main=()):
    if phase == "pretrain":
        lrs = {"main": cfg.pretrain_lr_main,
               "text_encoder": cfg.pretrain_lr_text_encoder,
               "text_decoder": cfg.pretrain_lr_text_decoder}
    else:
        lrs = {"main": cfg.lr_main,
               "text_encoder": cfg.lr_text_encoder,
               "text_decoder": cfg.lr_text_decoder}
    groups = {}
    for gname, params in model.parameter_groups().items():
        groups[gname] = {"lr": lrs[gname], "params": list(params)}
    for pname, p in extra_main:
        groups["main"]["params"].append((pname, p))
    return Adam(groups)


# ---------------------------------------------------------------------------
# Shared per-batch caption machinery
# ---------------------------------------------------------------------------

def stop_weight_matrix(tokens, stop_ids):
    """(B, L) weights: 0 at PAD and stop-word tokens, 1 elsewhere."""
    tokens = np.asarray(tokens)
    w = (tokens != PAD).astype(np.float64)
    for sid in stop_ids:
        w[tokens == sid] = 0.0
    return w


def caption_paths(model, h_all, instances, schema, decode_cfg, rng, mode):
    """Decode captions for a batch and pack both text channels.

    Returns (gold, gen) where each is (tokens, probs, weights); gold probs
    are constants (ones), generated probs are graph tensors whose gradient
    reaches the decoder.
    """
    memory = model.decoder_memory(h_all)
    stream = DecoderStream(model.decoder, memory.data)
    gen_tokens, _, _ = decode_training(stream, len(instances), decode_cfg, rng, mode)
    p_gen = generation_probs(model.decoder, memory, gen_tokens)
    w_gen = stop_weight_matrix(gen_tokens, schema.stop_token_ids())

    gold_seqs = [inst.captions[rng.integers(len(inst.captions))] for inst in instances]
    gold_tokens, gold_probs, gold_w = pad_token_batch(gold_seqs)
    return memory, (gold_tokens, gold_probs, gold_w), (gen_tokens, p_gen, w_gen)


def text_loss_on_gold(model, memory, gold_tokens):
    inputs = np.concatenate(
        [np.full((gold_tokens.shape[0], 1), BOS, dtype=np.int64), gold_tokens[:, :-1]],
        axis=1,
    )
    return text_generation_loss(model.decoder.logits(inputs, memory), gold_tokens)


# ---------------------------------------------------------------------------
# Episodic phase
# ---------------------------------------------------------------------------

def episode_loss_parts(model, task, schema, loss_cfg, decode_cfg, rng, mode):
    """All loss parts for one episode under the model's ablation."""
    cfg = model.cfg
    n, k, m = task.n_way, len(task.supports[0]), len(task.queries[0])
    instances = task.flat_supports() + task.flat_queries()
    images = np.stack([inst.image for inst in instances])
    h_all = model.encode_image(images)

    if not cfg.uses_text:
        sup, qry = _split_episode(h_all, n, k, m, cfg.d_img)
        probs = model.classify(model.compute_prototypes(sup), qry)
        return {"class_gold": classification_loss(probs, task.labels)}

    memory, gold, gen = caption_paths(model, h_all, instances, schema, decode_cfg, rng, mode)
    parts = {"text": text_loss_on_gold(model, memory, gold[0])}

    if not cfg.uses_text_encoder:
        sup, qry = _split_episode(h_all, n, k, m, cfg.d_img)
        probs = model.classify(model.compute_prototypes(sup), qry)
        parts["class_gold"] = classification_loss(probs, task.labels)
        return parts

    b_gold = model.bundle(h_all, *gold)
    b_gen = model.bundle(h_all, *gen)
    for name, bundle in (("class_gold", b_gold), ("class_gen", b_gen)):
        sup, qry = _split_episode(bundle.fused_feat, n, k, m, cfg.d_img)
        probs = model.classify(model.compute_prototypes(sup), qry)
        parts[name] = classification_loss(probs, task.labels)

    v_gold = _class_text_means(model, b_gold.text_feat, n, k, cfg)
    v_gen = _class_text_means(model, b_gen.text_feat, n, k, cfg)
    parts["contrastive"] = contrastive_loss(v_gold, v_gen, loss_cfg.temperature)
    return parts


def _split_episode(feats, n, k, m, dim):
    sup = feats[np.arange(n * k)].reshape(n, k, dim)
    qry = feats[np.arange(n * k, n * k + n * m)]
    return sup, qry


def _class_text_means(model, text_feat, n, k, cfg):
    """Per-class averages of the mapped support text features."""
    mapped = model.t2i(text_feat[np.arange(n * k)])
    return tmean(mapped.reshape(n, k, cfg.d_img), axis=1)


def episodic_train(model, train_split, dev_split, schema, cfg, loss_cfg, decode_cfg,
                   run_dir, log_fn=None, resume_from=None):
    """Episodic fine-tuning; returns (best_checkpoint_path, history).

    Dev accuracy is measured on a task list fixed at startup; the best
    checkpoint maximizes dev accuracy with ties going to the later step.
    """
    from .evaluation import EvalConfig, fewshot_eval  # local: avoids cycle at import time

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    opt = make_optimizer(model, cfg, "episodic")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    dev_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    eval_cfg = EvalConfig(n_tasks=cfg.eval_tasks, n_way=cfg.n_way, k_shot=cfg.k_shot,
                          m_query=cfg.m_query, seed=cfg.seed + 3)

    start_step = 0
    history = []
    if resume_from:
        meta = ckpt.load_checkpoint(Path(resume_from) / "checkpoint_last.json", model)
        opt_state = json.loads((Path(resume_from) / "optimizer_last.json").read_text())
        opt.load_state(opt_state["adam"])
        # the sidecar carries float64 weights so resuming replays the exact
        # trajectory; the checkpoint file itself is float32
        exact, _ = ckpt.decode_state({"params": opt_state["params"]})
        for name, p in model.named_parameters():
            p.data[...] = exact[name]
        rng.bit_generator.state = opt_state["rng"]
        start_step = meta["step"]
        history = [tuple(h) for h in meta.get("history", [])]

    log_path = run_dir / "train_log.ndjson"
    best_path = run_dir / "checkpoint_best.json"
    mode_lc = LossConfig(loss_cfg.lambda_text, loss_cfg.lambda_contrastive,
                         loss_cfg.temperature, phase="episodic")
    t0 = time.time()
    with open(log_path, "a") as log:
        for step in range(start_step + 1, cfg.episodic_steps + 1):
            mode = "greedy" if rng.random() < 0.5 else "sample"
            opt.zero_grad()
            reports = []
            total = None
            for _ in range(cfg.episode_batch):
                task = sample_episode(train_split, cfg.n_way, cfg.k_shot, cfg.m_query, rng)
                parts = episode_loss_parts(model, task, schema, mode_lc, decode_cfg, rng, mode)
                ep_total, report = combine_losses(parts, mode_lc)
                reports.append(report)
                total = ep_total if total is None else total + ep_total
            total = total * (1.0 / cfg.episode_batch)
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            total.backward()
            norm = clip_gradients([p for _, _, p in opt.iter_params()], cfg.grad_clip)
            opt.step()

            rec = {"phase": "episodic", "step": step, "grad_norm": round(float(norm), 6),
                   "mode": mode,
                   "loss": {k: round(np.mean([r.as_dict()[k] for r in reports]), 6)
                            for k in reports[0].as_dict()}}
            if step % cfg.eval_every == 0 or step == cfg.episodic_steps:
                res = fewshot_eval(model, dev_split, eval_cfg, schema, decode_cfg)
                history.append((step, res.mean))
                rec["dev_acc"] = round(res.mean, 6)
                rec["elapsed_s"] = round(time.time() - t0, 1)
                if _is_best(history):
                    ckpt.save_checkpoint(best_path, model,
                                         {"step": step, "dev_acc": res.mean,
                                          "config": asdict(cfg),
                                          "model": asdict(model.cfg)})
                ckpt.save_checkpoint(run_dir / "checkpoint_last.json", model,
                                     {"step": step, "dev_acc": res.mean,
                                      "history": [list(h) for h in history],
                                      "config": asdict(cfg),
                                      "model": asdict(model.cfg)})
                (run_dir / "optimizer_last.json").write_text(json.dumps(
                    {"adam": opt.state(),
                     "params": ckpt.encode_state(ckpt.state_dict(model),
                                                 dtype="<f8")["params"],
                     "rng": rng.bit_generator.state}))
            log.write(json.dumps(rec) + "\n")
            if log_fn:
                log_fn(rec)
    if not best_path.exists():  # no eval point hit (tiny runs): save final
        ckpt.save_checkpoint(best_path, model,
                             {"step": cfg.episodic_steps, "dev_acc": float("nan"),
                              "config": asdict(cfg),
                              "model": asdict(model.cfg)})
    return best_path, history


def _is_best(history):
    """True when the newest entry is the selection winner so far."""
    best = select_checkpoint(history)
    return best == history[-1]


def select_checkpoint(history):
    """history: [(step, dev_acc), ...] -> winning entry (ties: later step)."""
    if not history:
        raise ValueError("no evaluations recorded")
    best = history[0]
    for entry in history[1:]:
        if entry[1] >= best[1]:
            best = entry
    return best


# ---------------------------------------------------------------------------
# Pretraining phase
# ---------------------------------------------------------------------------

def pretrain(model, train_split, schema, cfg, loss_cfg, decode_cfg, run_dir, log_fn=None):
    """Supervised warm-up: classification over all training classes with a
    temporary linear head plus caption cross-entropy.  Returns the path of
    the saved model checkpoint (head excluded)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    class_ids = sorted({inst.class_id for inst in train_split.instances})
    class_index = {cid: i for i, cid in enumerate(class_ids)}
    head = Linear(model.cfg.d_img, len(class_ids), rng)
    opt = make_optimizer(model, cfg, "pretrain",
                         extra_main=[("head.weight", head.weight), ("head.bias", head.bias)])
    pre_lc = LossConfig(loss_cfg.lambda_text, loss_cfg.lambda_contrastive,
                        loss_cfg.temperature, phase="pretrain")

    instances = list(train_split.instances)
    log_path = run_dir / "train_log.ndjson"
    step = 0
    with open(log_path, "a") as log:
        for epoch in range(1, cfg.pretrain_epochs + 1):
            order = rng.permutation(len(instances))
            for lo in range(0, len(order), cfg.pretrain_batch):
                batch = [instances[i] for i in order[lo:lo + cfg.pretrain_batch]]
                step += 1
                mode = "greedy" if rng.random() < 0.5 else "sample"
                opt.zero_grad()
                parts = _pretrain_parts(model, head, batch, class_index, schema,
                                        decode_cfg, rng, mode)
                total, report = combine_losses(parts, pre_lc)
                if not np.isfinite(total.data):
                    raise TrainingDiverged(f"non-finite loss at pretrain step {step}")
                total.backward()
                norm = clip_gradients([p for _, _, p in opt.iter_params()], cfg.grad_clip)
                opt.step()
                rec = {"phase": "pretrain", "epoch": epoch, "step": step,
                       "grad_norm": round(float(norm), 6), "mode": mode,
                       "loss": {k: round(v, 6) for k, v in report.as_dict().items()}}
                log.write(json.dumps(rec) + "\n")
                if log_fn:
                    log_fn(rec)
    path = run_dir / "checkpoint_pretrain.json"
    ckpt.save_checkpoint(path, model, {"phase": "pretrain", "step": step,
                                       "config": asdict(cfg),
                                       "model": asdict(model.cfg)})
    return path


def _pretrain_parts(model, head, batch, class_index, schema, decode_cfg, rng, mode):
    cfg = model.cfg
    images = np.stack([inst.image for inst in batch])
    labels = np.zeros((len(batch), len(class_index)))
    for i, inst in enumerate(batch):
        labels[i, class_index[inst.class_id]] = 1.0
    h_all = model.encode_image(images)

    if not cfg.uses_text:
        probs = softmax(head(h_all), axis=-1)
        return {"class_gen": classification_loss(probs, labels)}

    memory, gold, gen = caption_paths(model, h_all, batch, schema, decode_cfg, rng, mode)
    parts = {"text": text_loss_on_gold(model, memory, gold[0])}
    if not cfg.uses_text_encoder:
        feats = h_all
    else:
        feats = model.bundle(h_all, *gen).fused_feat
    probs = softmax(head(feats), axis=-1)
    parts["class_gen"] = classification_loss(probs, labels)
    return parts
