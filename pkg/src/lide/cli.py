"""Command-line entry point tying the pipeline together.

Subcommands: gen-data, pretrain, train, eval, analyze, explain. Every run
derives its randomness from --seed and writes a manifest into the output
directory before doing any work, so a run can be reproduced from the manifest
alone. Config is one JSON document with per-module sections; flags override
config values. LIDE_THREADS caps kernel worker threads (read at import).
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, checkpoint as ckpt
from .evaluation import (EvalConfig, MODES, _beam_caption_seqs, _classify_with_seqs,
                         _mode_seqs, fewshot_eval_modes)
from .model import ABLATIONS, LideModel, ModelConfig
from .objectives import LossConfig
from .synthdata import (EOS, build_dataset, default_schema, gold_seq, load_dataset,
                        sample_episode, save_dataset)
from .tensor import no_grad
from .textgen import DecodeConfig
from .training import TrainConfig, episodic_train, pretrain

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class CliError(RuntimeError):
    """Structured failure surfaced as exit code 1."""


# ---------------------------------------------------------------------------
# Config and manifest plumbing
# ---------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config file {p} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    return cfg


def _make(cls, section, overrides=None):
    """Build a config dataclass from a config section plus flag overrides."""
    merged = dict(section)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    try:
        return cls(**merged)
    except TypeError as e:
        raise CliError(f"bad {cls.__name__} settings: {e}")
    except ValueError as e:
        raise CliError(f"bad {cls.__name__} settings: {e}")


def _git_stamp():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).parent)
        return out.stdout.strip() if out.returncode == 0 else None
    except OSError:
        return None


def write_manifest(out_dir, command, args, config):
    """Record what is about to run; written before any work happens."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "git": _git_stamp(),
        "out_dir": str(out_dir),
        "flags": {k: v for k, v in vars(args).items() if k != "func"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _emit(args, payload, lines):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        for line in lines:
            print(line)
    return EXIT_OK


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _load_data(path):
    _require(Path(path) / "meta.json", "dataset")
    return load_dataset(path)


def _model_from_config(config, schema, seed, ablation=None):
    section = dict(config.get("model", {}))
    section.setdefault("vocab_size", schema.vocab_size)
    if "conv_channels" in section:
        section["conv_channels"] = tuple(section["conv_channels"])
    cfg = _make(ModelConfig, section, {"ablation": ablation})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return LideModel(cfg, rng)


def _model_from_checkpoint(path, seed=0):
    path = _require(path, "checkpoint")
    meta = ckpt.read_meta(path)
    if "model" not in meta:
        raise CliError(f"checkpoint {path} lacks an embedded model config")
    section = dict(meta["model"])
    section["conv_channels"] = tuple(section.get("conv_channels", ()))
    cfg = _make(ModelConfig, section)
    model = LideModel(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0])))
    ckpt.load_checkpoint(path, model)
    return model, meta


def _decode_cfg(config, model_cfg):
    section = dict(config.get("decode", {}))
    section.setdefault("max_len", model_cfg.max_len)
    return _make(DecodeConfig, section)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    config = load_config(args.config)
    write_manifest(args.out, "gen-data", args, config)
    section = dict(config.get("data", {}))
    counts = (section.pop("train_classes", 40), section.pop("dev_classes", 10),
              section.pop("test_classes", 12))
    per_class = section.pop("per_class", 20)
    image_size = section.pop("image_size", 32)
    if section:
        raise CliError(f"unknown data settings: {sorted(section)}")
    schema = default_schema()
    splits = build_dataset(schema, counts, per_class, args.seed, image_size)
    save_dataset(args.out, schema, splits, args.seed, image_size)
    payload = {
        "out": str(args.out),
        "classes": {s.name: len(s.classes) for s in splits},
        "instances": {s.name: len(s.instances) for s in splits},
        "vocab_size": schema.vocab_size,
    }
    return _emit(args, payload, [
        f"dataset written to {args.out}",
        *(f"  {s.name}: {len(s.classes)} classes x {len(s.instances) // max(1, len(s.classes))} instances"
          for s in splits),
    ])


def cmd_pretrain(args):
    config = load_config(args.config)
    write_manifest(args.out, "pretrain", args, config)
    schema, (train_split, _, _) = _load_data(args.data)
    model = _model_from_config(config, schema, args.seed, args.ablation)
    train_cfg = _make(TrainConfig, config.get("train", {}), {"seed": args.seed})
    loss_cfg = _make(LossConfig, config.get("loss", {}), {"phase": "pretrain"})
    decode_cfg = _decode_cfg(config, model.cfg)
    log_fn = _progress(args)
    path = pretrain(model, train_split, schema, train_cfg, loss_cfg, decode_cfg,
                    Path(args.out), log_fn=log_fn)
    payload = {"checkpoint": str(path), "ablation": model.cfg.ablation}
    return _emit(args, payload, [f"pretrained checkpoint: {path}"])


def cmd_train(args):
    config = load_config(args.config)
    write_manifest(args.out, "train", args, config)
    schema, (train_split, dev_split, _) = _load_data(args.data)
    model = _model_from_config(config, schema, args.seed, args.ablation)
    if args.init:
        ckpt.load_checkpoint(_require(args.init, "init checkpoint"), model)
    train_cfg = _make(TrainConfig, config.get("train", {}), {"seed": args.seed})
    loss_cfg = _make(LossConfig, config.get("loss", {}), {"phase": "episodic"})
    decode_cfg = _decode_cfg(config, model.cfg)
    log_fn = _progress(args)
    best, history = episodic_train(
        model, train_split, dev_split, schema, train_cfg, loss_cfg, decode_cfg,
        Path(args.out), log_fn=log_fn,
        resume_from=args.out if args.resume else None)
    payload = {
        "checkpoint": str(best),
        "ablation": model.cfg.ablation,
        "history": [[int(s), float(a)] for s, a in history],
    }
    lines = [f"best checkpoint: {best}"]
    if history:
        s, a = max(history, key=lambda h: (h[1], h[0]))
        lines.append(f"best dev accuracy {a:.4f} at step {s}")
    return _emit(args, payload, lines)


def _progress(args):
    if getattr(args, "json", False) or getattr(args, "quiet", False):
        return None

    def log_fn(rec):
        if "dev_acc" in rec:
            print(f"[{rec['phase']}] step {rec['step']}: "
                  f"loss {rec['loss']['total']:.4f} dev_acc {rec['dev_acc']:.4f}")
    return log_fn


def cmd_eval(args):
    config = load_config(args.config)
    write_manifest(args.out, "eval", args, config)
    schema, splits = _load_data(args.data)
    split = {s.name: s for s in splits}[args.split]
    model, _ = _model_from_checkpoint(args.ckpt, seed=args.seed)
    overrides = {"n_tasks": args.tasks, "noise": args.noise, "epsilon": args.epsilon,
                 "seed": args.seed}
    if args.mode not in (None, "all"):
        overrides["description_mode"] = args.mode
    eval_cfg = _make(EvalConfig, config.get("eval", {}), overrides)
    decode_cfg = _decode_cfg(config, model.cfg)
    modes = list(MODES) if args.mode == "all" else [eval_cfg.description_mode]
    if not model.cfg.uses_text_encoder:
        modes = [modes[0]]  # description modes coincide without a text encoder
    if eval_cfg.noise == "fgsm" and len(modes) > 1:
        raise CliError("fgsm noise needs a single description mode, not --mode all")
    out_dir = Path(args.out)
    dump_path = out_dir / f"captions_{split.name}.ndjson" if model.cfg.uses_text else None
    results = fewshot_eval_modes(model, split, eval_cfg, schema, decode_cfg,
                                 modes, dump_path=dump_path)
    doc = {"modes": {m: r.as_dict() for m, r in results.items()}}
    if len(modes) == 1:
        doc["mean"] = results[modes[0]].mean
        doc["ci_half"] = results[modes[0]].ci_half
    (out_dir / "eval_result.json").write_text(json.dumps(doc, indent=2))
    lines = [f"{m}: accuracy {r.mean:.4f} +/- {r.ci_half:.4f} "
             f"({eval_cfg.n_tasks} tasks, noise={eval_cfg.noise})"
             for m, r in results.items()]
    lines.append(f"wrote {out_dir / 'eval_result.json'}")
    return _emit(args, doc, lines)


def cmd_analyze(args):
    config = load_config(args.config)
    write_manifest(args.out, "analyze", args, config)
    schema, (train_split, dev_split, test_split) = _load_data(args.data)
    model, _ = _model_from_checkpoint(args.ckpt, seed=args.seed)
    section = dict(config.get("analysis", {}))
    n_nn = args.nn if args.nn is not None else section.get("n_nn", 20)
    bins = args.bins if args.bins is not None else section.get("bins", 30)
    out_dir = Path(args.out)

    dumps = {}
    for split in (train_split, dev_split, test_split):
        dumps[split.name] = analysis.build_feature_dumps(model, split, schema,
                                                         seed=args.seed)
        for src, dump in dumps[split.name].items():
            analysis.save_dump(out_dir / f"features_{split.name}_{src}.bin", dump)
    report = {"geometry": analysis.geometry_report(dumps["test"], n_nn=n_nn)}

    if model.cfg.uses_text_encoder:
        probe_cfg = {k: section[k] for k in
                     ("min_correct", "min_positive", "steps", "lr") if k in section}
        bundles = {
            name: analysis.probe_split(dumps[name], split, schema)
            for name, split in (("train", train_split), ("dev", dev_split),
                                ("test", test_split))
        }
        probes = analysis.probe_attributes(
            bundles["train"], bundles["dev"], bundles["test"],
            schema.attribute_names(), seed=args.seed, **probe_cfg)
        report["probes"] = analysis.probe_report(probes)

    if args.eval_json:
        doc = json.loads(_require(args.eval_json, "eval result").read_text())
        per_task = _generated_tasks(doc)
        if per_task is None:
            raise CliError(f"{args.eval_json} has no generated-mode caption scores")
        corr = analysis.correlation_from_eval(per_task, bins=bins)
        report["correlation"] = {
            "rho": corr.rho, "p_value": corr.p_value, "degenerate": corr.degenerate,
            "bins": bins,
            "bin_scores": [float(v) for v in corr.bin_scores],
            "bin_accuracy": [float(v) for v in corr.bin_accuracy],
        }

    if args.baseline_ckpt:
        base_model, _ = _model_from_checkpoint(args.baseline_ckpt, seed=args.seed)
        base_dumps = analysis.build_feature_dumps(base_model, test_split, schema,
                                                  seed=args.seed)
        for src, dump in base_dumps.items():
            analysis.save_dump(out_dir / f"features_baseline_test_{src}.bin", dump)
        base_geo = analysis.geometry_report({"h_img": base_dumps["h_img"]}, n_nn=n_nn)
        report["baseline_geometry"] = base_geo
        fused_src = "h_mm" if "h_mm" in report["geometry"] else "h_img"
        ours, base = report["geometry"][fused_src], base_geo["h_img"]
        report["comparison"] = {
            "fused_source": fused_src,
            "distance_ratio": {"model": ours["distance_ratio"],
                               "baseline": base["distance_ratio"],
                               "model_lower": ours["distance_ratio"] < base["distance_ratio"]},
            "mean_lid": {"model": ours["mean_lid"], "baseline": base["mean_lid"],
                         "model_lower": ours["mean_lid"] < base["mean_lid"]},
        }

    (out_dir / "analysis_report.json").write_text(json.dumps(report, indent=2))
    lines = []
    for src, geo in report["geometry"].items():
        lines.append(f"{src}: inner/inter {geo['distance_ratio']:.4f} "
                     f"({geo['inner_distance']:.4f}/{geo['inter_distance']:.4f}) "
                     f"mean LID {geo['mean_lid']:.2f}")
    if "probes" in report:
        kept = report["probes"]["attributes"]
        lines.append(f"probes: {len(kept)} attributes kept, "
                     f"wilcoxon p {report['probes']['wilcoxon']['p_value']:.4f}, "
                     f"direction {report['probes']['direction']}")
    if "correlation" in report:
        c = report["correlation"]
        lines.append(f"caption-score correlation: rho {c['rho']:.4f} p {c['p_value']:.4g}")
    if "comparison" in report:
        c = report["comparison"]
        lines.append(f"vs baseline: ratio {c['distance_ratio']['model']:.4f} "
                     f"vs {c['distance_ratio']['baseline']:.4f}, "
                     f"LID {c['mean_lid']['model']:.2f} vs {c['mean_lid']['baseline']:.2f}")
    lines.append(f"wrote {out_dir / 'analysis_report.json'}")
    return _emit(args, report, lines)


def _generated_tasks(doc):
    if "modes" in doc and "generated" in doc["modes"]:
        return doc["modes"]["generated"]["per_task"]
    if "per_task" in doc:
        return doc["per_task"]
    return None


# ---------------------------------------------------------------------------
# Interactive what-if session
# ---------------------------------------------------------------------------

def explain_session(model, schema, split, decode_cfg, eval_cfg, task_index,
                    query_index, lines_in, echo=print):
    """Re-classify one query under user-supplied captions.

    The episode and captions are set up exactly as the evaluator's gold mode
    for task ``task_index``: gold captions for supports and for every query.
    Only the focused query's caption varies - it starts as the beam-decoded
    caption and is replaced by whatever the user types (all token
    probabilities set to 1). Typing the query's selected gold caption
    therefore reproduces the gold-mode probabilities bit for bit.
    """
    rng = np.random.default_rng(np.random.SeedSequence([eval_cfg.seed, 7, task_index]))
    task = sample_episode(split, eval_cfg.n_way, eval_cfg.k_shot, eval_cfg.m_query, rng)
    sup_insts, qry_insts = task.flat_supports(), task.flat_queries()
    if not 0 <= query_index < len(qry_insts):
        raise CliError(f"query index {query_index} out of range 0..{len(qry_insts) - 1}")
    n, k = task.n_way, len(task.supports[0])
    sup_imgs = np.stack([i.image for i in sup_insts])
    qry_imgs = np.stack([i.image for i in qry_insts])
    with no_grad():
        h_sup = model.encode_image(sup_imgs)
        h_qry = model.encode_image(qry_imgs)
    all_imgs = np.concatenate([sup_imgs, qry_imgs], axis=0)
    gen_seqs, _ = _beam_caption_seqs(model, all_imgs, schema, decode_cfg)
    pool = split.all_captions()
    gold_seqs = _mode_seqs("gold", gen_seqs, sup_insts + qry_insts, pool, rng)
    row = n * k + query_index
    current = gen_seqs[row]
    source = "generated"

    by_id = {c.class_id: c for c in split.classes}
    true_cls = int(task.class_ids[task.labels[query_index].argmax()])
    transcript = []

    def show():
        seqs = list(gold_seqs)
        seqs[row] = current
        probs, _, gate = _classify_with_seqs(model, h_sup, h_qry, seqs, n, k)
        p = probs[query_index]
        pred_cls = int(task.class_ids[int(p.argmax())])
        entry = {
            "source": source,
            "caption": schema.decode(current.tokens),
            "tokens": [int(t) for t in current.tokens],
            "probs": [float(v) for v in p],
            "predicted_class": pred_cls,
            "true_class": true_cls,
            "correct": pred_cls == true_cls,
        }
        if gate is not None:
            entry["gate"] = [float(v) for v in gate[row]]
        transcript.append(entry)
        echo(f"caption ({source}): {entry['caption']!r}")
        if gate is not None:
            echo(f"gate: image {entry['gate'][0]:.3f} text {entry['gate'][1]:.3f}")
        ranked = sorted(zip(task.class_ids, p), key=lambda cp: -cp[1])
        for cid, pv in ranked:
            c = by_id[int(cid)]
            mark = "*" if int(cid) == pred_cls else " "
            echo(f" {mark} p={pv:.4f} class {cid}: {c.size} {c.color} {c.pattern} {c.shape}")
        echo(f"true class: {true_cls} -> {'correct' if entry['correct'] else 'wrong'}")

    echo(f"episode task {task_index}: {n}-way {k}-shot, query {query_index} "
         f"(instance {qry_insts[query_index].uid})")
    show()
    for raw in lines_in:
        line = raw.strip()
        if line == "quit":
            break
        if line == "":
            echo("(caption unchanged)")
            show()
            continue
        ids, unknown = schema.encode_words(line.lower().split())
        if unknown:
            echo(f"warning: skipped words not in the vocabulary: {unknown}")
        if not ids:
            echo("no usable words; caption unchanged")
            show()
            continue
        current = gold_seq(np.array(ids + [EOS], dtype=np.int64), schema)
        source = "user"
        show()
    return transcript


def cmd_explain(args):
    config = load_config(args.config)
    write_manifest(args.out, "explain", args, config)
    schema, splits = _load_data(args.data)
    split = {s.name: s for s in splits}[args.split]
    model, _ = _model_from_checkpoint(args.ckpt, seed=args.seed)
    if not (model.cfg.uses_text and model.cfg.uses_text_encoder):
        raise CliError("explain needs a model with caption generation and a text encoder")
    eval_cfg = _make(EvalConfig, config.get("eval", {}), {"seed": args.seed})
    decode_cfg = _decode_cfg(config, model.cfg)
    if args.script:
        lines_in = _require(args.script, "script").read_text().splitlines()
    else:
        lines_in = _stdin_lines()
    transcript = explain_session(model, schema, split, decode_cfg, eval_cfg,
                                 args.task, args.query, lines_in)
    out_path = Path(args.out) / "transcript.json"
    out_path.write_text(json.dumps(transcript, indent=2))
    return _emit(args, {"transcript": transcript, "path": str(out_path)},
                 [f"transcript saved to {out_path}"])


def _stdin_lines():
    while True:
        try:
            yield input("describe> ")
        except EOFError:
            return


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="lide",
        description="Few-shot image classification with generated descriptions.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("gen-data", help="render a synthetic shape-caption dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="whole-classification pretraining phase")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ablation", choices=ABLATIONS, default=None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="episodic training phase")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ablation", choices=ABLATIONS, default=None)
    sp.add_argument("--init", default=None, help="starting checkpoint (pretrain output)")
    sp.add_argument("--resume", action="store_true", help="continue from --out")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="few-shot evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
    sp.add_argument("--mode", choices=tuple(MODES) + ("all",), default=None)
    sp.add_argument("--tasks", type=int, default=None)
    sp.add_argument("--noise", choices=("none", "grayscale", "fgsm"), default=None)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="representation analyses of a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--baseline-ckpt", default=None,
                    help="image-only checkpoint for the geometry comparison")
    sp.add_argument("--eval-json", default=None,
                    help="eval_result.json for the caption-quality correlation")
    sp.add_argument("--bins", type=int, default=None)
    sp.add_argument("--nn", type=int, default=None, help="LID neighbor count")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("explain", help="interactive caption what-if session")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
    sp.add_argument("--task", type=int, default=0, help="evaluation task index")
    sp.add_argument("--query", type=int, default=0, help="query index in the task")
    sp.add_argument("--script", default=None, help="read inputs from a file")
    sp.set_defaults(func=cmd_explain)
    return p


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ckpt.CheckpointError, FileNotFoundError, ValueError) as e:
        _fail(args, str(e))
        return EXIT_ERROR


def _fail(args, message):
    if getattr(args, "json", False):
        print(json.dumps({"error": message}))
    else:
        print(f"error: {message}", file=sys.stderr)


def main(argv=None):
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
