"""End-to-end CLI pipeline on a miniature dataset, exit codes, manifests,
and the explain session's typed-caption invariant."""

import json
from pathlib import Path

import numpy as np
import pytest

from lide.cli import EXIT_ERROR, EXIT_OK, dispatch

CONFIG = {
    "model": {"image_size": 32, "max_len": 10, "d_img": 10, "d_text": 8,
              "conv_channels": [4, 8], "decoder_layers": 1, "decoder_heads": 2,
              "encoder_layers": 1, "encoder_heads": 2, "ffn_mult": 2},
    "train": {"pretrain_epochs": 2, "pretrain_batch": 8, "episodic_steps": 4,
              "episode_batch": 1, "n_way": 3, "k_shot": 1, "m_query": 2,
              "eval_every": 2, "eval_tasks": 2},
    "data": {"train_classes": 6, "dev_classes": 3, "test_classes": 3,
             "per_class": 4},
    "decode": {"beam_width": 2, "max_len": 10},
    "eval": {"n_tasks": 2, "n_way": 3, "k_shot": 1, "m_query": 2},
    "analysis": {"min_correct": 1, "min_positive": 1, "steps": 30, "n_nn": 5},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run gen-data -> pretrain -> train once; reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    data = root / "data"
    assert dispatch(["gen-data", "--config", str(cfg_path), "--seed", "5",
                     "--out", str(data)]) == EXIT_OK
    pre = root / "pre"
    assert dispatch(["pretrain", "--config", str(cfg_path), "--seed", "5",
                     "--data", str(data), "--out", str(pre), "--quiet"]) == EXIT_OK
    run = root / "run"
    assert dispatch(["train", "--config", str(cfg_path), "--seed", "5",
                     "--data", str(data), "--out", str(run), "--quiet",
                     "--init", str(pre / "checkpoint_pretrain.json")]) == EXIT_OK
    return root, cfg_path, data, run


def test_pipeline_artifacts(pipeline):
    root, cfg_path, data, run = pipeline
    assert (data / "meta.json").exists()
    assert (data / "manifest.json").exists()
    assert (run / "checkpoint_best.json").exists()
    assert (run / "checkpoint_last.json").exists()
    assert (run / "train_log.ndjson").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 5
    assert manifest["config"]["train"]["episodic_steps"] == 4


def test_eval_all_modes_and_rerun_determinism(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    out1, out2 = root / "ev1", root / "ev2"
    for out in (out1, out2):
        code = dispatch(["eval", "--config", str(cfg_path), "--seed", "3",
                         "--data", str(data), "--ckpt",
                         str(run / "checkpoint_best.json"), "--out", str(out),
                         "--mode", "all", "--json"])
        assert code == EXIT_OK
    capsys.readouterr()
    doc1 = json.loads((out1 / "eval_result.json").read_text())
    doc2 = json.loads((out2 / "eval_result.json").read_text())
    assert doc1 == doc2  # identical manifests agree on every metric
    assert set(doc1["modes"]) == {"generated", "gold", "random"}
    for rec in doc1["modes"].values():
        assert 0.0 <= rec["mean"] <= 1.0
        assert len(rec["per_task"]) == 2
    assert (out1 / "captions_test.ndjson").exists()


def test_eval_fgsm_rejects_mode_all(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    code = dispatch(["eval", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(run / "checkpoint_best.json"),
                     "--out", str(root / "evf"), "--mode", "all",
                     "--noise", "fgsm"])
    assert code == EXIT_ERROR
    assert "fgsm" in capsys.readouterr().err


def test_eval_single_mode_with_noise(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    out = root / "evg"
    code = dispatch(["eval", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(run / "checkpoint_best.json"),
                     "--out", str(out), "--mode", "gold", "--noise", "grayscale",
                     "--tasks", "1", "--json"])
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert "mean" in doc and doc["modes"]["gold"]["config"]["noise"] == "grayscale"


def test_analyze_report(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    ev = root / "ev1"  # produced by the eval test; rebuild if ordering changes
    if not (ev / "eval_result.json").exists():
        dispatch(["eval", "--config", str(cfg_path), "--seed", "3",
                  "--data", str(data), "--ckpt", str(run / "checkpoint_best.json"),
                  "--out", str(ev), "--mode", "all", "--quiet", "--json"])
        capsys.readouterr()
    out = root / "an"
    code = dispatch(["analyze", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(run / "checkpoint_best.json"),
                     "--out", str(out), "--eval-json",
                     str(ev / "eval_result.json"), "--bins", "4", "--json"])
    assert code == EXIT_OK
    capsys.readouterr()
    report = json.loads((out / "analysis_report.json").read_text())
    assert set(report["geometry"]) == {"h_img", "h_text", "h_mm"}
    for src in ("h_img", "h_text", "h_mm"):
        assert (out / f"features_test_{src}.bin").exists()
    assert "probes" in report
    assert "correlation" in report and report["correlation"]["bins"] == 4


def test_analyze_baseline_comparison(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    pre_nt = root / "pre_nt"
    assert dispatch(["pretrain", "--config", str(cfg_path), "--seed", "5",
                     "--data", str(data), "--out", str(pre_nt), "--quiet",
                     "--ablation", "no_text"]) == EXIT_OK
    out = root / "an_base"
    code = dispatch(["analyze", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(run / "checkpoint_best.json"),
                     "--out", str(out), "--baseline-ckpt",
                     str(pre_nt / "checkpoint_pretrain.json"), "--json"])
    assert code == EXIT_OK
    capsys.readouterr()
    report = json.loads((out / "analysis_report.json").read_text())
    comp = report["comparison"]
    assert comp["fused_source"] == "h_mm"
    assert set(comp["distance_ratio"]) == {"model", "baseline", "model_lower"}
    assert (out / "features_baseline_test_h_img.bin").exists()


def test_explain_scripted_session_typed_gold_matches(pipeline, capsys):
    from lide.cli import explain_session, _decode_cfg, _model_from_checkpoint
    from lide.evaluation import (EvalConfig, _beam_caption_seqs,
                                 _classify_with_seqs, _mode_seqs)
    from lide.synthdata import load_dataset, sample_episode
    from lide.tensor import no_grad

    root, cfg_path, data, run = pipeline
    schema, splits = load_dataset(data)
    split = splits[2]
    model, _ = _model_from_checkpoint(run / "checkpoint_best.json")
    eval_cfg = EvalConfig(n_tasks=1, n_way=3, k_shot=1, m_query=2, seed=3)
    decode_cfg = _decode_cfg(CONFIG, model.cfg)

    # reference: the gold-mode probabilities of task 0, query 1
    rng = np.random.default_rng(np.random.SeedSequence([3, 7, 0]))
    task = sample_episode(split, 3, 1, 2, rng)
    sup, qry = task.flat_supports(), task.flat_queries()
    imgs = np.concatenate([np.stack([i.image for i in sup]),
                           np.stack([i.image for i in qry])])
    with no_grad():
        h_sup = model.encode_image(imgs[:3])
        h_qry = model.encode_image(imgs[3:])
    gen_seqs, _ = _beam_caption_seqs(model, imgs, schema, decode_cfg)
    gold_seqs = _mode_seqs("gold", gen_seqs, sup + qry, split.all_captions(), rng)
    probs_gold, _, _ = _classify_with_seqs(model, h_sup, h_qry, gold_seqs, 3, 1)
    row = 3 * 1 + 1
    typed = schema.decode(gold_seqs[row].tokens)

    transcript = explain_session(model, schema, split, decode_cfg, eval_cfg,
                                 task_index=0, query_index=1,
                                 lines_in=[typed, "quit"], echo=lambda *a: None)
    assert transcript[0]["source"] == "generated"
    assert transcript[-1]["source"] == "user"
    assert transcript[-1]["caption"] == typed
    np.testing.assert_array_equal(np.asarray(transcript[-1]["probs"]),
                                  probs_gold[1])


def test_explain_command_writes_transcript(pipeline, capsys):
    root, cfg_path, data, run = pipeline
    script = root / "script.txt"
    script.write_text("a red circle\nquit\n")
    out = root / "ex"
    code = dispatch(["explain", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(run / "checkpoint_best.json"),
                     "--out", str(out), "--task", "0", "--query", "0",
                     "--script", str(script), "--json"])
    assert code == EXIT_OK
    capsys.readouterr()
    transcript = json.loads((out / "transcript.json").read_text())
    assert len(transcript) == 2
    assert transcript[1]["source"] == "user"
    assert {"caption", "probs", "predicted_class", "true_class"} <= set(transcript[0])


def test_manifest_written_before_failure(tmp_path, capsys):
    cfg = dict(CONFIG)
    cfg["data"] = dict(CONFIG["data"], bogus_knob=1)
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    code = dispatch(["gen-data", "--config", str(cfg_path), "--out", str(out)])
    assert code == EXIT_ERROR
    assert "bogus_knob" in capsys.readouterr().err
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"


def test_missing_checkpoint_is_exit_one(pipeline, capsys):
    root, cfg_path, data, _ = pipeline
    code = dispatch(["eval", "--data", str(data), "--ckpt",
                     str(root / "nope.json"), "--out", str(root / "evmiss")])
    assert code == EXIT_ERROR
    assert "not found" in capsys.readouterr().err


def test_usage_error_is_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["eval", "--data", "x"])  # --out and --ckpt missing
    assert exc.value.code == 2
    capsys.readouterr()


def test_json_error_payload(tmp_path, capsys):
    code = dispatch(["pretrain", "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "o"), "--json"])
    assert code == EXIT_ERROR
    doc = json.loads(capsys.readouterr().out)
    assert "error" in doc
