import json
import math
from pathlib import Path

import numpy as np
import pytest

from mu2 import cli

SAMPLE = Path(__file__).resolve().parent.parent / "sample"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    payload = json.loads(out[-1]) if out else None
    return code, payload


def test_ingest_then_tokenize(tmp_path, capsys):
    stack = tmp_path / "stack.npy"
    code, payload = run(capsys, "ingest", "--config", str(SAMPLE / "config.json"),
                        "--input", str(SAMPLE / "volume.bin"),
                        "--output", str(stack))
    assert code == 0
    assert payload["shape"] == [2, 2, 4, 4]
    assert stack.exists()

    tokens = tmp_path / "tokens.npy"
    prov = tmp_path / "prov.npy"
    ckpt = tmp_path / "params.bin"
    code, payload = run(capsys, "tokenize", "--config", str(SAMPLE / "config.json"),
                        "--input", str(stack), "--question",
                        "What does the image show about the lungs?",
                        "--output", str(tokens), "--provenance", str(prov),
                        "--save-params", str(ckpt))
    assert code == 0
    assert payload["tokens"] == [4, 16]
    assert payload["pooled_length"] == 14
    assert np.load(tokens).shape == (4, 16)
    assert np.load(prov).shape == (4, 14)
    assert ckpt.exists() and Path(str(ckpt) + ".manifest").exists()

    # Loading the checkpoint must override a different init seed.
    cfg = json.loads((SAMPLE / "config.json").read_text())
    cfg["seed"] = 8
    cfg["encoder"]["vocab_path"] = str(SAMPLE / "vocab.txt")
    other_cfg = tmp_path / "config.json"
    other_cfg.write_text(json.dumps(cfg))
    replayed = tmp_path / "tokens2.npy"
    code, _ = run(capsys, "tokenize", "--config", str(other_cfg),
                  "--input", str(stack), "--question",
                  "What does the image show about the lungs?",
                  "--output", str(replayed), "--params", str(ckpt))
    assert code == 0
    assert np.array_equal(np.load(replayed), np.load(tokens))


def test_ingest_and_tokenize_are_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        run(capsys, "ingest", "--config", str(SAMPLE / "config.json"),
            "--input", str(SAMPLE / "volume.bin"), "--output", str(d / "s.npy"))
        run(capsys, "tokenize", "--config", str(SAMPLE / "config.json"),
            "--input", str(d / "s.npy"), "--question", "Is the heart enlarged?",
            "--output", str(d / "t.npy"))
        outs.append((d / "s.npy").read_bytes() + (d / "t.npy").read_bytes())
    assert outs[0] == outs[1]


def test_eval_command(tmp_path, capsys):
    per_line = tmp_path / "scores.jsonl"
    code, payload = run(capsys, "eval", "--candidates", str(SAMPLE / "preds.txt"),
                        "--references", str(SAMPLE / "refs.txt"),
                        "--per-line", str(per_line))
    assert code == 0
    assert 0.0 < payload["rouge1_f1"] <= 1.0
    rows = [json.loads(l) for l in per_line.read_text().splitlines()]
    assert len(rows) == 3
    assert all(0.0 <= r["bleu"] <= 1.0 for r in rows)


def test_eval_rejects_mismatched_lines(tmp_path, capsys):
    short = tmp_path / "short.txt"
    short.write_text("only one line\n")
    code, _ = run(capsys, "eval", "--candidates", str(short),
                  "--references", str(SAMPLE / "refs.txt"))
    assert code == 1


def test_dpo_loss_equal_seeds_gives_log_two(capsys):
    code, payload = run(capsys, "dpo-loss", "--prompt", "Findings:",
                        "--chosen", "clear lungs", "--rejected", "effusion",
                        "--policy-seed", "3", "--reference-seed", "3")
    assert code == 0
    assert abs(payload["loss"] - math.log(2)) < 1e-15
    assert payload["grad_policy_chosen"] < 0 < payload["grad_policy_rejected"]


def test_grad_check_single_op(capsys):
    code, payload = run(capsys, "grad-check", "--ops", "dpo_loss")
    assert code == 0
    assert payload == {"checked": 1, "failed": []}


def test_grad_check_reports_failure(capsys):
    code, payload = run(capsys, "grad-check", "--ops", "dpo_loss",
                        "--tolerance", "1e-30")
    assert code == 1
    assert payload["failed"] == ["dpo_loss"]


def test_grad_check_unknown_op(capsys):
    code, _ = run(capsys, "grad-check", "--ops", "nonsense")
    assert code == 1


def test_pref_build(tmp_path, capsys):
    out = tmp_path / "pairs.jsonl"
    code, payload = run(capsys, "pref-build", "--config", str(SAMPLE / "config.json"),
                        "--prompts", str(SAMPLE / "prompts.jsonl"),
                        "--output", str(out))
    assert code == 0
    assert payload["pairs"] == 2
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert all(r["score_chosen"] > r["score_rejected"] for r in rows)


def test_synth_pipeline_and_resume(tmp_path, capsys):
    out_dir = tmp_path / "synth"
    code, payload = run(capsys, "synth", "--config", str(SAMPLE / "config.json"),
                        "--reports", str(SAMPLE / "reports.jsonl"),
                        "--out-dir", str(out_dir))
    assert code == 0
    assert payload["reports"] == 3
    assert (out_dir / "dataset.jsonl").exists()

    code, resumed = run(capsys, "synth", "--config", str(SAMPLE / "config.json"),
                        "--reports", str(SAMPLE / "reports.jsonl"),
                        "--out-dir", str(out_dir), "--resume")
    assert code == 0
    assert resumed == payload


def test_rewrite_echoes_with_mock(tmp_path, capsys):
    examples = tmp_path / "examples.txt"
    examples.write_text("Example report one.\n\nExample report two.\n")
    out = tmp_path / "rewritten.jsonl"
    code, payload = run(capsys, "rewrite", "--config", str(SAMPLE / "config.json"),
                        "--reports", str(SAMPLE / "reports.jsonl"),
                        "--examples", str(examples), "--output", str(out))
    assert code == 0
    assert payload["reports"] == 3
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    originals = [json.loads(l) for l in (SAMPLE / "reports.jsonl").read_text().splitlines()]
    assert [r["report"] for r in rows] == [r["report"] for r in originals]


def test_translate_echoes_with_mock(tmp_path, capsys):
    src = tmp_path / "src.txt"
    src.write_text("No acute abnormality.\nStable exam.\n")
    out = tmp_path / "dst.txt"
    code, payload = run(capsys, "translate", "--config", str(SAMPLE / "config.json"),
                        "--input", str(src), "--output", str(out),
                        "--source-lang", "English", "--target-lang", "German")
    assert code == 0
    assert out.read_text() == src.read_text()


def test_bad_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    code, _ = run(capsys, "ingest", "--config", str(bad),
                  "--input", str(SAMPLE / "volume.bin"),
                  "--output", str(tmp_path / "o.npy"))
    assert code == 1


def test_missing_file_exits_two(tmp_path, capsys):
    code, _ = run(capsys, "ingest", "--config", str(SAMPLE / "config.json"),
                  "--input", str(tmp_path / "nope.bin"),
                  "--output", str(tmp_path / "o.npy"))
    assert code == 2


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["tokenize"])
    assert exc.value.code == 2
