import json

import pytest

from mu2 import synth
from mu2.chat import ChatError, MockChatClient
from mu2.synth import QARecord


def record(**overrides):
    base = dict(report_id="r1", qa_id="r1#q0", question="What is seen?",
                thinking=("I look at the scan carefully, compare both sides, "
                          "check margins and densities, and conclude the "
                          "appearance is within normal limits overall today."),
                answer="Normal study.")
    base.update(overrides)
    return QARecord(**base)


class ScriptClient:
    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        if not self.replies:
            raise AssertionError("script exhausted")
        return self.replies.pop(0)


def test_status_transitions():
    r = record()
    assert r.status == synth.STATUS_GENERATED
    r.advance(synth.STATUS_ACCEPTED)
    r.advance(synth.STATUS_REFINED)
    assert r.status == synth.STATUS_REFINED
    with pytest.raises(ValueError, match="refined"):
        r.advance(synth.STATUS_ACCEPTED)


def test_filtered_out_needs_reason():
    r = record()
    with pytest.raises(ValueError, match="rejection_reason"):
        r.advance(synth.STATUS_FILTERED_OUT)
    r.advance(synth.STATUS_FILTERED_OUT, "vacuous_thinking")
    with pytest.raises(ValueError):
        r.advance(synth.STATUS_ACCEPTED)


def test_reason_only_on_filtered_out():
    with pytest.raises(ValueError, match="rejection_reason"):
        record().advance(synth.STATUS_ACCEPTED, "why not")


def test_from_dict_rejects_unknown_status():
    row = {"report_id": "r", "qa_id": "r#q0", "question": "q", "thinking": "t",
           "answer": "a", "status": "limbo", "rejection_reason": None}
    with pytest.raises(ValueError, match="limbo"):
        QARecord.from_dict(row)


def test_heuristic_rejects_non_english_thinking():
    r = record(thinking="扫描显示双肺纹理清晰，未见明显实变。" * 3)
    assert synth.heuristic_rejection(r) == "non_english"


def test_heuristic_rejects_short_thinking():
    r = record(thinking="Looks fine to me.")
    assert synth.heuristic_rejection(r) == "vacuous_thinking"


def test_heuristic_ascii_boundary():
    # 19 of 20 characters are ASCII, exactly the 0.95 floor, so the English
    # check passes and the length check fires instead.
    r = record(thinking="a" * 19 + "é")
    assert synth.heuristic_rejection(r) == "vacuous_thinking"


def test_heuristic_accepts_good_thinking():
    assert synth.heuristic_rejection(record()) is None


def test_parse_verdict():
    assert synth.parse_verdict("Yes") is True
    assert synth.parse_verdict("  yes \n") is True
    assert synth.parse_verdict("NO") is False
    assert synth.parse_verdict("Yes.") is None
    assert synth.parse_verdict("") is None


def test_rejection_reason_short_circuits_before_client():
    client = ScriptClient([])
    r = record(thinking="too short")
    assert synth.rejection_reason("report", r, client) == "vacuous_thinking"
    assert client.prompts == []


def test_rejection_reason_consults_rules_then_reviewer():
    flagged = []

    def rule(rec):
        flagged.append(rec.qa_id)
        return None

    client = ScriptClient(["Yes"])
    assert synth.rejection_reason("report", record(), client, rules=(rule,)) is None
    assert flagged == ["r1#q0"]
    assert len(client.prompts) == 1
    assert "The Report:\n```\nreport\n```" in client.prompts[0]


def test_rejection_reason_rule_blocks_without_reviewer():
    client = ScriptClient([])
    reason = synth.rejection_reason("report", record(), client,
                                    rules=(lambda rec: "contradiction",))
    assert reason == "contradiction"
    assert client.prompts == []


def test_rejection_reason_reviewer_no_and_nonconforming():
    assert synth.rejection_reason("r", record(), ScriptClient(["No"])) == "reviewer_no"
    reason = synth.rejection_reason("r", record(), ScriptClient(["It depends."]))
    assert reason == "non_conforming_verdict"


def test_filter_qa_wrapper():
    assert synth.filter_qa("r", record(), ScriptClient(["Yes"])) is True
    assert synth.filter_qa("r", record(), ScriptClient(["No"])) is False


def test_generate_questions_requires_text():
    with pytest.raises(ValueError, match="empty"):
        synth.generate_questions("   ", MockChatClient())


def test_generate_qa_builds_record():
    r = synth.generate_qa("rep7", 2, "Lungs are clear.", "Are the lungs clear?",
                          MockChatClient())
    assert r.qa_id == "rep7#q2"
    assert r.status == synth.STATUS_GENERATED
    assert r.question == "Are the lungs clear?"
    assert len(r.thinking.split()) >= 20


def test_generate_qa_returns_none_on_missing_fields():
    client = ScriptClient(["Thinking: something but no answer line"])
    assert synth.generate_qa("r", 0, "text", "q?", client) is None


def test_refine_thinking_replaces_text():
    r = record()
    r.advance(synth.STATUS_ACCEPTED)
    out = synth.refine_thinking(r, ScriptClient(["Polished narrative.\n"]))
    assert out.status == synth.STATUS_REFINED
    assert out.thinking == "Polished narrative."


def test_refine_thinking_keeps_original_on_empty_reply():
    r = record()
    r.advance(synth.STATUS_ACCEPTED)
    before = r.thinking
    out = synth.refine_thinking(r, ScriptClient(["  \n"]))
    assert out.status == synth.STATUS_ACCEPTED
    assert out.thinking == before


def test_refine_thinking_rejects_wrong_status():
    with pytest.raises(ValueError, match="accepted"):
        synth.refine_thinking(record(), ScriptClient([]))


def test_fusion_prompt_layout_and_sources():
    records = []
    for i in range(2):
        r = record(qa_id=f"r1#q{i}", question=f"Q{i}?", thinking=f"T{i}",
                   answer=f"A{i}", status=synth.STATUS_REFINED)
        records.append(r)
    client = ScriptClient(["fused narrative"])
    trace = synth.fuse_report_thinking("r1", records, client)
    assert trace.source_ids == ["r1#q0", "r1#q1"]
    assert trace.narrative == "fused narrative"
    expected = "Q: Q0?\nThinking: T0\nAnswer: A0\n\nQ: Q1?\nThinking: T1\nAnswer: A1"
    assert f"```\n{expected}\n```" in client.prompts[0]


def test_fusion_rejects_unrefined_sources():
    with pytest.raises(ValueError, match="status"):
        synth.fuse_report_thinking("r1", [record()], ScriptClient([]))
    with pytest.raises(ValueError, match="at least one"):
        synth.fuse_report_thinking("r1", [], ScriptClient([]))


def test_rewrite_and_translate_validate_inputs():
    client = MockChatClient()
    with pytest.raises(ValueError):
        synth.rewrite_report(" ", ["ex"], client)
    with pytest.raises(ValueError):
        synth.rewrite_report("text", [], client)
    with pytest.raises(ValueError):
        synth.translate_text("text", "", "German", client)
    assert synth.rewrite_report("Stable exam.", ["ex one"], client) == "Stable exam."
    assert synth.translate_text("Stable exam.", "English", "German", client) == "Stable exam."


REPORTS = [
    {"report_id": "ct-001",
     "report": ("The lungs are clear without focal consolidation. "
                "A 4 mm nodule is present in the right upper lobe. "
                "No pleural effusion or pneumothorax.")},
    {"report_id": "ct-002",
     "report": ("Mild hepatic steatosis. The pancreas and spleen are "
                "unremarkable. No free fluid in the abdomen.")},
]


def write_reports(path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in REPORTS:
            fh.write(json.dumps(row) + "\n")


def test_load_reports(tmp_path):
    path = tmp_path / "reports.jsonl"
    write_reports(path)
    assert synth.load_reports(path) == REPORTS

    bad = tmp_path / "dupe.jsonl"
    bad.write_text('{"report_id": "a", "report": "x"}\n'
                   '{"report_id": "a", "report": "y"}\n')
    with pytest.raises(ValueError, match="duplicate"):
        synth.load_reports(bad)

    empty_text = tmp_path / "empty.jsonl"
    empty_text.write_text('{"report_id": "a", "report": "  "}\n')
    with pytest.raises(ValueError, match="non-empty"):
        synth.load_reports(empty_text)

    with pytest.raises(ValueError, match="no reports"):
        synth.load_reports(tmp_path / "missing.jsonl")


def snapshot(out_dir):
    """Bytes of every pipeline file except the transcript."""
    return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())
            if p.name != "transcript.jsonl"}


def test_pipeline_full_run(tmp_path):
    out = tmp_path / "out"
    summary = synth.run_pipeline(REPORTS, out, MockChatClient())

    assert summary["reports"] == 2
    assert summary["questions"] > 0
    assert summary["qa_generated"] == summary["questions"]
    assert summary["accepted"] + summary["filtered_out"] == summary["qa_generated"]
    assert summary["refined"] + summary["refinement_missed"] == summary["accepted"]
    assert summary["traces"] <= 2
    assert summary["datapoints"] == 2
    assert summary["client_failures"] == 0

    qa_rows = [json.loads(l) for l in (out / "qa.jsonl").read_text().splitlines()]
    assert all(r["status"] == "generated" for r in qa_rows)
    ledger = [json.loads(l) for l in (out / "accepted.jsonl").read_text().splitlines()]
    assert {r["status"] for r in ledger} <= {"accepted", "filtered_out"}
    assert len(ledger) == len(qa_rows)

    dataset = [json.loads(l) for l in (out / "dataset.jsonl").read_text().splitlines()]
    assert [d["report_id"] for d in dataset] == ["ct-001", "ct-002"]
    assert all(d["narrative"] for d in dataset if d["qa"])

    saved = json.loads((out / "summary.json").read_text())
    assert saved == summary
    assert (out / "transcript.jsonl").exists()


def test_pipeline_resume_is_a_no_op(tmp_path):
    out = tmp_path / "out"
    synth.run_pipeline(REPORTS, out, MockChatClient())
    before = snapshot(out)

    counting = MockChatClient()
    synth.run_pipeline(REPORTS, out, counting, resume=True)
    assert counting.calls == 0
    assert snapshot(out) == before


def test_pipeline_rerun_without_resume_matches(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    synth.run_pipeline(REPORTS, out_a, MockChatClient())
    synth.run_pipeline(REPORTS, out_b, MockChatClient())
    assert snapshot(out_a) == snapshot(out_b)


def test_pipeline_parallel_matches_sequential(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    synth.run_pipeline(REPORTS, out_a, MockChatClient(), max_inflight=1)
    synth.run_pipeline(REPORTS, out_b, MockChatClient(), max_inflight=4)
    assert snapshot(out_a) == snapshot(out_b)


class FlakyClient:
    """Fails every request mentioning a marker until told to heal."""

    def __init__(self, marker):
        self.inner = MockChatClient()
        self.marker = marker
        self.healed = False

    def complete(self, prompt):
        if not self.healed and self.marker in prompt:
            raise ChatError("injected outage")
        return self.inner.complete(prompt)


def test_pipeline_isolates_failures_and_heals_on_resume(tmp_path):
    out = tmp_path / "out"
    flaky = FlakyClient("hepatic steatosis")
    summary = synth.run_pipeline(REPORTS, out, flaky)
    assert summary["client_failures"] > 0

    questions = [json.loads(l) for l in (out / "questions.jsonl").read_text().splitlines()]
    assert [q["report_id"] for q in questions] == ["ct-001"]

    flaky.healed = True
    healed = synth.run_pipeline(REPORTS, out, flaky, resume=True)
    assert healed["client_failures"] == 0

    clean = tmp_path / "clean"
    synth.run_pipeline(REPORTS, clean, MockChatClient())
    assert snapshot(out) == snapshot(clean)


def test_pipeline_stage_subset_and_ordering(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(ValueError, match="questions"):
        synth.run_pipeline(REPORTS, out, MockChatClient(), stages=("answers",))

    synth.run_pipeline(REPORTS, out, MockChatClient(), stages=("questions",))
    assert (out / "questions.jsonl").exists()
    assert not (out / "qa.jsonl").exists()

    synth.run_pipeline(REPORTS, out, MockChatClient(), stages=("answers",))
    assert (out / "qa.jsonl").exists()


def test_pipeline_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError, match="unknown stages"):
        synth.run_pipeline(REPORTS, tmp_path, MockChatClient(), stages=("polish",))
    with pytest.raises(ValueError, match="max_inflight"):
        synth.run_pipeline(REPORTS, tmp_path, MockChatClient(), max_inflight=0)


def test_pipeline_rules_hook(tmp_path):
    out = tmp_path / "out"
    summary = synth.run_pipeline(
        REPORTS, out, MockChatClient(),
        rules=(lambda rec: "contradiction" if "nodule" in rec.question else None,))
    ledger = [json.loads(l) for l in (out / "accepted.jsonl").read_text().splitlines()]
    reasons = {r["rejection_reason"] for r in ledger if r["status"] == "filtered_out"}
    if summary["filtered_out"]:
        assert "contradiction" in reasons
