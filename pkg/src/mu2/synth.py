"""Question-answer synthesis over radiology reports.

Five stages, each persisted as a JSONL file in the output directory:

  questions.jsonl  numbered questions per report
  qa.jsonl         question, thinking and answer records, status generated
  accepted.jsonl   the filtering ledger, records accepted or filtered_out
  refined.jsonl    accepted records with reworded thinking, status refined
  traces.jsonl     one fused reasoning narrative per report

dataset.jsonl and summary.json are derived views rebuilt after every run.
Each record moves generated -> accepted | filtered_out and accepted ->
refined; anything else is a bug and is rejected. Stages resume from their
files, so a rerun with resume=True redoes only missing work. Every exchange
with the chat client is appended to transcript.jsonl keyed by prompt hash,
which lets a replay client reproduce a run offline.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from .chat import ChatError, TranscriptRecorder
from .prompts import (ANSWER, FILTER, FUSION, QUESTIONS, REFINE, REWRITE,
                      TRANSLATE, extract_answer, extract_questions,
                      extract_thinking)

log = logging.getLogger(__name__)

STATUS_GENERATED = "generated"
STATUS_ACCEPTED = "accepted"
STATUS_FILTERED_OUT = "filtered_out"
STATUS_REFINED = "refined"

_TRANSITIONS = {
    STATUS_GENERATED: {STATUS_ACCEPTED, STATUS_FILTERED_OUT},
    STATUS_ACCEPTED: {STATUS_REFINED},
    STATUS_FILTERED_OUT: set(),
    STATUS_REFINED: set(),
}

ASCII_RATIO_MIN = 0.95
MIN_THINKING_TOKENS = 20

STAGES = ("questions", "answers", "filter", "refine", "fuse")


@dataclass
class QARecord:
    report_id: str
    qa_id: str
    question: str
    thinking: str
    answer: str
    status: str = STATUS_GENERATED
    rejection_reason: str | None = None

    def advance(self, status: str, reason: str | None = None) -> None:
        if status not in _TRANSITIONS.get(self.status, ()):
            raise ValueError(f"cannot move a {self.status} record to {status}")
        if status == STATUS_FILTERED_OUT and not reason:
            raise ValueError("filtered_out requires a rejection_reason")
        if status != STATUS_FILTERED_OUT and reason is not None:
            raise ValueError(f"rejection_reason is only valid for filtered_out, not {status}")
        self.status = status
        self.rejection_reason = reason

    @classmethod
    def from_dict(cls, row: dict) -> "QARecord":
        record = cls(**row)
        if record.status not in _TRANSITIONS:
            raise ValueError(f"unknown record status {record.status!r}")
        return record


@dataclass
class ReasoningTrace:
    report_id: str
    narrative: str
    source_ids: list[str]


def ascii_ratio(text: str) -> float:
    if not text:
        return 0.0
    return sum(1 for ch in text if ord(ch) < 128) / len(text)


def heuristic_rejection(record: QARecord) -> str | None:
    """Cheap local checks that run before the reviewing model is asked."""
    if ascii_ratio(record.thinking) < ASCII_RATIO_MIN:
        return "non_english"
    if len(record.thinking.split()) < MIN_THINKING_TOKENS:
        return "vacuous_thinking"
    return None


def parse_verdict(reply: str) -> bool | None:
    """Map a reviewer reply onto yes/no; anything else is None."""
    text = reply.strip().casefold()
    if text == "yes":
        return True
    if text == "no":
        return False
    return None


def generate_questions(report_text: str, client) -> list[str]:
    if not report_text.strip():
        raise ValueError("report text is empty")
    reply = client.complete(QUESTIONS.render(report=report_text))
    return extract_questions(reply)


def generate_qa(report_id: str, index: int, report_text: str, question: str,
                client) -> QARecord | None:
    """One answered question, or None when the reply lacks either field."""
    reply = client.complete(ANSWER.render(report=report_text, question=question))
    thinking = extract_thinking(reply)
    answer = extract_answer(reply)
    if thinking is None or answer is None:
        return None
    return QARecord(report_id=report_id, qa_id=f"{report_id}#q{index}",
                    question=question, thinking=thinking, answer=answer)


def rejection_reason(report_text: str, record: QARecord, client,
                     rules=()) -> str | None:
    """Why the record should be dropped, or None to accept.

    Heuristics run first, then any caller-supplied rules, and only then the
    reviewing model. Rules take the record and return a reason or None.
    """
    reason = heuristic_rejection(record)
    if reason is not None:
        return reason
    for rule in rules:
        reason = rule(record)
        if reason is not None:
            return reason
    reply = client.complete(FILTER.render(report=report_text,
                                          question=record.question,
                                          answer=record.answer))
    verdict = parse_verdict(reply)
    if verdict is True:
        return None
    if verdict is False:
        return "reviewer_no"
    return "non_conforming_verdict"


def filter_qa(report_text: str, record: QARecord, client, rules=()) -> bool:
    return rejection_reason(report_text, record, client, rules) is None


def refine_thinking(record: QARecord, client) -> QARecord:
    """Reword the thinking; an empty reply keeps the original text."""
    if record.status != STATUS_ACCEPTED:
        raise ValueError(f"can only refine accepted records, got {record.status}")
    reply = client.complete(REFINE.render(narrative=record.thinking))
    text = reply.strip()
    if text:
        record.thinking = text
        record.advance(STATUS_REFINED)
    return record


def fuse_report_thinking(report_id: str, records: list[QARecord],
                         client) -> ReasoningTrace:
    if not records:
        raise ValueError("fusion needs at least one record")
    for record in records:
        if record.status != STATUS_REFINED:
            raise ValueError(f"fusion source {record.qa_id} has status {record.status}")
    blocks = [f"Q: {r.question}\nThinking: {r.thinking}\nAnswer: {r.answer}"
              for r in records]
    narrative = client.complete(FUSION.render(thinking_before="\n\n".join(blocks)))
    return ReasoningTrace(report_id=report_id, narrative=narrative,
                          source_ids=[r.qa_id for r in records])


def rewrite_report(report_text: str, style_examples: list[str], client) -> str:
    if not report_text.strip():
        raise ValueError("report text is empty")
    if not style_examples:
        raise ValueError("at least one style example is required")
    prompt = REWRITE.render(style_examples="\n\n".join(style_examples),
                            report=report_text)
    return client.complete(prompt)


def translate_text(text: str, source_lang: str, target_lang: str, client) -> str:
    if not text.strip():
        raise ValueError("source text is empty")
    if not source_lang or not target_lang:
        raise ValueError("source and target languages must be non-empty")
    prompt = TRANSLATE.render(source_lang=source_lang, target_lang=target_lang,
                              source_input=text)
    return client.complete(prompt)


class StagePaths:
    def __init__(self, root):
        self.root = Path(root)
        self.questions = self.root / "questions.jsonl"
        self.qa = self.root / "qa.jsonl"
        self.accepted = self.root / "accepted.jsonl"
        self.refined = self.root / "refined.jsonl"
        self.traces = self.root / "traces.jsonl"
        self.dataset = self.root / "dataset.jsonl"
        self.summary = self.root / "summary.json"
        self.transcript = self.root / "transcript.jsonl"


def load_reports(path) -> list[dict]:
    """Reports as a list of {report_id, report}, ids unique, both non-empty."""
    rows = _read_jsonl(path)
    if not rows:
        raise ValueError(f"no reports found in {path}")
    seen = set()
    reports = []
    for i, row in enumerate(rows):
        rid = row.get("report_id")
        text = row.get("report")
        if not isinstance(rid, str) or not rid:
            raise ValueError(f"line {i + 1}: report_id must be a non-empty string")
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"line {i + 1}: report must be non-empty text")
        if rid in seen:
            raise ValueError(f"duplicate report_id {rid!r}")
        seen.add(rid)
        reports.append({"report_id": rid, "report": text})
    return reports


def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _append_jsonl(path, rows) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _map_ordered(fn, items, max_inflight):
    if max_inflight <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        return list(pool.map(fn, items))


def run_pipeline(reports, out_dir, client, *, stages=STAGES, resume=False,
                 max_inflight=1, rules=()) -> dict:
    """Run the requested stages and rebuild the derived outputs.

    With resume=True, work already present in a stage file is kept and only
    the remainder runs. Without it, each requested stage starts from an empty
    file. A client failure on one record is logged and skipped; the record
    stays behind in the upstream file and a resumed run retries it.
    """
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; valid stages are {list(STAGES)}")
    if max_inflight < 1:
        raise ValueError("max_inflight must be >= 1")
    by_id = {r["report_id"]: r["report"] for r in reports}
    if len(by_id) != len(reports):
        raise ValueError("report ids are not unique")

    paths = StagePaths(out_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    client = TranscriptRecorder(client, paths.transcript)
    failures: list[str] = []

    def attempt(worker, item, label):
        try:
            return worker(item)
        except ChatError as err:
            log.warning("%s: %s", label, err)
            failures.append(f"{label}: {err}")
            return None

    for stage in (s for s in STAGES if s in stages):
        runner = _STAGE_RUNNERS[stage]
        runner(reports, by_id, paths, client, resume, max_inflight, rules,
               attempt)

    summary = _rebuild_derived(reports, paths)
    summary["client_failures"] = len(failures)
    with open(paths.summary, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("pipeline summary: %s", json.dumps(summary, sort_keys=True))
    return summary


def _fresh(path, resume):
    if not resume:
        Path(path).unlink(missing_ok=True)


def _run_questions(reports, by_id, paths, client, resume, max_inflight, rules,
                   attempt):
    _fresh(paths.questions, resume)
    done = {row["report_id"] for row in _read_jsonl(paths.questions)}
    pending = [r for r in reports if r["report_id"] not in done]

    def worker(report):
        questions = generate_questions(report["report"], client)
        return {"report_id": report["report_id"], "questions": questions}

    rows = _map_ordered(
        lambda r: attempt(worker, r, f"questions for {r['report_id']}"),
        pending, max_inflight)
    _append_jsonl(paths.questions, [row for row in rows if row is not None])


def _run_answers(reports, by_id, paths, client, resume, max_inflight, rules,
                 attempt):
    if not paths.questions.exists():
        raise ValueError("questions.jsonl is missing; run the questions stage first")
    _fresh(paths.qa, resume)
    done = {row["qa_id"] for row in _read_jsonl(paths.qa)}
    items = []
    for row in _read_jsonl(paths.questions):
        rid = row["report_id"]
        if rid not in by_id:
            raise ValueError(f"questions.jsonl mentions unknown report {rid!r}")
        for i, question in enumerate(row["questions"]):
            if f"{rid}#q{i}" not in done:
                items.append((rid, i, question))

    def worker(item):
        rid, i, question = item
        return generate_qa(rid, i, by_id[rid], question, client)

    records = _map_ordered(
        lambda it: attempt(worker, it, f"answer for {it[0]}#q{it[1]}"),
        items, max_inflight)
    _append_jsonl(paths.qa, [asdict(r) for r in records if r is not None])


def _run_filter(reports, by_id, paths, client, resume, max_inflight, rules,
                attempt):
    if not paths.qa.exists():
        raise ValueError("qa.jsonl is missing; run the answers stage first")
    _fresh(paths.accepted, resume)
    done = {row["qa_id"] for row in _read_jsonl(paths.accepted)}
    pending = [QARecord.from_dict(row) for row in _read_jsonl(paths.qa)
               if row["qa_id"] not in done]

    def worker(record):
        reason = rejection_reason(by_id[record.report_id], record, client, rules)
        if reason is None:
            record.advance(STATUS_ACCEPTED)
        else:
            record.advance(STATUS_FILTERED_OUT, reason)
        return record

    records = _map_ordered(
        lambda r: attempt(worker, r, f"filter for {r.qa_id}"),
        pending, max_inflight)
    _append_jsonl(paths.accepted, [asdict(r) for r in records if r is not None])


def _run_refine(reports, by_id, paths, client, resume, max_inflight, rules,
                attempt):
    if not paths.accepted.exists():
        raise ValueError("accepted.jsonl is missing; run the filter stage first")
    _fresh(paths.refined, resume)
    done = {row["qa_id"] for row in _read_jsonl(paths.refined)}
    pending = [QARecord.from_dict(row) for row in _read_jsonl(paths.accepted)
               if row["status"] == STATUS_ACCEPTED and row["qa_id"] not in done]

    records = _map_ordered(
        lambda r: attempt(lambda rec: refine_thinking(rec, client), r,
                          f"refine for {r.qa_id}"),
        pending, max_inflight)
    _append_jsonl(paths.refined, [asdict(r) for r in records if r is not None])


def _run_fuse(reports, by_id, paths, client, resume, max_inflight, rules,
              attempt):
    if not paths.refined.exists():
        raise ValueError("refined.jsonl is missing; run the refine stage first")
    _fresh(paths.traces, resume)
    done = {row["report_id"] for row in _read_jsonl(paths.traces)}
    grouped: dict[str, list[QARecord]] = {}
    for row in _read_jsonl(paths.refined):
        if row["status"] == STATUS_REFINED:
            grouped.setdefault(row["report_id"], []).append(QARecord.from_dict(row))
    pending = [(rid, grouped[rid]) for r in reports
               if (rid := r["report_id"]) in grouped and rid not in done]

    def worker(item):
        rid, records = item
        return fuse_report_thinking(rid, records, client)

    traces = _map_ordered(
        lambda it: attempt(worker, it, f"fusion for {it[0]}"),
        pending, max_inflight)
    _append_jsonl(paths.traces, [asdict(t) for t in traces if t is not None])


_STAGE_RUNNERS = {
    "questions": _run_questions,
    "answers": _run_answers,
    "filter": _run_filter,
    "refine": _run_refine,
    "fuse": _run_fuse,
}


def _rebuild_derived(reports, paths) -> dict:
    """Recompute dataset.jsonl and the summary counts from the stage files."""
    question_rows = _read_jsonl(paths.questions)
    qa_rows = _read_jsonl(paths.qa)
    accepted_rows = _read_jsonl(paths.accepted)
    refined_rows = _read_jsonl(paths.refined)
    trace_rows = _read_jsonl(paths.traces)

    surviving: dict[str, list[dict]] = {}
    for row in refined_rows:
        surviving.setdefault(row["report_id"], []).append(row)
    narratives = {row["report_id"]: row["narrative"] for row in trace_rows}

    dataset = []
    for report in reports:
        rid = report["report_id"]
        dataset.append({
            "report_id": rid,
            "report": report["report"],
            "qa": [{"qa_id": r["qa_id"], "question": r["question"],
                    "thinking": r["thinking"], "answer": r["answer"]}
                   for r in surviving.get(rid, [])],
            "narrative": narratives.get(rid),
        })
    paths.dataset.unlink(missing_ok=True)
    _append_jsonl(paths.dataset, dataset)

    rejections: dict[str, int] = {}
    for row in accepted_rows:
        if row["status"] == STATUS_FILTERED_OUT:
            reason = row["rejection_reason"]
            rejections[reason] = rejections.get(reason, 0) + 1
    return {
        "reports": len(reports),
        "questions": sum(len(row["questions"]) for row in question_rows),
        "qa_generated": len(qa_rows),
        "accepted": sum(row["status"] == STATUS_ACCEPTED for row in accepted_rows),
        "filtered_out": sum(row["status"] == STATUS_FILTERED_OUT for row in accepted_rows),
        "rejections": rejections,
        "refined": sum(row["status"] == STATUS_REFINED for row in refined_rows),
        "refinement_missed": sum(row["status"] == STATUS_ACCEPTED for row in refined_rows),
        "traces": len(trace_rows),
        "datapoints": len(dataset),
    }
