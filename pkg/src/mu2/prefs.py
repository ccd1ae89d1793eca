"""Preference pair construction for answer ranking.

Each input prompt carries a reference report. Candidate answers are derived
from the reference by seeded sentence dropout and shuffling, scored, and the
best and worst become the chosen and rejected sides of a pair. Prompts whose
candidates all score the same are skipped rather than emitting a tie.
"""

from __future__ import annotations

import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .chat import ChatError
from .metrics import rouge1

KEEP_PROBABILITY = 0.7
SHUFFLE_PROBABILITY = 0.5


def split_sentences(text: str) -> list[str]:
    return [s for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s]


def generate_candidates(reference: str, n: int, seed: int, prompt_id: str) -> list[str]:
    """Degraded variants of the reference, deterministic in (seed, prompt_id).

    Each candidate keeps a random subset of sentences, at least one, and may
    shuffle their order. Candidate i draws from its own string-seeded
    generator so insertion order of prompts cannot shift the outcome.
    """
    sentences = split_sentences(reference)
    if not sentences:
        raise ValueError("reference has no sentences")
    out = []
    for i in range(n):
        rng = random.Random(f"{seed}:{prompt_id}:{i}")
        kept = [s for s in sentences if rng.random() < KEEP_PROBABILITY]
        if not kept:
            kept = [sentences[rng.randrange(len(sentences))]]
        if rng.random() < SHUFFLE_PROBABILITY:
            rng.shuffle(kept)
        out.append(" ".join(kept))
    return out


class RougeScorer:
    """Unigram overlap with the reference; no model in the loop."""

    def __call__(self, question: str, reference: str, candidate: str) -> float:
        return rouge1(candidate, reference)[2]


class RemoteScorer:
    """Asks a chat model for a 0 to 1 grade and parses the decimal reply."""

    PROMPT = ("Grade how well the candidate answer matches the reference "
              "for the question below. Reply with a single decimal number "
              "between 0 and 1 and nothing else.\n\n"
              "Question: {question}\n\nReference:\n{reference}\n\n"
              "Candidate:\n{candidate}")

    def __init__(self, client):
        self.client = client

    def __call__(self, question: str, reference: str, candidate: str) -> float:
        reply = self.client.complete(self.PROMPT.format(
            question=question, reference=reference, candidate=candidate))
        try:
            value = float(reply.strip())
        except ValueError:
            raise ChatError(f"scorer reply is not a decimal: {reply!r}") from None
        if not 0.0 <= value <= 1.0:
            raise ChatError(f"scorer reply {value} is outside [0, 1]")
        return value


def load_prompts(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"no prompts found in {path}")
    prompts = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            row = json.loads(line)
            for field in ("prompt_id", "volume", "question", "reference"):
                value = row.get(field)
                if not isinstance(value, str) or not value.strip():
                    raise ValueError(f"line {i + 1}: {field} must be non-empty text")
            if row["prompt_id"] in seen:
                raise ValueError(f"duplicate prompt_id {row['prompt_id']!r}")
            seen.add(row["prompt_id"])
            prompts.append(row)
    if not prompts:
        raise ValueError(f"no prompts found in {path}")
    return prompts


def build_pairs(prompts, scorer, *, n_candidates=8, seed=0,
                max_inflight=1) -> tuple[list[dict], dict]:
    """Score candidates per prompt and keep the extremes as a pair.

    Ties inside the best or worst group break toward the lexicographically
    smallest candidate text, so reruns are stable. A scorer failure skips
    that prompt and is counted; other prompts still go through. Pairs come
    back in prompt order.
    """
    if n_candidates < 2:
        raise ValueError("n_candidates must be >= 2")
    if max_inflight < 1:
        raise ValueError("max_inflight must be >= 1")

    def worker(prompt):
        try:
            candidates = generate_candidates(prompt["reference"], n_candidates,
                                             seed, prompt["prompt_id"])
            scores = [scorer(prompt["question"], prompt["reference"], c)
                      for c in candidates]
        except ChatError as err:
            return ("failed", f"{prompt['prompt_id']}: {err}")
        if max(scores) == min(scores):
            return ("identical", prompt["prompt_id"])
        chosen = min(c for c, s in zip(candidates, scores) if s == max(scores))
        rejected = min(c for c, s in zip(candidates, scores) if s == min(scores))
        return ("pair", {
            "volume": prompt["volume"],
            "question": prompt["question"],
            "chosen": chosen,
            "rejected": rejected,
            "score_chosen": max(scores),
            "score_rejected": min(scores),
        })

    if max_inflight == 1 or len(prompts) <= 1:
        results = [worker(p) for p in prompts]
    else:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            results = list(pool.map(worker, prompts))

    pairs = [payload for kind, payload in results if kind == "pair"]
    counts = {
        "pairs": len(pairs),
        "skipped_identical": sum(kind == "identical" for kind, _ in results),
        "failures": sum(kind == "failed" for kind, _ in results),
    }
    return pairs, counts


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair, ensure_ascii=False) + "\n")
