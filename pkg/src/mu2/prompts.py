"""Frozen prompt templates for the synthesis stages.

The template bodies are pinned byte-for-byte by tests, including oddities
(grammar slips, a trailing backslash inside the translation prompt, trailing
spaces on two lines). Do not tidy them; downstream replies were collected
against these exact bytes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

# Extraction patterns. Questions are matched line by line; the capture runs to
# the end of the line after a numbered-item marker.
QUESTION_PATTERN = r".*?\d\. ?([^\n]*)"
THINKING_PATTERN = r"Thinking: ?([^\n]*)"
ANSWER_PATTERN = r"Answer: ?([^\n]*)"


@dataclass(frozen=True)
class PromptTemplate:
    """A template with literal placeholder substrings.

    slots maps a keyword argument name to the placeholder it fills. Rendering
    replaces all placeholders in a single pass, so substituted values are
    never rescanned for further placeholders.
    """

    name: str
    text: str
    slots: dict[str, str]

    def render(self, **values: str) -> str:
        missing = set(self.slots) - set(values)
        if missing:
            raise ValueError(f"template {self.name!r} is missing values for {sorted(missing)}")
        unknown = set(values) - set(self.slots)
        if unknown:
            raise ValueError(f"template {self.name!r} has no slots named {sorted(unknown)}")
        by_literal = {literal: values[arg] for arg, literal in self.slots.items()}
        pattern = "|".join(re.escape(literal) for literal in self.slots.values())
        return re.sub(pattern, lambda m: by_literal[m.group(0)], self.text)


REWRITE = PromptTemplate(
    name="rewrite",
    slots={"style_examples": "{SOME EXAMPLES OF DATASETS}", "report": "{}"},
    # The first line ends with a space. Explicit literals keep editors from
    # stripping it.
    text=(
        "You are an expert radiologists. And your task is to paraphrase a given radiology report. \n"
        "You need to:\n"
        "1. Take the following 3 examples for style of writing.\n"
        "2. You MUST NOT change any meaning of the original report, nor add or remove any information, not event correction.\n"
        "3. Give out the paraphrased report directly, without any other content.\n"
        "4. In English only.\n"
        "\n"
        "Here are some examples of CT reports:\n"
        "{SOME EXAMPLES OF DATASETS}\n"
        "\n"
        "The original report:\n"
        "```\n"
        "{}\n"
        "```"
    ),
)

QUESTIONS = PromptTemplate(
    name="questions",
    slots={"report": "{report}"},
    text="""Here is a medical radiology report for a CT image.
```
{report}
```

Imagine you are assessing a student who is looking at a CT image, you are going to ask a list of questions. Don't mention the report, just list out as the form of questions, and questions only, in sequenced list.""",
)

ANSWER = PromptTemplate(
    name="answer",
    slots={"report": "{report}", "question": "{question}"},
    text="""You are a radiology medicine expert.
Your task is to answer the following radiology medicine question, using the patient's medical record report provided below.
When writing your thought process, imagine you are directly reviewing the patient's radiology images (do not mention the report), and describe your logical reasoning step by step as an expert would.
Then, provide your final, correct answer to the question.
Your response will be used to guide and improve the training of a multimodal large language model for radiology medicine images.
And here is the radiology report that you can see:
```
{report}
```

Now we have a question:
```
{question}
```

Please consider and answer the question in the following format:

Thinking: <thought process>

Answer: <answer to the question>""",
)

FILTER = PromptTemplate(
    name="filter",
    slots={"report": "{report}", "question": "{question}", "answer": "{answer}"},
    text="""You are an expert in radiology. Now you are reviewing a some questions and answers made by another expert.
You need to determine if the question is proper for a radiology exam, and the answer is correct.

If the question is proper for a radiology exam, and the answer is correct, return "Yes".
If the question is not proper for a radiology exam, or the answer is incorrect, return "No".
Do not return anything else.

The Report:
```
{report}
```
Question: {question}
Answer: {answer}""",
)

REFINE = PromptTemplate(
    name="refine",
    slots={"narrative": "{report}"},
    # The second bullet ends with a space. Explicit literals keep editors from
    # stripping it.
    text=(
        "Help me edit the narrative below:\n"
        "- If the narrative refers to a report, you change it as if you see it from the radiology image\n"
        "- Edit only the places mentioned above, leave all other text the same \n"
        "- Do not add/remove/change any other information\n"
        "- Directly output the result text\n"
        "\n"
        "**The narrative:**\n"
        "```\n"
        "{report}\n"
        "```"
    ),
)

FUSION = PromptTemplate(
    name="fusion",
    slots={"thinking_before": "{thinking_before}"},
    text="""ou are a radiology medicine expert. Now you are looking at a radiology image.
Here is your self talk when viewing the image:
```
{thinking_before}
```

Please paraphrase the self talk text and output it as **thinking progress**. Remember:
- Do not add/remove/alter any information
- Mind the coherence and fluence of output
- Deductions are prefered
- Directly output the result text

Your output:""",
)

TRANSLATE = PromptTemplate(
    name="translate",
    slots={"source_lang": "{source_lang}", "target_lang": "{target_lang}",
           "source_input": "{source_input}"},
    text=r"""This is an {source_lang} to {target_lang} translation, please provide the {target_lang} translation for this text. \
Do not provide any explanations or text apart from the translation.
{source_lang}: {source_input}""",
)

TEMPLATES = {t.name: t for t in
             (REWRITE, QUESTIONS, ANSWER, FILTER, REFINE, FUSION, TRANSLATE)}


def extract_questions(reply: str) -> list[str]:
    """Numbered items from a reply, one per line, trimmed, empties dropped."""
    found = []
    for line in reply.splitlines():
        m = re.search(QUESTION_PATTERN, line)
        if m:
            text = m.group(1).strip()
            if text:
                found.append(text)
    return found


def extract_thinking(reply: str) -> str | None:
    m = re.search(THINKING_PATTERN, reply)
    return m.group(1).strip() if m else None


def extract_answer(reply: str) -> str | None:
    m = re.search(ANSWER_PATTERN, reply)
    return m.group(1).strip() if m else None
