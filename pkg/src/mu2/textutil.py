"""Shared lowercase word tokenization."""

from __future__ import annotations

import re

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def words(text: str) -> list[str]:
    """Lowercase tokens: maximal runs of letters and digits.

    Whitespace and punctuation separate tokens and are dropped.
    """
    return _WORD.findall(text.lower())
