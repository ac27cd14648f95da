"""Prompt/completion layout shared by the teacher and the evaluator."""

from __future__ import annotations

import re

QUESTION_END = " ###"
SEPARATOR = " --> "
END = " END"

_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Trim, lowercase, collapse internal whitespace."""
    return _WS.sub(" ", text.strip().lower())


def format_question(q: str) -> str:
    return q + QUESTION_END


def format_completion(rationale: str, answer: str) -> str:
    return f"{rationale}{SEPARATOR}{answer}{END}"


def extract_answer(completion: str) -> str | None:
    """Text between the last " --> " and the " END" that follows it, trimmed.

    Returns None when either marker is missing.
    """
    i = completion.rfind(SEPARATOR)
    if i < 0:
        return None
    rest = completion[i + len(SEPARATOR):]
    j = rest.find(END)
    if j < 0:
        return None
    return rest[:j].strip()
