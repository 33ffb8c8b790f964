"""Answer-string normalization shared by answer extraction and scoring."""

from __future__ import annotations

import re
import unicodedata

_WS = re.compile(r"\s+")


def _is_edge_char(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """Case-fold, collapse internal whitespace and strip edge punctuation.

    >>> normalize('  "Goal II:  Living the Dream." ')
    'goal ii: living the dream'
    """
    folded = _WS.sub(" ", text.casefold())
    start, end = 0, len(folded)
    while start < end and _is_edge_char(folded[start]):
        start += 1
    while end > start and _is_edge_char(folded[end - 1]):
        end -= 1
    return folded[start:end]
