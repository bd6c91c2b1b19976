"""
Writer-name normalization shared by the manifest and the curation tools.
"""

import re
import unicodedata

_WHITESPACE = re.compile(r"\s+")


def collapse_whitespace(text: str) -> str:
    """Trim and collapse internal whitespace runs, keeping case."""
    return _WHITESPACE.sub(" ", unicodedata.normalize("NFC", text)).strip()


def normalize_name(text: str) -> str:
    """NFC-normalize, trim, collapse whitespace runs and case-fold. Idempotent."""
    return collapse_whitespace(text).casefold()
