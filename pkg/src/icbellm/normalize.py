"""Token normalization used on both the system and the gold side.

A token goes through: NFKC, lowercase, strip enclosing punctuation and
whitespace, internal whitespace runs to ``_``, then a whole-token alias
lookup. The alias table is closed (no canonical output is itself a key), so
the whole chain is idempotent.
"""
from __future__ import annotations

import re
import unicodedata
from collections.abc import Iterable, Mapping

EMPTY_TOKEN = ""

_WS_RUN = re.compile(r"\s+")


def _is_enclosing(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith("P")


def clean_token(raw: str) -> str:
    """Every normalization step except the alias lookup."""
    text = unicodedata.normalize("NFKC", raw)
    text = unicodedata.normalize("NFKC", text.lower())
    start, end = 0, len(text)
    while start < end and _is_enclosing(text[start]):
        start += 1
    while end > start and _is_enclosing(text[end - 1]):
        end -= 1
    text = _WS_RUN.sub("_", text[start:end])
    # lowercasing/NFKC can expose new case or compat forms once; settle them
    again = unicodedata.normalize("NFKC", text.lower())
    if again != text:
        return clean_token(again)
    return text


class AliasTable(Mapping):
    """Cleaned alias key -> canonical token.

    Keys and values are stored in cleaned form. Construction fails if the
    table is not closed under lookup, i.e. if some canonical value is also an
    alias key, or if one key maps to two different canonicals.
    """

    def __init__(self, pairs: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        items = pairs.items() if isinstance(pairs, Mapping) else pairs
        table: dict[str, str] = {}
        for alias, canonical in items:
            key = clean_token(alias)
            value = clean_token(canonical)
            if not key or key == value:
                continue
            if key in table and table[key] != value:
                raise ValueError(
                    f"alias {alias!r} maps to both {table[key]!r} and {value!r}"
                )
            table[key] = value
        clashes = sorted(v for v in set(table.values()) if v in table)
        if clashes:
            raise ValueError(f"alias table is not closed: {clashes} are both canonical and alias")
        self._table = table

    def __getitem__(self, key: str) -> str:
        return self._table[key]

    def __iter__(self):
        return iter(self._table)

    def __len__(self) -> int:
        return len(self._table)

    def merged(self, other: Mapping[str, str]) -> "AliasTable":
        return AliasTable(list(self._table.items()) + list(other.items()))


def normalize_token(raw: str, aliases: Mapping[str, str] | None = None) -> str:
    """Normalize one token. Returns :data:`EMPTY_TOKEN` for blank input.

    ``aliases`` may be an :class:`AliasTable` or a plain dict; plain dict
    keys are cleaned before comparison.

    >>> normalize_token("U.S.", {"u.s.": "usa"})
    'usa'
    >>> normalize_token("Express  Intent")
    'express_intent'
    """
    token = clean_token(raw)
    if not token or not aliases:
        return token
    if not isinstance(aliases, AliasTable):
        aliases = AliasTable(aliases)
    return aliases.get(token, token)
