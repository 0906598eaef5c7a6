"""Narrative -> paragraphs (regex) -> sentences (LLM, with a rule-based fallback)."""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

from .backend import Backend, CompletionRequest
from .errors import BackendError
from .ontology import Codebook
from .records import Narrative, SentenceRecord

PARAGRAPH_BREAK = r"\n[ \t\r\f\v]*\n"
SPLIT_MAX_TOKENS = 1024

ABBREVIATIONS = frozenset(
    """mr mrs ms dr prof gen lt col maj capt sgt adm cmdr gov sen rep pres amb ft mt st jr sr
    jan feb mar apr jun jul aug sep sept oct nov dec vol fig approx vs etc e.g i.e cf al
    dept est inc ltd co corp""".split()
)
# after a dotted initialism ("D.C.", "U.S.") these words almost always open a new sentence
SENTENCE_OPENERS = frozenset(
    """the a an this that these those it its he she they we i his her their there then
    however but meanwhile later on in at after when""".split()
)

_WS = re.compile(r"\s+")
# terminal punctuation, optional closing quote/bracket, whitespace, then an
# opening quote/bracket or an uppercase letter
_BOUNDARY = re.compile(r"([.!?]+[\"'”’)\]]*)(\s+)(?=[\"'“‘(\[]?[A-Z])")
_INITIALISM = re.compile(r"(?:[A-Za-z]\.){2,}$")


def split_paragraphs(narrative: Narrative | str, pattern: str = PARAGRAPH_BREAK) -> list[str]:
    body = narrative.body if isinstance(narrative, Narrative) else narrative
    parts = (p.strip() for p in re.split(pattern, body))
    return [p for p in parts if p]


def squash(text: str) -> str:
    """Non-whitespace character sequence of ``text``."""
    return _WS.sub("", text)


def reconstructs(paragraph: str, sentences: list[str]) -> bool:
    return all(s.strip() for s in sentences) and squash("".join(sentences)) == squash(paragraph)


def _ends_with_abbreviation(chunk: str, following: str) -> bool:
    words = chunk.rstrip().split()
    if not words:
        return False
    last = words[-1].rstrip("\"')]”’")
    if not last.endswith("."):
        return False
    stem = last.lstrip("\"'([“‘").rstrip(".")
    if _INITIALISM.search(last):
        nxt = following.split(maxsplit=1)[0].strip("\"'“‘([").lower() if following.strip() else ""
        return nxt not in SENTENCE_OPENERS
    if len(stem) == 1 and stem.isalpha():
        return True
    return stem.lower() in ABBREVIATIONS


def fallback_split(paragraph: str) -> list[str]:
    """Deterministic splitter: terminal punctuation + whitespace + capital,
    except after known abbreviations, single initials and dotted initialisms.
    An initialism still ends a sentence when a common opener word follows."""
    text = paragraph.strip()
    if not text:
        return []
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        end = m.end(1)
        if m.group(1).startswith(".") and _ends_with_abbreviation(text[start:end], text[m.end(2):]):
            continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = m.end(2)
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


class SentenceSplit(NamedTuple):
    sentences: list[str]
    fallback: bool


def parse_lines(text: str) -> list[str]:
    return [line.strip() for line in text.splitlines() if line.strip()]


def split_sentences(paragraph: str, backend: Backend, codebook: Codebook,
                    temperature: float = 0.0) -> SentenceSplit:
    """One paragraph per call; multi-paragraph prompts split poorly."""
    template = codebook.template_for("sentence_split")
    prompt = template.render(task="sentence_split", context=paragraph.strip())
    response = backend.complete(
        CompletionRequest(prompt, SPLIT_MAX_TOKENS, temperature, (), "sentence_split")
    )
    lines = parse_lines(response.text)
    if lines and reconstructs(paragraph, lines):
        return SentenceSplit(lines, False)
    return SentenceSplit(fallback_split(paragraph), True)


def segment(narrative: Narrative, backend: Backend, codebook: Codebook, *,
            paragraph_pattern: str = PARAGRAPH_BREAK, jobs: int = 1,
            temperature: float = 0.0) -> tuple[list[SentenceRecord], list[int]]:
    """Sentence table for a narrative plus the indices of paragraphs that
    fell back to the rule-based splitter."""
    paragraphs = split_paragraphs(narrative, paragraph_pattern)

    def run(p: str) -> SentenceSplit:
        try:
            return split_sentences(p, backend, codebook, temperature)
        except BackendError:
            # a dead backend should not lose the paragraph
            return SentenceSplit(fallback_split(p), True)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            splits = list(pool.map(run, paragraphs))
    else:
        splits = [run(p) for p in paragraphs]

    records: list[SentenceRecord] = []
    fallbacks = []
    number = 0
    for pi, split in enumerate(splits):
        if split.fallback:
            fallbacks.append(pi)
        for si, text in enumerate(split.sentences):
            number += 1
            records.append(SentenceRecord(narrative.crisis_id, pi, si, text, number))
    return records, fallbacks
