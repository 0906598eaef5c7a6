"""Timeline views of coded events: a self-contained HTML page and a text table.

Each row shows the source sentence, the rewritten event, and a compact
summary: initiator flags, behavior glyph, target flags, then do-detail
glyphs. Secondary events of a compound pair follow their primary on a row
that starts with "↳".
"""
from __future__ import annotations

import html
import re
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ReportError
from .ontology import Actor
from .records import CodedEvent, Narrative, SentenceRecord
from .segmenter import fallback_split, split_paragraphs

SECONDARY_MARK = "↳"


def flag_for(country_code: str) -> str:
    """Regional-indicator flag for an ISO-3166 alpha-2 code."""
    code = country_code.strip().upper()
    if len(code) != 2 or not code.isascii() or not code.isalpha():
        return ""
    return "".join(chr(0x1F1E6 + ord(c) - ord("A")) for c in code)


DEFAULT_BEHAVIOR_GLYPHS = {
    "attack": "⚔️",
    "battle": "⚔️",
    "bombardment": "💣",
    "invasion": "🏴",
    "deployment": "📦",
    "mobilization": "📣",
    "blockade": "⛔",
    "withdrawal": "↩️",
    "meeting": "🤝",
    "ceasefire": "🕊️",
    "threat": "⚠️",
    "offer": "🎁",
    "appeal": "🙏",
    "accusation": "👉",
    "rejection": "🚫",
    "promise": "🤞",
    "ultimatum": "⏳",
    "fear": "😨",
    "discovery": "🔍",
    "convinced": "💡",
    "crisis_start": "🚩",
    "crisis_end": "🏁",
}
DEFAULT_DOMAIN_GLYPHS = {
    "ground": "⛰️",
    "sea": "🌊",
    "air": "✈️",
    "space": "🛰️",
    "cyber": "💻",
}
DEFAULT_FORCE_GLYPHS = {
    "troops": "🪖",
    "aircraft": "🛩️",
    "naval_vessels": "🚢",
    "missiles": "🚀",
    "nuclear_weapons": "☢️",
    "artillery": "💥",
}


@dataclass
class IconMap:
    """Glyph tables; any label without a glyph renders as bracketed text."""

    actor_flags: dict[str, str] = field(default_factory=dict)
    behavior_glyphs: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_BEHAVIOR_GLYPHS))
    domain_glyphs: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_DOMAIN_GLYPHS))
    force_glyphs: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FORCE_GLYPHS))
    casualty_glyph: str = "☠️"
    troops_glyph: str = "💂"

    def actor(self, actor: Actor) -> str:
        if actor.country_code:
            glyph = self.actor_flags.get(actor.country_code.upper()) or flag_for(actor.country_code)
            if glyph:
                return glyph
        return f"[{actor.short_label}]"

    @staticmethod
    def _lookup(table: dict[str, str], label: str) -> str:
        return table.get(label) or f"[{label}]"

    def behavior(self, label: str) -> str:
        return self._lookup(self.behavior_glyphs, label)

    def domain(self, label: str) -> str:
        return self._lookup(self.domain_glyphs, label)

    def force(self, label: str) -> str:
        return self._lookup(self.force_glyphs, label)


_ZERO = frozenset({"0", "zero", "none", "no", "nil", "n/a", "na", "unknown"})
_NUMBER = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


def is_nonzero(value: str | None) -> bool:
    """True for a count that is present and not zero."""
    if value is None:
        return False
    text = value.strip().lower()
    if not text or text in _ZERO:
        return False
    m = _NUMBER.search(text)
    if m:
        return float(m.group().replace(",", "")) > 0
    return True


def _present(value: str | None) -> bool:
    return bool(value) and value != "none"


# ---------------------------------------------------------------------------
# shared row model


@dataclass(frozen=True)
class _Row:
    source: str  # empty unless this is the first row of its sentence
    event: str
    secondary: bool
    parts: tuple[tuple[str, str], ...]  # (glyph, text label) pairs


def _parts(event: CodedEvent, icons: IconMap) -> list[tuple[str, str]]:
    out = [(icons.actor(a), a.short_label) for a in event.actor_a]
    if event.behavior:
        out.append((icons.behavior(event.behavior), event.behavior))
    out += [(icons.actor(a), a.short_label) for a in event.actor_b]
    d = event.do_details
    if d is not None:
        if _present(d.domains):
            out.append((icons.domain(d.domains), d.domains))
        if _present(d.forces):
            out.append((icons.force(d.forces), d.forces))
        if is_nonzero(d.units):
            out.append((icons.troops_glyph, f"units:{d.units}"))
        if is_nonzero(d.fatalities):
            out.append((icons.casualty_glyph, f"fatalities:{d.fatalities}"))
        if _present(d.territory):
            out.append((f"[{d.territory}]", f"territory:{d.territory}"))
    return out


def _sentence_table(source: Narrative | Sequence[SentenceRecord]) -> dict[tuple[str, int, int], str]:
    if isinstance(source, Narrative):
        # no sentence table at hand: recover one with the deterministic splitter
        table = {}
        for pi, para in enumerate(split_paragraphs(source)):
            for si, text in enumerate(fallback_split(para)):
                table[(source.crisis_id, pi, si)] = text
        return table
    return {s.ref: s.text for s in source}


def _rows(events: Sequence[CodedEvent], source, icons: IconMap) -> list[_Row]:
    table = _sentence_table(source)
    rows = []
    seen: set = set()
    for e in events:
        ref = e.draft.sentence_ref
        if ref not in table:
            raise ReportError(f"event {e.event_id} refers to a sentence outside the narrative")
        text = "" if ref in seen else table[ref]
        seen.add(ref)
        rows.append(_Row(text, e.draft.text, e.draft.is_secondary, tuple(_parts(e, icons))))
    return rows


# ---------------------------------------------------------------------------
# HTML

_STYLE = """
body { font-family: sans-serif; margin: 2em; }
table { border-collapse: collapse; width: 100%; }
th, td { border-bottom: 1px solid #ddd; padding: 4px 8px; vertical-align: top; text-align: left; }
tr.secondary td.event { padding-left: 1.5em; color: #444; }
td.icons { white-space: nowrap; font-size: 1.2em; }
""".strip()


def render_timeline(events: Sequence[CodedEvent], source: Narrative | Sequence[SentenceRecord],
                    icons: IconMap | None = None, title: str = "") -> str:
    """Self-contained HTML page; no external assets are referenced."""
    icons = icons or IconMap()
    rows = _rows(events, source, icons)
    if not title:
        title = source.title if isinstance(source, Narrative) else "Event timeline"
    esc = html.escape
    out = [
        "<!DOCTYPE html>",
        '<html lang="en">',
        '<head><meta charset="utf-8">',
        f"<title>{esc(title)}</title>",
        f"<style>\n{_STYLE}\n</style>",
        "</head>",
        "<body>",
        f"<h1>{esc(title)}</h1>",
        "<table>",
        "<thead><tr><th>Source</th><th>Event</th><th>Summary</th></tr></thead>",
        "<tbody>",
    ]
    for r in rows:
        cls = "event secondary" if r.secondary else "event"
        event = f"{SECONDARY_MARK} {esc(r.event)}" if r.secondary else esc(r.event)
        icons_html = " ".join(f'<span title="{esc(label)}">{esc(glyph)}</span>' for glyph, label in r.parts)
        out.append(
            f'<tr class="{cls}"><td class="source">{esc(r.source)}</td>'
            f'<td class="event">{event}</td><td class="icons">{icons_html}</td></tr>'
        )
    out += ["</tbody>", "</table>", "</body>", "</html>"]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# text


TEXT_HEADER = ("event", "coding", "source")


def render_text_table(events: Sequence[CodedEvent], source: Narrative | Sequence[SentenceRecord]) -> str:
    """Tab-separated table with bracketed labels instead of glyphs. The event
    column comes first so secondary rows start with the "↳" mark."""
    rows = _rows(events, source, IconMap())
    lines = ["\t".join(TEXT_HEADER)]
    for r in rows:
        event = f"{SECONDARY_MARK} {r.event}" if r.secondary else r.event
        coding = "".join(f"[{label}]" for _, label in r.parts)
        lines.append("\t".join(_one_line(x) for x in (event, coding, r.source)).rstrip("\t"))
    return "\n".join(lines) + "\n"


def _one_line(text: str) -> str:
    return " ".join(text.split())
