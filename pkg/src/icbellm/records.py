"""Core record types passed between pipeline stages, with dict round-trips."""
from __future__ import annotations

from dataclasses import dataclass, field

from .ontology import Actor, EventClass

LINK_KINDS = ("speech_about", "thought_about")
# drafts past this index within a sentence are kept but flagged
EVENT_BUDGET = 3


@dataclass(frozen=True)
class Narrative:
    crisis_id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.body or not self.body.strip():
            raise ValueError(f"narrative {self.crisis_id!r} has an empty body")


@dataclass(frozen=True)
class SentenceRecord:
    crisis_id: str
    paragraph_index: int
    sentence_index: int
    text: str
    # 1-based position within the whole crisis narrative (the gold data's unit)
    sentence_number: int = 0

    @property
    def ref(self) -> tuple[str, int, int]:
        return (self.crisis_id, self.paragraph_index, self.sentence_index)

    def to_dict(self) -> dict:
        return {
            "crisis_id": self.crisis_id,
            "paragraph_index": self.paragraph_index,
            "sentence_index": self.sentence_index,
            "sentence_number": self.sentence_number,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SentenceRecord":
        return cls(
            crisis_id=str(d["crisis_id"]),
            paragraph_index=int(d["paragraph_index"]),
            sentence_index=int(d["sentence_index"]),
            text=str(d["text"]),
            sentence_number=int(d.get("sentence_number", 0)),
        )


@dataclass(frozen=True)
class EventDraft:
    sentence_ref: tuple[str, int, int]
    event_index: int
    text: str
    parent: str | None = None
    link_kind: str | None = None
    sentence_number: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.parent is None) != (self.link_kind is None):
            raise ValueError("parent and link_kind must be set together")
        if self.link_kind is not None and self.link_kind not in LINK_KINDS:
            raise ValueError(f"unknown link kind {self.link_kind!r}")

    @property
    def is_secondary(self) -> bool:
        return self.parent is not None

    @property
    def event_id(self) -> str:
        crisis, p, s = self.sentence_ref
        base = f"{crisis}:{p}:{s}:{self.event_index}"
        return base + ":s" if self.is_secondary else base

    @property
    def sort_key(self) -> tuple:
        _, p, s = self.sentence_ref
        return (p, s, self.event_index, 1 if self.is_secondary else 0)

    def with_flags(self, *flags: str) -> "EventDraft":
        merged = tuple(dict.fromkeys(self.flags + flags))
        return EventDraft(self.sentence_ref, self.event_index, self.text, self.parent,
                          self.link_kind, self.sentence_number, merged)

    def to_dict(self) -> dict:
        crisis, p, s = self.sentence_ref
        return {
            "crisis_id": crisis,
            "paragraph_index": p,
            "sentence_index": s,
            "sentence_number": self.sentence_number,
            "event_index": self.event_index,
            "text": self.text,
            "parent": self.parent,
            "link_kind": self.link_kind,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventDraft":
        return cls(
            sentence_ref=(str(d["crisis_id"]), int(d["paragraph_index"]), int(d["sentence_index"])),
            event_index=int(d["event_index"]),
            text=str(d["text"]),
            parent=d.get("parent"),
            link_kind=d.get("link_kind"),
            sentence_number=int(d.get("sentence_number", 0)),
            flags=tuple(d.get("flags") or ()),
        )


@dataclass(frozen=True)
class QAVerdict:
    node_id: str
    accepted: bool
    raw_text: str
    # set when the QA prompt itself failed; the answer is then passed through
    unavailable: bool = False

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "raw_text": self.raw_text, "unavailable": self.unavailable}


DETAIL_FIELDS = ("units", "domains", "forces", "fatalities", "territory")


@dataclass(frozen=True)
class DoDetails:
    units: str | None = None
    domains: str | None = None
    forces: str | None = None
    fatalities: str | None = None
    territory: str | None = None

    def get(self, name: str) -> str | None:
        return getattr(self, name) if name in DETAIL_FIELDS else None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in DETAIL_FIELDS}


def _actor_to_dict(a: Actor) -> dict:
    return {
        "canonical": a.canonical_name,
        "display": a.display_name,
        "country_code": a.country_code,
        "label": a.label,
    }


def _actor_from_dict(d: dict) -> Actor:
    return Actor(str(d["canonical"]), str(d.get("display") or d["canonical"]),
                 d.get("country_code"), d.get("label"))


@dataclass(frozen=True)
class CodedEvent:
    draft: EventDraft
    event_class: EventClass
    actor_a: tuple[Actor, ...] = ()
    actor_b: tuple[Actor, ...] = ()
    behavior: str | None = None
    do_details: DoDetails | None = None
    # node ids scheduled for this event, in coding order
    nodes: tuple[str, ...] = ()
    abstentions: tuple[str, ...] = ()
    qa: dict[str, QAVerdict] = field(default_factory=dict)
    error: str | None = None

    @property
    def event_id(self) -> str:
        return self.draft.event_id

    @property
    def coded_count(self) -> int:
        """Number of scheduled nodes that received an answer."""
        return len(self.nodes) - len(self.abstentions)

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "draft": self.draft.to_dict(),
            "event_class": self.event_class.value,
            "actor_a": [_actor_to_dict(a) for a in self.actor_a],
            "actor_b": [_actor_to_dict(a) for a in self.actor_b],
            "behavior": self.behavior,
            "do_details": self.do_details.to_dict() if self.do_details is not None else None,
            "nodes": list(self.nodes),
            "abstentions": list(self.abstentions),
            "qa": {k: v.to_dict() for k, v in self.qa.items()},
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodedEvent":
        for key in ("draft", "event_class"):
            if key not in d:
                raise KeyError(key)
        details = d.get("do_details")
        event = cls(
            draft=EventDraft.from_dict(d["draft"]),
            event_class=EventClass.parse(d["event_class"]),
            actor_a=tuple(_actor_from_dict(a) for a in d.get("actor_a") or ()),
            actor_b=tuple(_actor_from_dict(a) for a in d.get("actor_b") or ()),
            behavior=d.get("behavior"),
            do_details=DoDetails(**details) if details is not None else None,
            nodes=tuple(d.get("nodes") or ()),
            abstentions=tuple(d.get("abstentions") or ()),
            qa={
                k: QAVerdict(k, bool(v["accepted"]), str(v.get("raw_text", "")), bool(v.get("unavailable", False)))
                for k, v in (d.get("qa") or {}).items()
            },
            error=d.get("error"),
        )
        if "event_id" in d and d["event_id"] != event.event_id:
            raise ValueError(f"event_id {d['event_id']!r} does not match draft coordinates")
        return event


TIERS = ("expert", "trained", "novice")


@dataclass(frozen=True)
class GoldCoding:
    """One coder's tokens for one node of one crisis sentence."""

    crisis_id: str
    sentence_index: int
    coder_id: str
    coder_tier: str
    node_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.coder_tier not in TIERS:
            raise ValueError(f"unknown coder tier {self.coder_tier!r}")
        if not self.tokens:
            raise ValueError("gold coding needs at least one token")
