"""Sentence -> events -> coded records.

Stages after segmentation: disaggregate a sentence into single-event
sentences, split speech/thought-about-action events into a linked
primary/secondary pair, then code each event node by node, with a
correct/incorrect review prompt after every answer.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import NamedTuple

from .backend import Backend, CompletionRequest, choose_option, format_options
from .errors import BackendError, UnmappableAnswerError
from .ontology import (
    Actor,
    ActorRegistry,
    Codebook,
    EventClass,
    OntologyNode,
    OptionLabel,
    load_actors,
)
from .records import (
    EVENT_BUDGET,
    CodedEvent,
    DoDetails,
    EventDraft,
    Narrative,
    QAVerdict,
    SentenceRecord,
)
from .segmenter import PARAGRAPH_BREAK, segment
from .store import RunManifest, output_digest

log = logging.getLogger(__name__)

CLASS_OPTIONS = (
    OptionLabel.from_display("Think", aliases=["thought", "cognition"]),
    OptionLabel.from_display("Say", aliases=["speech", "statement", "communication"]),
    OptionLabel.from_display("Do", aliases=["action", "physical action"]),
)
CLASS_BY_INDEX = (EventClass.THINK, EventClass.SAY, EventClass.DO)

COMPOUND_OPTIONS = (
    OptionLabel.from_display("no", aliases=["none", "neither"]),
    OptionLabel.from_display("statement about an action", aliases=["speech", "statement"]),
    OptionLabel.from_display("thought about an action", aliases=["thought"]),
)
LINK_BY_INDEX = (None, "speech_about", "thought_about")
LINK_TEXT = {"speech_about": "statement about", "thought_about": "thought about"}
PRIMARY_CLASS = {"speech_about": EventClass.SAY, "thought_about": EventClass.THINK}

QA_OPTIONS = (
    OptionLabel.from_display("correct", aliases=["yes", "right"]),
    OptionLabel.from_display("incorrect", aliases=["no", "wrong"]),
)

NO_ACTOR = frozenset({"none", "nobody", "no_one", "n/a", "na", "unknown", "no_target", "no_audience"})
_BULLET = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)])\s+")
_ACTOR_SPLIT = re.compile(r"\s*(?:,|;|&|\band\b)\s*")


@dataclass
class RunConfig:
    temperature: float = 0.0
    # "paragraph", or an int N for N sentences either side of the target
    context_window: str | int = "paragraph"
    multi_actor: bool = False
    include_noncore: bool = True
    jobs: int = 1
    paragraph_pattern: str = PARAGRAPH_BREAK
    open_max_tokens: int = 16
    choice_max_tokens: int = 8
    disaggregate_max_tokens: int = 512
    rewrite_max_tokens: int = 256

    def digest(self) -> str:
        # concurrency does not change outputs, so it stays out of the digest
        fields = {k: v for k, v in asdict(self).items() if k != "jobs"}
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class PipelineResult(NamedTuple):
    events: list[CodedEvent]
    manifest: RunManifest
    sentences: list[SentenceRecord]


def _clean_line(line: str) -> str:
    return _BULLET.sub("", line).strip()


# ---------------------------------------------------------------------------
# disaggregation and compound splitting


def disaggregate(sentence: SentenceRecord, context: str, backend: Backend, codebook: Codebook,
                 config: RunConfig | None = None) -> list[EventDraft]:
    """Rewrite a sentence as one standalone sentence per distinct event."""
    config = config or RunConfig()
    prompt = codebook.template_for("disaggregate").render(
        task="disaggregate", context=context, event_text=sentence.text
    )
    response = backend.complete(CompletionRequest(
        prompt, config.disaggregate_max_tokens, config.temperature, (), "disaggregate"
    ))
    texts = [t for t in (_clean_line(x) for x in response.text.splitlines()) if t]
    if not texts:
        return [EventDraft(sentence.ref, 0, sentence.text, sentence_number=sentence.sentence_number,
                           flags=("undisaggregated",))]
    return [
        EventDraft(sentence.ref, i, text, sentence_number=sentence.sentence_number,
                   flags=("over_budget",) if i >= EVENT_BUDGET else ())
        for i, text in enumerate(texts)
    ]


def _parse_rewrite(text: str) -> tuple[str, str] | None:
    primary = secondary = None
    for line in (ln.strip() for ln in text.splitlines()):
        if not line:
            continue
        low = line.lower()
        if low.startswith("secondary:"):
            secondary = secondary or line.split(":", 1)[1].strip()
        elif low.startswith("primary:"):
            primary = primary or line.split(":", 1)[1].strip()
        elif primary is None:
            primary = line
    if primary and secondary:
        return primary, secondary
    return None


def split_compound(draft: EventDraft, backend: Backend, codebook: Codebook,
                   config: RunConfig | None = None) -> tuple[EventDraft, EventDraft | None]:
    """Split a speech/thought about an action into (Say/Think primary, Do secondary)."""
    if draft.is_secondary:
        raise ValueError("secondary events are never split again")
    config = config or RunConfig()
    prompt = codebook.template_for("compound_check").render(
        task="compound_check", event_text=draft.text, options=format_options(COMPOUND_OPTIONS)
    )
    try:
        idx, _ = choose_option(backend, prompt, COMPOUND_OPTIONS, tag="compound_check",
                               max_new_tokens=config.choice_max_tokens, temperature=config.temperature)
    except UnmappableAnswerError:
        return draft.with_flags("compound_unmapped"), None
    link = LINK_BY_INDEX[idx]
    if link is None:
        return draft, None
    prompt = codebook.template_for("compound_rewrite").render(
        task="compound_rewrite", event_text=draft.text, link=LINK_TEXT[link]
    )
    response = backend.complete(CompletionRequest(
        prompt, config.rewrite_max_tokens, config.temperature, (), "compound_rewrite"
    ))
    parsed = _parse_rewrite(response.text)
    if parsed is None:
        return draft.with_flags("compound_unparsed"), None
    primary = EventDraft(draft.sentence_ref, draft.event_index, parsed[0],
                         sentence_number=draft.sentence_number, flags=draft.flags)
    secondary = EventDraft(draft.sentence_ref, draft.event_index, parsed[1], parent=primary.event_id,
                           link_kind=link, sentence_number=draft.sentence_number, flags=draft.flags)
    return primary, secondary


# ---------------------------------------------------------------------------
# coding


def qa_check(draft: EventDraft, node: OntologyNode, answer: str, backend: Backend,
             codebook: Codebook, config: RunConfig | None = None) -> QAVerdict:
    config = config or RunConfig()
    prompt = codebook.template_for("qa").render(
        task=f"qa/{node.id}", event_text=draft.text, question=node.question,
        answer=answer, options=format_options(QA_OPTIONS), node=node.label,
    )
    try:
        idx, raw = choose_option(backend, prompt, QA_OPTIONS, tag=f"qa/{node.id}",
                                 max_new_tokens=config.choice_max_tokens, temperature=config.temperature)
    except (BackendError, UnmappableAnswerError) as exc:
        log.info("QA unavailable for %s/%s: %s", draft.event_id, node.id, exc)
        return QAVerdict(node.id, True, "", unavailable=True)
    return QAVerdict(node.id, idx == 0, raw)


def _first_line(text: str) -> str:
    line = text.strip().splitlines()[0] if text.strip() else ""
    return line.strip().strip("\"'").rstrip(".").strip()


def parse_actors(answer: str, registry: ActorRegistry, multi: bool) -> list[Actor]:
    from .normalize import clean_token

    parts = _ACTOR_SPLIT.split(answer) if multi else [answer]
    actors: list[Actor] = []
    for part in parts:
        if clean_token(part) in NO_ACTOR:
            continue
        actor = registry.resolve(part)
        if actor is not None and actor not in actors:
            actors.append(actor)
    return actors


def _class_for(draft: EventDraft, forced: EventClass | None) -> EventClass | None:
    if forced is not None:
        return forced
    if draft.is_secondary:
        return EventClass.DO
    return None


def scheduled_nodes(codebook: Codebook, event_class: EventClass, config: RunConfig) -> list[OntologyNode]:
    return [n for n in codebook.nodes_for(event_class) if n.core or config.include_noncore]


def _all_abstained(draft, event_class, nodes, error=None, flag=None) -> CodedEvent:
    if flag:
        draft = draft.with_flags(flag)
    ids = tuple(n.id for n in nodes)
    return CodedEvent(
        draft=draft,
        event_class=event_class,
        do_details=DoDetails() if event_class == EventClass.DO else None,
        nodes=ids,
        abstentions=ids,
        error=error,
    )


def code_event(draft: EventDraft, codebook: Codebook, backend: Backend, *,
               context: str = "", actors: ActorRegistry | None = None,
               config: RunConfig | None = None, forced_class: EventClass | None = None) -> CodedEvent:
    """Code one event across its class's nodes. Never raises on backend
    failure: the event comes back fully abstained with ``error`` set."""
    config = config or RunConfig()
    actors = actors or load_actors()
    context = context or draft.text
    temp = config.temperature
    event_class = _class_for(draft, forced_class)
    try:
        if event_class is None:
            prompt = codebook.template_for("event_class").render(
                task="event_class", context=context, event_text=draft.text,
                options=format_options(CLASS_OPTIONS),
            )
            try:
                idx, _ = choose_option(backend, prompt, CLASS_OPTIONS, tag="event_class",
                                       max_new_tokens=config.choice_max_tokens, temperature=temp)
            except UnmappableAnswerError:
                nodes = scheduled_nodes(codebook, EventClass.DO, config)
                return _all_abstained(draft, EventClass.DO, nodes, flag="unclassified")
            event_class = CLASS_BY_INDEX[idx]

        nodes = scheduled_nodes(codebook, event_class, config)
        actor_a: list[Actor] = []
        actor_b: list[Actor] = []
        behavior = None
        details: dict[str, str] = {}
        abstentions: list[str] = []
        qa: dict[str, QAVerdict] = {}
        previous: list[str] = [f"Event type: {event_class.value}"]

        for node in nodes:
            tag = f"code/{node.id}"
            template = codebook.template_for("code", node.id)
            prompt = template.render(
                task=tag, context=context, event_text=draft.text, question=node.question,
                answer_form=node.answer_form, previous="Answers so far: " + "; ".join(previous),
                options=format_options(node.options), node=node.label,
            )
            if node.is_choice:
                try:
                    idx, _ = choose_option(backend, prompt, node.options, tag=tag,
                                           max_new_tokens=config.choice_max_tokens, temperature=temp)
                except UnmappableAnswerError:
                    abstentions.append(node.id)
                    continue
                option = node.options[idx]
                answer_text = option.display
                if node.kind == "behavior":
                    behavior = option.canonical
                else:
                    details[node.id] = option.canonical
            else:
                resp = backend.complete(CompletionRequest(prompt, config.open_max_tokens, temp, ("\n",), tag))
                answer_text = _first_line(resp.text)
                if node.kind in ("actor_a", "actor_b"):
                    parsed = parse_actors(answer_text, actors, config.multi_actor)
                    if node.kind == "actor_a":
                        if not parsed:
                            abstentions.append(node.id)
                            continue
                        actor_a = parsed
                    else:
                        actor_b = parsed
                    answer_text = ", ".join(a.display_name for a in parsed) or "none"
                else:
                    if not answer_text:
                        abstentions.append(node.id)
                        continue
                    if node.kind == "behavior":
                        # open-ended behavior nodes still have to land in the vocabulary
                        abstentions.append(node.id)
                        continue
                    details[node.id] = answer_text
            qa[node.id] = qa_check(draft, node, answer_text, backend, codebook, config)
            previous.append(f"{node.label}: {answer_text}")
    except BackendError as exc:
        log.warning("backend failure while coding %s: %s", draft.event_id, exc)
        nodes = scheduled_nodes(codebook, event_class or EventClass.DO, config)
        return _all_abstained(draft, event_class or EventClass.DO, nodes, error=str(exc))

    do_details = None
    if event_class == EventClass.DO:
        do_details = DoDetails(**{k: v for k, v in details.items() if k in DoDetails.__dataclass_fields__})
    return CodedEvent(
        draft=draft,
        event_class=event_class,
        actor_a=tuple(actor_a),
        actor_b=tuple(actor_b),
        behavior=behavior,
        do_details=do_details,
        nodes=tuple(n.id for n in nodes),
        abstentions=tuple(abstentions),
        qa=qa,
    )


# ---------------------------------------------------------------------------
# pipeline


def context_for(sentence: SentenceRecord, sentences: list[SentenceRecord], window: str | int) -> str:
    same = [s for s in sentences if s.paragraph_index == sentence.paragraph_index]
    if window == "paragraph":
        return " ".join(s.text for s in same)
    n = int(window)
    i = sentence.sentence_index
    return " ".join(s.text for s in same[max(0, i - n): i + n + 1])


def code_sentence(sentence: SentenceRecord, sentences: list[SentenceRecord], codebook: Codebook,
                  backend: Backend, actors: ActorRegistry, config: RunConfig) -> list[CodedEvent]:
    context = context_for(sentence, sentences, config.context_window)
    try:
        drafts = disaggregate(sentence, context, backend, codebook, config)
    except BackendError as exc:
        log.warning("disaggregation failed for %s: %s", sentence.ref, exc)
        drafts = [EventDraft(sentence.ref, 0, sentence.text, sentence_number=sentence.sentence_number,
                             flags=("undisaggregated", "backend_error"))]
    events: list[CodedEvent] = []
    for draft in drafts:
        try:
            primary, secondary = split_compound(draft, backend, codebook, config)
        except BackendError as exc:
            log.warning("compound check failed for %s: %s", draft.event_id, exc)
            primary, secondary = draft.with_flags("compound_error"), None
        forced = PRIMARY_CLASS[secondary.link_kind] if secondary is not None else None
        events.append(code_event(primary, codebook, backend, context=sentence.text, actors=actors,
                                 config=config, forced_class=forced))
        if secondary is not None:
            events.append(code_event(secondary, codebook, backend, context=sentence.text, actors=actors,
                                     config=config, forced_class=EventClass.DO))
    return events


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_pipeline(narrative: Narrative, codebook: Codebook, backend: Backend,
                 config: RunConfig | None = None, actors: ActorRegistry | None = None) -> PipelineResult:
    config = config or RunConfig()
    actors = actors or load_actors()
    started = _now()
    calls_before, remote_before = backend.counters()

    sentences, fallbacks = segment(narrative, backend, codebook, paragraph_pattern=config.paragraph_pattern,
                                   jobs=config.jobs, temperature=config.temperature)

    def work(s: SentenceRecord) -> list[CodedEvent]:
        return code_sentence(s, sentences, codebook, backend, actors, config)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            per_sentence = list(pool.map(work, sentences))
    else:
        per_sentence = [work(s) for s in sentences]
    events = sorted((e for batch in per_sentence for e in batch), key=lambda e: e.draft.sort_key)

    calls_after, remote_after = backend.counters()
    delta = lambda after, before: {k: after[k] - before.get(k, 0) for k in sorted(after) if after[k] - before.get(k, 0)}
    config_digest = config.digest()
    run_id = hashlib.sha256(
        f"{narrative.crisis_id}|{codebook.version}|{backend.identity}|{config_digest}".encode()
    ).hexdigest()[:12]
    manifest = RunManifest(
        run_id=run_id,
        crisis_id=narrative.crisis_id,
        codebook_version=codebook.version,
        backend_identity=backend.identity,
        config_digest=config_digest,
        call_counts=delta(calls_after, calls_before),
        remote_calls=delta(remote_after, remote_before),
        sentence_fallbacks=fallbacks,
        abstentions=sum(len(e.abstentions) for e in events),
        event_count=len(events),
        output_digest=output_digest(events),
        started_at=started,
        finished_at=_now(),
    )
    return PipelineResult(events, manifest, sentences)
