"""Evaluation against multi-coder gold data.

Recall is one-directional: the share of consensus (human) tokens that the
system also emitted for the same sentence and node. Precision is not
computed here.
"""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfusionLabelError
from .normalize import EMPTY_TOKEN, AliasTable, normalize_token  # noqa: F401  (re-export)
from .ontology import Codebook, EventClass, load_default_codebook
from .records import CodedEvent, GoldCoding

log = logging.getLogger(__name__)

# per-node recall range observed on the full ICBe corpus; outside it is worth a look
RECALL_ENVELOPE = (0.27, 0.87)
QA_ALERT_THRESHOLD = 0.60

SentenceKey = tuple[str, int]


# ---------------------------------------------------------------------------
# consensus


@dataclass(frozen=True)
class TokenSupport:
    expert_votes: int
    majority_tier: str


@dataclass(frozen=True)
class ConsensusCoding:
    crisis_id: str
    sentence_index: int
    node_id: str
    tokens: tuple[str, ...]
    support: tuple[TokenSupport, ...] = ()

    @property
    def key(self) -> SentenceKey:
        return (self.crisis_id, self.sentence_index)


def build_agreed_wide(gold: Iterable[GoldCoding], aliases: Mapping[str, str] | None = None,
                      pool_trained: bool = False) -> list[ConsensusCoding]:
    """Keep a token iff at least one expert voted for it and it has a strict
    majority among the experts, or among the novices, who coded that sentence.

    Trained coders count toward neither condition unless ``pool_trained``,
    in which case they are counted as experts.
    """
    if aliases is not None and not isinstance(aliases, AliasTable):
        aliases = AliasTable(aliases)
    coders: dict[SentenceKey, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
    voters: dict[tuple[str, int, str, str], set[tuple[str, str]]] = defaultdict(set)
    for rec in gold:
        tier = "expert" if pool_trained and rec.coder_tier == "trained" else rec.coder_tier
        key = (rec.crisis_id, rec.sentence_index)
        coders[key][tier].add(rec.coder_id)
        for raw in rec.tokens:
            token = normalize_token(raw, aliases)
            if token != EMPTY_TOKEN:
                voters[(rec.crisis_id, rec.sentence_index, rec.node_id, token)].add((rec.coder_id, tier))

    kept: dict[tuple[str, int, str], list[tuple[str, TokenSupport]]] = defaultdict(list)
    for (crisis, sentence, node, token), who in voters.items():
        pool = coders[(crisis, sentence)]
        experts = sum(1 for _, t in who if t == "expert")
        novices = sum(1 for _, t in who if t == "novice")
        if experts < 1:
            continue
        if 2 * experts > len(pool["expert"]):
            tier = "expert"
        elif pool["novice"] and 2 * novices > len(pool["novice"]):
            tier = "novice"
        else:
            continue
        kept[(crisis, sentence, node)].append((token, TokenSupport(experts, tier)))

    out = []
    for (crisis, sentence, node) in sorted(kept):
        items = sorted(kept[(crisis, sentence, node)])
        out.append(ConsensusCoding(crisis, sentence, node, tuple(t for t, _ in items),
                                   tuple(s for _, s in items)))
    return out


# ---------------------------------------------------------------------------
# system side


def select_densest_event(events: Sequence[CodedEvent]) -> CodedEvent:
    """The event with the most answered nodes; ties go to the earliest."""
    if not events:
        raise ValueError("select_densest_event needs at least one event")
    return min(events, key=lambda e: (-e.coded_count, e.draft.event_index, e.draft.is_secondary))


def event_tokens(event: CodedEvent, codebook: Codebook,
                 aliases: Mapping[str, str] | None = None) -> dict[str, set[str]]:
    """Normalized tokens the event emitted, keyed by node id."""
    out: dict[str, set[str]] = {}
    skipped = set(event.abstentions)
    for node_id in event.nodes:
        if node_id in skipped or node_id not in codebook:
            continue
        node = codebook.node(node_id)
        if node.kind == "actor_a":
            raw = [a.canonical_name for a in event.actor_a]
        elif node.kind == "actor_b":
            raw = [a.canonical_name for a in event.actor_b]
        elif node.kind == "behavior":
            raw = [event.behavior] if event.behavior else []
        else:
            value = event.do_details.get(node_id) if event.do_details else None
            raw = [value] if value else []
        tokens = {normalize_token(r, aliases) for r in raw} - {EMPTY_TOKEN}
        if tokens:
            out[node_id] = tokens
    return out


def events_by_sentence(events: Iterable[CodedEvent]) -> dict[SentenceKey, list[CodedEvent]]:
    grouped: dict[SentenceKey, list[CodedEvent]] = defaultdict(list)
    for e in events:
        grouped[(e.draft.sentence_ref[0], e.draft.sentence_number)].append(e)
    return grouped


# ---------------------------------------------------------------------------
# recall


@dataclass(frozen=True)
class NodeRecall:
    hits: int
    human_tokens: int

    @property
    def recall(self) -> float:
        return self.hits / self.human_tokens if self.human_tokens else 0.0


@dataclass
class RecallReport:
    per_node: dict[str, NodeRecall]
    sentences_covered: int
    unknown_nodes: list[str] = field(default_factory=list)

    @property
    def hits(self) -> int:
        return sum(r.hits for r in self.per_node.values())

    @property
    def human_tokens(self) -> int:
        return sum(r.human_tokens for r in self.per_node.values())

    @property
    def overall(self) -> float:
        """Token-weighted recall."""
        return self.hits / self.human_tokens if self.human_tokens else 0.0

    @property
    def macro(self) -> float:
        """Unweighted mean of per-node recall."""
        if not self.per_node:
            return 0.0
        return sum(r.recall for r in self.per_node.values()) / len(self.per_node)

    def outside_envelope(self, envelope=RECALL_ENVELOPE) -> list[str]:
        lo, hi = envelope
        return [n for n, r in self.per_node.items() if not lo <= r.recall <= hi]


def compute_recall(system: Iterable[CodedEvent], consensus: Iterable[ConsensusCoding],
                   codebook: Codebook | None = None,
                   aliases: Mapping[str, str] | None = None) -> RecallReport:
    codebook = codebook or load_default_codebook()
    if aliases is not None and not isinstance(aliases, AliasTable):
        aliases = AliasTable(aliases)
    selected = {k: select_densest_event(v) for k, v in events_by_sentence(system).items()}
    emitted: dict[SentenceKey, dict[str, set[str]]] = {
        k: event_tokens(e, codebook, aliases) for k, e in selected.items()
    }
    hits: Counter[str] = Counter()
    totals: Counter[str] = Counter()
    unknown: set[str] = set()
    covered: set[SentenceKey] = set()
    for c in consensus:
        if c.node_id not in codebook:
            unknown.add(c.node_id)
            continue
        covered.add(c.key)
        sys_tokens = emitted.get(c.key, {}).get(c.node_id, set())
        for token in c.tokens:
            totals[c.node_id] += 1
            if token != EMPTY_TOKEN and token in sys_tokens:
                hits[c.node_id] += 1
    if unknown:
        log.warning("gold nodes not in codebook were excluded: %s", ", ".join(sorted(unknown)))
    order = [n.id for n in codebook.nodes]
    per_node = {n: NodeRecall(hits[n], totals[n]) for n in order if totals[n]}
    return RecallReport(per_node, len(covered), sorted(unknown))


# ---------------------------------------------------------------------------
# confusion


@dataclass
class ConfusionMatrix:
    event_class: EventClass
    labels: list[str]
    # rows are gold labels, columns system labels
    counts: list[list[int]]
    eligible: int
    total_candidates: int
    gold_frequency: dict[str, int] = field(default_factory=dict)

    @property
    def eligibility(self) -> float:
        return self.eligible / self.total_candidates if self.total_candidates else 0.0

    def cell(self, gold: str, system: str) -> int:
        return self.counts[self.labels.index(gold)][self.labels.index(system)]

    def pruned(self, min_count: int) -> "ConfusionMatrix":
        """Restrict to labels the gold side uses at least ``min_count`` times.
        ``eligible`` of the result counts only the cells that survive."""
        keep = [i for i, lbl in enumerate(self.labels) if self.gold_frequency.get(lbl, 0) >= min_count]
        counts = [[self.counts[i][j] for j in keep] for i in keep]
        return ConfusionMatrix(
            self.event_class,
            [self.labels[i] for i in keep],
            counts,
            sum(map(sum, counts)),
            self.total_candidates,
            {self.labels[i]: self.gold_frequency.get(self.labels[i], 0) for i in keep},
        )

    def top_confusions(self, n: int = 5) -> list[tuple[str, str, int]]:
        off = [
            (self.labels[i], self.labels[j], c)
            for i, row in enumerate(self.counts)
            for j, c in enumerate(row)
            if i != j and c
        ]
        return sorted(off, key=lambda t: (-t[2], t[0], t[1]))[:n]


def build_confusion(system: Iterable[CodedEvent], consensus: Iterable[ConsensusCoding],
                    event_class: EventClass, codebook: Codebook | None = None,
                    min_count: int = 0) -> ConfusionMatrix:
    """Behavior confusion over sentences where gold and system each assigned
    exactly one behavior token for this class."""
    codebook = codebook or load_default_codebook()
    node = codebook.behavior_node(event_class)
    labels = [o.canonical for o in node.options]
    vocab = set(labels)

    gold: dict[SentenceKey, set[str]] = defaultdict(set)
    for c in consensus:
        if c.node_id == node.id:
            gold[c.key].update(t for t in c.tokens if t != EMPTY_TOKEN)
    predicted: dict[SentenceKey, set[str]] = defaultdict(set)
    for e in system:
        if e.event_class == event_class and e.behavior and node.id not in e.abstentions:
            predicted[(e.draft.sentence_ref[0], e.draft.sentence_number)].add(e.behavior)

    for side in (gold, predicted):
        for tokens in side.values():
            for t in sorted(tokens):
                if t not in vocab:
                    raise ConfusionLabelError(t, event_class.value)

    candidates = [k for k, v in gold.items() if v]
    frequency = Counter(t for k in candidates for t in gold[k])
    index = {lbl: i for i, lbl in enumerate(labels)}
    counts = [[0] * len(labels) for _ in labels]
    eligible = 0
    for key in candidates:
        g, s = gold[key], predicted.get(key, set())
        if len(g) == 1 and len(s) == 1:
            counts[index[next(iter(g))]][index[next(iter(s))]] += 1
            eligible += 1
    matrix = ConfusionMatrix(event_class, labels, counts, eligible, len(candidates),
                             {lbl: frequency.get(lbl, 0) for lbl in labels})
    return matrix.pruned(min_count) if min_count > 0 else matrix


# ---------------------------------------------------------------------------
# QA statistics


@dataclass(frozen=True)
class NodeQA:
    accepted: int
    total: int
    flagged: bool

    @property
    def rate(self) -> float:
        return self.accepted / self.total if self.total else 0.0


@dataclass
class QAStats:
    per_node: dict[str, NodeQA]
    threshold: float
    unavailable: int = 0
    not_applicable: list[str] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return sum(n.accepted for n in self.per_node.values())

    @property
    def total(self) -> int:
        return sum(n.total for n in self.per_node.values())

    @property
    def overall(self) -> float | None:
        return self.accepted / self.total if self.total else None

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.per_node.items() if v.flagged]


def qa_stats(events: Iterable[CodedEvent], threshold: float = QA_ALERT_THRESHOLD,
             codebook: Codebook | None = None) -> QAStats:
    """Acceptance rate of review verdicts per node and overall. Verdicts
    whose review prompt failed are counted separately, not as accepts."""
    accepted: Counter[str] = Counter()
    total: Counter[str] = Counter()
    unavailable = 0
    order: list[str] = []
    for e in events:
        for node_id, v in e.qa.items():
            if v.unavailable:
                unavailable += 1
                continue
            if node_id not in total:
                order.append(node_id)
            total[node_id] += 1
            accepted[node_id] += v.accepted
    if codebook is not None:
        rank = {n.id: i for i, n in enumerate(codebook.nodes)}
        order.sort(key=lambda n: (rank.get(n, len(rank)), n))
    else:
        order.sort()
    per_node = {
        n: NodeQA(accepted[n], total[n], accepted[n] / total[n] < threshold) for n in order
    }
    missing = [n.id for n in codebook.nodes if n.id not in total] if codebook is not None else []
    return QAStats(per_node, threshold, unavailable, missing)
