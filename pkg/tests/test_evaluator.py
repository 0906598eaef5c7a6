import logging
import random

import pytest

from icbellm.errors import ConfusionLabelError
from icbellm.evaluator import (
    ConsensusCoding,
    build_agreed_wide,
    build_confusion,
    compute_recall,
    event_tokens,
    qa_stats,
    select_densest_event,
)
from icbellm.ontology import Actor, EventClass
from icbellm.records import CodedEvent, DoDetails, EventDraft, GoldCoding, QAVerdict

from oracles import oracle_agreed_wide, oracle_recall
from synth import CODEBOOK, random_consensus, random_corpus, random_vote_table

USA = Actor("usa", "United States", "US", "USA")
CUBA = Actor("cuba", "Cuba", "CU", "CUB")
USSR = Actor("ussr", "Soviet Union", "SU", "SOV")


def do_event(number=1, index=0, actor_a=(USA,), actor_b=(CUBA,), behavior="mobilization",
             details=None, abstentions=(), parent=None, crisis="c1"):
    nodes = tuple(n.id for n in CODEBOOK.nodes_for(EventClass.DO))
    draft = EventDraft((crisis, 0, number - 1), index, "text", parent=parent,
                       link_kind="thought_about" if parent else None, sentence_number=number)
    return CodedEvent(draft, EventClass.DO, tuple(actor_a), tuple(actor_b), behavior,
                      DoDetails(**(details or {})), nodes, tuple(abstentions))


def class_event(cls, behavior, number, index=0, crisis="c1"):
    nodes = tuple(n.id for n in CODEBOOK.nodes_for(cls))
    draft = EventDraft((crisis, 0, number - 1), index, "text", sentence_number=number)
    return CodedEvent(draft, cls, (USA,), (), behavior, None, nodes)


def gold(coder, tier, tokens, node="do_actor_a", sentence=1):
    return GoldCoding("c1", sentence, coder, tier, node, tuple(tokens))


# --- Agreed-Wide


def test_expert_and_novice_majority_kept():
    votes = [gold("e1", "expert", ["usa"]), gold("n1", "novice", ["usa"]), gold("n2", "novice", ["usa"])]
    (c,) = build_agreed_wide(votes)
    assert c.tokens == ("usa",)


def test_no_expert_vote_dropped():
    votes = [gold("e1", "expert", ["cuba"]), gold("n1", "novice", ["usa"]), gold("n2", "novice", ["usa"])]
    kept = {(c.node_id, t) for c in build_agreed_wide(votes) for t in c.tokens}
    assert ("do_actor_a", "usa") not in kept
    assert ("do_actor_a", "cuba") in kept


def test_novice_majority_rescues_expert_minority():
    votes = [gold("e1", "expert", ["usa"]), gold("e2", "expert", ["cuba"]), gold("e3", "expert", ["cuba"]),
             gold("n1", "novice", ["usa"])]
    tokens = {t for c in build_agreed_wide(votes) for t in c.tokens}
    assert tokens == {"usa", "cuba"}


def test_tie_is_not_a_majority():
    votes = [gold("e1", "expert", ["usa"]), gold("e2", "expert", ["cuba"])]
    assert build_agreed_wide(votes) == []


def test_trained_coders_only_count_when_pooled():
    votes = [gold("e1", "expert", ["usa"]), gold("e2", "expert", ["cuba"]), gold("t1", "trained", ["usa"])]
    assert build_agreed_wide(votes) == []
    (c,) = build_agreed_wide(votes, pool_trained=True)
    assert c.tokens == ("usa",) and c.support[0].expert_votes == 2


def test_aliases_merge_votes():
    votes = [gold("e1", "expert", ["U.S."]), gold("e2", "expert", ["usa"])]
    (c,) = build_agreed_wide(votes, {"u.s.": "usa"})
    assert c.tokens == ("usa",)


def test_agreed_wide_matches_oracle_and_is_order_free():
    rng = random.Random(7)
    for _ in range(50):
        table = random_vote_table(rng)
        out = build_agreed_wide(table, {"u.s.": "usa"})
        flat = {(c.crisis_id, c.sentence_index, c.node_id, t) for c in out for t in c.tokens}
        assert flat == oracle_agreed_wide(table, {"u.s.": "usa"})
        shuffled = table[:]
        rng.shuffle(shuffled)
        assert build_agreed_wide(shuffled, {"u.s.": "usa"}) == out


# --- densest event


def test_densest_prefers_more_coded_nodes():
    five = do_event(index=1)
    three = do_event(index=0, abstentions=("units", "forces", "domains", "fatalities", "territory"))
    assert select_densest_event([three, five]) is five


def test_densest_tie_goes_to_earliest():
    a, b = do_event(index=1), do_event(index=0)
    assert select_densest_event([a, b]) is b


def test_densest_secondary_with_details_wins():
    think_nodes = tuple(n.id for n in CODEBOOK.nodes_for(EventClass.THINK))
    primary = CodedEvent(EventDraft(("c1", 0, 0), 0, "t", sentence_number=1), EventClass.THINK,
                         (USA,), (), "discovery", None, think_nodes)
    secondary = do_event(parent=primary.event_id)
    assert len(secondary.nodes) > len(primary.nodes)
    assert select_densest_event([primary, secondary]) is secondary


def test_densest_needs_events():
    with pytest.raises(ValueError):
        select_densest_event([])


# --- recall


def test_half_recall():
    consensus = [ConsensusCoding("c1", 1, "do_actor_a", ("cuba", "usa"))]
    report = compute_recall([do_event()], consensus, CODEBOOK)
    r = report.per_node["do_actor_a"]
    assert (r.hits, r.human_tokens, r.recall) == (1, 2, 0.5)


def test_superset_gives_full_recall():
    e = do_event(actor_a=(USA, USSR), details={"domains": "ground", "forces": "troops"})
    consensus = [
        ConsensusCoding("c1", 1, "do_actor_a", ("usa",)),
        ConsensusCoding("c1", 1, "do_behavior", ("mobilization",)),
        ConsensusCoding("c1", 1, "domains", ("ground",)),
    ]
    report = compute_recall([e], consensus, CODEBOOK)
    assert report.overall == 1.0 and report.macro == 1.0


def test_hit_needs_same_node():
    consensus = [ConsensusCoding("c1", 1, "do_actor_b", ("usa",))]
    assert compute_recall([do_event()], consensus, CODEBOOK).overall == 0.0


def test_abstained_node_emits_nothing():
    e = do_event(abstentions=("do_actor_a",))
    assert "do_actor_a" not in event_tokens(e, CODEBOOK)


def test_unknown_gold_node_listed_and_warned(caplog):
    consensus = [ConsensusCoding("c1", 1, "mood", ("calm",)), ConsensusCoding("c1", 1, "do_actor_a", ("usa",))]
    with caplog.at_level(logging.WARNING):
        report = compute_recall([do_event()], consensus, CODEBOOK)
    assert report.unknown_nodes == ["mood"] and "mood" in caplog.text
    assert report.overall == 1.0


def test_weighted_and_macro_differ():
    consensus = [
        ConsensusCoding("c1", 1, "do_actor_a", ("usa",)),
        ConsensusCoding("c1", 1, "do_actor_b", ("cuba", "france", "ussr")),
    ]
    report = compute_recall([do_event()], consensus, CODEBOOK)
    assert report.overall == pytest.approx(2 / 4)
    assert report.macro == pytest.approx((1 + 1 / 3) / 2)


def test_recall_matches_oracle():
    rng = random.Random(3)
    for _ in range(10):
        sentences, events = random_corpus(rng, max_sentences=20)
        consensus = random_consensus(rng, sentences, unknown_rate=0.1)
        report = compute_recall(events, consensus, CODEBOOK)
        got = {n: (r.hits, r.human_tokens) for n, r in report.per_node.items()}
        assert got == oracle_recall(events, consensus)


def test_recall_monotone_in_system_tokens():
    consensus = [ConsensusCoding("c1", 1, "do_actor_a", ("cuba", "usa"))]
    before = compute_recall([do_event()], consensus, CODEBOOK).per_node["do_actor_a"].recall
    after = compute_recall([do_event(actor_a=(USA, CUBA))], consensus, CODEBOOK).per_node["do_actor_a"].recall
    assert after >= before and after == 1.0


def test_recall_permutation_invariant():
    rng = random.Random(11)
    sentences, events = random_corpus(rng, max_sentences=30)
    consensus = random_consensus(rng, sentences)
    base = compute_recall(events, consensus, CODEBOOK).per_node
    rng.shuffle(events)
    rng.shuffle(consensus)
    assert compute_recall(events, consensus, CODEBOOK).per_node == base


def test_outside_envelope():
    consensus = [ConsensusCoding("c1", 1, "do_actor_a", ("usa",)), ConsensusCoding("c1", 1, "do_actor_b", ("usa",))]
    report = compute_recall([do_event()], consensus, CODEBOOK)
    assert report.outside_envelope() == ["do_actor_a", "do_actor_b"]


# --- confusion


def _think_gold(number, *tokens):
    return ConsensusCoding("c1", number, "thought_behavior", tuple(tokens))


def test_crisis_start_confused_with_discovery():
    system = [class_event(EventClass.THINK, "discovery", 1)]
    m = build_confusion(system, [_think_gold(1, "crisis_start")], EventClass.THINK, CODEBOOK)
    assert m.cell("crisis_start", "discovery") == 1
    assert m.top_confusions(1) == [("crisis_start", "discovery", 1)]


def test_agreement_is_diagonal():
    labels = ["fear", "discovery", "policy", "convinced"]
    system = [class_event(EventClass.THINK, lbl, i + 1) for i, lbl in enumerate(labels)]
    consensus = [_think_gold(i + 1, lbl) for i, lbl in enumerate(labels)]
    m = build_confusion(system, consensus, EventClass.THINK, CODEBOOK)
    assert m.eligible == 4 and not m.top_confusions()
    assert sum(m.cell(lbl, lbl) for lbl in labels) == 4


def test_ambiguous_sentences_not_eligible():
    system = [class_event(EventClass.THINK, "fear", 1), class_event(EventClass.THINK, "fear", 2),
              class_event(EventClass.THINK, "policy", 2, index=1)]
    consensus = [_think_gold(1, "fear", "policy"), _think_gold(2, "fear"), _think_gold(3, "fear")]
    m = build_confusion(system, consensus, EventClass.THINK, CODEBOOK)
    assert (m.eligible, m.total_candidates) == (0, 3)


def test_confusion_rejects_label_outside_vocabulary():
    with pytest.raises(ConfusionLabelError, match="dread"):
        build_confusion([], [_think_gold(1, "dread")], EventClass.THINK, CODEBOOK)


def test_confusion_conservation_and_pruning():
    rng = random.Random(5)
    labels = [o.canonical for o in CODEBOOK.behavior_node(EventClass.DO).options]
    system, consensus = [], []
    for n in range(1, 300):
        consensus.append(ConsensusCoding("c1", n, "do_behavior", tuple(rng.sample(labels[:8], rng.choice([1, 1, 2])))))
        for i in range(rng.choice([0, 1, 1, 2])):
            system.append(do_event(number=n, index=i, behavior=rng.choice(labels[:8])))
    m = build_confusion(system, consensus, EventClass.DO, CODEBOOK)
    assert sum(map(sum, m.counts)) == m.eligible <= m.total_candidates
    p = m.pruned(40)
    assert sum(map(sum, p.counts)) == p.eligible <= m.eligible
    assert all(m.gold_frequency[lbl] >= 40 for lbl in p.labels)


def test_published_eligibility_arithmetic():
    from icbellm.evaluator import ConfusionMatrix

    m = ConfusionMatrix(EventClass.DO, [], [], 3228, 10573)
    assert m.eligibility == pytest.approx(0.3053, abs=1e-4)


# --- QA


def _qa_event(number, verdicts):
    e = do_event(number=number)
    return CodedEvent(e.draft, e.event_class, e.actor_a, e.actor_b, e.behavior, e.do_details, e.nodes,
                      qa={n: QAVerdict(n, ok, "A" if ok else "B") for n, ok in verdicts.items()})


def test_qa_87_of_100():
    events = [_qa_event(i + 1, {"do_behavior": i < 87}) for i in range(100)]
    s = qa_stats(events)
    assert (s.accepted, s.total) == (87, 100) and s.overall == 0.87
    assert s.flagged == []


def test_qa_flags_weak_node():
    events = [_qa_event(i + 1, {"units": i >= 10, "do_behavior": True}) for i in range(19)]
    s = qa_stats(events, codebook=CODEBOOK)
    assert s.per_node["units"].rate == pytest.approx(9 / 19)
    assert s.flagged == ["units"]
    assert "speech_behavior" in s.not_applicable


def test_qa_empty():
    s = qa_stats([])
    assert s.per_node == {} and s.overall is None and s.total == 0


def test_qa_unavailable_counted_apart():
    e = do_event()
    e = CodedEvent(e.draft, e.event_class, e.actor_a, nodes=e.nodes,
                   qa={"do_actor_a": QAVerdict("do_actor_a", True, "", unavailable=True),
                       "do_behavior": QAVerdict("do_behavior", False, "B")})
    s = qa_stats([e])
    assert s.unavailable == 1 and s.total == 1 and s.overall == 0.0
