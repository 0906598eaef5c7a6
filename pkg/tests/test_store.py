import json
import random

import pytest

from icbellm.errors import ConfigError, SchemaError
from icbellm.store import (
    GoldMapping,
    RunManifest,
    ingest_gold,
    load_gold_mapping,
    output_digest,
    read_events,
    read_events_dir,
    read_manifest,
    read_narratives,
    read_sentences,
    write_events,
    write_manifest,
    write_sentences,
)

from conftest import CRISIS_DIR, EXPECTED_EVENTS, FIXTURES
from synth import random_corpus

GOLD = FIXTURES / "gold" / "small.tsv"


def test_events_round_trip_byte_identical(tmp_path):
    events = read_events(EXPECTED_EVENTS)
    out = tmp_path / "e.jsonl"
    write_events(out, events, crisis_id="cmc")
    assert out.read_bytes() == EXPECTED_EVENTS.read_bytes()
    assert read_events(out) == events


def test_random_events_round_trip(tmp_path):
    rng = random.Random(2)
    for i in range(10):
        sentences, events = random_corpus(rng, max_sentences=10)
        write_events(tmp_path / f"{i}.events.jsonl", events)
        write_sentences(tmp_path / f"{i}.sentences.jsonl", sentences)
        assert read_events(tmp_path / f"{i}.events.jsonl") == events
        assert read_sentences(tmp_path / f"{i}.sentences.jsonl") == sentences


def test_version_mismatch(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"schema":"icbellm/events","version":999}\n', encoding="utf-8")
    with pytest.raises(SchemaError, match="version 999"):
        read_events(p)


def test_wrong_schema(tmp_path):
    p = tmp_path / "e.jsonl"
    write_sentences(p, [])
    with pytest.raises(SchemaError, match="expected schema"):
        read_events(p)


def test_missing_event_class_names_line(tmp_path):
    lines = EXPECTED_EVENTS.read_text(encoding="utf-8").splitlines()
    rec = json.loads(lines[3])
    del rec["event_class"]
    lines[3] = json.dumps(rec)
    p = tmp_path / "e.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError, match=r"e\.jsonl:4: record missing field 'event_class'") as info:
        read_events(p)
    assert info.value.line == 4


def test_malformed_json_names_line(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"schema":"icbellm/events","version":1}\n{oops\n', encoding="utf-8")
    with pytest.raises(SchemaError) as info:
        read_events(p)
    assert info.value.line == 2


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("", encoding="utf-8")
    with pytest.raises(SchemaError, match="missing header"):
        read_events(p)


def test_read_events_dir(tmp_path):
    events = read_events(EXPECTED_EVENTS)
    write_events(tmp_path / "b.events.jsonl", events[:3])
    write_events(tmp_path / "a.events.jsonl", events[3:])
    assert read_events_dir(tmp_path) == events[3:] + events[:3]


def test_output_digest_ignores_header(tmp_path):
    events = read_events(EXPECTED_EVENTS)
    assert output_digest(events) == output_digest(list(events))
    assert output_digest(events) != output_digest(events[1:])


def test_manifest_round_trip(tmp_path):
    m = RunManifest("r1", "cmc", "1", "scripted:x", "abc", {"code": 3}, {"code": 1}, [2], 1, 17, "d", "t0", "t1")
    write_manifest(tmp_path / "m.json", m)
    assert read_manifest(tmp_path / "m.json") == m
    assert m.total_remote_calls == 1


def test_narratives_manifest():
    (n,) = read_narratives(CRISIS_DIR / "narratives.tsv")
    assert n.crisis_id == "cmc" and n.body.count("\n\n") == 2


def test_narratives_manifest_errors(tmp_path):
    p = tmp_path / "n.tsv"
    p.write_text("crisis_id\ttitle\nx\ty\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="lacks column"):
        read_narratives(p)
    p.write_text("crisis_id\ttitle\tfile\nx\ty\tmissing.txt\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=r"n\.tsv:2: cannot read"):
        read_narratives(p)


def test_ingest_ten_rows():
    records, dropped = ingest_gold(GOLD, load_gold_mapping(None))
    assert len(records) == 10 and dropped == []
    assert records[2].tokens == ("ussr", "Cuba")
    assert {r.coder_tier for r in records} == {"expert", "novice", "trained"}


def test_blank_tokens_dropped_with_reason(tmp_path):
    p = tmp_path / "g.tsv"
    text = GOLD.read_text(encoding="utf-8") + "cmc\t4\te1\texpert\tunits\t ; \n"
    p.write_text(text, encoding="utf-8")
    records, dropped = ingest_gold(p, load_gold_mapping(None))
    assert len(records) == 10
    assert dropped == [(12, "blank token cell")]


def test_unknown_tier_dropped(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text(GOLD.read_text(encoding="utf-8") + "cmc\t4\tz\tintern\tunits\t5\n", encoding="utf-8")
    _, dropped = ingest_gold(p, load_gold_mapping(None))
    assert dropped[0][0] == 12 and "tier" in dropped[0][1]


def test_mapping_without_tier_is_a_config_error():
    with pytest.raises(ConfigError, match="tier"):
        GoldMapping({"crisis": "c", "sentence": "s", "coder": "k", "node": "v", "tokens": "t"})


def test_mapping_with_coder_tier_table(tmp_path):
    mapping = GoldMapping({"crisis": "crisno", "sentence": "sentence_number_int_aligned", "coder": "coder",
                           "node": "variable", "tokens": "value"},
                          coder_tiers={"e1": "expert", "n1": "novice", "n2": "novice", "t1": "trained"})
    records, dropped = ingest_gold(GOLD, mapping)
    assert len(records) == 10 and not dropped


def test_mapped_column_absent_from_header(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("crisno\tcoder\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="not present"):
        ingest_gold(p, load_gold_mapping(None))


def test_writer_leaves_no_temp_files(tmp_path):
    write_events(tmp_path / "e.jsonl", read_events(EXPECTED_EVENTS))
    assert [p.name for p in tmp_path.iterdir()] == ["e.jsonl"]
