import logging
import shutil

import pytest

from icbellm.backend import CallCache
from icbellm.cli import main
from icbellm.evaluator import event_tokens, events_by_sentence, select_densest_event
from icbellm.ontology import load_default_codebook
from icbellm.records import CodedEvent, EventDraft, QAVerdict
from icbellm.store import read_events, read_manifest, write_events

from conftest import CRISIS_DIR, CRISIS_RULES, EXPECTED_EVENTS

NARRATIVES = CRISIS_DIR / "narratives.tsv"
GOLD_HEADER = "crisno\tsentence_number_int_aligned\tcoder\tcoder_tier\tvariable\tvalue\n"


def code(out, *extra):
    return main(["code", "--narratives", str(NARRATIVES), "--scripted", str(CRISIS_RULES),
                 "--out", str(out), *extra])


@pytest.fixture(scope="module")
def coded(tmp_path_factory):
    out = tmp_path_factory.mktemp("coded")
    assert code(out) == 0
    return out


def perfect_gold(path, events, extra_rows=""):
    """One expert coder who agrees exactly with the densest event per sentence."""
    book = load_default_codebook()
    rows = []
    for (crisis, number), group in sorted(events_by_sentence(events).items()):
        for node, tokens in event_tokens(select_densest_event(group), book).items():
            rows.append(f"{crisis}\t{number}\te1\texpert\t{node}\t{';'.join(sorted(tokens))}\n")
    path.write_text(GOLD_HEADER + "".join(rows) + extra_rows, encoding="utf-8")
    return path


def test_code_writes_expected_files(coded, capsys):
    assert (coded / "cmc.events.jsonl").read_bytes() == EXPECTED_EVENTS.read_bytes()
    assert (coded / "cmc.sentences.jsonl").read_bytes() == (CRISIS_DIR / "expected" / "cmc.sentences.jsonl").read_bytes()
    m = read_manifest(coded / "cmc.manifest.json")
    assert m.event_count == 17 and m.sentence_fallbacks == [2]


def test_missing_codebook_exits_nonzero(tmp_path, capsys):
    assert code(tmp_path, "--codebook", str(tmp_path / "nope.yaml")) != 0
    err = capsys.readouterr().err
    assert err.startswith("usage: icbellm") and "nope.yaml" in err


def test_no_backend_is_a_config_error(tmp_path, capsys):
    rc = main(["code", "--narratives", str(NARRATIVES), "--out", str(tmp_path)])
    assert rc == 2 and "no backend configured" in capsys.readouterr().err


def test_warm_cache_and_resume(tmp_path, capsys):
    assert code(tmp_path) == 0
    first = read_manifest(tmp_path / "cmc.manifest.json")
    capsys.readouterr()
    assert code(tmp_path) == 0
    again = read_manifest(tmp_path / "cmc.manifest.json")
    assert again.total_remote_calls == 0 and again.output_digest == first.output_digest
    assert "0 remote calls" in capsys.readouterr().err
    assert code(tmp_path, "--resume") == 0
    assert "already complete, skipped" in capsys.readouterr().err


def test_config_file(tmp_path):
    shutil.copy(CRISIS_RULES, tmp_path / "rules.yaml")
    cfg = tmp_path / "run.yaml"
    cfg.write_text("backend:\n  scripted: rules.yaml\nconcurrency: 2\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["code", "--narratives", str(NARRATIVES), "--config", str(cfg), "--out", str(out), "--no-cache"]) == 0
    assert (out / "cmc.events.jsonl").read_bytes() == EXPECTED_EVENTS.read_bytes()
    assert not (out / "calls.cache.jsonl").exists()


def test_eval_perfect_match(coded, tmp_path, capsys):
    gold = perfect_gold(tmp_path / "gold.tsv", read_events(coded / "cmc.events.jsonl"))
    out = tmp_path / "eval"
    assert main(["eval", "--events", str(coded), "--gold", str(gold), "--out", str(out)]) == 0
    assert "overall recall (token-weighted): 1.0000" in capsys.readouterr().out
    overall = dict(line.split("\t") for line in (out / "recall_overall.tsv").read_text().splitlines()[1:])
    assert overall["overall_token_weighted"] == "1.0000"
    assert (out / "recall.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_unknown_node_warns_but_succeeds(coded, tmp_path, caplog):
    gold = perfect_gold(tmp_path / "gold.tsv", read_events(coded / "cmc.events.jsonl"),
                        "cmc\t1\te1\texpert\tmood\tcalm\n")
    out = tmp_path / "eval"
    with caplog.at_level(logging.WARNING):
        rc = main(["eval", "--events", str(coded), "--gold", str(gold), "--out", str(out), "--no-plots"])
    assert rc == 0 and "mood" in caplog.text
    assert "warning: gold nodes not in the codebook: mood" in (out / "summary.txt").read_text()
    assert not (out / "recall.png").exists()


def test_confuse_prunes_rare_labels(coded, tmp_path, capsys):
    events = read_events(coded / "cmc.events.jsonl")
    do = [e for e in events if e.event_class.value == "Do" and e.behavior and not e.draft.is_secondary]
    rows = "".join(f"cmc\t{e.draft.sentence_number}\te1\texpert\tdo_behavior\t{e.behavior}\n" for e in do)
    gold = tmp_path / "gold.tsv"
    gold.write_text(GOLD_HEADER + rows, encoding="utf-8")
    out = tmp_path / "c"
    assert main(["confuse", "--events", str(coded), "--gold", str(gold), "--out", str(out),
                 "--min-count", "0", "--no-plots"]) == 0
    header = (out / "confusion_do.tsv").read_text().splitlines()[0].split("\t")
    assert len(header) == 17  # corner cell plus every do label
    assert main(["confuse", "--events", str(coded), "--gold", str(gold), "--out", str(out)]) == 0
    assert (out / "confusion_do.tsv").read_text() == "gold\\system\n"
    assert (out / "confusion_do.png").exists()
    assert "labels kept with min-count 5: 0 of 16" in capsys.readouterr().out


def test_qa_stats_87_of_100(tmp_path, capsys):
    template = read_events(EXPECTED_EVENTS)[0]
    events = []
    for i in range(100):
        draft = EventDraft(("x", 0, i), 0, template.draft.text, sentence_number=i + 1)
        events.append(CodedEvent(draft, template.event_class, template.actor_a, template.actor_b,
                                 template.behavior, template.do_details, template.nodes,
                                 qa={"do_behavior": QAVerdict("do_behavior", i < 87, "A")}))
    write_events(tmp_path / "x.events.jsonl", events)
    assert main(["qa-stats", "--events", str(tmp_path / "x.events.jsonl"), "--out", str(tmp_path)]) == 0
    assert "overall acceptance: 0.870 (87/100)" in capsys.readouterr().out
    rows = (tmp_path / "qa_stats.tsv").read_text().splitlines()
    assert rows[1] == "do_behavior\t87\t100\t0.8700\tno"
    assert (tmp_path / "qa_stats.png").exists()


def test_qa_stats_on_fixture(coded, tmp_path, capsys):
    assert main(["qa-stats", "--events", str(coded), "--out", str(tmp_path), "--no-plots"]) == 0
    assert "overall acceptance: 0.988 (80/81)" in capsys.readouterr().out


def test_report_html_has_secondary_row(coded, tmp_path):
    out = tmp_path / "cmc.html"
    assert main(["report", "--events", str(coded / "cmc.events.jsonl"), "--out", str(out)]) == 0
    page = out.read_text(encoding="utf-8")
    assert 'class="event secondary"' in page and "↳ " in page


def test_report_text(coded, capsys):
    assert main(["report", "--events", str(coded / "cmc.events.jsonl"), "--text"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "event\tcoding\tsource" and len(lines) == 18
    assert sum(line.startswith("↳") for line in lines) == 2


def test_report_missing_sentences(tmp_path, capsys):
    shutil.copy(EXPECTED_EVENTS, tmp_path / "cmc.events.jsonl")
    assert main(["report", "--events", str(tmp_path / "cmc.events.jsonl")]) == 2
    assert "--sentences" in capsys.readouterr().err


def test_cache_show_and_clear(tmp_path, capsys):
    assert code(tmp_path) == 0
    cache = tmp_path / "calls.cache.jsonl"
    n = len(CallCache(cache))
    capsys.readouterr()
    assert main(["cache", "show", "--cache", str(cache), "--limit", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == f"{n} entries in {cache}" and len(out) == 4
    assert main(["cache", "clear", "--cache", str(cache)]) == 0
    assert not cache.exists()


def test_confuse_keeps_frequent_labels(tmp_path, capsys):
    template = read_events(EXPECTED_EVENTS)[0]
    gold_labels = ["mobilization"] * 6 + ["deployment"] * 3 + ["attack"]
    system_labels = ["mobilization"] * 5 + ["deployment"] * 4 + ["attack"]
    events, rows = [], []
    for i, (g, s) in enumerate(zip(gold_labels, system_labels)):
        draft = EventDraft(("x", 0, i), 0, "text", sentence_number=i + 1)
        events.append(CodedEvent(draft, template.event_class, template.actor_a, (), s, None,
                                 ("do_behavior",)))
        rows.append(f"x\t{i + 1}\te1\texpert\tdo_behavior\t{g}\n")
    write_events(tmp_path / "x.events.jsonl", events)
    (tmp_path / "gold.tsv").write_text(GOLD_HEADER + "".join(rows), encoding="utf-8")
    assert main(["confuse", "--events", str(tmp_path), "--gold", str(tmp_path / "gold.tsv"),
                 "--out", str(tmp_path), "--class", "do"]) == 0
    assert (tmp_path / "confusion_do.tsv").read_text() == "gold\\system\tmobilization\nmobilization\t5\n"
    out = capsys.readouterr().out
    assert "eligible sentences: 10/10 (1.0000)" in out
    assert "labels kept with min-count 5: 1 of 16, 5 sentences in matrix" in out
