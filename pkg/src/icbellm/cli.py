"""Command-line entry point.

  icbellm code      --narratives manifest.tsv --out runs/ [--scripted rules.yaml | --endpoint URL]
  icbellm eval      --events runs/ --gold gold.tsv --out reports/
  icbellm confuse   --events runs/ --gold gold.tsv --class do --min-count 5
  icbellm qa-stats  --events runs/ --threshold 0.6
  icbellm report    --events runs/X.events.jsonl [--text]
  icbellm cache     show|clear --cache calls.jsonl

Exit status is 0 unless configuration is wrong (2); data-quality problems
are reported as warnings only.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .backend import Backend, CallCache, HTTPBackend, ScriptedBackend
from .errors import ConfigError, IcbeError
from .evaluator import (
    QA_ALERT_THRESHOLD,
    RECALL_ENVELOPE,
    build_agreed_wide,
    build_confusion,
    compute_recall,
    qa_stats,
)
from .extractor import RunConfig, run_pipeline
from .normalize import AliasTable
from .ontology import (
    Codebook,
    EventClass,
    build_alias_table,
    load_actors,
    load_codebook,
    load_default_codebook,
)
from .store import (
    atomic_write_text,
    ingest_gold,
    load_gold_mapping,
    read_events,
    read_events_dir,
    read_manifest,
    read_narratives,
    read_sentences,
    write_events,
    write_manifest,
    write_sentences,
)

log = logging.getLogger("icbellm")

EXIT_CONFIG = 2
DEFAULT_CACHE_NAME = "calls.cache.jsonl"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Settings:
    """Run configuration after merging the config file and flags."""

    endpoint: str | None = None
    model: str = ""
    token_env: str = "ICBELLM_API_TOKEN"
    timeout: float = 120.0
    max_retries: int = 3
    scripted: Path | None = None
    concurrency: int = 4
    codebook: Path | None = None
    actors: Path | None = None
    aliases: Path | None = None
    cache: Path | None = None
    run: RunConfig = field(default_factory=RunConfig)


def _path(value: Any, base: Path) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else base / p


def load_settings(path: Path | None) -> Settings:
    s = Settings()
    if path is None:
        return s
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    base = path.parent
    backend = data.get("backend") or {}
    s.endpoint = backend.get("endpoint")
    s.model = str(backend.get("model") or "")
    s.token_env = str(backend.get("token_env") or s.token_env)
    s.timeout = float(backend.get("timeout", s.timeout))
    s.max_retries = int(backend.get("max_retries", s.max_retries))
    s.scripted = _path(backend.get("scripted"), base)
    s.concurrency = int(data.get("concurrency", s.concurrency))
    s.codebook = _path(data.get("codebook"), base)
    s.actors = _path(data.get("actors"), base)
    s.aliases = _path(data.get("aliases"), base)
    s.cache = _path(data.get("cache"), base)
    window = data.get("context_window", "paragraph")
    if window != "paragraph":
        try:
            window = int(window)
        except (TypeError, ValueError):
            raise ConfigError(f"context_window must be 'paragraph' or an integer, got {window!r}") from None
    run = RunConfig(
        temperature=float(data.get("temperature", 0.0)),
        context_window=window,
        multi_actor=bool(data.get("multi_actor", False)),
        include_noncore=bool(data.get("include_noncore", True)),
    )
    if data.get("paragraph_pattern"):
        run.paragraph_pattern = str(data["paragraph_pattern"])
    s.run = run
    return s


def _codebook(path: Path | None) -> Codebook:
    return load_codebook(path) if path else load_default_codebook()


def _aliases(actors_path: Path | None, aliases_path: Path | None, codebook: Codebook) -> AliasTable:
    table = build_alias_table(load_actors(actors_path), codebook)
    if aliases_path is not None:
        try:
            extra = yaml.safe_load(aliases_path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read alias table {aliases_path}: {exc}") from None
        if not isinstance(extra, dict):
            raise ConfigError(f"alias table {aliases_path} must map alias -> canonical")
        try:
            table = table.merged({str(k): str(v) for k, v in extra.items()})
        except ValueError as exc:
            raise ConfigError(f"alias table {aliases_path}: {exc}") from None
    return table


def make_backend(s: Settings, cache: CallCache | None) -> Backend:
    if s.scripted is not None:
        return ScriptedBackend.from_file(s.scripted, cache=cache, max_in_flight=s.concurrency)
    if s.endpoint:
        return HTTPBackend(s.endpoint, s.model, s.token_env, s.timeout, s.max_retries,
                           cache=cache, max_in_flight=s.concurrency)
    raise ConfigError("no backend configured: pass --scripted RULES or --endpoint URL")


def write_tsv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_cell(v) for v in row))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_code(args) -> int:
    s = load_settings(args.config)
    if args.codebook:
        s.codebook = args.codebook
    if args.scripted:
        s.scripted, s.endpoint = args.scripted, None
    if args.endpoint:
        s.endpoint, s.scripted = args.endpoint, None
    if args.model:
        s.model = args.model
    if args.jobs:
        s.concurrency = args.jobs
    if args.temperature is not None:
        s.run.temperature = args.temperature
    s.run.jobs = s.concurrency

    codebook = _codebook(s.codebook)
    actors = load_actors(s.actors)
    narratives = read_narratives(args.narratives)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache_path = None if args.no_cache else (args.cache or s.cache or out / DEFAULT_CACHE_NAME)
    backend = make_backend(s, CallCache(cache_path) if cache_path else None)

    for narrative in narratives:
        stem = out / narrative.crisis_id
        events_path = stem.with_name(stem.name + ".events.jsonl")
        manifest_path = stem.with_name(stem.name + ".manifest.json")
        if args.resume and events_path.exists() and manifest_path.exists():
            try:
                done = read_manifest(manifest_path)
            except IcbeError:
                done = None
            if done and done.config_digest == s.run.digest() and done.backend_identity == backend.identity:
                print(f"[{narrative.crisis_id}] already complete, skipped", file=sys.stderr)
                continue
        result = run_pipeline(narrative, codebook, backend, s.run, actors)
        write_sentences(stem.with_name(stem.name + ".sentences.jsonl"), result.sentences)
        write_events(events_path, result.events, narrative.crisis_id)
        write_manifest(manifest_path, result.manifest)
        m = result.manifest
        counts = ", ".join(f"{k}={v}" for k, v in m.call_counts.items())
        print(
            f"[{narrative.crisis_id}] {len(result.sentences)} sentences, {m.event_count} events, "
            f"{m.abstentions} abstentions, {m.total_remote_calls} remote calls ({counts})",
            file=sys.stderr,
        )
        if m.sentence_fallbacks:
            print(f"[{narrative.crisis_id}] rule-based splitter used for paragraphs "
                  f"{m.sentence_fallbacks}", file=sys.stderr)
    return 0


def _eval_inputs(args):
    codebook = _codebook(args.codebook)
    aliases = _aliases(args.actors, args.aliases, codebook)
    events = read_events_dir(args.events)
    mapping = load_gold_mapping(args.mapping)
    gold, dropped = ingest_gold(args.gold, mapping)
    for line, reason in dropped:
        log.warning("gold row %d dropped: %s", line, reason)
    consensus = build_agreed_wide(gold, aliases, pool_trained=args.pool_trained)
    return codebook, aliases, events, consensus


def cmd_eval(args) -> int:
    codebook, aliases, events, consensus = _eval_inputs(args)
    report = compute_recall(events, consensus, codebook, aliases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[n, r.hits, r.human_tokens, r.recall] for n, r in report.per_node.items()]
    write_tsv(out / "recall_by_node.tsv", ["node", "hits", "human_tokens", "recall"], rows)
    write_tsv(out / "recall_overall.tsv", ["measure", "value"], [
        ["hits", report.hits],
        ["human_tokens", report.human_tokens],
        ["overall_token_weighted", report.overall],
        ["node_macro_average", report.macro],
        ["sentences_covered", report.sentences_covered],
    ])
    lo, hi = RECALL_ENVELOPE
    summary = [
        f"sentences covered: {report.sentences_covered}",
        f"consensus tokens: {report.human_tokens}",
        f"overall recall (token-weighted): {report.overall:.4f}",
        f"overall recall (node average): {report.macro:.4f}",
    ]
    for node in report.outside_envelope():
        summary.append(f"note: {node} recall {report.per_node[node].recall:.4f} is outside [{lo}, {hi}]")
    if report.unknown_nodes:
        summary.append("warning: gold nodes not in the codebook: " + ", ".join(report.unknown_nodes))
    text = "\n".join(summary) + "\n"
    atomic_write_text(out / "summary.txt", text)
    if not args.no_plots:
        from .plotting import plot_recall
        plot_recall(report, out / "recall.png")
    sys.stdout.write(text)
    return 0


def cmd_confuse(args) -> int:
    codebook, _, events, consensus = _eval_inputs(args)
    cls = EventClass.parse(args.event_class)
    full = build_confusion(events, consensus, cls, codebook)
    matrix = full.pruned(args.min_count) if args.min_count > 0 else full
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = f"confusion_{cls.value.lower()}"
    rows = [[lbl] + row for lbl, row in zip(matrix.labels, matrix.counts)]
    write_tsv(out / f"{name}.tsv", ["gold\\system"] + matrix.labels, rows)
    if not args.no_plots:
        from .plotting import plot_confusion
        plot_confusion(matrix, out / f"{name}.png")
    print(f"eligible sentences: {full.eligible}/{full.total_candidates} ({full.eligibility:.4f})")
    print(f"labels kept with min-count {args.min_count}: {len(matrix.labels)} of {len(full.labels)}, "
          f"{matrix.eligible} sentences in matrix")
    for gold, system, n in matrix.top_confusions():
        print(f"  {gold} -> {system}: {n}")
    return 0


def cmd_qa_stats(args) -> int:
    codebook = _codebook(args.codebook)
    events = read_events_dir(args.events)
    stats = qa_stats(events, args.threshold, codebook)
    rows = [[n, q.accepted, q.total, q.rate, "yes" if q.flagged else "no"] for n, q in stats.per_node.items()]
    rows += [[n, 0, 0, "n/a", "n/a"] for n in stats.not_applicable]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "qa_stats.tsv", ["node", "accepted", "verdicts", "acceptance", "flagged"], rows)
    if not args.no_plots and stats.per_node:
        from .plotting import plot_qa
        plot_qa(stats, out / "qa_stats.png")
    overall = "n/a" if stats.overall is None else f"{stats.overall:.3f}"
    print(f"overall acceptance: {overall} ({stats.accepted}/{stats.total})")
    if stats.unavailable:
        print(f"verdicts unavailable: {stats.unavailable}")
    for n in stats.flagged:
        print(f"flagged below {stats.threshold:.2f}: {n} ({stats.per_node[n].rate:.3f})")
    return 0


def cmd_report(args) -> int:
    from .reporter import render_text_table, render_timeline

    events_path = Path(args.events)
    events = read_events(events_path)
    sentences_path = args.sentences or events_path.with_name(
        events_path.name.replace(".events.jsonl", ".sentences.jsonl"))
    if not Path(sentences_path).exists():
        raise ConfigError(f"sentence table {sentences_path} not found; pass --sentences")
    sentences = read_sentences(Path(sentences_path))
    if args.text:
        sys.stdout.write(render_text_table(events, sentences))
        return 0
    title = args.title or (events[0].draft.sentence_ref[0] if events else "Event timeline")
    doc = render_timeline(events, sentences, title=title)
    out = Path(args.out) if args.out else events_path.with_name(
        events_path.name.replace(".events.jsonl", ".html"))
    atomic_write_text(out, doc)
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_cache(args) -> int:
    cache = CallCache(args.cache)
    if args.action == "clear":
        n = len(cache)
        cache.clear()
        print(f"cleared {n} entries from {args.cache}")
        return 0
    entries = cache.entries()
    print(f"{len(entries)} entries in {args.cache}")
    for e in entries[: args.limit]:
        preview = e.response.text.replace("\n", "\\n")[:60]
        print(f"{e.key[:12]}\t{e.model}\t{e.created_at}\t{preview}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", type=Path, required=True, help="events file or directory of *.events.jsonl")
    p.add_argument("--gold", type=Path, required=True, help="delimited gold coding table")
    p.add_argument("--mapping", type=Path, help="gold column mapping (YAML); default ICBe layout")
    p.add_argument("--aliases", type=Path, help="extra alias table (YAML alias: canonical)")
    p.add_argument("--actors", type=Path, help="actor registry (YAML); default shipped table")
    p.add_argument("--codebook", type=Path, help="codebook file; default shipped codebook")
    p.add_argument("--pool-trained", action="store_true",
                   help="count trained coders as experts when building consensus")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icbellm", description="Crisis narrative event coding with an LLM backend.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("code", help="run the coding pipeline over narratives")
    p.add_argument("--narratives", type=Path, required=True, help="manifest with crisis_id, title, file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--codebook", type=Path, help="codebook file; default shipped codebook")
    p.add_argument("--scripted", type=Path, help="scripted rules file (deterministic backend)")
    p.add_argument("--endpoint", help="completion endpoint URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--temperature", type=float)
    p.add_argument("--jobs", type=int, help="max concurrent backend calls")
    p.add_argument("--cache", type=Path, help=f"call cache file; default OUT/{DEFAULT_CACHE_NAME}")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--resume", action="store_true", help="skip crises already completed with this config")
    p.set_defaults(func=cmd_code)

    p = sub.add_parser("eval", help="token recall against Agreed-Wide gold consensus")
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("confuse", help="behavior confusion matrix for one event class")
    _eval_flags(p)
    p.add_argument("--class", dest="event_class", default="do", help="think, say or do")
    p.add_argument("--min-count", type=int, default=5, help="keep labels with at least this many gold uses")
    p.set_defaults(func=cmd_confuse)

    p = sub.add_parser("qa-stats", help="QA acceptance rates per node")
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--codebook", type=Path)
    p.add_argument("--threshold", type=float, default=QA_ALERT_THRESHOLD)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_qa_stats)

    p = sub.add_parser("report", help="render a crisis timeline")
    p.add_argument("--events", type=Path, required=True, help="one crisis's events file")
    p.add_argument("--sentences", type=Path, help="sentence table; default sibling file")
    p.add_argument("--out", type=Path, help="HTML output path")
    p.add_argument("--title")
    p.add_argument("--text", action="store_true", help="plain-text table on stdout instead of HTML")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cache", help="inspect or clear a call cache")
    p.add_argument("action", choices=["show", "clear"])
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IcbeError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"icbellm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
