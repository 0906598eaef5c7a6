"""Persistence: versioned line-oriented record files and run manifests.

Every record file starts with a header line ``{"schema": ..., "version": N}``
followed by one JSON object per line. Whole-file writers go through a temp
file plus ``os.replace`` so readers never see a torn file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from .errors import ConfigError, SchemaError
from .records import CodedEvent, GoldCoding, Narrative, SentenceRecord, TIERS

log = logging.getLogger(__name__)

EVENTS_SCHEMA = "icbellm/events"
SENTENCES_SCHEMA = "icbellm/sentences"
CACHE_SCHEMA = "icbellm/cache"
MANIFEST_SCHEMA = "icbellm/run-manifest"
SCHEMA_VERSION = 1


def dumps_record(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _header(schema: str, **extra) -> str:
    return dumps_record({"schema": schema, "version": SCHEMA_VERSION, **extra})


def _read_lines(path: Path, schema: str) -> tuple[dict, list[tuple[int, dict]]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SchemaError(f"cannot read: {exc.strerror}", path) from None
    if not lines:
        raise SchemaError("empty file (missing header)", path, 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise SchemaError("malformed header", path, 1) from None
    if header.get("schema") != schema:
        raise SchemaError(f"expected schema {schema!r}, found {header.get('schema')!r}", path, 1)
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported schema version {header.get('version')!r} (expected {SCHEMA_VERSION})", path, 1
        )
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append((n, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed record: {exc.msg}", path, n) from None
    return header, records


# ---------------------------------------------------------------------------
# events


def event_lines(events: Iterable[CodedEvent]) -> list[str]:
    return [dumps_record(e.to_dict()) for e in events]


def output_digest(events: Iterable[CodedEvent]) -> str:
    """sha256 over the serialized event records; independent of headers."""
    h = hashlib.sha256()
    for line in event_lines(events):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_events(path: Path, events: list[CodedEvent], crisis_id: str | None = None) -> None:
    extra = {"crisis_id": crisis_id} if crisis_id is not None else {}
    body = [_header(EVENTS_SCHEMA, **extra)] + event_lines(events)
    atomic_write_text(Path(path), "\n".join(body) + "\n")


def read_events(path: Path) -> list[CodedEvent]:
    _, records = _read_lines(path, EVENTS_SCHEMA)
    events = []
    for n, rec in records:
        try:
            events.append(CodedEvent.from_dict(rec))
        except KeyError as exc:
            raise SchemaError(f"record missing field {exc.args[0]!r}", path, n) from None
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"invalid record: {exc}", path, n) from None
    return events


def read_events_dir(path: Path) -> list[CodedEvent]:
    path = Path(path)
    if path.is_file():
        return read_events(path)
    events: list[CodedEvent] = []
    for p in sorted(path.glob("*.events.jsonl")):
        events.extend(read_events(p))
    return events


# ---------------------------------------------------------------------------
# sentences and narratives


def write_sentences(path: Path, sentences: list[SentenceRecord]) -> None:
    body = [_header(SENTENCES_SCHEMA)] + [dumps_record(s.to_dict()) for s in sentences]
    atomic_write_text(Path(path), "\n".join(body) + "\n")


def read_sentences(path: Path) -> list[SentenceRecord]:
    _, records = _read_lines(path, SENTENCES_SCHEMA)
    out = []
    for n, rec in records:
        try:
            out.append(SentenceRecord.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid sentence record: {exc}", path, n) from None
    return out


def _delimiter_for(path: Path) -> str:
    return "," if path.suffix.lower() == ".csv" else "\t"


def read_narratives(manifest: Path) -> list[Narrative]:
    """Read a narratives manifest: a delimited table with crisis_id, title, file.

    ``file`` paths are relative to the manifest's directory.
    """
    manifest = Path(manifest)
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read narratives manifest {manifest}: {exc.strerror}") from None
    reader = csv.DictReader(text.splitlines(), delimiter=_delimiter_for(manifest))
    missing = {"crisis_id", "title", "file"} - set(reader.fieldnames or ())
    if missing:
        raise ConfigError(f"{manifest}: narratives manifest lacks column(s) {sorted(missing)}")
    out = []
    for n, row in enumerate(reader, start=2):
        body_path = manifest.parent / row["file"]
        try:
            body = body_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{manifest}:{n}: cannot read {body_path}: {exc.strerror}") from None
        try:
            out.append(Narrative(row["crisis_id"], row["title"], body))
        except ValueError as exc:
            raise ConfigError(f"{manifest}:{n}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    run_id: str
    crisis_id: str
    codebook_version: str
    backend_identity: str
    config_digest: str
    call_counts: dict[str, int] = field(default_factory=dict)
    remote_calls: dict[str, int] = field(default_factory=dict)
    sentence_fallbacks: list[int] = field(default_factory=list)
    abstentions: int = 0
    event_count: int = 0
    output_digest: str = ""
    started_at: str = ""
    finished_at: str = ""

    @property
    def total_remote_calls(self) -> int:
        return sum(self.remote_calls.values())


def write_manifest(path: Path, manifest: RunManifest) -> None:
    data = {"schema": MANIFEST_SCHEMA, "version": SCHEMA_VERSION, **asdict(manifest)}
    atomic_write_text(Path(path), json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def read_manifest(path: Path) -> RunManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest: {exc}", path) from None
    if data.pop("schema", None) != MANIFEST_SCHEMA or data.pop("version", None) != SCHEMA_VERSION:
        raise SchemaError("not a supported run manifest", path)
    return RunManifest(**data)


# ---------------------------------------------------------------------------
# completion cache file


def cache_header() -> str:
    return _header(CACHE_SCHEMA)


def read_cache_records(path: Path) -> list[dict]:
    """Records of an append-only cache file. A torn final line is skipped."""
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise SchemaError("malformed cache header", path, 1) from None
    if header.get("schema") != CACHE_SCHEMA or header.get("version") != SCHEMA_VERSION:
        raise SchemaError("not a supported cache file", path, 1)
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if n == len(lines):
                log.warning("%s:%d: skipping torn cache record", path, n)
                continue
            raise SchemaError("malformed cache record", path, n) from None
    return out


# ---------------------------------------------------------------------------
# gold data

REQUIRED_GOLD_FIELDS = ("crisis", "sentence", "coder", "node", "tokens")


@dataclass
class GoldMapping:
    """How columns of a gold table map onto GoldCoding fields."""

    columns: dict[str, str]
    delimiter: str = "\t"
    token_separator: str = ";"
    tier_values: dict[str, str] = field(default_factory=dict)
    coder_tiers: dict[str, str] = field(default_factory=dict)
    node_values: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = [f for f in REQUIRED_GOLD_FIELDS if f not in self.columns]
        if missing:
            raise ConfigError(f"gold mapping lacks column(s) for {missing}")
        if "tier" not in self.columns and not self.coder_tiers:
            raise ConfigError("gold mapping needs a 'tier' column or a coder_tiers table")

    @classmethod
    def from_dict(cls, d: dict) -> "GoldMapping":
        if not isinstance(d, dict) or "columns" not in d:
            raise ConfigError("gold mapping needs a 'columns' table")
        return cls(
            columns={str(k): str(v) for k, v in d["columns"].items()},
            delimiter=str(d.get("delimiter", "\t")),
            token_separator=str(d.get("token_separator", ";")),
            tier_values={str(k): str(v) for k, v in (d.get("tier_values") or {}).items()},
            coder_tiers={str(k): str(v) for k, v in (d.get("coder_tiers") or {}).items()},
            node_values={str(k): str(v) for k, v in (d.get("node_values") or {}).items()},
        )


def load_gold_mapping(path: Path | None) -> GoldMapping:
    if path is None:
        from importlib import resources

        with resources.as_file(resources.files("icbellm") / "data" / "gold_mapping.yaml") as p:
            return load_gold_mapping(p)
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read gold mapping {path}: {exc}") from None
    return GoldMapping.from_dict(data)


def ingest_gold(path: Path, mapping: GoldMapping) -> tuple[list[GoldCoding], list[tuple[int, str]]]:
    """Read a delimited gold table. Returns (records, dropped) where dropped
    lists (line number, reason) for every row that was not kept."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read gold file {path}: {exc.strerror}") from None
    reader = csv.DictReader(text.splitlines(), delimiter=mapping.delimiter)
    header = set(reader.fieldnames or ())
    absent = sorted(c for c in mapping.columns.values() if c not in header)
    if absent:
        raise ConfigError(f"{path}: mapped column(s) {absent} not present in gold header")
    cols = mapping.columns
    records: list[GoldCoding] = []
    dropped: list[tuple[int, str]] = []
    for n, row in enumerate(reader, start=2):
        coder = (row.get(cols["coder"]) or "").strip()
        if "tier" in cols:
            raw_tier = (row.get(cols["tier"]) or "").strip()
            tier = mapping.tier_values.get(raw_tier, raw_tier.lower())
        else:
            tier = mapping.coder_tiers.get(coder, "")
        if tier not in TIERS:
            dropped.append((n, f"unknown coder tier {tier!r}"))
            continue
        try:
            sentence = int(str(row.get(cols["sentence"], "")).strip())
        except ValueError:
            dropped.append((n, "sentence index is not an integer"))
            continue
        cell = row.get(cols["tokens"]) or ""
        tokens = tuple(t.strip() for t in cell.split(mapping.token_separator) if t.strip())
        if not tokens:
            dropped.append((n, "blank token cell"))
            continue
        node = (row.get(cols["node"]) or "").strip()
        node = mapping.node_values.get(node, node)
        crisis = (row.get(cols["crisis"]) or "").strip()
        if not crisis or not coder or not node:
            dropped.append((n, "missing crisis, coder or node value"))
            continue
        records.append(GoldCoding(crisis, sentence, coder, tier, node, tokens))
    for n, reason in dropped:
        log.warning("%s:%d: dropped gold row: %s", path, n, reason)
    return records, dropped
