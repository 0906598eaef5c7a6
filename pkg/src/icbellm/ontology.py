"""The event ontology as data: classes, coded nodes, option vocabularies and
the prompt templates that drive every pipeline stage.

The codebook lives in a YAML file (see ``data/codebook.yaml``) so that the
vocabulary and prompts can be edited without touching code.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import CodebookError
from .normalize import AliasTable, clean_token

SUPPORTED_VERSIONS = ("1",)

STAGES = (
    "sentence_split",
    "disaggregate",
    "compound_check",
    "compound_rewrite",
    "event_class",
    "code",
    "qa",
)
# stages whose prompts are answered by picking from a list
CHOICE_STAGES = ("compound_check", "event_class", "qa")

PLACEHOLDERS = frozenset(
    {"task", "context", "event_text", "options", "question", "answer_form",
     "previous", "answer", "link", "node"}
)
_PLACEHOLDER = re.compile(r"\{(\w+)\}")

NODE_KINDS = ("actor_a", "actor_b", "behavior", "detail")
ANSWER_MODES = ("multiple_choice", "open_ended")


class EventClass(str, enum.Enum):
    THINK = "Think"
    SAY = "Say"
    DO = "Do"

    @classmethod
    def parse(cls, value: str) -> "EventClass":
        for member in cls:
            if value == member.value or str(value).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown event class {value!r}")


@dataclass(frozen=True)
class OptionLabel:
    canonical: str
    display: str
    aliases: tuple[str, ...] = ()
    provisional: bool = False

    @classmethod
    def from_display(cls, display: str, aliases=(), provisional=False) -> "OptionLabel":
        return cls(clean_token(display), display, tuple(aliases), provisional)


@dataclass(frozen=True)
class OntologyNode:
    id: str
    label: str
    event_class: EventClass
    kind: str
    answer_mode: str
    question: str
    answer_form: str = ""
    options: tuple[OptionLabel, ...] = ()
    # non-core nodes are coded but are not among the evaluated nodes
    core: bool = True

    @property
    def is_choice(self) -> bool:
        return self.answer_mode == "multiple_choice"


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    question_part: str
    answer_drafting_part: str

    def render(self, **values: str) -> str:
        """Fill placeholders. Unknown placeholders render empty."""

        def fill(part: str) -> str:
            return _PLACEHOLDER.sub(lambda m: str(values.get(m.group(1), "")), part)

        question = fill(self.question_part).rstrip()
        answer = fill(self.answer_drafting_part)
        return f"{question}\n\n{answer}" if answer else question


@dataclass(frozen=True)
class Actor:
    canonical_name: str
    display_name: str
    country_code: str | None = None
    label: str | None = None

    def __post_init__(self):
        if not self.canonical_name or clean_token(self.canonical_name) != self.canonical_name:
            raise ValueError(f"actor canonical name {self.canonical_name!r} is not normalized")

    @property
    def short_label(self) -> str:
        return self.label or self.canonical_name.upper()


@dataclass(frozen=True)
class Codebook:
    version: str
    nodes: tuple[OntologyNode, ...]
    templates: dict[str, PromptTemplate]
    # (node id or None, stage) -> template id; None is the stage-wide default
    prompt_templates: dict[tuple[str | None, str], str]
    _by_id: dict[str, OntologyNode] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id.update({n.id: n for n in self.nodes})

    def node(self, node_id: str) -> OntologyNode:
        if node_id in self._by_id:
            return self._by_id[node_id]
        for n in self.nodes:
            if n.label == node_id:
                return n
        raise KeyError(f"unknown ontology node {node_id!r}")

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def nodes_for(self, event_class: EventClass) -> list[OntologyNode]:
        """Coding order for one class: actors, behavior, then details."""
        order = {k: i for i, k in enumerate(NODE_KINDS)}
        mine = [n for n in self.nodes if n.event_class == event_class]
        return sorted(mine, key=lambda n: order[n.kind])

    def behavior_node(self, event_class: EventClass) -> OntologyNode:
        return next(n for n in self.nodes if n.event_class == event_class and n.kind == "behavior")

    @property
    def behavior_vocab(self) -> dict[EventClass, tuple[OptionLabel, ...]]:
        return {c: self.behavior_node(c).options for c in EventClass}

    @property
    def core_nodes(self) -> list[OntologyNode]:
        return [n for n in self.nodes if n.core]

    def template_for(self, stage: str, node_id: str | None = None) -> PromptTemplate:
        key = self.prompt_templates.get((node_id, stage)) or self.prompt_templates.get((None, stage))
        if key is None:
            raise CodebookError(f"no prompt template bound for stage {stage!r} node {node_id!r}")
        return self.templates[key]

    def option_aliases(self) -> AliasTable:
        pairs = []
        for n in self.nodes:
            for opt in n.options:
                pairs.extend((a, opt.canonical) for a in opt.aliases)
        return AliasTable(pairs)


def options_for(codebook: Codebook, node_id: str) -> list[OptionLabel]:
    """Options of a node in codebook order; empty for open-ended nodes."""
    return list(codebook.node(node_id).options)


# ---------------------------------------------------------------------------
# loading


def _require(obj: dict, key: str, where: str):
    if key not in obj or obj[key] in (None, ""):
        raise CodebookError(f"missing required field {key!r}", where)
    return obj[key]


def _parse_option(raw: Any, where: str) -> OptionLabel:
    if isinstance(raw, str):
        raw = {"display": raw}
    if not isinstance(raw, dict):
        raise CodebookError("option must be a string or mapping", where)
    display = str(_require(raw, "display", where))
    canonical = clean_token(display)
    if "canonical" in raw and raw["canonical"] != canonical:
        raise CodebookError(
            f"canonical {raw['canonical']!r} is not the normalized display {canonical!r}", where
        )
    aliases = tuple(str(a) for a in raw.get("aliases") or ())
    seen = {canonical}
    for a in aliases:
        key = clean_token(a)
        if key in seen:
            raise CodebookError(f"alias {a!r} duplicates another label of option {display!r}", where)
        seen.add(key)
    return OptionLabel(canonical, display, aliases, bool(raw.get("provisional", False)))


def _parse_node(raw: dict, where: str) -> OntologyNode:
    if not isinstance(raw, dict):
        raise CodebookError("node must be a mapping", where)
    node_id = str(_require(raw, "id", where))
    try:
        event_class = EventClass.parse(_require(raw, "event_class", where))
    except ValueError as exc:
        raise CodebookError(str(exc), where) from None
    kind = _require(raw, "kind", where)
    if kind not in NODE_KINDS:
        raise CodebookError(f"kind must be one of {NODE_KINDS}, got {kind!r}", where)
    mode = _require(raw, "answer_mode", where)
    if mode not in ANSWER_MODES:
        raise CodebookError(f"answer_mode must be one of {ANSWER_MODES}, got {mode!r}", where)
    options = tuple(
        _parse_option(o, f"{where}.options[{i}]") for i, o in enumerate(raw.get("options") or ())
    )
    if mode == "open_ended" and options:
        raise CodebookError("open_ended node must not list options", where)
    if mode == "multiple_choice":
        if len(options) < 2:
            raise CodebookError("multiple_choice node needs at least 2 options", where)
        seen: dict[str, str] = {}
        for i, opt in enumerate(options):
            for label in (opt.canonical, *map(clean_token, opt.aliases)):
                if label in seen:
                    raise CodebookError(
                        f"duplicate option {label!r} (also used by {seen[label]!r})",
                        f"{where}.options[{i}]",
                    )
                seen[label] = opt.display
    return OntologyNode(
        id=node_id,
        label=str(raw.get("label") or node_id),
        event_class=event_class,
        kind=kind,
        answer_mode=mode,
        question=str(_require(raw, "question", where)),
        answer_form=str(raw.get("answer_form") or ""),
        options=options,
        core=bool(raw.get("core", True)),
    )


def codebook_from_dict(data: Any, source: str = "<codebook>") -> Codebook:
    if not isinstance(data, dict):
        raise CodebookError("codebook must be a mapping", source)
    version = str(data.get("version", ""))
    if version not in SUPPORTED_VERSIONS:
        raise CodebookError(
            f"unsupported codebook version {version!r} (supported: {', '.join(SUPPORTED_VERSIONS)})",
            f"{source}:version",
        )
    raw_nodes = data.get("nodes") or []
    if not raw_nodes:
        raise CodebookError("empty ontology", f"{source}:nodes")
    nodes = []
    ids: set[str] = set()
    for i, raw in enumerate(raw_nodes):
        node = _parse_node(raw, f"{source}:nodes[{i}]")
        if node.id in ids:
            raise CodebookError(f"duplicate node id {node.id!r}", f"{source}:nodes[{i}]")
        ids.add(node.id)
        nodes.append(node)

    for event_class in EventClass:
        kinds = [n.kind for n in nodes if n.event_class == event_class]
        if kinds.count("behavior") != 1:
            raise CodebookError(f"class {event_class.value} needs exactly one behavior node", source)
        if kinds.count("actor_a") != 1:
            raise CodebookError(f"class {event_class.value} needs exactly one actor_a node", source)

    templates: dict[str, PromptTemplate] = {}
    for i, raw in enumerate(data.get("templates") or []):
        where = f"{source}:templates[{i}]"
        tid = str(_require(raw, "id", where))
        if tid in templates:
            raise CodebookError(f"duplicate template id {tid!r}", where)
        tpl = PromptTemplate(tid, str(_require(raw, "question", where)), str(raw.get("answer") or ""))
        for part in (tpl.question_part, tpl.answer_drafting_part):
            unknown = set(_PLACEHOLDER.findall(part)) - PLACEHOLDERS
            if unknown:
                raise CodebookError(f"unknown placeholder(s) {sorted(unknown)}", where)
        templates[tid] = tpl

    bindings: dict[tuple[str | None, str], str] = {}
    for i, raw in enumerate(data.get("bindings") or []):
        where = f"{source}:bindings[{i}]"
        stage = _require(raw, "stage", where)
        if stage not in STAGES:
            raise CodebookError(f"unknown stage {stage!r}", where)
        node_id = raw.get("node")
        if node_id is not None and node_id not in ids:
            raise CodebookError(f"template binding references unknown node {node_id!r}", where)
        tid = _require(raw, "template", where)
        if tid not in templates:
            raise CodebookError(f"binding references unknown template {tid!r}", where)
        if (node_id, stage) in bindings:
            raise CodebookError(f"duplicate binding for stage {stage!r} node {node_id!r}", where)
        bindings[(node_id, stage)] = tid

    book = Codebook(version, tuple(nodes), templates, bindings)
    for stage in STAGES:
        if stage == "code":
            continue
        if (None, stage) not in bindings:
            raise CodebookError(f"no template bound for stage {stage!r}", source)
    for node in nodes:
        if (node.id, "code") not in bindings and (None, "code") not in bindings:
            raise CodebookError(f"no code template for node {node.id!r}", source)
    drafted = [book.template_for(s) for s in CHOICE_STAGES]
    drafted += [book.template_for("code", n.id) for n in nodes if n.is_choice]
    for tpl in drafted:
        if not tpl.answer_drafting_part.strip():
            raise CodebookError(
                f"multiple-choice template {tpl.id!r} needs a non-empty answer drafting part",
                source,
            )
    try:
        book.option_aliases()
    except ValueError as exc:
        raise CodebookError(str(exc), source) from None
    return book


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CodebookError(f"cannot read codebook: {exc.strerror}", str(path)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise CodebookError(f"parse failure: {getattr(exc, 'problem', exc)}", where) from None
    return codebook_from_dict(data, str(path))


def load_default_codebook() -> Codebook:
    with resources.as_file(resources.files(__package__) / "data" / "codebook.yaml") as p:
        return load_codebook(p)


def codebook_to_dict(book: Codebook) -> dict:
    def option(o: OptionLabel) -> dict:
        d: dict[str, Any] = {"canonical": o.canonical, "display": o.display}
        if o.aliases:
            d["aliases"] = list(o.aliases)
        if o.provisional:
            d["provisional"] = True
        return d

    nodes = []
    for n in book.nodes:
        d: dict[str, Any] = {
            "id": n.id,
            "label": n.label,
            "event_class": n.event_class.value,
            "kind": n.kind,
            "answer_mode": n.answer_mode,
            "core": n.core,
            "question": n.question,
        }
        if n.answer_form:
            d["answer_form"] = n.answer_form
        if n.options:
            d["options"] = [option(o) for o in n.options]
        nodes.append(d)
    bindings = []
    for (node_id, stage), tid in book.prompt_templates.items():
        b = {"stage": stage}
        if node_id is not None:
            b["node"] = node_id
        b["template"] = tid
        bindings.append(b)
    return {
        "version": book.version,
        "nodes": nodes,
        "templates": [
            {"id": t.id, "question": t.question_part, "answer": t.answer_drafting_part}
            for t in book.templates.values()
        ],
        "bindings": bindings,
    }


class _LiteralDumper(yaml.SafeDumper):
    pass


def _str_presenter(dumper, value: str):
    style = "|" if "\n" in value else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", value, style=style)


_LiteralDumper.add_representer(str, _str_presenter)


def dump_codebook(book: Codebook) -> str:
    """Canonical YAML text for a codebook."""
    return yaml.dump(
        codebook_to_dict(book),
        Dumper=_LiteralDumper,
        sort_keys=False,
        allow_unicode=True,
        width=100,
        default_flow_style=False,
    )


def save_codebook(book: Codebook, path: str | Path) -> None:
    from .store import atomic_write_text

    atomic_write_text(Path(path), dump_codebook(book))


# ---------------------------------------------------------------------------
# actors


@dataclass
class ActorRegistry:
    actors: dict[str, Actor]
    aliases: AliasTable

    def resolve(self, raw: str) -> Actor | None:
        """Map free text to an Actor; unknown names become ad-hoc actors."""
        from .normalize import normalize_token

        token = normalize_token(raw, self.aliases)
        if not token:
            return None
        if token in self.actors:
            return self.actors[token]
        if token.startswith("the_"):
            # "the US", "the Soviets": retry without the article
            bare = normalize_token(token[4:], self.aliases)
            if bare in self.actors:
                return self.actors[bare]
        return Actor(token, raw.strip())


def registry_from_dict(data: dict, source: str = "<actors>") -> ActorRegistry:
    actors: dict[str, Actor] = {}
    pairs: list[tuple[str, str]] = []
    for i, raw in enumerate(data.get("actors") or []):
        where = f"{source}:actors[{i}]"
        try:
            actor = Actor(
                canonical_name=str(raw["canonical"]),
                display_name=str(raw.get("display") or raw["canonical"]),
                country_code=raw.get("country_code"),
                label=raw.get("label"),
            )
        except (KeyError, ValueError) as exc:
            raise CodebookError(f"bad actor entry: {exc}", where) from None
        if actor.canonical_name in actors:
            raise CodebookError(f"duplicate actor {actor.canonical_name!r}", where)
        actors[actor.canonical_name] = actor
        pairs.append((actor.display_name, actor.canonical_name))
        pairs.extend((a, actor.canonical_name) for a in raw.get("aliases") or ())
    pairs.extend((str(k), str(v)) for k, v in (data.get("aliases") or {}).items())
    try:
        table = AliasTable(pairs)
    except ValueError as exc:
        raise CodebookError(str(exc), source) from None
    return ActorRegistry(actors, table)


def load_actors(path: str | Path | None = None) -> ActorRegistry:
    if path is None:
        with resources.as_file(resources.files(__package__) / "data" / "actors.yaml") as p:
            return load_actors(p)
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise CodebookError(f"cannot load actor table: {exc}", str(path)) from None
    return registry_from_dict(data, str(path))


def build_alias_table(registry: ActorRegistry | None = None, codebook: Codebook | None = None) -> AliasTable:
    """Combined alias table used for both system and gold normalization."""
    registry = registry or load_actors()
    table = registry.aliases
    if codebook is not None:
        table = table.merged(dict(codebook.option_aliases()))
    return table
