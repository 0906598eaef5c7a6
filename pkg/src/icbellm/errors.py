"""Exception hierarchy shared across the package."""


class IcbeError(Exception):
    """Base class for all package errors."""


class ConfigError(IcbeError):
    """Bad or missing configuration. The CLI exits nonzero on these."""


class CodebookError(IcbeError):
    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class SchemaError(IcbeError):
    """A persisted record file could not be read back."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class BackendError(IcbeError):
    """Completion backend failed to produce a usable response."""


class TransportError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class NoMatchingRuleError(ConfigError):
    """Scripted backend misconfiguration: no rule matched the prompt.

    Deliberately not a BackendError, so the pipeline never degrades it
    into an abstention.
    """

    def __init__(self, tag: str, prompt: str):
        self.tag = tag
        self.prompt = prompt
        tail = prompt[-160:].replace("\n", "\\n")
        super().__init__(f"no scripted rule matches request tagged {tag!r} (prompt tail: ...{tail})")


class UnmappableAnswerError(IcbeError):
    def __init__(self, raw_texts: list[str], tag: str = ""):
        self.raw_texts = list(raw_texts)
        self.tag = tag
        super().__init__(f"could not map answer(s) {self.raw_texts!r} to an option ({tag})")


class ConfusionLabelError(IcbeError):
    def __init__(self, label: str, event_class: str):
        self.label = label
        super().__init__(f"behavior label {label!r} is not in the {event_class} vocabulary")


class ReportError(IcbeError):
    pass
