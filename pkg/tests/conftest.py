from __future__ import annotations

from pathlib import Path

import pytest

from icbellm.backend import CallCache, ScriptedBackend
from icbellm.extractor import RunConfig, run_pipeline
from icbellm.ontology import build_alias_table, load_actors, load_default_codebook
from icbellm.store import read_narratives

FIXTURES = Path(__file__).parent / "fixtures"
CRISIS_DIR = FIXTURES / "crisis"
CRISIS_RULES = CRISIS_DIR / "rules.yaml"
EXPECTED_EVENTS = CRISIS_DIR / "expected" / "cmc.events.jsonl"

# filled by test_acceptance.record(), echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def codebook():
    return load_default_codebook()


@pytest.fixture(scope="session")
def actors():
    return load_actors()


@pytest.fixture(scope="session")
def aliases(codebook, actors):
    return build_alias_table(actors, codebook)


def crisis_narrative():
    (narrative,) = read_narratives(CRISIS_DIR / "narratives.tsv")
    return narrative


def run_crisis(cache: CallCache | None = None, config: RunConfig | None = None):
    backend = ScriptedBackend.from_file(CRISIS_RULES, cache=cache)
    result = run_pipeline(crisis_narrative(), load_default_codebook(), backend, config or RunConfig())
    return result, backend


@pytest.fixture(scope="session")
def crisis_run():
    """One cold run of the 12-sentence scripted fixture."""
    return run_crisis()
