"""Sentence-level crisis event coding with a staged LLM prompting pipeline."""

__version__ = "0.1.0"
