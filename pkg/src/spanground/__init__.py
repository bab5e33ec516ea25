"""Span grounding and grounded response decoding for document-grounded dialogs."""

__version__ = "0.1.0"
