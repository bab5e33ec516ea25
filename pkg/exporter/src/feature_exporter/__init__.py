"""Feature exporter: runs a frozen pretrained encoder over prepared windows
and writes the span-grounding toolkit's binary feature format."""

__version__ = "0.1.0"
