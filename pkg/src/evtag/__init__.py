"""Event directories and a tag database over a sequential event store."""

__version__ = "0.1.0"
