"""phonolm: two-stage phonetic-token language modeling in a synthetic token world."""

__version__ = "0.1.0"
