"""EdgeKV: two-tier edge key-value store."""

__version__ = "0.1.0"
