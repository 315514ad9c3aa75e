"""BFT replicas with per-client commit rules, a deterministic simulator and quorum analysis tools."""

__version__ = "0.1.0"
