"""Scenario harness: loading, running, replaying, auditing and plotting."""
