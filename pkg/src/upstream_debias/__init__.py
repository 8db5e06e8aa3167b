"""Upstream bias mitigation transferred to downstream text classifiers."""

__version__ = "0.1.0"
