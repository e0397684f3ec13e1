"""Query-result caching engine and benchmark harness over AND-OR plan DAGs."""

__version__ = "0.1.0"
