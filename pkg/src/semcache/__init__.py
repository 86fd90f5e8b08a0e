"""semcache - synthetic paraphrase datasets and a replay harness for semantic caches."""

__version__ = "0.1.0"
