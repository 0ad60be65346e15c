"""Popularity-tiered entity datasets from Wikidata/Wikipedia and factual-precision
evaluation of long-form LLM descriptions."""

__version__ = "0.1.0"
