"""Dynamic relevance graph network for multiple-choice QA over KG subgraphs."""

__version__ = "0.1.0"
