"""Provenance-graph learning toolkit: parse audit logs, build typed multigraphs,
featurize, synthesize labeled scenarios and train a relational GCN."""

__version__ = "0.1.0"
