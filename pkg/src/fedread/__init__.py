"""Federated span-extraction question answering.

Clients train a small transformer QA model on private shards with local
SGD; a combiner aggregates only the parameter vectors (plain weighted
averaging or a running incremental merge), evaluates EM/F1 per round, and
serves the resulting model behind an HTTP question-answering service with
a feedback loop for locally added examples.
"""

__version__ = "0.1.0"
