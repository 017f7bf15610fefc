"""ragkit: retrieval-augmented paraphrase generation and evaluation for French medical terms.

The package is organised as a library first:

- :mod:`ragkit.corpus` loads term/paraphrase datasets, splits them by term and
  builds a knowledge base from encyclopedia articles.
- :mod:`ragkit.wiki` is the MediaWiki API client with an on-disk cache.
- :mod:`ragkit.embed` provides embedding backends (remote HTTP and a
  deterministic offline hasher).
- :mod:`ragkit.retriever` is an exhaustive-scan dense vector index.
- :mod:`ragkit.generator` renders prompts and calls chat-completion backends.
- :mod:`ragkit.metrics` scores candidates against reference sets.
- :mod:`ragkit.agreement` computes inter-annotator agreement.
- :mod:`ragkit.pipeline` ties the stages together behind a YAML config.
- :mod:`ragkit.annotate` serves the annotation campaign over HTTP.
- :mod:`ragkit.cli` is the command-line entry point.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
