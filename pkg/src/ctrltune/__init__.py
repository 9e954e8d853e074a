"""ctrltune — attribute-controlled fine-tuning of small autoregressive
sequence models.

A rule oracle judges whole sequences; a learned per-prefix satisfaction head
decomposes that verdict to token level; the closed-form guided distribution
reweights the base model toward the constraint; and regularized fine-tuning
pulls the model itself toward the guide over one or more rounds (sequential
or pipeline-parallel).  The ``ctrltune`` CLI drives synthetic experiments.
"""
from __future__ import annotations

__version__ = "0.1.0"

from . import errors
from .seqcore import (
    Categorical,
    Corpus,
    Example,
    Sequence,
    Vocabulary,
    binary_cross_entropy,
    kl_divergence,
    load_corpus,
    sample_categorical,
    save_corpus,
)

__all__ = [
    "__version__",
    "errors",
    "Categorical",
    "Corpus",
    "Example",
    "Sequence",
    "Vocabulary",
    "binary_cross_entropy",
    "kl_divergence",
    "load_corpus",
    "sample_categorical",
    "save_corpus",
]
