"""Retrieval & interaction machine for tabular prediction.

For each target row, retrieve the most similar rows from a pool via an
inverted index with a BM25 variant, then predict the target's label with a
model that attends over the retrieved features and labels and crosses all
feature blocks pairwise.
"""

__version__ = "0.1.0"

from . import dataset, index, metrics, model, retrieval  # noqa: F401
from .errors import (ConfigError, DataError, FormatError, NumericError,  # noqa: F401
                     OracleMismatchError, RimError)
