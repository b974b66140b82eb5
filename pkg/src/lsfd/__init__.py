"""Long/short-view feature decomposition.

Self-supervised video representation learning that splits the embedding
into a stationary half (shared between a long view and its short
sub-views) and a non-stationary half (short-view features aggregate to
the long view), trained with momentum-encoder InfoNCE against a memory
bank, plus the retrieval / probing / segmentation evaluation battery on
a synthetic corpus with exact stationary and motion ground truth.
"""

__version__ = "0.1.0"
