"""Two-stage generative recommender: items are tokenized into discrete
semantic IDs from their interaction, text, and image signals, then an
encoder-decoder model with similarity-modulated attention generates the
next item's ID level by level."""

__version__ = "0.1.0"
