"""polycap: desk-scale toolkit for multilingual audio-caption decoders.

Trains, decodes and evaluates transformer caption decoders that read
precomputed audio-embedding sequences, with a shared trunk and per-language
embedding/classification heads.
"""

__version__ = "0.1.0"

from polycap.text import Language, Vocabulary, build_vocabulary, tokenize

__all__ = ["Language", "Vocabulary", "build_vocabulary", "tokenize", "__version__"]
