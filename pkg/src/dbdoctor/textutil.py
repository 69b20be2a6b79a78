"""Shared text normalization: the sizing tokenizer and a light stemmer.

One tokenizer is used everywhere text is measured or matched (chunk sizing,
BM25, keyword maps, scripted embeddings) so sizes and similarities agree.
"""

import string

# Underscore is kept so metric and view names (cpu_usage, pg_stat_statements)
# survive as single tokens.
_STRIP = string.punctuation.replace("_", "")
_TABLE = str.maketrans("", "", _STRIP)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation (keeping underscores), split on whitespace."""
    out = []
    for piece in text.lower().split():
        tok = piece.translate(_TABLE)
        if tok:
            out.append(tok)
    return out


def stem(token: str) -> str:
    """Crude suffix stripper, enough for stem matching of request keywords."""
    for suffix in ("ing", "ed", "es"):
        if len(token) > len(suffix) + 2 and token.endswith(suffix):
            token = token[: -len(suffix)]
            break
    else:
        if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
            token = token[:-1]
    if len(token) > 3 and token.endswith("e"):
        token = token[:-1]
    return token
