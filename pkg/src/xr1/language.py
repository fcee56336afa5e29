"""Fixed template vocabulary for task instructions.

Instructions are rendered from task templates, so the vocabulary is closed:
encoding splits on whitespace and fails loudly on anything outside it.
"""

from __future__ import annotations

PAD = "<pad>"

_WORDS = [
    "reach", "push", "lift", "stack", "sweep", "carry", "place",
    "the", "a", "and", "it", "on", "in", "into", "to", "through",
    "disc", "marker", "goal", "zone", "waypoint", "then",
    "red", "green", "blue", "yellow",
]

VOCAB: list[str] = [PAD] + _WORDS
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

PAD_ID = 0
MAX_TOKENS = 12


def encode(text: str, length: int = MAX_TOKENS) -> list[int]:
    """Token ids, right-padded to ``length``."""
    words = text.split()
    if len(words) > length:
        raise ValueError(f"instruction too long ({len(words)} words): {text!r}")
    ids = []
    for w in words:
        if w not in _WORD_TO_ID:
            raise ValueError(f"word {w!r} not in the template vocabulary")
        ids.append(_WORD_TO_ID[w])
    return ids + [PAD_ID] * (length - len(ids))


def decode(ids) -> str:
    return " ".join(VOCAB[i] for i in ids if i != PAD_ID)


def vocab_size() -> int:
    return len(VOCAB)
