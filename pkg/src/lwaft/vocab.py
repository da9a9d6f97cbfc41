"""Character vocabulary shared by task generation and the models."""

from __future__ import annotations

from .errors import ValidationError

END_ID = 0
END = "\x03"
CHARSET = " abcdefghijklmnopqrstuvwxyz0123456789.,:;|=#?>[]-ABCD"
SIZE = 1 + len(CHARSET)

_TO_ID = {ch: i + 1 for i, ch in enumerate(CHARSET)}


def encode(text: str) -> list[int]:
    try:
        return [_TO_ID[ch] for ch in text]
    except KeyError as exc:
        raise ValidationError(f"character {exc.args[0]!r} is outside the vocabulary") from None


def decode(ids) -> str:
    return "".join(CHARSET[i - 1] for i in ids if i != END_ID)
