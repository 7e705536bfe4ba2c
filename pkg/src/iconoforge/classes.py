"""The ten saint iconography classes handled by the whole toolkit.

Class codes follow the IconClass notation. Indices are stable everywhere:
annotation files, model output channels, metric reports and the review UI
all use the same ordering.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class IconClass:
    code: str
    display_name: str
    index: int


ICON_CLASSES: tuple[IconClass, ...] = (
    IconClass("11H(ANTONY OF PADUA)", "Anthony of Padua", 0),
    IconClass("11H(FRANCIS)", "Francis of Assisi", 1),
    IconClass("11H(JEROME)", "Jerome", 2),
    IconClass("11H(JOHN THE BAPTIST)", "John the Baptist", 3),
    IconClass("11HH(MARY MAGDALENE)", "Mary Magdalene", 4),
    IconClass("11H(PAUL)", "Paul", 5),
    IconClass("11H(PETER)", "Peter", 6),
    IconClass("11HH(DOMINIC)", "Dominic", 7),
    IconClass("11H(SEBASTIAN)", "Sebastian", 8),
    IconClass("11F", "Virgin Mary", 9),
)

N_CLASSES = len(ICON_CLASSES)

_BY_CODE = {c.code: c for c in ICON_CLASSES}
_BY_INDEX = {c.index: c for c in ICON_CLASSES}

CLASS_CODES: tuple[str, ...] = tuple(c.code for c in ICON_CLASSES)

# Ground-truth / prediction value for "no class": its own row and column in
# the confusion matrix, never a channel of the model.
NONE_LABEL = "None"


def by_code(code: str) -> IconClass:
    try:
        return _BY_CODE[code]
    except KeyError:
        raise KeyError(f"unknown icon class code: {code!r}") from None


def by_index(index: int) -> IconClass:
    try:
        return _BY_INDEX[index]
    except KeyError:
        raise KeyError(f"icon class index out of range: {index}") from None


def is_valid_code(code: str) -> bool:
    return code in _BY_CODE
