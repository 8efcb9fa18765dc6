"""Pushdown ground truth for Dyck-2 strings.

Positions are 0-based internally. ``PredictionInstance.k`` and ``.j`` are
1-based, like w_1..w_k when talking about a sentence; every serialized
record carries an ``index_base`` field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

OPEN_TYPE = {"[": 0, "{": 1}
CLOSE_TYPE = {"]": 0, "}": 1}
TYPE_NAMES = ("square", "curly")
SQUARE, CURLY = 0, 1


class InvalidPrefix(ValueError):
    """The string is not over the alphabet, or is not a Dyck-2 prefix."""


class EmptyStack(ValueError):
    """No bracket is open, so no closing bracket is legal."""


def _check_alphabet(chars: str):
    for i, ch in enumerate(chars):
        if ch not in OPEN_TYPE and ch not in CLOSE_TYPE:
            raise InvalidPrefix(f"character {ch!r} at position {i} is not a bracket")


def _scan(chars: str) -> list[int]:
    """Types of the unclosed openers after reading ``chars``; raises on an invalid prefix."""
    _check_alphabet(chars)
    stack: list[int] = []
    for i, ch in enumerate(chars):
        if ch in OPEN_TYPE:
            stack.append(OPEN_TYPE[ch])
        elif not stack or stack.pop() != CLOSE_TYPE[ch]:
            raise InvalidPrefix(f"{chars!r} is not a Dyck-2 prefix (bad close at {i})")
    return stack


def is_prefix(chars: str) -> bool:
    try:
        _scan(chars)
    except InvalidPrefix:
        return False
    return True


def validate(chars: str) -> bool:
    """True iff ``chars`` is a complete, balanced Dyck-2 word.

    Non-bracket characters raise ``InvalidPrefix`` instead of returning False.
    """
    _check_alphabet(chars)
    stack: list[str] = []
    for ch in chars:
        if ch in OPEN_TYPE:
            stack.append(ch)
        elif not stack or OPEN_TYPE[stack.pop()] != CLOSE_TYPE[ch]:
            return False
    return not stack


def next_close(prefix: str) -> int:
    """Type (SQUARE or CURLY) of the only closing bracket that may follow ``prefix``."""
    stack = _scan(prefix)
    if not stack:
        raise EmptyStack(f"{prefix!r} has no unclosed bracket")
    return stack[-1]


def depth_profile(chars: str) -> np.ndarray:
    """Number of unclosed brackets after each character."""
    _scan(chars)
    steps = np.fromiter((1 if ch in OPEN_TYPE else -1 for ch in chars), dtype=np.int64, count=len(chars))
    return np.cumsum(steps)


def relevance_mask(prefix: str) -> np.ndarray:
    """True at the openers that are still unclosed at the end of ``prefix``."""
    _check_alphabet(prefix)
    mask = np.zeros(len(prefix), dtype=bool)
    open_at: list[int] = []
    for i, ch in enumerate(prefix):
        if ch in OPEN_TYPE:
            open_at.append(i)
        else:
            if not open_at or OPEN_TYPE[prefix[open_at[-1]]] != CLOSE_TYPE[ch]:
                raise InvalidPrefix(f"{prefix!r} is not a Dyck-2 prefix (bad close at {i})")
            open_at.pop()
    mask[open_at] = True
    return mask


@dataclass(frozen=True)
class PredictionInstance:
    prefix: str
    target: int
    k: int
    j: int
    distance: int
    embedded_depth: int

    @property
    def clause_span(self) -> tuple[int, int]:
        return (self.j, self.k)

    def record(self, sentence_id: int) -> dict:
        return {
            "sentence_id": sentence_id,
            "k": self.k,
            "target": self.target,
            "distance": self.distance,
            "embedded_depth": self.embedded_depth,
            "j": self.j,
            "index_base": 1,
        }


def _annotate(chars: str, relative: bool):
    """Yields (k0, j0, target, embedded_depth) with 0-based positions."""
    _check_alphabet(chars)
    # stack entries: [open position, type, max depth seen since the open]
    stack: list[list[int]] = []
    depth = 0
    for k, ch in enumerate(chars):
        if ch in OPEN_TYPE:
            depth += 1
            stack.append([k, OPEN_TYPE[ch], depth])
            continue
        if not stack or stack[-1][1] != CLOSE_TYPE[ch]:
            raise InvalidPrefix(f"{chars!r} is not a Dyck-2 prefix (bad close at {k})")
        j, t, peak = stack.pop()
        if stack and stack[-1][2] < peak:
            stack[-1][2] = peak
        # depth before the close equals the depth at the opener, so relative depth
        # counts levels above the level the clause started from
        yield k, j, t, (peak - depth + 1 if relative else peak)
        depth -= 1
    if stack:
        raise InvalidPrefix(f"{chars!r} is not balanced")


def annotate_instances(chars: str, relative: bool = False) -> list[PredictionInstance]:
    """One instance per closing bracket of a complete sentence.

    ``relative=True`` measures embedded depth from the level the clause opens at
    (a sensitivity switch; reported numbers use the absolute depth).
    """
    return [
        PredictionInstance(prefix=chars[:k], target=t, k=k + 1, j=j + 1, distance=k - j + 1, embedded_depth=d)
        for k, j, t, d in _annotate(chars, relative)
    ]


@dataclass
class InstanceTable:
    """Column-oriented instances of a whole corpus; ``pos`` and ``start`` are 0-based."""

    sentence: np.ndarray
    pos: np.ndarray
    start: np.ndarray
    target: np.ndarray
    distance: np.ndarray
    embedded_depth: np.ndarray

    def __len__(self):
        return len(self.pos)

    def subset(self, mask) -> "InstanceTable":
        return InstanceTable(**{k: v[mask] for k, v in asdict(self).items()})

    def axis(self, name: str) -> np.ndarray:
        if name == "distance":
            return self.distance
        if name in ("embedded_depth", "embedded-depth", "depth"):
            return self.embedded_depth
        raise ValueError(f"unknown axis {name!r}")


def instance_table(sentences, relative: bool = False) -> InstanceTable:
    cols: list[list[int]] = [[], [], [], [], [], []]
    for sid, chars in enumerate(sentences):
        for k, j, t, d in _annotate(chars, relative):
            cols[0].append(sid)
            cols[1].append(k)
            cols[2].append(j)
            cols[3].append(t)
            cols[4].append(k - j + 1)
            cols[5].append(d)
    arrs = [np.asarray(c, dtype=np.int64) for c in cols]
    return InstanceTable(*arrs)
