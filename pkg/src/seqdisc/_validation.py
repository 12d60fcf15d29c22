"""Small argument checks shared by the estimators and the CLI."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

from .core import Utterance


def check_choice(name: str, value, choices: Iterable) -> None:
    choices = tuple(choices)
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")


def check_int(name: str, value, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


def check_scale(name: str, value, positive: bool = False) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(x) or x < 0.0 or (positive and x == 0.0):
        raise ValueError(f"{name} must be finite and {'> 0' if positive else '>= 0'}, got {value!r}")
    return x


def check_utterances(utterances: Sequence[Utterance]) -> list[Utterance]:
    """Non-empty list of utterances with unique ids."""
    utts = list(utterances)
    if not utts:
        raise ValueError("need at least one utterance")
    if not all(isinstance(u, Utterance) for u in utts):
        raise TypeError("expected a sequence of Utterance objects")
    ids = [u.id for u in utts]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate utterance ids")
    return utts


def check_scorer(scorer) -> None:
    for attr in ("log_probs", "context_size"):
        if not hasattr(scorer, attr):
            raise TypeError(f"scorer lacks {attr!r}")
