"""Shared pieces of the workload generators."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from decimal import Decimal
from typing import Any, Optional

from ..scheduler import AccessSpec
from ..values import ActorId

HOT_PROBABILITY = 0.75


@dataclass
class TxnRequest:
    kind: str
    root: ActorId
    method: str
    args: Any
    # None means the request runs as an ACT
    spec: Optional[AccessSpec] = None

    @property
    def is_pact(self) -> bool:
        return self.spec is not None


def hot_set_size(n: int, skew: float) -> int:
    """ceil(n * skew), computed in decimal so 7% of 100 is 7, not 8."""
    if skew >= 1:
        return n
    return max(1, math.ceil(Decimal(n) * Decimal(str(skew))))


def pick_distinct(rng: random.Random, n: int, skew: float, count: int,
                  hot_probability: float = HOT_PROBABILITY) -> list[int]:
    """Pick ``count`` distinct indices in [0, n).

    The first ``hot_set_size(n, skew)`` indices are hot; each pick comes from
    the hot set with ``hot_probability`` (falling back to the other set when
    one is exhausted). ``skew >= 1`` means uniform.
    """
    if count > n:
        raise ValueError(f"cannot pick {count} distinct out of {n}")
    if skew >= 1:
        return rng.sample(range(n), count)
    hot = hot_set_size(n, skew)
    chosen: list[int] = []
    seen = set()
    while len(chosen) < count:
        hot_left = hot - sum(1 for c in chosen if c < hot)
        cold_left = (n - hot) - sum(1 for c in chosen if c >= hot)
        use_hot = rng.random() < hot_probability
        if use_hot and hot_left == 0:
            use_hot = False
        elif not use_hot and cold_left == 0:
            use_hot = True
        while True:
            i = rng.randrange(hot) if use_hot else hot + rng.randrange(n - hot)
            if i not in seen:
                break
        seen.add(i)
        chosen.append(i)
    return chosen
