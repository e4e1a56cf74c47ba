"""Value taxonomy, keys and actor identities.

Values stored in an actor's key-value collection are one of:

* ``int`` (64-bit signed)
* ``decimal.Decimal`` quantized to exactly four fractional digits
* ``str``
* :class:`Record`, an immutable ordered map of field name to value

All of them are immutable, so "deep copy" is just sharing the reference.
"""

from __future__ import annotations

import decimal
from collections.abc import Iterator, Mapping
from typing import NamedTuple, Union

from .errors import InvalidValue

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

QUANTUM = decimal.Decimal("0.0001")
_EXACT = decimal.Context(prec=38, traps=[decimal.Inexact, decimal.InvalidOperation])


class Key(NamedTuple):
    namespace: str
    id: str

    def __str__(self) -> str:
        return f"{self.namespace}:{self.id}"


class ActorId(NamedTuple):
    group: str
    partition: int

    def __str__(self) -> str:
        return f"{self.group}_{self.partition}"


class Record(Mapping):
    """Immutable, ordered field map. Equality is structural."""

    __slots__ = ("_fields",)

    def __init__(self, fields: Mapping | None = None, /, **kwargs):
        items = dict(fields or {})
        items.update(kwargs)
        self._fields = {str(k): normalize(v) for k, v in items.items()}

    def __getitem__(self, name: str):
        return self._fields[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._fields)

    def __len__(self) -> int:
        return len(self._fields)

    def __eq__(self, other) -> bool:
        if isinstance(other, Record):
            # field order is part of the value
            return list(self._fields.items()) == list(other._fields.items())
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(self._fields.items()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self._fields.items())
        return f"Record({inner})"

    def replace(self, **changes) -> Record:
        fields = dict(self._fields)
        fields.update(changes)
        return Record(fields)

    def __deepcopy__(self, memo) -> Record:
        return self

    def __copy__(self) -> Record:
        return self


Value = Union[int, decimal.Decimal, str, Record]


def dec(x) -> decimal.Decimal:
    """Build a four-digit fixed-point decimal; raises if ``x`` needs rounding."""
    if isinstance(x, float):
        x = repr(x)
    try:
        return decimal.Decimal(x).quantize(QUANTUM, context=_EXACT)
    except (decimal.Inexact, decimal.InvalidOperation) as exc:
        raise InvalidValue(f"{x!r} is not representable with 4 fractional digits") from exc


def normalize(v) -> Value:
    """Validate ``v`` against the value taxonomy, quantizing decimals."""
    if isinstance(v, bool):
        raise InvalidValue("bool is not a storable value; use int")
    if isinstance(v, int):
        if not INT64_MIN <= v <= INT64_MAX:
            raise InvalidValue(f"integer {v} out of 64-bit range")
        return v
    if isinstance(v, decimal.Decimal):
        if v.as_tuple().exponent == -4:
            return v
        return dec(v)
    if isinstance(v, (str, Record)):
        return v
    if isinstance(v, Mapping):
        return Record(v)
    raise InvalidValue(f"unsupported value type {type(v).__name__}")
