"""The hint vocabulary: per-file extended attributes that steer storage policies.

Values are flat strings; reserved keys carry space-separated arguments::

    DP          local | collocation <group> | scatter <k>
    Replication <r>            r >= 1
    RepSmntc    optimistic | pessimistic   (case-insensitive)
    CacheSize   <bytes>        bytes >= 0 (0 disables caching)
    location    read-only, computed by the manager

Any other key is application-defined: it is stored and propagated with every
request but never triggers an optimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from woss.errors import MalformedHintValue, ReadOnlyAttribute

DP = "DP"
REPLICATION = "Replication"
REP_SEMANTICS = "RepSmntc"
CACHE_SIZE = "CacheSize"
LOCATION = "location"
LOCATION_CHUNKS = "location.chunks"

RESERVED = frozenset({DP, REPLICATION, REP_SEMANTICS, CACHE_SIZE, LOCATION})
READ_ONLY = frozenset({LOCATION, LOCATION_CHUNKS})

OPTIMISTIC = "optimistic"
PESSIMISTIC = "pessimistic"


@dataclass(frozen=True)
class Hint:
    key: str
    value: str

    @property
    def reserved(self) -> bool:
        return self.key in RESERVED


@dataclass(frozen=True)
class Placement:
    """A parsed ``DP`` value."""

    kind: str  # "local" | "collocation" | "scatter"
    group: str | None = None
    scatter_size: int | None = None


def _positive_int(key: str, text: str) -> int:
    try:
        n = int(text.strip(), 10)
    except ValueError:
        raise MalformedHintValue(f"{key}: expected an integer, got {text!r}") from None
    if n < 1:
        raise MalformedHintValue(f"{key}: expected a value >= 1, got {n}")
    return n


def parse_placement(value: str) -> Placement:
    parts = value.split()
    if not parts:
        raise MalformedHintValue("DP: empty value")
    kind = parts[0]
    if kind == "local" and len(parts) == 1:
        return Placement("local")
    if kind == "collocation" and len(parts) == 2:
        return Placement("collocation", group=parts[1])
    if kind == "scatter" and len(parts) == 2:
        return Placement("scatter", scatter_size=_positive_int("DP scatter", parts[1]))
    raise MalformedHintValue(f"DP: cannot parse {value!r}")


def parse_replication(value: str) -> int:
    return _positive_int(REPLICATION, value)


def parse_semantics(value: str) -> str:
    v = value.strip().lower()
    if v not in (OPTIMISTIC, PESSIMISTIC):
        raise MalformedHintValue(f"RepSmntc: expected optimistic|pessimistic, got {value!r}")
    return v


def parse_cache_size(value: str) -> int:
    # 0 is accepted and disables the per-file cache
    if value.strip() == "0":
        return 0
    return _positive_int(CACHE_SIZE, value)


_VALIDATORS = {
    DP: parse_placement,
    REPLICATION: parse_replication,
    REP_SEMANTICS: parse_semantics,
    CACHE_SIZE: parse_cache_size,
}


def parse_hint(key: str, value: str) -> Hint:
    """Validate a ``(key, value)`` pair and return it as a :class:`Hint`.

    Raises :class:`MalformedHintValue` for a reserved key with a bad value and
    :class:`ReadOnlyAttribute` for ``location``. Unknown keys always pass.
    """
    if key in READ_ONLY:
        raise ReadOnlyAttribute(f"{key!r} is computed by the storage system")
    if not key:
        raise MalformedHintValue("empty hint key")
    validate = _VALIDATORS.get(key)
    if validate is not None:
        validate(value)
        if key == REP_SEMANTICS:
            value = value.strip().lower()
    return Hint(key, value)


class HintSet(Mapping[str, str]):
    """Immutable key -> value map with a canonical sorted-by-key order."""

    __slots__ = ("_items", "_map")

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] | None = None):
        if entries is None:
            m: dict[str, str] = {}
        elif isinstance(entries, Mapping):
            m = dict(entries)
        else:
            m = {}
            for k, v in entries:
                m[k] = v
        self._map = m
        self._items = tuple(sorted(m.items()))

    @classmethod
    def of(cls, *hints: Hint) -> "HintSet":
        return cls((h.key, h.value) for h in hints)

    def __getitem__(self, key: str) -> str:
        return self._map[key]

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        if isinstance(other, HintSet):
            return self._items == other._items
        return NotImplemented if not isinstance(other, Mapping) else dict(self) == dict(other)

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self._items)
        return f"HintSet({{{inner}}})"

    def canonical(self) -> tuple[tuple[str, str], ...]:
        return self._items

    def with_hint(self, hint: Hint) -> "HintSet":
        m = dict(self._map)
        m[hint.key] = hint.value
        return HintSet(m)

    def merged(self, other: Mapping[str, str]) -> "HintSet":
        m = dict(self._map)
        m.update(other)
        return HintSet(m)

    def without_reserved(self) -> "HintSet":
        return HintSet({k: v for k, v in self._map.items() if k not in RESERVED})

    def reserved_keys(self) -> list[str]:
        return [k for k, _ in self._items if k in RESERVED]

    # typed accessors; malformed values behave as if the hint were absent
    def placement(self) -> Placement | None:
        v = self._map.get(DP)
        if v is None:
            return None
        try:
            return parse_placement(v)
        except MalformedHintValue:
            return None

    def replication(self) -> int:
        try:
            return parse_replication(self._map[REPLICATION])
        except (KeyError, MalformedHintValue):
            return 1

    def semantics(self) -> str:
        try:
            return parse_semantics(self._map[REP_SEMANTICS])
        except (KeyError, MalformedHintValue):
            return OPTIMISTIC

    def cache_size(self) -> int | None:
        v = self._map.get(CACHE_SIZE)
        if v is None:
            return None
        try:
            return parse_cache_size(v)
        except MalformedHintValue:
            return None


EMPTY = HintSet()
