"""Triple-based element model shared by every capability.

Data is carried as named collections of ``<name, type, value>`` triples;
metadata uses the identical triple representation.  A context element binds
an element to an entity identity, and an event records the creation of an
element.  All types here are immutable values: safe to share across threads
and to hash into canonical digests.

Numbers are carried internally as canonical decimal strings (shortest
round-trip form) so XML and JSON encodings of the same element never drift.
"""

from __future__ import annotations

import hashlib
import json
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from decimal import Decimal, InvalidOperation
from typing import Iterable, Mapping, Union

TYPE_TAGS = ("string", "number", "boolean", "timestamp", "uri")

_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")
_URI_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.-]*:\S+$")
_TIMESTAMP_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,9}))?"
    r"(Z|[+-]\d{2}:\d{2})?$"
)


class ModelError(Exception):
    """Base class for element model violations."""


class DuplicateName(ModelError):
    pass


class TypeMismatch(ModelError):
    pass


class EmptyIdentity(ModelError):
    pass


class InvalidElement(ModelError):
    pass


def canonical_number(value: Union[int, float, str, Decimal]) -> str:
    """Render a numeric value as its canonical decimal string.

    The canonical form is the shortest decimal that round-trips: trailing
    zeros stripped, fixed-point notation for everyday magnitudes, scientific
    notation outside of them.  The result is always a valid JSON number token.
    """
    if isinstance(value, bool):
        raise TypeMismatch("boolean is not a number value")
    if isinstance(value, Decimal):
        dec = value
    elif isinstance(value, (int, float)):
        dec = Decimal(str(value))
    elif isinstance(value, str):
        try:
            dec = Decimal(value)
        except InvalidOperation:
            raise TypeMismatch(f"not a decimal number: {value!r}") from None
    else:
        raise TypeMismatch(f"unsupported number value of type {type(value).__name__}")
    if not dec.is_finite():
        raise TypeMismatch("number values must be finite")
    if dec == 0:
        return "0"
    dec = dec.normalize()
    if -7 < dec.adjusted() < 21:
        return format(dec, "f")
    return str(dec)


def validate_timestamp(value: str) -> None:
    """Check that ``value`` is an ISO-8601 timestamp.

    A numeric UTC offset (or ``Z``) is how the gateway itself always stamps
    time; offset-less timestamps are tolerated because ingested sensor
    documents carry them, and their text is preserved verbatim.
    """
    if not isinstance(value, str):
        raise TypeMismatch("timestamp value must be a string")
    m = _TIMESTAMP_RE.match(value)
    if m is None:
        raise TypeMismatch(f"not an ISO-8601 timestamp: {value!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    frac = m.group(7) or "0"
    try:
        datetime(year, month, day, hour, minute, second, int(frac.ljust(6, "0")[:6]))
    except ValueError as exc:
        raise TypeMismatch(f"timestamp out of range: {value!r}: {exc}") from None


def _validate_value(type_tag: str, value: object) -> object:
    if type_tag == "string":
        if not isinstance(value, str):
            raise TypeMismatch(f"string triple holds {type(value).__name__}")
        return value
    if type_tag == "number":
        return canonical_number(value)  # type: ignore[arg-type]
    if type_tag == "boolean":
        if not isinstance(value, bool):
            raise TypeMismatch(f"boolean triple holds {type(value).__name__}")
        return value
    if type_tag == "timestamp":
        validate_timestamp(value)  # type: ignore[arg-type]
        return value
    if type_tag == "uri":
        if not isinstance(value, str) or not _URI_RE.match(value):
            raise TypeMismatch(f"not a URI: {value!r}")
        return value
    raise TypeMismatch(f"unknown type tag {type_tag!r}")


@dataclass(frozen=True)
class Triple:
    """A single ``<name, type, value>`` item.

    ``number`` values are canonicalized to decimal strings at construction;
    every other tag keeps its value verbatim after validation.
    """

    name: str
    type_tag: str
    value: object

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise InvalidElement("triple name must be a non-empty string")
        if self.type_tag not in TYPE_TAGS:
            raise TypeMismatch(f"unknown type tag {self.type_tag!r}")
        object.__setattr__(self, "value", _validate_value(self.type_tag, self.value))

    def as_decimal(self) -> Decimal:
        if self.type_tag != "number":
            raise TypeMismatch(f"triple {self.name!r} is not a number")
        return Decimal(self.value)  # type: ignore[arg-type]


def _check_unique_names(triples: tuple[Triple, ...], what: str) -> None:
    seen: set[str] = set()
    for t in triples:
        if t.name in seen:
            raise DuplicateName(f"duplicate {what} name {t.name!r}")
        seen.add(t.name)


@dataclass(frozen=True)
class DataElement:
    """A named collection of triples with optional metadata triples."""

    element_id: str
    triples: tuple[Triple, ...]
    metadata: tuple[Triple, ...] = ()

    def __post_init__(self) -> None:
        if not _UUID_RE.match(self.element_id or ""):
            raise InvalidElement(f"element id is not a lowercase UUID: {self.element_id!r}")
        object.__setattr__(self, "triples", tuple(self.triples))
        object.__setattr__(self, "metadata", tuple(self.metadata))
        _check_unique_names(self.triples, "triple")
        _check_unique_names(self.metadata, "metadata")

    def triple(self, name: str) -> Triple:
        for t in self.triples:
            if t.name == name:
                return t
        raise KeyError(name)

    def has_triple(self, name: str) -> bool:
        return any(t.name == name for t in self.triples)


@dataclass(frozen=True)
class ContextElement(DataElement):
    """A data element bound to an entity identity.

    The ``(entity_id, entity_type)`` pair is fixed at construction; per-triple
    metadata may be attached under the triple's name.
    """

    entity_id: str = ""
    entity_type: str = ""
    attribute_metadata: Mapping[str, tuple[Triple, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.entity_id or not self.entity_type:
            raise EmptyIdentity("entity id and entity type must be non-empty")
        frozen = {name: tuple(ts) for name, ts in self.attribute_metadata.items()}
        object.__setattr__(self, "attribute_metadata", frozen)
        names = {t.name for t in self.triples}
        for name, ts in frozen.items():
            if name not in names:
                raise InvalidElement(f"attribute metadata for unknown triple {name!r}")
            _check_unique_names(ts, f"attribute metadata ({name})")


Element = Union[DataElement, ContextElement]

EVENT_KINDS = ("data", "context")


@dataclass(frozen=True)
class Event:
    """The act of creating an element; the unit of persistence and replay.

    Sequence numbers are assigned by the store, never by the producer.
    """

    sequence_no: int
    event_id: str
    kind: str
    element: Element
    occurred_at: str

    def __post_init__(self) -> None:
        if not isinstance(self.sequence_no, int) or self.sequence_no < 1:
            raise InvalidElement("sequence number must be a positive integer")
        if not _UUID_RE.match(self.event_id or ""):
            raise InvalidElement(f"event id is not a lowercase UUID: {self.event_id!r}")
        if self.kind not in EVENT_KINDS:
            raise InvalidElement(f"unknown event kind {self.kind!r}")
        is_context = isinstance(self.element, ContextElement)
        if is_context != (self.kind == "context"):
            raise InvalidElement("event kind does not match element identity")
        validate_timestamp(self.occurred_at)


def new_element_id() -> str:
    return str(uuid.uuid4())


def make_data_element(
    triples: Iterable[Triple], metadata: Iterable[Triple] = ()
) -> DataElement:
    """Build a data element with a fresh id, preserving input order."""
    return DataElement(new_element_id(), tuple(triples), tuple(metadata))


def promote_to_context(
    element: DataElement,
    entity_id: str,
    entity_type: str,
    attribute_metadata: Mapping[str, Iterable[Triple]] | None = None,
) -> ContextElement:
    """Bind an entity identity to an element; the original is untouched."""
    if not entity_id or not entity_type:
        raise EmptyIdentity("entity id and entity type must be non-empty")
    attrs = {name: tuple(ts) for name, ts in (attribute_metadata or {}).items()}
    return ContextElement(
        element.element_id,
        element.triples,
        element.metadata,
        entity_id=entity_id,
        entity_type=entity_type,
        attribute_metadata=attrs,
    )


def strip_identity(element: ContextElement) -> DataElement:
    """Drop the entity identity, keeping id, triples and metadata."""
    return DataElement(element.element_id, element.triples, element.metadata)


def _json_str(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def _triple_json(t: Triple) -> str:
    if t.type_tag == "number":
        rendered = t.value  # canonical decimal string, a valid JSON number token
    elif t.type_tag == "boolean":
        rendered = "true" if t.value else "false"
    else:
        rendered = _json_str(t.value)  # type: ignore[arg-type]
    return '{"name":%s,"type":%s,"value":%s}' % (
        _json_str(t.name),
        _json_str(t.type_tag),
        rendered,
    )


def _triples_json(triples: Iterable[Triple]) -> str:
    return "[" + ",".join(_triple_json(t) for t in triples) + "]"


def element_canonical_json(element: Element) -> str:
    """Serialize an element to its canonical JSON form.

    Triple order is preserved; metadata is sorted by name so encodings of the
    same element are byte-identical regardless of metadata permutation.
    Number values are emitted as raw decimal tokens, not binary floats.
    """
    parts = [
        '"elementId":%s' % _json_str(element.element_id),
        '"triples":%s' % _triples_json(element.triples),
        '"metadata":%s' % _triples_json(sorted(element.metadata, key=lambda t: t.name)),
    ]
    if isinstance(element, ContextElement):
        parts.append('"entityId":%s' % _json_str(element.entity_id))
        parts.append('"entityType":%s' % _json_str(element.entity_type))
        if element.attribute_metadata:
            attr_parts = []
            for name in sorted(element.attribute_metadata):
                ts = sorted(element.attribute_metadata[name], key=lambda t: t.name)
                attr_parts.append("%s:%s" % (_json_str(name), _triples_json(ts)))
            parts.append('"attributeMetadata":{%s}' % ",".join(attr_parts))
    return "{" + ",".join(parts) + "}"


def element_digest(element: Element) -> str:
    """SHA-256 hex digest of the element's canonical form.

    Deterministic, invariant under metadata permutation, and stable across
    XML/JSON re-encoding.
    """
    return hashlib.sha256(element_canonical_json(element).encode("utf-8")).hexdigest()
