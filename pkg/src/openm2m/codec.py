"""XML and JSON wire codecs.

Covers the ``/a/do`` request/response documents, element encoding in both
formats, and ingest of sensor observation XML.  Encoders are canonical: no
insignificant whitespace, fixed field order, explicit standalone declaration.
Decoders accept any well-formed document in the ``openm2m`` namespace, so
pretty-printed payloads round-trip modulo whitespace.
"""

from __future__ import annotations

import json
import re
import uuid
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from decimal import Decimal
from xml.sax.saxutils import escape, quoteattr

from openm2m import model
from openm2m.model import ContextElement, DataElement, ModelError, Triple

NAMESPACE = "http://eurescom.eu/p1957/openm2m"
XML_DECLARATION = '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>'

_TXN_ID_RE = re.compile(r"^[0-9A-F]{32}$")
_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")
_TS_MS_OFFSET_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}[+-]\d{2}:\d{2}$"
)


class CodecError(Exception):
    pass


class XmlMalformed(CodecError):
    pass


class WrongNamespace(CodecError):
    pass


class MissingField(CodecError):
    def __init__(self, name: str):
        super().__init__(f"missing field: {name}")
        self.name = name


class Malformed(CodecError):
    def __init__(self, fmt: str, detail: str = ""):
        super().__init__(f"malformed {fmt} document" + (f": {detail}" if detail else ""))
        self.format = fmt


class UnknownTypeTag(CodecError):
    pass


class OmMalformed(CodecError):
    pass


class MissingObservationValue(CodecError):
    pass


@dataclass(frozen=True)
class DoRequest:
    """Command-execution request posted to ``/a/do``."""

    requestor: str
    commands: tuple[str, ...]
    responders: tuple[str, ...] = ()
    transaction_id: str | None = None

    def __post_init__(self) -> None:
        if not _UUID_RE.match(self.requestor or ""):
            raise Malformed("do-request", f"requestor is not a UUID: {self.requestor!r}")
        object.__setattr__(self, "commands", tuple(self.commands))
        object.__setattr__(self, "responders", tuple(self.responders))
        if not self.commands:
            raise MissingField("commands")
        for r in self.responders:
            if not _UUID_RE.match(r or ""):
                raise Malformed("do-request", f"responder is not a UUID: {r!r}")
        if self.transaction_id is not None and not _TXN_ID_RE.match(self.transaction_id):
            raise Malformed("do-request", f"bad transaction id: {self.transaction_id!r}")


@dataclass(frozen=True)
class DoResponse:
    """Result document mirroring a do-request."""

    requestor: str
    timestamp: str
    responders: tuple[str, ...] = ()
    result: int = 200

    def __post_init__(self) -> None:
        object.__setattr__(self, "responders", tuple(self.responders))
        if not _TS_MS_OFFSET_RE.match(self.timestamp or ""):
            raise Malformed(
                "do-response",
                f"timestamp needs millisecond precision and a numeric offset: {self.timestamp!r}",
            )
        if not isinstance(self.result, int):
            raise Malformed("do-response", "result must be an integer")


def _ns_tag(local: str) -> str:
    return "{%s}%s" % (NAMESPACE, local)


def _localname(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _parse_xml(data: bytes | str, error) -> ET.Element:
    try:
        return ET.fromstring(data)
    except ET.ParseError as exc:
        raise error(f"XML parse error: {exc}") from None


def _require_root(root: ET.Element, local: str) -> None:
    if not root.tag.startswith("{%s}" % NAMESPACE):
        raise WrongNamespace(f"expected namespace {NAMESPACE}, got {root.tag!r}")
    if _localname(root.tag) != local:
        raise XmlMalformed(f"expected <{local}>, got <{_localname(root.tag)}>")


def decode_do_request(data: bytes | str) -> DoRequest:
    """Parse an ``appint-do-request`` document."""
    root = _parse_xml(data, XmlMalformed)
    _require_root(root, "appint-do-request")

    requestor_el = root.find(_ns_tag("requestor"))
    if requestor_el is None or not (requestor_el.text or "").strip():
        raise MissingField("requestor")
    commands_el = root.find(_ns_tag("commands"))
    commands = []
    if commands_el is not None:
        commands = [
            (c.text or "") for c in commands_el.findall(_ns_tag("command"))
        ]
    if not commands:
        raise MissingField("commands")
    responders = [
        (r.text or "").strip()
        for r in root.findall(_ns_tag("responders"))
        if (r.text or "").strip()
    ]
    txn_el = root.find(_ns_tag("transaction-id"))
    txn_id = (txn_el.text or "").strip() if txn_el is not None else None
    try:
        return DoRequest(
            requestor=(requestor_el.text or "").strip(),
            commands=tuple(commands),
            responders=tuple(responders),
            transaction_id=txn_id or None,
        )
    except Malformed as exc:
        raise XmlMalformed(str(exc)) from None


def encode_do_request(req: DoRequest) -> bytes:
    parts = [XML_DECLARATION, '<appint-do-request xmlns="%s">' % NAMESPACE]
    parts.append("<requestor>%s</requestor>" % escape(req.requestor))
    parts.append(
        "<commands>%s</commands>"
        % "".join("<command>%s</command>" % escape(c) for c in req.commands)
    )
    for r in req.responders:
        parts.append("<responders>%s</responders>" % escape(r))
    if req.transaction_id is not None:
        parts.append("<transaction-id>%s</transaction-id>" % escape(req.transaction_id))
    parts.append("</appint-do-request>")
    return "".join(parts).encode("utf-8")


def decode_do_response(data: bytes | str) -> DoResponse:
    root = _parse_xml(data, XmlMalformed)
    _require_root(root, "appint-do-response")
    requestor_el = root.find(_ns_tag("requestor"))
    if requestor_el is None or not (requestor_el.text or "").strip():
        raise MissingField("requestor")
    ts_el = root.find(_ns_tag("timestamp"))
    if ts_el is None or not (ts_el.text or "").strip():
        raise MissingField("timestamp")
    result_el = root.find(_ns_tag("result"))
    if result_el is None or not (result_el.text or "").strip():
        raise MissingField("result")
    try:
        result = int((result_el.text or "").strip())
    except ValueError:
        raise XmlMalformed(f"result is not an integer: {result_el.text!r}") from None
    responders = [
        (r.text or "").strip()
        for r in root.findall(_ns_tag("responders"))
        if (r.text or "").strip()
    ]
    try:
        return DoResponse(
            requestor=(requestor_el.text or "").strip(),
            timestamp=(ts_el.text or "").strip(),
            responders=tuple(responders),
            result=result,
        )
    except Malformed as exc:
        raise XmlMalformed(str(exc)) from None


def encode_do_response(resp: DoResponse) -> bytes:
    """Element order is fixed: requestor, timestamp, responders, result."""
    parts = [XML_DECLARATION, '<appint-do-response xmlns="%s">' % NAMESPACE]
    parts.append("<requestor>%s</requestor>" % escape(resp.requestor))
    parts.append("<timestamp>%s</timestamp>" % escape(resp.timestamp))
    for r in resp.responders:
        parts.append("<responders>%s</responders>" % escape(r))
    parts.append("<result>%d</result>" % resp.result)
    parts.append("</appint-do-response>")
    return "".join(parts).encode("utf-8")


def do_request_to_json(req: DoRequest) -> bytes:
    doc: dict = {
        "requestor": req.requestor,
        "commands": list(req.commands),
        "responders": list(req.responders),
    }
    if req.transaction_id is not None:
        doc["transactionId"] = req.transaction_id
    return json.dumps(doc, ensure_ascii=False).encode("utf-8")


def do_request_from_json(data: bytes | str) -> DoRequest:
    doc = _load_json_object(data)
    requestor = doc.get("requestor")
    if not requestor:
        raise MissingField("requestor")
    commands = doc.get("commands") or []
    if not isinstance(commands, list) or not commands:
        raise MissingField("commands")
    responders = doc.get("responders") or []
    if not isinstance(responders, list):
        raise Malformed("json", "responders must be a list")
    return DoRequest(
        requestor=str(requestor),
        commands=tuple(str(c) for c in commands),
        responders=tuple(str(r) for r in responders),
        transaction_id=doc.get("transactionId"),
    )


def do_response_to_json(resp: DoResponse) -> bytes:
    return json.dumps(
        {
            "requestor": resp.requestor,
            "timestamp": resp.timestamp,
            "responders": list(resp.responders),
            "result": resp.result,
        },
        ensure_ascii=False,
    ).encode("utf-8")


def do_response_from_json(data: bytes | str) -> DoResponse:
    doc = _load_json_object(data)
    for name in ("requestor", "timestamp", "result"):
        if name not in doc:
            raise MissingField(name)
    return DoResponse(
        requestor=str(doc["requestor"]),
        timestamp=str(doc["timestamp"]),
        responders=tuple(str(r) for r in doc.get("responders") or []),
        result=int(doc["result"]),
    )


def _load_json_object(data: bytes | str) -> dict:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data, parse_float=Decimal)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise Malformed("json", str(exc)) from None
    if not isinstance(doc, dict):
        raise Malformed("json", "document root must be an object")
    return doc


# --- element encoding ---------------------------------------------------

def _triple_xml(tag: str, t: Triple) -> str:
    if t.type_tag == "number":
        text = str(t.value)
    elif t.type_tag == "boolean":
        text = "true" if t.value else "false"
    else:
        text = escape(str(t.value))
    return "<%s name=%s type=%s>%s</%s>" % (
        tag, quoteattr(t.name), quoteattr(t.type_tag), text, tag,
    )


def encode_element(element: DataElement, fmt: str) -> bytes:
    """Encode an element as canonical XML or JSON bytes."""
    if fmt == "json":
        return model.element_canonical_json(element).encode("utf-8")
    if fmt != "xml":
        raise ValueError(f"unknown format {fmt!r}")
    is_context = isinstance(element, ContextElement)
    root = "context-element" if is_context else "data-element"
    attrs = ['xmlns="%s"' % NAMESPACE, "elementId=%s" % quoteattr(element.element_id)]
    if is_context:
        attrs.append("entityId=%s" % quoteattr(element.entity_id))
        attrs.append("entityType=%s" % quoteattr(element.entity_type))
    parts = [XML_DECLARATION, "<%s %s>" % (root, " ".join(attrs))]
    for t in element.triples:
        parts.append(_triple_xml("triple", t))
    for t in sorted(element.metadata, key=lambda x: x.name):
        parts.append(_triple_xml("metadata", t))
    if is_context and element.attribute_metadata:
        for name in sorted(element.attribute_metadata):
            inner = "".join(
                _triple_xml("metadata", t)
                for t in sorted(element.attribute_metadata[name], key=lambda x: x.name)
            )
            parts.append(
                "<attribute-metadata triple=%s>%s</attribute-metadata>"
                % (quoteattr(name), inner)
            )
    parts.append("</%s>" % root)
    return "".join(parts).encode("utf-8")


def _triple_from_xml(el: ET.Element) -> Triple:
    name = el.get("name")
    tag = el.get("type")
    if name is None or tag is None:
        raise Malformed("xml", "triple is missing name or type")
    if tag not in model.TYPE_TAGS:
        raise UnknownTypeTag(f"unknown type tag {tag!r}")
    text = el.text or ""
    value: object = text
    if tag == "boolean":
        if text not in ("true", "false"):
            raise Malformed("xml", f"boolean triple holds {text!r}")
        value = text == "true"
    try:
        return Triple(name, tag, value)
    except ModelError as exc:
        raise Malformed("xml", str(exc)) from None


def _triple_from_json(doc: object) -> Triple:
    if not isinstance(doc, dict):
        raise Malformed("json", "triple must be an object")
    name = doc.get("name")
    tag = doc.get("type")
    if not isinstance(name, str) or not isinstance(tag, str):
        raise Malformed("json", "triple is missing name or type")
    if tag not in model.TYPE_TAGS:
        raise UnknownTypeTag(f"unknown type tag {tag!r}")
    value = doc.get("value")
    if tag == "number" and isinstance(value, bool):
        raise Malformed("json", "number triple holds a boolean")
    try:
        return Triple(name, tag, value)
    except ModelError as exc:
        raise Malformed("json", str(exc)) from None


def decode_element(data: bytes | str, fmt: str) -> DataElement:
    if fmt == "json":
        return _decode_element_json(data)
    if fmt != "xml":
        raise ValueError(f"unknown format {fmt!r}")
    root = _parse_xml(data, lambda msg: Malformed("xml", msg))
    if not root.tag.startswith("{%s}" % NAMESPACE):
        raise Malformed("xml", f"unexpected namespace on {root.tag!r}")
    local = _localname(root.tag)
    if local not in ("data-element", "context-element"):
        raise Malformed("xml", f"unexpected root <{local}>")
    element_id = root.get("elementId")
    if not element_id:
        raise Malformed("xml", "missing elementId")
    triples, metadata, attr_meta = [], [], {}
    for child in root:
        child_local = _localname(child.tag)
        if child_local == "triple":
            triples.append(_triple_from_xml(child))
        elif child_local == "metadata":
            metadata.append(_triple_from_xml(child))
        elif child_local == "attribute-metadata":
            target = child.get("triple")
            if not target:
                raise Malformed("xml", "attribute-metadata without a triple name")
            attr_meta[target] = tuple(
                _triple_from_xml(m) for m in child if _localname(m.tag) == "metadata"
            )
        else:
            raise Malformed("xml", f"unexpected element <{child_local}>")
    try:
        if local == "context-element":
            entity_id = root.get("entityId") or ""
            entity_type = root.get("entityType") or ""
            return ContextElement(
                element_id, tuple(triples), tuple(metadata),
                entity_id=entity_id, entity_type=entity_type,
                attribute_metadata=attr_meta,
            )
        if attr_meta:
            raise Malformed("xml", "attribute-metadata on a data element")
        return DataElement(element_id, tuple(triples), tuple(metadata))
    except ModelError as exc:
        raise Malformed("xml", str(exc)) from None


def _decode_element_json(data: bytes | str) -> DataElement:
    return element_from_json_obj(_load_json_object(data))


def element_from_json_obj(doc: object) -> DataElement:
    """Build an element from an already-parsed JSON object.

    Number values must arrive as Decimal (parse with parse_float=Decimal),
    otherwise float formatting can leak into the canonical form.
    """
    if not isinstance(doc, dict):
        raise Malformed("json", "element must be an object")
    element_id = doc.get("elementId")
    if not isinstance(element_id, str):
        raise Malformed("json", "missing elementId")
    triples_doc = doc.get("triples")
    if not isinstance(triples_doc, list):
        raise Malformed("json", "triples must be a list")
    metadata_doc = doc.get("metadata", [])
    if not isinstance(metadata_doc, list):
        raise Malformed("json", "metadata must be a list")
    triples = tuple(_triple_from_json(t) for t in triples_doc)
    metadata = tuple(_triple_from_json(t) for t in metadata_doc)
    try:
        if "entityId" in doc or "entityType" in doc:
            attr_doc = doc.get("attributeMetadata", {})
            if not isinstance(attr_doc, dict):
                raise Malformed("json", "attributeMetadata must be an object")
            attr_meta = {
                name: tuple(_triple_from_json(t) for t in ts)
                for name, ts in attr_doc.items()
            }
            return ContextElement(
                element_id, triples, metadata,
                entity_id=str(doc.get("entityId") or ""),
                entity_type=str(doc.get("entityType") or ""),
                attribute_metadata=attr_meta,
            )
        return DataElement(element_id, triples, metadata)
    except ModelError as exc:
        raise Malformed("json", str(exc)) from None


# --- sensor observation ingest -------------------------------------------

def _find_local(root: ET.Element, local: str) -> ET.Element | None:
    for el in root.iter():
        if _localname(el.tag) == local:
            return el
    return None


def _attr_local(el: ET.Element, local: str) -> str | None:
    for key, value in el.attrib.items():
        if _localname(key) == local:
            return value
    return None


def parse_om_observation(data: bytes | str) -> ContextElement:
    """Turn a single observation document into a context element.

    The produced triples are ``name``, ``phenomenonTime``, ``parameter``,
    ``value`` and ``uom``; a document description, when present, becomes a
    metadata triple.  Entity type is always ``Observation``.
    """
    root = _parse_xml(data, OmMalformed)

    # gml:name of the observation, not om:name inside the parameter block
    obs_name = None
    for el in root.iter():
        if _localname(el.tag) == "name" and (el.text or "").strip():
            obs_name = (el.text or "").strip()
            break
    if obs_name is None:
        raise OmMalformed("observation has no name")

    time_el = _find_local(root, "timePosition")
    if time_el is None or not (time_el.text or "").strip():
        raise OmMalformed("observation has no time position")
    phenomenon_time = (time_el.text or "").strip()

    param_uri = None
    for el in root.iter():
        if _localname(el.tag) == "name":
            href = _attr_local(el, "href")
            if href:
                param_uri = href
                break
    if param_uri is None:
        raise OmMalformed("observation has no parameter reference")

    value_el = _find_local(root, "value")
    if value_el is None or not (value_el.text or "").strip():
        raise MissingObservationValue("observation has no value")
    uom = _attr_local(value_el, "uom")
    if not uom:
        raise OmMalformed("observation value has no unit of measure")

    description_el = _find_local(root, "description")
    metadata = []
    if description_el is not None and (description_el.text or "").strip():
        metadata.append(
            Triple("description", "string", (description_el.text or "").strip())
        )

    try:
        triples = (
            Triple("name", "string", obs_name),
            Triple("phenomenonTime", "timestamp", phenomenon_time),
            Triple("parameter", "uri", param_uri),
            Triple("value", "number", (value_el.text or "").strip()),
            Triple("uom", "string", uom),
        )
    except ModelError as exc:
        raise OmMalformed(str(exc)) from None

    entity_id = _attr_local(root, "id") or obs_name
    return ContextElement(
        model.new_element_id(),
        triples,
        tuple(metadata),
        entity_id=entity_id,
        entity_type="Observation",
    )
