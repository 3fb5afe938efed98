"""Shared fixtures: golden wire documents, random element generators, and a
whitespace-insensitive XML comparison oracle independent of the codecs."""

from __future__ import annotations

import random
import uuid
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from openm2m.model import ContextElement, DataElement, Triple

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def golden_do_request() -> bytes:
    return (DATA_DIR / "do_request.xml").read_bytes()


@pytest.fixture
def golden_do_response() -> bytes:
    return (DATA_DIR / "do_response.xml").read_bytes()


@pytest.fixture
def golden_observation() -> bytes:
    return (DATA_DIR / "om_observation.xml").read_bytes()


def xml_tree(data: bytes | str):
    """Parse XML into a (tag, attrs, text, children) tuple tree, stripping
    insignificant whitespace.  Used as the equality oracle for encodings."""
    root = ET.fromstring(data)

    def walk(el: ET.Element):
        return (
            el.tag,
            dict(el.attrib),
            (el.text or "").strip(),
            [walk(child) for child in el],
        )

    return walk(root)


def random_uuid(rng: random.Random) -> str:
    return str(uuid.UUID(int=rng.getrandbits(128), version=4))


_WORDS = ("mass", "temp", "flow", "door", "lat", "lon", "state", "speed", "level")


def random_triple(rng: random.Random, name: str) -> Triple:
    tag = rng.choice(("string", "number", "boolean", "timestamp", "uri"))
    if tag == "string":
        value: object = "".join(
            rng.choice("abcdefghijklmnop <>&\"'xyz0123456789")
            for _ in range(rng.randint(0, 12))
        )
    elif tag == "number":
        value = rng.choice(
            [
                rng.randint(-10**6, 10**6),
                round(rng.uniform(-1000, 1000), rng.randint(0, 6)),
                f"{rng.randint(1, 9)}E{rng.choice('+-')}{rng.randint(8, 30)}",
                "0",
                "-12.5000",
            ]
        )
    elif tag == "boolean":
        value = rng.random() < 0.5
    elif tag == "timestamp":
        frac = rng.choice(["", f".{rng.randint(0, 999):03d}"])
        offset = rng.choice(["Z", "+00:00", "+02:00", "-05:30"])
        value = (
            f"20{rng.randint(10, 29):02d}-{rng.randint(1, 12):02d}-"
            f"{rng.randint(1, 28):02d}T{rng.randint(0, 23):02d}:"
            f"{rng.randint(0, 59):02d}:{rng.randint(0, 59):02d}{frac}{offset}"
        )
    else:
        value = f"urn:thing:{rng.randint(0, 10**9)}"
    return Triple(name, tag, value)


def random_triples(rng: random.Random, low: int, high: int) -> tuple[Triple, ...]:
    count = rng.randint(low, high)
    names = rng.sample([f"{w}-{i}" for i, w in enumerate(_WORDS)], count)
    return tuple(random_triple(rng, name) for name in names)


def random_element(rng: random.Random) -> DataElement:
    element_id = random_uuid(rng)
    triples = random_triples(rng, 0, 6)
    metadata = random_triples(rng, 0, 3)
    if rng.random() < 0.5 or not triples:
        return DataElement(element_id, triples, metadata)
    attr_meta = {}
    if rng.random() < 0.4:
        target = rng.choice(triples).name
        attr_meta = {target: random_triples(rng, 1, 2)}
    return ContextElement(
        element_id,
        triples,
        metadata,
        entity_id=f"obj-{rng.randint(0, 999)}",
        entity_type=rng.choice(("Device", "Observation", "Meter")),
        attribute_metadata=attr_meta,
    )
