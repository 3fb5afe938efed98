"""M2M middleware gateway: triple-based elements, event-sourced store, and
the service capabilities (grouping, messaging, transactions, notification,
compensation, sessions) exposed over a REST surface with XML and JSON wire
representations."""

from openm2m.model import (
    ContextElement,
    DataElement,
    Event,
    Triple,
    element_digest,
    make_data_element,
    promote_to_context,
    strip_identity,
)

__all__ = [
    "ContextElement",
    "DataElement",
    "Event",
    "Triple",
    "element_digest",
    "make_data_element",
    "promote_to_context",
    "strip_identity",
]
