from __future__ import annotations

import json
from types import SimpleNamespace

import pytest

from nc2s import wire
from nc2s.policy import (
    Direction,
    PolicyError,
    authorize,
    default_policy,
    effective_set,
    load_policy,
)

MINIMAL = {
    "version": 1,
    "categories": {
        "MON": {"recv": [1]},
        "CTRL": {"send": [1], "implies": ["MON"]},
    },
}


def cred(cap, link_type=3):
    return SimpleNamespace(cap=cap, link_type=link_type)


def test_minimal_policy_loads():
    policy = load_policy(json.dumps(MINIMAL))
    assert effective_set(policy, "CTRL", Direction.SEND) == {1}


def test_implies_cycle_rejected():
    doc = {"version": 1, "categories": {"CTRL": {"send": [1], "implies": ["CTRL"]}}}
    with pytest.raises(PolicyError, match="cycle"):
        load_policy(json.dumps(doc))
    doc = {
        "version": 1,
        "categories": {"A": {"implies": ["B"]}, "B": {"implies": ["A"]}},
    }
    with pytest.raises(PolicyError, match="cycle"):
        load_policy(json.dumps(doc))


def test_parse_and_reference_errors():
    with pytest.raises(PolicyError, match="parse"):
        load_policy(b"")
    with pytest.raises(PolicyError, match="unknown message type"):
        load_policy(json.dumps({"version": 1, "categories": {"X": {"send": [0x7F]}}}))
    with pytest.raises(PolicyError, match="implies unknown"):
        load_policy(json.dumps({"version": 1, "categories": {"X": {"implies": ["Y"]}}}))
    with pytest.raises(PolicyError):
        load_policy(json.dumps({"version": "one", "categories": {"X": {}}}))


def test_effective_set_transitive_closure():
    policy = load_policy(json.dumps(MINIMAL))
    assert effective_set(policy, "CTRL", Direction.RECV) == {1}  # via implied MON
    assert effective_set(policy, "MON", Direction.SEND) == frozenset()
    # Union absorption: listing the implied token changes nothing.
    for direction in Direction:
        assert effective_set(policy, "MON,CTRL", direction) == effective_set(
            policy, "CTRL", direction
        )


def test_effective_set_unknown_token():
    policy = load_policy(json.dumps(MINIMAL))
    with pytest.raises(PolicyError):
        effective_set(policy, "WARP", Direction.SEND)
    with pytest.raises(PolicyError):
        effective_set(policy, "", Direction.SEND)


def test_authorize_fixture_verdicts():
    policy = default_policy()
    assert authorize(policy, cred("CTRL"), wire.DATA, Direction.SEND)
    assert not authorize(policy, cred("MON"), wire.DATA, Direction.SEND)
    assert authorize(policy, cred("MON"), wire.DATA, Direction.RECV)
    assert authorize(policy, cred("PAYLOAD"), wire.DATA, Direction.RECV)
    assert not authorize(policy, cred("PAYLOAD"), wire.DATA, Direction.SEND)


def test_infrastructure_types_always_allowed():
    policy = default_policy()
    for msg_type in (wire.KEY_RENEWAL_REQ, wire.KEY_RENEWAL_NONCE, wire.CERTRL_UPDATE,
                     wire.CREDRL_UPDATE, wire.CRED_UPDATE_UXV):
        assert authorize(policy, cred("MON"), msg_type, Direction.SEND)
        assert authorize(policy, cred("MON"), msg_type, Direction.RECV)


def test_link_type_restricts_tokens():
    policy = default_policy()
    # C2 is a commander capacity; it is not allowed on a GCS-UxV link.
    assert not authorize(policy, cred("C2", link_type=3), wire.DATA, Direction.SEND)
    assert authorize(policy, cred("C2", link_type=2), wire.ORDER_GCS, Direction.SEND)
    # CTRL is not a commander-link capacity.
    assert not authorize(policy, cred("CTRL", link_type=2), wire.DATA, Direction.SEND)


def test_authorize_monotone_in_capacity():
    policy = default_policy()
    tokens = ["MON", "PAYLOAD", "CTRL"]
    for base in tokens:
        for extra in tokens:
            combined = f"{base},{extra}"
            for direction in Direction:
                for msg_type in (wire.DATA, wire.MAP_REPORT):
                    if authorize(policy, cred(base), msg_type, direction):
                        assert authorize(policy, cred(combined), msg_type, direction)


def test_default_policy_document_validates():
    policy = default_policy()
    assert policy.version == 1
    assert "C2" in policy.categories
    assert policy.link_types[3] == {"CTRL", "PAYLOAD", "MON"}
