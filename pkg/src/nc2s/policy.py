"""Capacity policy: the mission JSON document mapping capacity tokens to
permitted message types, and the runtime authorization queries against it.

Direction semantics: ``SEND`` is the client-to-server flow of a credentialed
link, ``RECV`` the server-to-client flow. A node checks the set for the flow
it is looking at, whichever end it sits on: a server authorizing inbound
traffic consults the credential's effective SEND set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from . import wire


class Direction(Enum):
    SEND = "send"
    RECV = "recv"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Category:
    send: frozenset[int]
    recv: frozenset[int]
    implies: tuple[str, ...]


@dataclass
class CapacityPolicy:
    version: int
    categories: dict[str, Category]
    link_types: dict[int, frozenset[str]]
    infrastructure: frozenset[int]
    _closure: dict[str, frozenset[str]] = field(default_factory=dict, repr=False)

    def tokens_of(self, cap: str) -> list[str]:
        tokens = [t for t in cap.split(",") if t]
        if not tokens:
            raise PolicyError("empty capacity string")
        for token in tokens:
            if token not in self.categories:
                raise PolicyError(f"unknown capacity token {token!r}")
        return tokens

    def closure(self, token: str) -> frozenset[str]:
        """Token plus everything it transitively implies."""
        cached = self._closure.get(token)
        if cached is None:
            seen: set[str] = set()
            stack = [token]
            while stack:
                current = stack.pop()
                if current in seen:
                    continue
                seen.add(current)
                stack.extend(self.categories[current].implies)
            cached = frozenset(seen)
            self._closure[token] = cached
        return cached


def load_policy(document: bytes | str) -> CapacityPolicy:
    """Parse and validate a policy document; raises PolicyError on any defect."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise PolicyError(f"policy parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyError("policy must be a JSON object")
    return policy_from_doc(doc)


def policy_from_doc(doc: dict) -> CapacityPolicy:
    version = doc.get("version")
    if not isinstance(version, int):
        raise PolicyError("policy version must be an integer")
    raw_categories = doc.get("categories")
    if not isinstance(raw_categories, dict) or not raw_categories:
        raise PolicyError("policy needs a non-empty categories map")

    categories: dict[str, Category] = {}
    for token, spec in raw_categories.items():
        send = spec.get("send", [])
        recv = spec.get("recv", [])
        implies = spec.get("implies", [])
        for code in list(send) + list(recv):
            if code not in wire.MESSAGE_TYPES:
                raise PolicyError(f"category {token!r} references unknown message type {code:#x}")
        categories[token] = Category(frozenset(send), frozenset(recv), tuple(implies))

    for token, cat in categories.items():
        for target in cat.implies:
            if target not in categories:
                raise PolicyError(f"category {token!r} implies unknown token {target!r}")

    _check_acyclic(categories)

    link_types: dict[int, frozenset[str]] = {}
    for key, tokens in doc.get("link_types", {}).items():
        code = int(key)
        if not 0 <= code <= 255:
            raise PolicyError(f"link type {key} out of byte range")
        for token in tokens:
            if token not in categories:
                raise PolicyError(f"link type {key} allows unknown token {token!r}")
        link_types[code] = frozenset(tokens)

    infrastructure = set(wire.INFRA_TYPES)
    for code in doc.get("infrastructure", []):
        if code not in wire.MESSAGE_TYPES:
            raise PolicyError(f"infrastructure references unknown message type {code:#x}")
        infrastructure.add(code)

    return CapacityPolicy(version, categories, link_types, frozenset(infrastructure))


def _check_acyclic(categories: dict[str, Category]) -> None:
    WHITE, GREY, BLACK = 0, 1, 2
    state = {token: WHITE for token in categories}

    def visit(token: str) -> None:
        state[token] = GREY
        for target in categories[token].implies:
            if state[target] == GREY:
                raise PolicyError(f"implies cycle through {target!r}")
            if state[target] == WHITE:
                visit(target)
        state[token] = BLACK

    for token in categories:
        if state[token] == WHITE:
            visit(token)


def default_policy_doc() -> dict:
    data = resources.files("nc2s.missions").joinpath("default_policy.json").read_text()
    return json.loads(data)


def default_policy() -> CapacityPolicy:
    return policy_from_doc(default_policy_doc())


def effective_set(policy: CapacityPolicy, cap: str, direction: Direction) -> frozenset[int]:
    """Union of the direction sets over all tokens, closed over implies."""
    out: set[int] = set()
    for token in policy.tokens_of(cap):
        for member in policy.closure(token):
            category = policy.categories[member]
            out |= category.send if direction is Direction.SEND else category.recv
    return frozenset(out)


def authorize(policy: CapacityPolicy, cred, msg_type: int, direction: Direction) -> bool:
    """Allow/Deny for one message type under a verified credential.

    Infrastructure types (revocation, renewal, final-hop delivery) are always
    permitted on an authenticated session: authorization maintenance must not
    be blockable by a narrow capacity.
    """
    if msg_type in policy.infrastructure:
        return True
    try:
        tokens = policy.tokens_of(cred.cap)
    except PolicyError:
        return False
    allowed_tokens = policy.link_types.get(cred.link_type)
    if allowed_tokens is not None and not set(tokens) <= allowed_tokens:
        return False
    return msg_type in effective_set(policy, cred.cap, direction)
