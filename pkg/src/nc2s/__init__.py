"""NC2S: credentialed command-and-control for unmanned vehicles.

Library layout:

- ``crypto``      EC/KDF primitives (deterministic ECDSA, ECDH, HKDF)
- ``artifacts``   certificates, credentials, revocation lists, mission bundles
- ``wire``        authenticated datagram codec and replay window
- ``keyschedule`` directional session keys and the nonce renewal machine
- ``policy``      capacity policy loading and authorization queries
- ``emulator``    deterministic virtual-time links, streams, adversary
- ``channel``     mutually authenticated control channel for establishment
- ``session``     per-link session state machine
- ``nodes``       the five roles (CA tool, CT1, CT2, GCS, UxV)
- ``metrics``     event trace collection and experiment summaries
- ``scenario``    scenario files and the experiment runner
- ``control_api`` local command/event API (NDJSON TCP + WebSocket)
- ``runtime``     real-socket runtime for live mode
- ``cli``         the ``nc2s`` command
"""

__version__ = "0.1.0"
