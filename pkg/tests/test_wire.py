from __future__ import annotations

import random

import pytest

from nc2s import wire

KEY = bytes(range(32))
OTHER_KEY = bytes(range(1, 33))


def fresh_window():
    return wire.ReplayWindow()


def test_empty_payload_is_27_bytes():
    data = wire.encode(wire.KEY_RENEWAL_REQ, b"", 1_000, KEY)
    assert len(data) == 27


def test_round_trip_random_payloads():
    rng = random.Random(7)
    for _ in range(300):
        payload = rng.randbytes(rng.randrange(0, 512))
        ts = rng.randrange(1, 2**48)
        data = wire.encode(wire.DATA, payload, ts, KEY)
        assert len(data) == 27 + len(payload)
        result = wire.decode_and_verify(data, KEY, fresh_window(), ts)
        assert isinstance(result, wire.Verified)
        assert result.message == wire.Nc2sMessage(wire.DATA, payload, ts)


def test_oversize_payload_rejected_at_encode():
    with pytest.raises(ValueError):
        wire.encode(wire.DATA, b"x" * 65536, 0, KEY)


def test_hmac_truncation_is_leading_16_of_rfc4231_case1():
    # RFC 4231 test case 1, digest frozen in test_crypto as well.
    full = bytes.fromhex(
        "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
    )
    assert wire.hmac_trunc(bytes([0x0B] * 20), b"Hi There") == full[:16]
    assert len(wire.hmac_trunc(KEY, b"")) == 16


def test_wrong_key_rejected():
    data = wire.encode(wire.DATA, b"abc", 500, KEY)
    assert wire.decode_and_verify(data, OTHER_KEY, fresh_window(), 500) is wire.Reject.BAD_TAG


def test_directional_key_separation():
    c2s = wire.encode(wire.DATA, b"up", 500, KEY)
    assert isinstance(wire.decode_and_verify(c2s, KEY, fresh_window(), 500), wire.Verified)
    assert wire.decode_and_verify(c2s, OTHER_KEY, fresh_window(), 500) is wire.Reject.BAD_TAG


def test_single_bit_flips_all_rejected():
    data = wire.encode(wire.DATA, b"0123456789abcdef", 1_000, KEY)
    for byte_index in range(len(data)):
        for bit in range(8):
            mutated = bytearray(data)
            mutated[byte_index] ^= 1 << bit
            result = wire.decode_and_verify(bytes(mutated), KEY, fresh_window(), 1_000)
            assert isinstance(result, wire.Reject)


def test_duplicate_rejected():
    window = fresh_window()
    data = wire.encode(wire.DATA, b"x", 900, KEY)
    assert isinstance(wire.decode_and_verify(data, KEY, window, 901), wire.Verified)
    assert wire.decode_and_verify(data, KEY, window, 902) is wire.Reject.DUPLICATE


def test_stale_past_and_future():
    data = wire.encode(wire.DATA, b"x", 10_000, KEY)
    assert wire.decode_and_verify(data, KEY, fresh_window(), 10_500) is wire.Reject.STALE
    assert wire.decode_and_verify(data, KEY, fresh_window(), 9_500) is wire.Reject.STALE
    assert isinstance(wire.decode_and_verify(data, KEY, fresh_window(), 10_400), wire.Verified)


def test_expected_age_correction():
    # A radio path with ~450 ms delay: raw age 500 ms fails, calibrated passes.
    data = wire.encode(wire.DATA, b"x", 10_000, KEY)
    assert wire.decode_and_verify(data, KEY, fresh_window(), 10_500) is wire.Reject.STALE
    ok = wire.decode_and_verify(
        data, KEY, fresh_window(), 10_500, expected_age_ms=450
    )
    assert isinstance(ok, wire.Verified)


def test_bad_tag_checked_before_replay_bookkeeping():
    window = fresh_window()
    forged = wire.encode(wire.DATA, b"x", 700, OTHER_KEY)
    assert wire.decode_and_verify(forged, KEY, window, 700) is wire.Reject.BAD_TAG
    genuine = wire.encode(wire.DATA, b"x", 700, KEY)
    assert isinstance(wire.decode_and_verify(genuine, KEY, window, 700), wire.Verified)


def test_unknown_type_distinct_from_forgery():
    authenticated = wire.encode(0x7F, b"", 100, KEY)
    assert wire.decode_and_verify(authenticated, KEY, fresh_window(), 100) is wire.Reject.UNKNOWN_TYPE
    forged = wire.encode(0x7F, b"", 100, OTHER_KEY)
    assert wire.decode_and_verify(forged, KEY, fresh_window(), 100) is wire.Reject.BAD_TAG


def test_malformed_buffers():
    assert wire.decode_and_verify(b"", KEY, fresh_window(), 0) is wire.Reject.MALFORMED
    assert wire.decode_and_verify(b"\x01" * 10, KEY, fresh_window(), 0) is wire.Reject.MALFORMED
    # Length field inconsistent with the buffer.
    data = bytearray(wire.encode(wire.DATA, b"abc", 0, KEY))
    data[2] += 1
    assert wire.decode_and_verify(bytes(data), KEY, fresh_window(), 0) is wire.Reject.MALFORMED


def test_dual_key_offer_reports_matching_index():
    data = wire.encode(wire.DATA, b"x", 50, OTHER_KEY)
    result = wire.decode_and_verify(data, [KEY, OTHER_KEY], fresh_window(), 50)
    assert isinstance(result, wire.Verified)
    assert result.key_index == 1


def test_replay_window_memory_bounded():
    window = fresh_window()
    for ts in range(0, 10_000):
        wire.decode_and_verify(wire.encode(wire.DATA, b"", ts, KEY), KEY, window, ts)
    assert len(window.seen) <= 2 * wire.REPLAY_WINDOW_MS + 2
