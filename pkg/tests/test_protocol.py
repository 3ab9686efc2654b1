import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgedraft.errors import Malformed, OversizeList, Truncated
from edgedraft.protocol import (
    SessionClose,
    SessionInit,
    VerifyRequest,
    VerifyResponse,
    decode,
    decode_stream,
    encode,
)

# Hand encodings per the wire-contract table.
VERIFY_REQUEST_FRAME = bytes.fromhex(
    "00000027"  # body length 39 = 1+8+8+8+2+12*1
    "02"
    "0000000000000001"
    "0000000000000002"
    "0000000000000000"
    "0001"
    "00000005"
    "3FF0000000000000"
)
SESSION_CLOSE_FRAME = bytes.fromhex("00000009" "04" "0000000000000000")


def test_hand_encoded_verify_request():
    msg = VerifyRequest(1, 2, 0, (5,), (1.0,))
    assert encode(msg) == VERIFY_REQUEST_FRAME


def test_hand_encoded_session_close():
    assert encode(SessionClose(0)) == SESSION_CLOSE_FRAME


def test_verify_request_body_size_formula():
    for gamma in (1, 2, 5, 100):
        msg = VerifyRequest(1, 2, 3, tuple(range(gamma)), (0.5,) * gamma)
        frame = encode(msg)
        assert len(frame) - 4 == 1 + 8 + 8 + 8 + 2 + 12 * gamma


def test_oversize_list():
    with pytest.raises(OversizeList):
        encode(VerifyRequest(1, 2, 3, tuple([1] * 70_000), (0.5,) * 70_000))


def test_round_trip_examples():
    for msg in (
        VerifyRequest(1, 2, 0, (5,), (1.0,)),
        SessionClose(0),
        SessionInit(7, (1, 2, 3), "tiny-draft"),
        VerifyResponse(7, 9, 3, None),
        VerifyResponse(7, 9, 0, 123),
    ):
        frame = encode(msg)
        decoded, used = decode(frame)
        assert decoded == msg
        assert used == len(frame)


def test_truncated():
    frame = encode(SessionClose(0))
    for cut in (0, 3, len(frame) - 1):
        with pytest.raises(Truncated):
            decode(frame[:cut])


def test_unknown_type_malformed():
    body = bytes([0x7F]) + b"\x00" * 8
    frame = len(body).to_bytes(4, "big") + body
    with pytest.raises(Malformed):
        decode(frame)


def test_length_mismatch_malformed():
    frame = bytearray(encode(SessionClose(0)))
    frame[0:4] = (len(frame) - 4 + 1).to_bytes(4, "big")
    with pytest.raises(Truncated):
        decode(bytes(frame))
    long = bytes(frame) + b"\x00"
    with pytest.raises(Malformed):
        decode(long)


def test_invalid_utf8_malformed():
    msg = SessionInit(1, (), "abc")
    frame = bytearray(encode(msg))
    frame[-1] = 0xFF  # clobber the final name byte
    with pytest.raises(Malformed):
        decode(bytes(frame))


def test_empty_request_malformed():
    frame = bytes.fromhex("0000001B" "02" + "00" * 24 + "0000")
    with pytest.raises(Malformed):
        decode(frame)


def test_corrective_flag_consistency():
    good = encode(VerifyResponse(1, 2, 3, None))
    mutated = bytearray(good)
    mutated[-1] = 9  # corrective bytes nonzero while flag is 0
    with pytest.raises(Malformed):
        decode(bytes(mutated))


def test_concatenated_frames_decode_in_order():
    msgs = [SessionInit(1, (4, 5), "m"), VerifyRequest(1, 2, 2, (9,), (0.25,)),
            SessionClose(1)]
    stream = b"".join(encode(m) for m in msgs)
    decoded, used = decode_stream(stream + b"\x00\x00")
    assert decoded == msgs
    assert used == len(stream)


tokens_lists = st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=40)


@st.composite
def messages(draw):
    kind = draw(st.integers(0, 3))
    sid = draw(st.integers(0, 2**64 - 1))
    if kind == 0:
        return SessionInit(
            sid,
            tuple(draw(st.lists(st.integers(0, 2**32 - 1), max_size=30))),
            draw(st.text(max_size=40)),
        )
    if kind == 1:
        toks = tuple(draw(tokens_lists))
        probs = tuple(
            draw(st.lists(st.floats(1e-9, 1.0), min_size=len(toks),
                          max_size=len(toks)))
        )
        return VerifyRequest(sid, draw(st.integers(0, 2**64 - 1)),
                             draw(st.integers(0, 2**64 - 1)), toks, probs)
    if kind == 2:
        corrective = draw(
            st.one_of(st.none(), st.integers(0, 2**32 - 1))
        )
        return VerifyResponse(sid, draw(st.integers(0, 2**64 - 1)),
                              draw(st.integers(0, 2**16 - 1)), corrective)
    return SessionClose(sid)


@settings(max_examples=400, deadline=None)
@given(messages())
def test_round_trip_property(msg):
    decoded, used = decode(encode(msg))
    assert decoded == msg
    assert used == len(encode(msg))
