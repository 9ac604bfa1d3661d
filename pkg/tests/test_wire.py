import json
import struct

import pytest
from hypothesis import given, strategies as st

from gemombus.wire import (
    Encryption,
    Envelope,
    FrameReader,
    FrameTooLarge,
    FramingError,
    ParseError,
    Signature,
    canonical_bytes,
    decode_envelope,
    encode_envelope,
    parse_body,
    serialize,
)

hexid = st.binary(min_size=16, max_size=16).map(bytes.hex)
text = st.text(min_size=1, max_size=20)

envelopes = st.builds(
    Envelope,
    id=hexid,
    topic=text,
    sender=st.text(max_size=10),
    ts=st.integers(0, 2**53),
    seq=st.none() | st.integers(0, 2**64 - 1),
    headers=st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=4),
    payload=st.binary(max_size=256),
    enc=st.none() | st.builds(Encryption, key_id=text, cipher=text, nonce=st.binary(min_size=12, max_size=12)),
    sig=st.none() | st.builds(Signature, signer=text, signature=st.binary(max_size=80)),
)


@given(envelopes)
def test_frame_round_trip(e):
    assert decode_envelope(encode_envelope(e)) == e


@given(envelopes)
def test_canonical_form_ignores_signature_and_key_order(e):
    unsigned = Envelope(e.id, e.topic, e.sender, e.ts, e.seq, dict(reversed(list(e.headers.items()))), e.payload, e.enc)
    assert canonical_bytes(e) == canonical_bytes(unsigned)
    obj = json.loads(canonical_bytes(e))
    assert "sig" not in obj
    assert list(obj) == sorted(obj)


@given(st.lists(envelopes, min_size=1, max_size=5), st.integers(1, 50))
def test_reader_reassembles_any_chunking(envs, step):
    stream = b"".join(encode_envelope(e) for e in envs)
    r = FrameReader()
    out = []
    for i in range(0, len(stream), step):
        out += [parse_body(b) for b in r.feed(stream[i:i + step])]
    assert out == envs
    assert r.pending == 0


def sample(**kw):
    base = dict(id="0" * 32, topic="app/t", sender="alice", ts=1)
    base.update(kw)
    return Envelope(**base)


def test_oversized_frame_rejected_on_both_sides():
    e = sample(payload=b"x" * 2000)
    with pytest.raises(FrameTooLarge):
        encode_envelope(e, max_frame=1000)
    frame = encode_envelope(e)
    with pytest.raises(FrameTooLarge):
        decode_envelope(frame, max_frame=1000)
    with pytest.raises(FrameTooLarge):
        list(FrameReader(1000).feed(frame))


def test_length_mismatch():
    frame = encode_envelope(sample())
    with pytest.raises(FramingError):
        decode_envelope(frame[:-1])
    with pytest.raises(FramingError):
        decode_envelope(b"\x00\x00")


def test_parse_error_reports_byte_offset():
    body = b'{"id": "x", oops}'
    with pytest.raises(ParseError) as info:
        parse_body(body)
    assert info.value.offset == body.index(b"oops")


def test_invalid_utf8_offset():
    with pytest.raises(ParseError) as info:
        parse_body(b'{"a": "\xff"}')
    assert info.value.offset == 7


@pytest.mark.parametrize("mutate", [
    lambda o: o.update(payload="not base64!"),
    lambda o: o.update(payload="QQ"),
    lambda o: o.update(id="zz"),
    lambda o: o.update(ts=-1),
    lambda o: o.update(seq=2**64),
    lambda o: o.update(seq="3"),
    lambda o: o.update(headers={"a": 1}),
    lambda o: o.pop("topic"),
])
def test_invalid_envelopes_rejected(mutate):
    obj = json.loads(serialize(sample(payload=b"hello")))
    mutate(obj)
    with pytest.raises(ParseError):
        parse_body(json.dumps(obj).encode())


def test_envelope_validation():
    with pytest.raises(ValueError):
        sample(id="abc")
    with pytest.raises(ValueError):
        sample(topic="")
    with pytest.raises(ValueError):
        sample(ts=1.5)


def test_header_helpers_keep_other_fields():
    e = sample(headers={"a": "1", "b": "2"}, payload=b"p", seq=4)
    f = e.with_headers(c="3").without_headers("a")
    assert f.headers == {"b": "2", "c": "3"}
    assert (f.id, f.payload, f.seq) == (e.id, e.payload, e.seq)
    with pytest.raises(ValueError):
        e.with_headers(d=4)


def test_length_prefix_is_big_endian():
    frame = encode_envelope(sample())
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
