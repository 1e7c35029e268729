"""Authenticated-encryption stand-in for the client-to-enclave channel.

Not a real cipher. The keystream is HMAC-SHA256 in counter mode and the tag is
HMAC-SHA256 over ``(user, round, ciphertext)``. It only has to honour the
contract that matters to the pipeline: a wrong key, a wrong header or any
flipped byte is rejected. A real AEAD can replace :func:`seal` and
:func:`open_envelope` without touching callers.
"""

import hashlib
import hmac
import struct
from dataclasses import dataclass


class AuthenticationError(ValueError):
    pass


@dataclass(frozen=True)
class Envelope:
    user: int
    round: int
    ciphertext: bytes
    tag: bytes


def _header(user, rnd):
    return struct.pack("<QQ", user, rnd)


def _keystream(key, user, rnd, n):
    out = bytearray()
    counter = 0
    while len(out) < n:
        out += hmac.new(key, b"ks" + _header(user, rnd) + struct.pack("<Q", counter), hashlib.sha256).digest()
        counter += 1
    return bytes(out[:n])


def _xor(a, b):
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(len(a), "little")


def seal(key, user, rnd, payload):
    ct = _xor(payload, _keystream(key, user, rnd, len(payload)))
    tag = hmac.new(key, b"tag" + _header(user, rnd) + ct, hashlib.sha256).digest()
    return Envelope(user, rnd, ct, tag)


def open_envelope(key, env):
    expect = hmac.new(key, b"tag" + _header(env.user, env.round) + env.ciphertext, hashlib.sha256).digest()
    if not hmac.compare_digest(expect, env.tag):
        raise AuthenticationError("authentication failure")
    return _xor(env.ciphertext, _keystream(key, env.user, env.round, len(env.ciphertext)))


def provision_keys(user_ids, rng):
    """Simulated attestation step: register one 32-byte shared key per user."""
    return {int(u): rng.bytes(32) for u in user_ids}
