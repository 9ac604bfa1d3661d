"""Thin wrappers over ``cryptography`` for the primitives the bus needs.

Each principal owns a single P-256 keypair, used both for ECDSA signatures
and for ECIES-style hybrid encryption (ephemeral ECDH, HKDF-SHA256,
AES-256-GCM).  Topic payloads use AES-GCM with a fresh 96-bit nonce.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import os

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

CIPHER_NAME = "AES-GCM"
_CURVE = ec.SECP256R1()
_POINT_LEN = 65
_WRAP_INFO = b"gemombus-wrap-v1"


class DecryptError(Exception):
    pass


def generate_keypair() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(_CURVE)


def public_bytes(key) -> bytes:
    if isinstance(key, ec.EllipticCurvePrivateKey):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def load_public(data: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, data)


def private_pem(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )


def load_private_pem(data: bytes) -> ec.EllipticCurvePrivateKey:
    return serialization.load_pem_private_key(data, password=None)


def sign(private_key: ec.EllipticCurvePrivateKey, data: bytes) -> bytes:
    return private_key.sign(data, ec.ECDSA(hashes.SHA256()))


def verify(public_key, signature: bytes, data: bytes) -> bool:
    if isinstance(public_key, (bytes, bytearray)):
        try:
            public_key = load_public(bytes(public_key))
        except ValueError:
            return False
    try:
        public_key.verify(signature, data, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True


def _wrap_key(shared: bytes, eph: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=eph, info=_WRAP_INFO).derive(shared)


def seal_to(public_key, plaintext: bytes) -> bytes:
    """Encrypt so only the holder of the matching private key can open it."""
    if isinstance(public_key, (bytes, bytearray)):
        public_key = load_public(bytes(public_key))
    eph = ec.generate_private_key(_CURVE)
    eph_pub = public_bytes(eph)
    kek = _wrap_key(eph.exchange(ec.ECDH(), public_key), eph_pub)
    nonce = os.urandom(12)
    return eph_pub + nonce + AESGCM(kek).encrypt(nonce, plaintext, eph_pub)


def open_sealed(private_key: ec.EllipticCurvePrivateKey, blob: bytes) -> bytes:
    if len(blob) < _POINT_LEN + 12 + 16:
        raise DecryptError("sealed blob too short")
    eph_pub, nonce, ct = blob[:_POINT_LEN], blob[_POINT_LEN:_POINT_LEN + 12], blob[_POINT_LEN + 12:]
    try:
        peer = load_public(eph_pub)
    except ValueError:
        raise DecryptError("bad ephemeral key") from None
    kek = _wrap_key(private_key.exchange(ec.ECDH(), peer), eph_pub)
    try:
        return AESGCM(kek).decrypt(nonce, ct, eph_pub)
    except InvalidTag:
        raise DecryptError("sealed blob failed authentication") from None


def encrypt(material: bytes, plaintext: bytes, aad: bytes = b"") -> tuple[bytes, bytes]:
    nonce = os.urandom(12)
    return nonce, AESGCM(material).encrypt(nonce, plaintext, aad)


def decrypt(material: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return AESGCM(material).decrypt(nonce, ciphertext, aad)
    except (InvalidTag, ValueError):
        raise DecryptError("payload failed authentication") from None


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def keyed_hash(secret: bytes, data: bytes) -> bytes:
    return hmac.new(secret, data, hashlib.sha256).digest()


def b32(data: bytes) -> str:
    return base64.b32encode(data).decode("ascii").rstrip("=")
