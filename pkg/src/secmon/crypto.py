"""Measurement chain, device/monitor identities, and sealed crypto primitives.

The measurement record encoding below is normative (shared byte-for-byte with
the offline `measure` oracle); see README for the layout table. Signatures are
Ed25519 and key agreement is X25519, treated as sealed primitives behind
sign/verify/key_agreement; both schemes have published test vectors pinned in
the test suite.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .codec import u64

# Absorbed before any record; fixed protocol constant.
MEASUREMENT_DOMAIN_PREFIX = b"sanctorum-enclave-v1"

DIGEST_BYTES = 32
SIGNATURE_BYTES = 64
PUBLIC_KEY_BYTES = 32

_DEVICE_CERT_CONTEXT = b"device-identity-v1"
_SM_CERT_CONTEXT = b"monitor-identity-v1"
_ATTESTATION_CONTEXT = b"attestation-v1"
_CHANNEL_BINDING_CONTEXT = b"channel-binding-v1"
_CHANNEL_KEY_CONTEXT = b"channel-key-v1"


def sha3(data: bytes) -> bytes:
    return hashlib.sha3_256(data).digest()


def derive_seed(context: bytes, *parts: bytes) -> bytes:
    """32-byte seed from a domain-separated, length-prefixed hash of parts."""
    h = hashlib.sha3_256()
    h.update(u64(len(context)))
    h.update(context)
    for part in parts:
        h.update(u64(len(part)))
        h.update(part)
    return h.digest()


# ---------------------------------------------------------------- measurement


class RecordTag(IntEnum):
    CREATE = 0x01
    PAGE_TABLE_ALLOC = 0x02
    LOAD_PAGE = 0x03
    CREATE_THREAD = 0x04


@dataclass(frozen=True)
class MeasurementRecord:
    """One measured initialization operation: tag plus canonical body.

    Bodies use little-endian fixed-width fields and length-prefix every
    variable-length field, so distinct argument tuples never encode equal.
    Physical addresses are never part of a body.
    """

    tag: RecordTag
    body: bytes

    def encoded(self) -> bytes:
        return bytes([self.tag]) + u64(len(self.body)) + self.body


def create_record(sm_image_hash: bytes, platform_caps: int,
                  virt_base: int, virt_length: int,
                  mailbox_count: int) -> MeasurementRecord:
    body = (sm_image_hash + u64(platform_caps) + u64(virt_base)
            + u64(virt_length) + u64(mailbox_count))
    return MeasurementRecord(RecordTag.CREATE, body)


def page_table_record(vaddr: int) -> MeasurementRecord:
    return MeasurementRecord(RecordTag.PAGE_TABLE_ALLOC, u64(vaddr))


def load_page_record(vaddr: int, perms: int, content: bytes) -> MeasurementRecord:
    body = u64(vaddr) + bytes([perms & 0xFF]) + u64(len(content)) + content
    return MeasurementRecord(RecordTag.LOAD_PAGE, body)


def create_thread_record(entry_point: int,
                         fault_handlers: Mapping[int, int]) -> MeasurementRecord:
    body = bytearray(u64(entry_point))
    body += u64(len(fault_handlers))
    for kind in sorted(fault_handlers):
        body += bytes([kind & 0xFF])
        body += u64(fault_handlers[kind])
    return MeasurementRecord(RecordTag.CREATE_THREAD, bytes(body))


class MeasurementState:
    """Running sha3-256 over the domain prefix and an ordered record stream."""

    def __init__(self, _ctx=None, _count: int = 0, _finalized: bool = False):
        if _ctx is None:
            _ctx = hashlib.sha3_256()
            _ctx.update(MEASUREMENT_DOMAIN_PREFIX)
        self._ctx = _ctx
        self.record_count = _count
        self.finalized = _finalized

    def extend(self, record: MeasurementRecord) -> None:
        if self.finalized:
            raise ValueError("measurement already finalized")
        self._ctx.update(record.encoded())
        self.record_count += 1

    def finalize(self) -> bytes:
        if self.finalized:
            raise ValueError("measurement already finalized")
        self.finalized = True
        return self._ctx.digest()

    def current_digest(self) -> bytes:
        # digest of the stream so far, without consuming the state
        return self._ctx.copy().digest()

    def copy(self) -> "MeasurementState":
        return MeasurementState(self._ctx.copy(), self.record_count, self.finalized)


def measure_extend(state: MeasurementState, record: MeasurementRecord) -> MeasurementState:
    state.extend(record)
    return state


def finalize_measurement(state: MeasurementState) -> bytes:
    return state.finalize()


def measure_records(records: Iterable[MeasurementRecord]) -> bytes:
    """Digest a complete record stream in one shot (offline oracle path)."""
    state = MeasurementState()
    for record in records:
        state.extend(record)
    return state.finalize()


# ------------------------------------------------------------------ identity


@dataclass(frozen=True)
class Certificate:
    """Detached signature over a context-tagged body."""

    body: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        from .codec import u32
        return u32(len(self.body)) + self.body + u32(len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> tuple["Certificate", bytes]:
        import struct
        if len(raw) < 4:
            raise ValueError("truncated certificate")
        blen = struct.unpack_from("<I", raw, 0)[0]
        off = 4 + blen
        if len(raw) < off + 4:
            raise ValueError("truncated certificate")
        slen = struct.unpack_from("<I", raw, off)[0]
        end = off + 4 + slen
        if len(raw) < end:
            raise ValueError("truncated certificate")
        return cls(raw[4:off], raw[off + 4:end]), raw[end:]


def issue_certificate(issuer_seed: bytes, body: bytes) -> Certificate:
    return Certificate(body, sign(issuer_seed, body))


@dataclass(frozen=True)
class DeviceIdentity:
    """Per-device root of trust: fused secret plus a manufacturer-signed key.

    The root secret is never reachable through any monitor API; only the
    public key and certificate are. `root_public_key` stands in for the
    manufacturer PKI root a verifier would be provisioned with.
    """

    root_secret: bytes
    public_key: bytes
    certificate: Certificate
    root_public_key: bytes

    @classmethod
    def generate(cls, entropy: "EntropySource") -> "DeviceIdentity":
        return cls.from_secrets(entropy.read(32), entropy.read(32))

    @classmethod
    def from_secrets(cls, root_secret: bytes, manufacturer_seed: bytes) -> "DeviceIdentity":
        device_seed = derive_seed(b"device-key-v1", root_secret)
        device_pub = public_key_of(device_seed)
        body = _DEVICE_CERT_CONTEXT + device_pub
        cert = issue_certificate(manufacturer_seed, body)
        return cls(root_secret, device_pub, cert, public_key_of(manufacturer_seed))

    @property
    def signing_seed(self) -> bytes:
        return derive_seed(b"device-key-v1", self.root_secret)


@dataclass(frozen=True)
class SmIdentity:
    """Monitor identity bound to (device, monitor image) at boot."""

    image_hash: bytes
    secret_seed: bytes
    public_key: bytes
    certificate: Certificate


def derive_sm_identity(device: DeviceIdentity, sm_image: bytes) -> SmIdentity:
    """Deterministic keypair from (device root secret, image hash), certified
    by the device key over (public key || image hash)."""
    image_hash = sha3(sm_image)
    seed = derive_seed(b"sm-key-v1", device.root_secret, image_hash)
    pub = public_key_of(seed)
    body = _SM_CERT_CONTEXT + pub + image_hash
    cert = issue_certificate(device.signing_seed, body)
    return SmIdentity(image_hash, seed, pub, cert)


def parse_device_cert_body(body: bytes) -> bytes | None:
    """Device public key from a device certificate body, or None if malformed."""
    if len(body) != len(_DEVICE_CERT_CONTEXT) + PUBLIC_KEY_BYTES:
        return None
    if not body.startswith(_DEVICE_CERT_CONTEXT):
        return None
    return body[len(_DEVICE_CERT_CONTEXT):]


def parse_sm_cert_body(body: bytes) -> tuple[bytes, bytes] | None:
    """(sm public key, sm image hash) from an SM certificate body."""
    expect = len(_SM_CERT_CONTEXT) + PUBLIC_KEY_BYTES + DIGEST_BYTES
    if len(body) != expect or not body.startswith(_SM_CERT_CONTEXT):
        return None
    off = len(_SM_CERT_CONTEXT)
    return body[off:off + PUBLIC_KEY_BYTES], body[off + PUBLIC_KEY_BYTES:]


def attestation_message(nonce: bytes, channel_binding: bytes, measurement: bytes) -> bytes:
    return _ATTESTATION_CONTEXT + nonce + channel_binding + measurement


# ------------------------------------------------------------ sealed schemes


def sign(secret_seed: bytes, message: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(secret_seed)
    return key.sign(message)


def public_key_of(secret_seed: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(secret_seed)
    return key.public_key().public_bytes_raw()


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Signature check; malformed inputs yield False, never an exception."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def agreement_public_key(local_secret: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(local_secret).public_key().public_bytes_raw()


def key_agreement(local_secret: bytes, remote_public: bytes) -> bytes:
    """X25519 shared secret; rejects malformed or all-zero-result keys."""
    try:
        priv = X25519PrivateKey.from_private_bytes(local_secret)
        pub = X25519PublicKey.from_public_bytes(remote_public)
        shared = priv.exchange(pub)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid key agreement input: {exc}") from None
    if shared == bytes(32):
        raise ValueError("degenerate key agreement result")
    return shared


def channel_binding(public_a: bytes, public_b: bytes) -> bytes:
    """Order-independent hash binding both key-agreement public values."""
    lo, hi = sorted((public_a, public_b))
    return derive_seed(_CHANNEL_BINDING_CONTEXT, lo, hi)


class SecureChannel:
    """Authenticated-encryption channel keyed from a key-agreement secret."""

    def __init__(self, shared_secret: bytes):
        self._aead = ChaCha20Poly1305(derive_seed(_CHANNEL_KEY_CONTEXT, shared_secret))
        self._send_seq = 0

    def seal(self, plaintext: bytes) -> bytes:
        nonce = self._send_seq.to_bytes(12, "little")
        self._send_seq += 1
        return nonce + self._aead.encrypt(nonce, plaintext, b"")

    def open(self, wire: bytes) -> bytes:
        if len(wire) < 12:
            raise ValueError("truncated channel message")
        return self._aead.decrypt(wire[:12], wire[12:], b"")


# ------------------------------------------------------------------- entropy


class EntropySource:
    """Entropy for nonces and keys.

    Seeded mode is a deterministic sha3 counter stream so scenario replays
    are byte-identical; unseeded mode uses system randomness.
    """

    def __init__(self, seed: int | bytes | None = None):
        if seed is None:
            self._state = None
        else:
            raw = seed if isinstance(seed, bytes) else u64(seed)
            self._state = derive_seed(b"entropy-v1", raw)
        self._counter = 0
        self._pool = b""

    @property
    def deterministic(self) -> bool:
        return self._state is not None

    def read(self, n: int) -> bytes:
        if self._state is None:
            return os.urandom(n)
        while len(self._pool) < n:
            self._pool += sha3(self._state + u64(self._counter))
            self._counter += 1
        out, self._pool = self._pool[:n], self._pool[n:]
        return out

    def u64(self) -> int:
        return int.from_bytes(self.read(8), "little")

    def randrange(self, n: int) -> int:
        # rejection sampling keeps the stream unbiased
        if n <= 0:
            raise ValueError("empty range")
        span = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.u64()
            if v < span:
                return v % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def snapshot_token(self):
        if self._state is None:
            return None
        return (self._state, self._counter, self._pool)

    def clone(self) -> "EntropySource":
        dup = EntropySource.__new__(EntropySource)
        dup._state = self._state
        dup._counter = self._counter
        dup._pool = self._pool
        return dup
