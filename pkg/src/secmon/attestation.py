"""Mailboxes, attestation bundles, and the offline bundle verifier.

Mailboxes are the monitor-mediated channel for local attestation: each
message is tagged with the sender's measurement by the monitor, so a
recipient authenticates a local peer by comparing that tag against an
expected constant. The AttestationBundle is the remote-attestation wire
object; its serialization (length-prefixed fields, fixed order) is a
normative surface shared with the CLI verifier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import crypto
from .codec import u32

MAILBOX_MESSAGE_BYTES = 512

# sender id the monitor uses when it delivers key material itself
SM_MAIL_SENDER = 0
SM_SENDER_MEASUREMENT = bytes(32)


class MailboxState(Enum):
    CLOSED = "Closed"
    ACCEPTING = "Accepting"
    FULL = "Full"


@dataclass
class Mailbox:
    """One receive slot: armed for a specific sender, then filled once."""

    state: MailboxState = MailboxState.CLOSED
    expected_sender: Optional[int] = None
    message: bytes = b""
    sender_measurement: bytes = b""

    def snapshot_token(self):
        return (self.state.value, self.expected_sender, self.message,
                self.sender_measurement)

    def clone(self) -> "Mailbox":
        return Mailbox(self.state, self.expected_sender, self.message,
                       self.sender_measurement)


# ------------------------------------------------------------------- bundles


@dataclass(frozen=True)
class AttestationBundle:
    """Verifier-facing attestation: measurement and nonce under the monitor
    key, chained to the device and its PKI root."""

    enclave_measurement: bytes
    nonce: bytes
    channel_binding: bytes
    signature: bytes
    sm_certificate: crypto.Certificate
    device_certificate: crypto.Certificate

    def to_bytes(self) -> bytes:
        parts = [self.enclave_measurement, self.nonce, self.channel_binding,
                 self.signature, self.sm_certificate.to_bytes(),
                 self.device_certificate.to_bytes()]
        return b"".join(u32(len(p)) + p for p in parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationBundle":
        fields = []
        off = 0
        for _ in range(6):
            if off + 4 > len(raw):
                raise ValueError("truncated bundle")
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + n > len(raw):
                raise ValueError("truncated bundle")
            fields.append(raw[off:off + n])
            off += n
        if off != len(raw):
            raise ValueError("trailing bytes after bundle")
        sm_cert, rest = crypto.Certificate.from_bytes(fields[4])
        if rest:
            raise ValueError("trailing bytes in sm certificate")
        dev_cert, rest = crypto.Certificate.from_bytes(fields[5])
        if rest:
            raise ValueError("trailing bytes in device certificate")
        return cls(fields[0], fields[1], fields[2], fields[3], sm_cert, dev_cert)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def verify_attestation(bundle: AttestationBundle, expected_nonce: bytes,
                       expected_measurement: bytes,
                       trusted_root_key: bytes) -> VerifyResult:
    """Offline check of the two-link chain, the freshness nonce, the expected
    measurement, and the monitor signature. All failures return a reason code
    instead of raising."""
    if (len(bundle.enclave_measurement) != crypto.DIGEST_BYTES
            or len(bundle.nonce) != crypto.DIGEST_BYTES
            or len(bundle.channel_binding) != crypto.DIGEST_BYTES):
        return VerifyResult(False, "format")

    device_pub = crypto.parse_device_cert_body(bundle.device_certificate.body)
    if device_pub is None or not crypto.verify(
            trusted_root_key, bundle.device_certificate.body,
            bundle.device_certificate.signature):
        return VerifyResult(False, "device_cert")

    parsed = crypto.parse_sm_cert_body(bundle.sm_certificate.body)
    if parsed is None or not crypto.verify(
            device_pub, bundle.sm_certificate.body,
            bundle.sm_certificate.signature):
        return VerifyResult(False, "sm_cert")
    sm_pub, _sm_image_hash = parsed

    if bundle.nonce != expected_nonce:
        return VerifyResult(False, "nonce")
    if bundle.enclave_measurement != expected_measurement:
        return VerifyResult(False, "measurement")

    message = crypto.attestation_message(bundle.nonce, bundle.channel_binding,
                                         bundle.enclave_measurement)
    if not crypto.verify(sm_pub, message, bundle.signature):
        return VerifyResult(False, "signature")
    return VerifyResult(True)


# ------------------------------------------------------- signing enclave code


ATTESTATION_REQUEST_BYTES = 64  # nonce || channel_binding
ATTESTATION_REPLY_BYTES = 96    # target measurement || signature


def build_attestation_request(nonce: bytes, channel_binding: bytes) -> bytes:
    return nonce + channel_binding


def sign_attestation_request(attestation_seed: bytes, request: bytes,
                             target_measurement: bytes) -> Optional[bytes]:
    """The signing enclave's service routine: sign (nonce, binding, target
    measurement) with the monitor key fetched via get_attestation_key.

    The target measurement comes from the mailbox sender tag, not from the
    request, so a caller cannot ask for an attestation of someone else's
    identity. Malformed requests get no reply.
    """
    if len(request) != ATTESTATION_REQUEST_BYTES:
        return None
    nonce, binding = request[:32], request[32:]
    message = crypto.attestation_message(nonce, binding, target_measurement)
    return target_measurement + crypto.sign(attestation_seed, message)


def parse_attestation_reply(reply: bytes) -> tuple[bytes, bytes]:
    if len(reply) != ATTESTATION_REPLY_BYTES:
        raise ValueError("bad attestation reply length")
    return reply[:32], reply[32:]
