"""Reference security monitor for enclave isolation.

A deterministic model of an enclave-capable machine and its privileged
monitor: resource ownership state machines, enclave/thread lifecycles with
async exits, measured initialization, mailbox-based local attestation, a
remote-attestation protocol with an offline verifier, plus a simulated
adversarial OS and an exhaustive small-state invariant checker.
"""

from .errors import SmError
from .machine import (
    MachineConfig,
    ProtectionDomain,
    SECURITY_MONITOR,
    UNTRUSTED_OS,
    enclave_domain,
)
from .monitor import SecurityMonitor
from .attestation import AttestationBundle, verify_attestation

__all__ = [
    "AttestationBundle",
    "MachineConfig",
    "ProtectionDomain",
    "SECURITY_MONITOR",
    "SecurityMonitor",
    "SmError",
    "UNTRUSTED_OS",
    "enclave_domain",
    "verify_attestation",
]

__version__ = "0.1.0"
