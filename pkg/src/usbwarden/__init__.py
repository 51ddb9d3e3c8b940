"""usbwarden: a desk-scale simulator of an inline USB guard.

The guard sits between a protected host and its USB devices.  Storage
devices carry a hash tree plus a signed root so every mediated read and
write is integrity-checked; input devices must pass a human captcha before
a single report reaches the host; a coordination service closes the
snapshot-rollback gap; a gatekeeper is the only audited way for outside
data to enter protected storage.
"""

from .cs import CsClient, CsServer, CsStore, CsUnreachableError, RootRecord
from .gatekeeper import Gatekeeper, Policy, TransferRejected
from .hid import KeyboardAuth, MouseAuth, attack_success_probability
from .image import NotAuthorized, RsdImage, authorize_rsd, format_image
from .integrity import (
    BlockedError,
    InhibitedError,
    IntegritySession,
    OutOfRangeError,
    TamperDetectedError,
    init_session,
)
from .merkle import IntegrityProof, MerkleTree, verify
from .pki import (
    Certificate,
    CertificateAuthority,
    DeviceIdentity,
    RevocationList,
    RootSignature,
    verify_certificate,
    verify_root_signature,
)
from .router import Guard, PanelState, PortState

__version__ = "0.1.0"

__all__ = [
    "BlockedError",
    "Certificate",
    "CertificateAuthority",
    "CsClient",
    "CsServer",
    "CsStore",
    "CsUnreachableError",
    "DeviceIdentity",
    "Gatekeeper",
    "Guard",
    "InhibitedError",
    "IntegrityProof",
    "IntegritySession",
    "KeyboardAuth",
    "MerkleTree",
    "MouseAuth",
    "NotAuthorized",
    "OutOfRangeError",
    "PanelState",
    "Policy",
    "PortState",
    "RevocationList",
    "RootRecord",
    "RootSignature",
    "RsdImage",
    "TamperDetectedError",
    "TransferRejected",
    "attack_success_probability",
    "authorize_rsd",
    "format_image",
    "init_session",
    "verify",
    "verify_certificate",
    "verify_root_signature",
]
