"""The guard's event loop: screening router, authorization routing, panel
state and the event trace.

One Guard instance models one inline protection unit.  Everything runs on
a single logical thread: device messages, host messages and timer ticks
are delivered serially, so port state needs no locking.

Routing rules, by port state:

    EMPTY        nothing attached; stray device messages are anomalies
    AUTHORIZING  HID challenge in progress; reports feed the authorizer
                 only and nothing reaches the host or the device
    AUTHORIZED   HID reports are short-circuited to the host verbatim;
                 storage I/O goes through the integrity session
    BLOCKED      every message from the device is dropped until re-attach

The captured enumeration is replayed to the host byte-identically at the
moment a device becomes authorized, never earlier.  A device that
enumerated as storage and then emits HID traffic is logged as an anomaly
and treated as a logic detach, which forces a full re-authorization.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Optional

from . import usb
from .cs import CsUnreachableError
from .hid import Feedback, make_authorizer
from .image import NotAuthorized, RsdImage
from .integrity import (
    BlockedError,
    InhibitedError,
    IntegritySession,
    OutOfRangeError,
    TamperDetectedError,
    init_session,
)
from .pki import DeviceIdentity, RevocationList
from .usb import (
    Attach,
    BlockRead,
    BlockReadReply,
    BlockWrite,
    DeviceDescriptor,
    EnumReply,
    EnumRequest,
    HidReport,
    LogicDetach,
    TraceEvent,
    UsbMessage,
    WriteReply,
)

REASON_UNSUPPORTED_TYPE = "unsupported-type"
REASON_CAPTCHA_FAILED = "captcha-failed"


class PortState(enum.Enum):
    EMPTY = "empty"
    ENUMERATING = "enumerating"
    AUTHORIZING = "authorizing"
    AUTHORIZED = "authorized"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class PanelState:
    up_led: str
    down_led: str
    display_text: str


@dataclass(frozen=True)
class HostDelivery:
    """A message handed to the host, tagged with where its content came from."""

    port: int
    message: UsbMessage
    origin: str  # "device" for forwarded/replayed device content, "guard" for replies


@dataclass
class _Port:
    state: PortState = PortState.EMPTY
    descriptor: Optional[DeviceDescriptor] = None
    image: Optional[RsdImage] = None
    transcript: list[UsbMessage] = field(default_factory=list)
    authorizer: object = None
    session: Optional[IntegritySession] = None
    block_reason: str = ""
    dirty_since: Optional[int] = None

    def reset(self) -> None:
        self.state = PortState.EMPTY
        self.descriptor = None
        self.image = None
        self.transcript = []
        self.authorizer = None
        self.session = None
        self.block_reason = ""
        self.dirty_since = None


class Guard:
    """One mediation unit with `port_count` down ports (default one)."""

    def __init__(
        self,
        *,
        identity: DeviceIdentity,
        ca_public_key: bytes,
        revocation_list: Optional[RevocationList] = None,
        cs_client=None,
        rng: Optional[random.Random] = None,
        port_count: int = 1,
        flush_interval_ms: int = 500,
    ):
        self.identity = identity
        self.ca_public_key = ca_public_key
        self.revocation_list = revocation_list
        self.cs_client = cs_client
        self.rng = rng or random.Random()
        self.flush_interval_ms = flush_interval_ms
        self.clock_ms = 0
        self._ports = [_Port() for _ in range(port_count)]
        self.host_inbox: list[HostDelivery] = []
        self._device_outbox: list[list[UsbMessage]] = [[] for _ in range(port_count)]
        self.trace: list[TraceEvent] = []
        self.anomalies: list[str] = []
        self._display = ""

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, port: int, direction: str, variant: str, summary: str = "") -> None:
        self.trace.append(TraceEvent(self.clock_ms, port, direction, variant, summary))

    def _anomaly(self, port: int, text: str) -> None:
        self.anomalies.append(text)
        self._emit(port, "u", "Anomaly", text)

    def _to_host(self, port: int, msg: UsbMessage, origin: str) -> None:
        self.host_inbox.append(HostDelivery(port, msg, origin))
        self._emit(port, "u->host", type(msg).__name__, "")

    def _to_device(self, port: int, msg: UsbMessage) -> None:
        self._device_outbox[port].append(msg)
        self._emit(port, "u->dev", type(msg).__name__, "")

    def _show(self, text: str) -> None:
        self._display = text

    def port_state(self, port: int) -> PortState:
        return self._ports[port].state

    def block_reason(self, port: int) -> str:
        return self._ports[port].block_reason

    def session(self, port: int) -> Optional[IntegritySession]:
        return self._ports[port].session

    def authorizer(self, port: int):
        return self._ports[port].authorizer

    def device_outbox(self, port: int) -> list[UsbMessage]:
        return self._device_outbox[port]

    def captured_transcript(self, port: int) -> list[UsbMessage]:
        return list(self._ports[port].transcript)

    @property
    def display_text(self) -> str:
        return self._display

    @property
    def panel(self) -> PanelState:
        states = [p.state for p in self._ports]
        if any(s is PortState.BLOCKED for s in states):
            down = "blink_red"
        elif any(s in (PortState.AUTHORIZING, PortState.ENUMERATING) for s in states):
            down = "blink_green"
        elif any(s is not PortState.EMPTY for s in states) and all(
            s in (PortState.AUTHORIZED, PortState.EMPTY) for s in states
        ):
            down = "fixed_green"
        else:
            down = "off"
        return PanelState(up_led="orange_on", down_led=down, display_text=self._display)

    # -- attach / detach -----------------------------------------------------

    def attach(self, port: int, descriptor: DeviceDescriptor, image: Optional[RsdImage] = None) -> None:
        """A device appears on a down port; enumeration is captured and the
        matching authorization procedure starts immediately."""
        p = self._ports[port]
        if p.state is not PortState.EMPTY:
            raise RuntimeError(f"port {port} already occupied")
        p.descriptor = descriptor
        p.state = PortState.ENUMERATING
        self._emit(port, "dev->u", "Attach", descriptor.declared_type)
        self._to_device(port, EnumRequest())
        self._emit(port, "dev->u", "EnumReply", descriptor.declared_type)
        p.transcript = [Attach(descriptor), EnumReply(descriptor)]

        if descriptor.declared_type == usb.MASS_STORAGE:
            if image is None:
                raise ValueError("mass-storage attach needs an image")
            p.image = image
            p.state = PortState.AUTHORIZING
            self._show(f"Checking storage device {image.rsd_id}...")
            try:
                p.session = init_session(
                    image,
                    self.identity,
                    self.ca_public_key,
                    self.revocation_list,
                    self.cs_client,
                )
            except (NotAuthorized, BlockedError) as e:
                p.state = PortState.BLOCKED
                p.block_reason = e.reason
                self._show(f"Storage device refused: {e.reason}")
                self._emit(port, "u", "Blocked", e.reason)
                return
            self._authorize_port(port)
        elif descriptor.declared_type in usb.HID_TYPES:
            p.authorizer = make_authorizer(descriptor.declared_type, self.rng)
            p.state = PortState.AUTHORIZING
            self._show(p.authorizer.display_text)
            self._emit(port, "u", "ChallengeShown", descriptor.declared_type)
        else:
            p.state = PortState.BLOCKED
            p.block_reason = REASON_UNSUPPORTED_TYPE
            self._show(f"Unsupported device type: {descriptor.declared_type}")
            self._emit(port, "u", "Blocked", REASON_UNSUPPORTED_TYPE)

    def _authorize_port(self, port: int) -> None:
        """Flip to AUTHORIZED and replay the captured enumeration verbatim."""
        p = self._ports[port]
        p.state = PortState.AUTHORIZED
        self._emit(port, "u", "Authorized", p.descriptor.declared_type)
        for msg in p.transcript:
            self._to_host(port, msg, origin="device")

    def logic_detach(self, port: int, graceful: bool = True) -> None:
        """Logic or physical detach.  Graceful detaches flush pending state;
        abrupt ones abandon it (the crash case)."""
        p = self._ports[port]
        self._emit(port, "dev->u", "LogicDetach", "graceful" if graceful else "abrupt")
        if p.session is not None:
            if graceful:
                try:
                    p.session.close()
                except (CsUnreachableError, TamperDetectedError) as e:
                    self._anomaly(port, f"flush on detach failed: {e}")
                    p.session.abandon()
            else:
                p.session.abandon()
        p.reset()
        self._show("")

    # -- device-originated traffic --------------------------------------------

    def device_message(self, port: int, msg: UsbMessage) -> None:
        p = self._ports[port]
        self._emit(port, "dev->u", type(msg).__name__, "")
        if isinstance(msg, LogicDetach):
            self.logic_detach(port)
            return
        if p.state is PortState.EMPTY:
            self._anomaly(port, "message from empty port")
            return
        if p.state is PortState.BLOCKED:
            self._emit(port, "u", "Dropped", "port blocked")
            return
        if not isinstance(msg, HidReport):
            # devices only ever originate HID reports here; anything else
            # is a protocol violation worth recording, never forwarding
            self._anomaly(port, f"unexpected {type(msg).__name__} from device")
            return
        if p.descriptor.declared_type == usb.MASS_STORAGE:
            # storage that suddenly talks like a keyboard: drop, log, and
            # force the full re-authorization path via detach
            self._anomaly(port, "hid report from storage device")
            self.logic_detach(port, graceful=False)
            return
        if p.state is PortState.AUTHORIZING:
            self._feed_authorizer(port, msg)
            return
        # authorized HID: short-circuit to host unchanged
        self._to_host(port, msg, origin="device")

    def _feed_authorizer(self, port: int, msg: HidReport) -> None:
        p = self._ports[port]
        auth = p.authorizer
        if p.descriptor.declared_type == usb.KEYBOARD:
            try:
                element = msg.payload.decode()
            except UnicodeDecodeError:
                element = ""
            feedback = auth.submit_key(element)
        else:
            try:
                point = usb.decode_click(msg.payload)
            except Exception:
                point = (-(10**6), -(10**6))
            feedback = auth.submit_click(point)
        self._show(auth.display_text)
        self._emit(port, "u", "ChallengeStep", feedback.value)
        if feedback is Feedback.AUTHORIZED:
            self._authorize_port(port)
        elif feedback is Feedback.BLOCKED:
            p.state = PortState.BLOCKED
            p.block_reason = REASON_CAPTCHA_FAILED

    # -- host-originated traffic ------------------------------------------------

    def host_message(self, port: int, msg: UsbMessage) -> None:
        p = self._ports[port]
        self._emit(port, "host->u", type(msg).__name__, "")
        if isinstance(msg, BlockRead):
            self._to_host(port, BlockReadReply(*self._do_read(p, msg.lba)), origin="guard")
        elif isinstance(msg, BlockWrite):
            self._to_host(port, WriteReply(self._do_write(p, msg.lba, msg.data), msg.lba), origin="guard")
        else:
            self._anomaly(port, f"unexpected {type(msg).__name__} from host")

    def _do_read(self, p: _Port, lba: int) -> tuple[str, int, Optional[bytes]]:
        if p.state is not PortState.AUTHORIZED or p.session is None:
            return usb.ST_NO_DEVICE, lba, None
        try:
            return usb.ST_OK, lba, p.session.protected_read(lba)
        except TamperDetectedError:
            return usb.ST_TAMPER, lba, None
        except InhibitedError:
            return usb.ST_INHIBITED, lba, None
        except OutOfRangeError:
            return usb.ST_OUT_OF_RANGE, lba, None

    def _do_write(self, p: _Port, lba: int, data: bytes) -> str:
        if p.state is not PortState.AUTHORIZED or p.session is None:
            return usb.ST_NO_DEVICE
        try:
            p.session.protected_write(lba, data)
        except TamperDetectedError:
            return usb.ST_TAMPER
        except InhibitedError:
            return usb.ST_INHIBITED
        except OutOfRangeError:
            return usb.ST_OUT_OF_RANGE
        if p.dirty_since is None:
            p.dirty_since = self.clock_ms
        return usb.ST_OK

    # -- time ----------------------------------------------------------------

    def advance(self, ms: int) -> None:
        """Advance simulated time; lazily flush sessions whose timer expired."""
        self.clock_ms += ms
        for port, p in enumerate(self._ports):
            if p.session is None or not p.session.dirty or p.dirty_since is None:
                continue
            if self.clock_ms - p.dirty_since >= self.flush_interval_ms:
                try:
                    p.session.flush()
                    self._emit(port, "u", "Flush", "timer")
                except CsUnreachableError as e:
                    self._anomaly(port, f"flush failed: {e}")
                finally:
                    p.dirty_since = None if not p.session.dirty else p.dirty_since
