"""Simulated USB transport: message variants, device descriptors and the
event-trace record.

The bus is abstracted to ordered, lossless message passing.  Every message
has a canonical byte encoding so tests can compare captured and replayed
traffic bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

KEYBOARD = "keyboard"
MOUSE = "mouse"
MASS_STORAGE = "mass-storage"
HID_TYPES = (KEYBOARD, MOUSE)

ST_OK = "ok"
ST_TAMPER = "tamper-detected"
ST_INHIBITED = "inhibited"
ST_OUT_OF_RANGE = "out-of-range"
ST_NO_DEVICE = "no-device"


@dataclass(frozen=True)
class DeviceDescriptor:
    declared_type: str
    vendor_id: int = 0
    product_id: int = 0
    serial: str = ""

    def pack(self) -> bytes:
        t = self.declared_type.encode()
        s = self.serial.encode()
        return (
            struct.pack("<B", len(t))
            + t
            + struct.pack("<HH", self.vendor_id, self.product_id)
            + struct.pack("<B", len(s))
            + s
        )


@dataclass(frozen=True)
class Attach:
    descriptor: DeviceDescriptor


@dataclass(frozen=True)
class LogicDetach:
    pass


@dataclass(frozen=True)
class HidReport:
    payload: bytes


@dataclass(frozen=True)
class BlockRead:
    lba: int


@dataclass(frozen=True)
class BlockReadReply:
    status: str
    lba: int
    data: Optional[bytes] = None


@dataclass(frozen=True)
class BlockWrite:
    lba: int
    data: bytes


@dataclass(frozen=True)
class WriteReply:
    status: str
    lba: int


@dataclass(frozen=True)
class EnumRequest:
    pass


@dataclass(frozen=True)
class EnumReply:
    descriptor: DeviceDescriptor


UsbMessage = Union[
    Attach, LogicDetach, HidReport, BlockRead, BlockReadReply,
    BlockWrite, WriteReply, EnumRequest, EnumReply,
]

_TAGS = {
    Attach: 1, LogicDetach: 2, HidReport: 3, BlockRead: 4, BlockReadReply: 5,
    BlockWrite: 6, WriteReply: 7, EnumRequest: 8, EnumReply: 9,
}


def encode_message(msg: UsbMessage) -> bytes:
    """Canonical wire bytes, used for transcript equality checks."""
    tag = struct.pack("<B", _TAGS[type(msg)])
    if isinstance(msg, (Attach, EnumReply)):
        return tag + msg.descriptor.pack()
    if isinstance(msg, HidReport):
        return tag + struct.pack("<H", len(msg.payload)) + msg.payload
    if isinstance(msg, BlockRead):
        return tag + struct.pack("<q", msg.lba)
    if isinstance(msg, BlockReadReply):
        data = msg.data or b""
        status = msg.status.encode()
        return tag + struct.pack("<qB", msg.lba, len(status)) + status + struct.pack("<I", len(data)) + data
    if isinstance(msg, BlockWrite):
        return tag + struct.pack("<qI", msg.lba, len(msg.data)) + msg.data
    if isinstance(msg, WriteReply):
        status = msg.status.encode()
        return tag + struct.pack("<qB", msg.lba, len(status)) + status
    return tag


def click_payload(x: float, y: float) -> bytes:
    return struct.pack("<hh", int(x), int(y))


def decode_click(payload: bytes) -> tuple[int, int]:
    x, y = struct.unpack("<hh", payload)
    return x, y


def key_payload(symbol: str) -> bytes:
    return symbol.encode()


@dataclass(frozen=True)
class TraceEvent:
    """One line of the event-trace log: `<t> <port> <direction> <variant> <summary>`."""

    t: int
    port: int
    direction: str
    variant: str
    summary: str

    def format_line(self) -> str:
        return f"{self.t} {self.port} {self.direction} {self.variant} {self.summary}"

    @classmethod
    def parse_line(cls, line: str) -> "TraceEvent":
        parts = line.split(" ", 4)
        if len(parts) < 4:
            raise ValueError(f"bad trace line: {line!r}")
        summary = parts[4] if len(parts) == 5 else ""
        return cls(int(parts[0]), int(parts[1]), parts[2], parts[3], summary)
