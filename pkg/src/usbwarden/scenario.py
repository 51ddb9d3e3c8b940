"""Line-oriented scenario scripts and their runner.

A scenario drives a fresh simulator: it formats images, attaches devices
to a guard, issues host and raw I/O, snapshots and restores the medium,
injects crashes and human captcha input, and checks outcomes with
`expect` steps.  The first violated expectation fails the run.

Grammar (one step per line, `#` starts a comment):

    seed <int>                     header: rng seed for reproducibility
    cs on                          header: wire an in-process root registry
    policy <rule line>             header: gatekeeper policy rule
    format blocks=N bs=B [id=S] [shift=K]
    attach rsd [device=NAME] | attach keyboard | attach mouse | attach type=<other>
    detach                         graceful (pending state is flushed)
    host-read lba=N
    host-write lba=N data=<hex>    data is zero-padded to the block size
    raw-write lba=N data=<hex>|fill=0xNN      absolute physical block
    raw-write secure=N ...                    logical secure block, pre-shift
    snapshot [name] / restore [name] [part=ads|secure]
    crash-at data|nodes|signature  abrupt unplug at the given point
    human-input correct|wrong [count=N]
    transfer name=S data=<hex> [operator=ID]
    expect authorized | authorizing | blocked [reason=R] | tamper
         | inhibited | data <hex> | audit-count N | hid-to-host N

Exit status convention for the CLI wrapper: 0 pass, 1 failed expectation,
2 parse error.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import usb
from .cs import CsStore
from .gatekeeper import Gatekeeper, Policy, TransferRejected
from .image import PT_ADS, PT_SECURE, RsdImage, format_image
from .integrity import CRASH_AFTER_DATA, CRASH_POINTS
from .pki import CertificateAuthority, DeviceIdentity
from .router import Guard, PortState
from .usb import BlockRead, BlockReadReply, BlockWrite, DeviceDescriptor, HidReport


class ScenarioParseError(Exception):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class Step:
    lineno: int
    keyword: str
    args: dict[str, str]
    positional: tuple[str, ...]
    raw: str


@dataclass
class ScenarioResult:
    passed: bool
    failure: Optional[str] = None
    log: list[str] = field(default_factory=list)
    trace_lines: list[str] = field(default_factory=list)


STEP_KEYWORDS = {
    "format", "attach", "detach", "host-read", "host-write", "raw-write",
    "snapshot", "restore", "crash-at", "human-input", "transfer", "expect",
}
HEADER_KEYWORDS = {"seed", "cs", "policy"}


def parse_scenario(text: str) -> tuple[dict, list[Step]]:
    header = {"seed": 0, "cs": False, "policy": []}
    steps: list[Step] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        keyword, rest = tokens[0], tokens[1:]
        if keyword in HEADER_KEYWORDS:
            if steps:
                raise ScenarioParseError(lineno, f"{keyword} must precede all steps")
            if keyword == "seed":
                try:
                    header["seed"] = int(rest[0])
                except (IndexError, ValueError):
                    raise ScenarioParseError(lineno, "seed wants one integer")
            elif keyword == "cs":
                if rest not in (["on"], ["off"]):
                    raise ScenarioParseError(lineno, "cs wants on|off")
                header["cs"] = rest == ["on"]
            else:
                header["policy"].append(" ".join(rest))
            continue
        if keyword not in STEP_KEYWORDS:
            raise ScenarioParseError(lineno, f"unknown step {keyword!r}")
        args, positional = {}, []
        for tok in rest:
            if "=" in tok:
                k, _, v = tok.partition("=")
                args[k] = v
            else:
                positional.append(tok)
        steps.append(Step(lineno, keyword, args, tuple(positional), line))
    return header, steps


def _hex_arg(step: Step, key: str) -> bytes:
    try:
        return bytes.fromhex(step.args[key])
    except ValueError as e:
        raise ScenarioParseError(step.lineno, f"bad hex in {key}=") from e


class ScenarioRunner:
    """Executes one parsed scenario against a fresh simulated world."""

    def __init__(self, header: dict):
        self.rng = random.Random(header["seed"])
        self.ca = CertificateAuthority()
        self.formatter = DeviceIdentity.create("FORMATTER", self.ca)
        self._identities: dict[str, DeviceIdentity] = {}
        self.cs = CsStore() if header["cs"] else None
        self.policy = Policy.parse("\n".join(header["policy"])) if header["policy"] else Policy([])
        self.gatekeeper = Gatekeeper(self.policy)
        self.gatekeeper.register_operator("op", "secret")
        self.guards: dict[str, Guard] = {}
        self.current: Optional[Guard] = None
        self.image: Optional[RsdImage] = None
        self.snapshots: dict[str, bytes] = {}
        self.last_status: Optional[str] = None
        self.last_data: Optional[bytes] = None
        self.log: list[str] = []

    def identity(self, name: str) -> DeviceIdentity:
        if name not in self._identities:
            self._identities[name] = DeviceIdentity.create(name, self.ca)
        return self._identities[name]

    def guard(self, name: str) -> Guard:
        if name not in self.guards:
            self.guards[name] = Guard(
                identity=self.identity(name),
                ca_public_key=self.ca.public_key,
                cs_client=self.cs,
                rng=self.rng,
            )
        return self.guards[name]

    # -- step execution ------------------------------------------------------

    def run(self, steps: list[Step]) -> ScenarioResult:
        for step in steps:
            handler = getattr(self, "_do_" + step.keyword.replace("-", "_"))
            try:
                error = handler(step)
            except ScenarioParseError:
                raise
            except KeyError as e:
                raise ScenarioParseError(step.lineno, f"missing argument {e}")
            if error:
                failure = f"line {step.lineno}: {step.raw!r}: {error}"
                self.log.append("FAIL " + failure)
                return ScenarioResult(False, failure, self.log, self._trace_lines())
            self.log.append(f"ok   line {step.lineno}: {step.raw}")
        return ScenarioResult(True, None, self.log, self._trace_lines())

    def _trace_lines(self) -> list[str]:
        events = [e for g in self.guards.values() for e in g.trace]
        return [e.format_line() for e in sorted(events, key=lambda e: e.t)]

    def _do_format(self, step: Step) -> Optional[str]:
        self.image = format_image(
            None,
            secure_blocks=int(step.args["blocks"]),
            block_size=int(step.args["bs"]),
            rsd_id=step.args.get("id", "SCN-RSD"),
            formatter=self.formatter,
            shift=int(step.args.get("shift", "1")),
        )
        return None

    def _do_attach(self, step: Step) -> Optional[str]:
        kind = step.positional[0] if step.positional else step.args.get("type")
        if kind is None:
            raise ScenarioParseError(step.lineno, "attach wants a device kind")
        self.current = self.guard(step.args.get("device", "U1"))
        if kind == "rsd":
            if self.image is None:
                raise ScenarioParseError(step.lineno, "no image formatted yet")
            descriptor = DeviceDescriptor(usb.MASS_STORAGE, serial=self.image.rsd_id)
            self.current.attach(0, descriptor, image=self.image)
        else:
            self.current.attach(0, DeviceDescriptor(kind, serial="scn-dev"))
        return None

    def _do_detach(self, step: Step) -> Optional[str]:
        self.current.logic_detach(0)
        return None

    def _do_host_read(self, step: Step) -> Optional[str]:
        self.current.host_message(0, BlockRead(int(step.args["lba"])))
        reply = self.current.host_inbox[-1].message
        assert isinstance(reply, BlockReadReply)
        self.last_status, self.last_data = reply.status, reply.data
        return None

    def _do_host_write(self, step: Step) -> Optional[str]:
        data = _hex_arg(step, "data").ljust(self.image.block_size, b"\x00")
        self.current.host_message(0, BlockWrite(int(step.args["lba"]), data))
        self.last_status = self.current.host_inbox[-1].message.status
        self.last_data = None
        return None

    def _do_raw_write(self, step: Step) -> Optional[str]:
        if "secure" in step.args:
            layout_table = self.image.read_table()
            secure = layout_table.find(PT_SECURE)
            # logical secure index -> physical block, applying the shift
            from .image import AdsGeometry, ADS_HEADER_SIZE

            ads = layout_table.find(PT_ADS)
            geo = AdsGeometry.unpack(
                self.image.read_at(ads.start_block * self.image.block_size, ADS_HEADER_SIZE)
            )
            block = secure.start_block + geo.shift + int(step.args["secure"])
        else:
            block = int(step.args["lba"])
        if "fill" in step.args:
            data = bytes([int(step.args["fill"], 0)]) * self.image.block_size
        else:
            data = _hex_arg(step, "data").ljust(self.image.block_size, b"\x00")
        self.image.raw_write(block, data)
        return None

    def _do_snapshot(self, step: Step) -> Optional[str]:
        name = step.positional[0] if step.positional else "default"
        self.snapshots[name] = self.image.snapshot()
        return None

    def _do_restore(self, step: Step) -> Optional[str]:
        name = step.positional[0] if step.positional else "default"
        if name not in self.snapshots:
            raise ScenarioParseError(step.lineno, f"no snapshot named {name!r}")
        if self.current and self.current.port_state(0) is not PortState.EMPTY:
            raise ScenarioParseError(step.lineno, "restore requires the device to be detached")
        part = step.args.get("part")
        if part is None:
            self.image.restore(self.snapshots[name])
            return None
        kind = {"ads": PT_ADS, "secure": PT_SECURE}.get(part)
        if kind is None:
            raise ScenarioParseError(step.lineno, "part must be ads or secure")
        entry = self.image.read_table().find(kind)
        start = entry.start_block * self.image.block_size
        size = entry.block_count * self.image.block_size
        self.image.write_at(start, self.snapshots[name][start : start + size])
        return None

    def _do_crash_at(self, step: Step) -> Optional[str]:
        point = step.positional[0] if step.positional else step.args.get("point", "")
        if point not in CRASH_POINTS:
            raise ScenarioParseError(step.lineno, f"crash point must be one of {CRASH_POINTS}")
        session = self.current.session(0)
        if session is None:
            raise ScenarioParseError(step.lineno, "no live session to crash")
        if point != CRASH_AFTER_DATA:
            session.flush(stop_after=point)
        self.current.logic_detach(0, graceful=False)
        return None

    def _do_human_input(self, step: Step) -> Optional[str]:
        mode = step.positional[0] if step.positional else "correct"
        count = int(step.args.get("count", "1"))
        for _ in range(count):
            self._one_human_input(step, mode)
        return None

    def _one_human_input(self, step: Step, mode: str) -> None:
        auth = self.current.authorizer(0)
        if auth is None:
            raise ScenarioParseError(step.lineno, "no challenge in progress")
        if mode == "wrong":
            # one wrong element consumes one attempt
            if auth.kind == "keyboard":
                self.current.device_message(0, HidReport(usb.key_payload("*")))
            else:
                self.current.device_message(0, HidReport(usb.click_payload(-500, -500)))
            return
        if mode != "correct":
            raise ScenarioParseError(step.lineno, "human-input wants correct|wrong")
        if auth.kind == "keyboard":
            for ch in auth.challenge.code[auth.element_index :]:
                self.current.device_message(0, HidReport(usb.key_payload(ch)))
        else:
            from .hid import target_center

            while auth.status.value == "in-progress":
                pair = auth.challenge.pairs[auth.pair_index]
                pos = pair.first if auth.point_index == 0 else pair.second
                x, y = target_center(pos)
                self.current.device_message(0, HidReport(usb.click_payload(x, y)))

    def _do_transfer(self, step: Step) -> Optional[str]:
        operator = step.args.get("operator", "op")
        session = self.current.session(0) if self.current else None
        try:
            self.gatekeeper.transfer(operator, step.args["name"], _hex_arg(step, "data"), session)
            self.last_status = "transferred"
        except TransferRejected as e:
            self.last_status = e.reason
        return None

    # -- expectations -----------------------------------------------------------

    def _do_expect(self, step: Step) -> Optional[str]:
        what = step.positional[0] if step.positional else ""
        if what == "authorized":
            state = self.current.port_state(0)
            return None if state is PortState.AUTHORIZED else f"port is {state.value}"
        if what == "authorizing":
            state = self.current.port_state(0)
            return None if state is PortState.AUTHORIZING else f"port is {state.value}"
        if what == "blocked":
            state = self.current.port_state(0)
            if state is not PortState.BLOCKED:
                return f"port is {state.value}"
            want = step.args.get("reason")
            got = self.current.block_reason(0)
            if want and got != want:
                return f"blocked for {got!r}, expected {want!r}"
            return None
        if what == "tamper":
            return None if self.last_status == usb.ST_TAMPER else f"last status {self.last_status!r}"
        if what == "inhibited":
            return None if self.last_status == usb.ST_INHIBITED else f"last status {self.last_status!r}"
        if what == "data":
            if len(step.positional) < 2:
                raise ScenarioParseError(step.lineno, "expect data wants a hex value")
            want = bytes.fromhex(step.positional[1]).ljust(self.image.block_size, b"\x00")
            if self.last_status != usb.ST_OK:
                return f"read failed with {self.last_status!r}"
            return None if self.last_data == want else "data mismatch"
        if what == "audit-count":
            want = int(step.positional[1])
            got = len(self.gatekeeper.audit_log)
            return None if got == want else f"audit count {got}, expected {want}"
        if what == "hid-to-host":
            want = int(step.positional[1])
            got = sum(
                1
                for d in self.current.host_inbox
                if d.origin == "device" and isinstance(d.message, HidReport)
            )
            return None if got == want else f"{got} hid reports reached the host, expected {want}"
        raise ScenarioParseError(step.lineno, f"unknown expectation {what!r}")


def run_scenario(source: str | Path) -> ScenarioResult:
    """Parse and execute a scenario; `source` is a path or scenario text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith(".scn")):
        text = Path(source).read_text()
    else:
        text = source
    header, steps = parse_scenario(text)
    return ScenarioRunner(header).run(steps)
