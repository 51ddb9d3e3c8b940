"""Command-line front end.

    usbwarden format     --blocks 8 --bs 512 --id DEMO out.rsd
    usbwarden host-read  --image out.rsd --lba 0
    usbwarden host-write --image out.rsd --lba 0 --data cafe
    usbwarden raw-write  --image out.rsd --secure 0 --fill 0xEE
    usbwarden attack     tamper|rollback|crash ...
    usbwarden cs serve   --listen 127.0.0.1:7700 --state cs.log
    usbwarden run        scenario.scn [--trace out.log]
    usbwarden report     out.log

Trust material (the CA plus the guard and formatter identities) lives in a
home directory, default ./.usbwarden or $USBWARDEN_HOME, created on first
use.  Exit codes: 0 success/undetected, 1 detection or failed expectation,
2 usage or parse errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .cs import CsClient, CsServer, CsStore, CsUnreachableError, DEFAULT_TOKEN
from .image import (
    ADS_HEADER_SIZE,
    AdsGeometry,
    NotAuthorized,
    PT_ADS,
    PT_SECURE,
    RsdImage,
    format_image,
)
from .integrity import (
    BlockedError,
    InhibitedError,
    OutOfRangeError,
    TamperDetectedError,
    init_session,
)
from .pki import CertificateAuthority, DeviceIdentity
from .scenario import ScenarioParseError, run_scenario
from .usb import TraceEvent

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


@dataclass
class Realm:
    ca: CertificateAuthority
    device: DeviceIdentity
    formatter: DeviceIdentity


def ensure_realm(home: Path) -> Realm:
    """Load the trust directory, creating CA and identities on first use."""
    home = Path(home)
    if not (home / "ca.key").exists():
        ca = CertificateAuthority()
        device = DeviceIdentity.create("GUARD-1", ca)
        formatter = DeviceIdentity.create("FORMATTER", ca)
        ca.save(home)
        device.save(home, "device")
        formatter.save(home, "formatter")
        return Realm(ca, device, formatter)
    ca = CertificateAuthority.load(home)
    return Realm(
        ca,
        DeviceIdentity.load(home, "device"),
        DeviceIdentity.load(home, "formatter"),
    )


def _cs_client(args) -> CsClient | None:
    if not getattr(args, "cs", None):
        return None
    host, _, port = args.cs.rpartition(":")
    return CsClient(host or "127.0.0.1", int(port), token=args.token)


def _open_session(args, realm: Realm):
    image = RsdImage.open(Path(args.image))
    return image, init_session(
        image, realm.device, realm.ca.public_key, cs_client=_cs_client(args)
    )


def _physical_block(image: RsdImage, args) -> int:
    if args.secure is not None:
        table = image.read_table()
        secure = table.find(PT_SECURE)
        ads = table.find(PT_ADS)
        geo = AdsGeometry.unpack(image.read_at(ads.start_block * image.block_size, ADS_HEADER_SIZE))
        return secure.start_block + geo.shift + args.secure
    if args.lba is None:
        raise SystemExit("raw-write needs --lba or --secure")
    return args.lba


def _block_data(args, block_size: int) -> bytes:
    if args.data is not None:
        return bytes.fromhex(args.data).ljust(block_size, b"\x00")
    if getattr(args, "fill", None) is not None:
        return bytes([int(args.fill, 0) & 0xFF]) * block_size
    if getattr(args, "infile", None):
        return Path(args.infile).read_bytes()[:block_size].ljust(block_size, b"\x00")
    raise SystemExit("need --data, --fill or --infile")


# -- subcommands ---------------------------------------------------------------


def cmd_format(args) -> int:
    realm = ensure_realm(args.home)
    image = format_image(
        Path(args.out),
        secure_blocks=args.blocks,
        block_size=args.bs,
        rsd_id=args.id,
        formatter=realm.formatter,
        shift=args.shift,
        device_blocks=args.device_blocks,
    )
    print(f"formatted {args.out}: {args.blocks} secure blocks of {args.bs} bytes, id {image.rsd_id}")
    image.close()
    return EXIT_OK


def cmd_host_read(args) -> int:
    realm = ensure_realm(args.home)
    try:
        image, session = _open_session(args, realm)
        data = session.protected_read(args.lba)
    except TamperDetectedError:
        print("TAMPER DETECTED", file=sys.stderr)
        return EXIT_FAIL
    except InhibitedError:
        print("INHIBITED: block outside the secure partition", file=sys.stderr)
        return EXIT_FAIL
    except OutOfRangeError:
        print("OUT OF RANGE", file=sys.stderr)
        return EXIT_FAIL
    except (NotAuthorized, BlockedError, CsUnreachableError) as e:
        print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    if args.hex:
        print(data.hex())
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    image.close()
    return EXIT_OK


def cmd_host_write(args) -> int:
    realm = ensure_realm(args.home)
    try:
        image, session = _open_session(args, realm)
        session.protected_write(args.lba, _block_data(args, image.block_size))
        session.flush()
    except TamperDetectedError:
        print("TAMPER DETECTED", file=sys.stderr)
        return EXIT_FAIL
    except InhibitedError:
        print("INHIBITED: block outside the secure partition", file=sys.stderr)
        return EXIT_FAIL
    except (NotAuthorized, BlockedError, CsUnreachableError) as e:
        print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    image.close()
    return EXIT_OK


def cmd_raw_write(args) -> int:
    image = RsdImage.open(Path(args.image))
    block = _physical_block(image, args)
    image.raw_write(block, _block_data(args, image.block_size))
    image.close()
    return EXIT_OK


def cmd_attack_tamper(args) -> int:
    realm = ensure_realm(args.home)
    image = RsdImage.open(Path(args.image))
    table = image.read_table()
    secure = table.find(PT_SECURE)
    ads = table.find(PT_ADS)
    geo = AdsGeometry.unpack(image.read_at(ads.start_block * image.block_size, ADS_HEADER_SIZE))
    block = secure.start_block + geo.shift + args.lba
    original = image.raw_read(block)
    image.raw_write(block, bytes([original[0] ^ 0xFF]) + original[1:])
    print(f"illegal-write: flipped a byte of secure block {args.lba}", file=sys.stderr)
    try:
        session = init_session(image, realm.device, realm.ca.public_key)
        session.protected_read(args.lba)
    except TamperDetectedError:
        print("TAMPER DETECTED", file=sys.stderr)
        return EXIT_FAIL
    except (NotAuthorized, BlockedError) as e:
        print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    print("attack went undetected", file=sys.stderr)
    return EXIT_OK


def cmd_attack_rollback(args) -> int:
    realm = ensure_realm(args.home)
    cs = _cs_client(args)
    image = RsdImage.open(Path(args.image))
    snapshot = image.snapshot()
    try:
        session = init_session(image, realm.device, realm.ca.public_key, cs_client=cs)
        block = session.protected_read(0)
        session.protected_write(0, bytes([block[0] ^ 0x5A]) + block[1:])
        session.flush()
        session.close()
    except (NotAuthorized, BlockedError, CsUnreachableError) as e:
        print(f"cannot stage rollback, device already refused: {e}", file=sys.stderr)
        return EXIT_FAIL
    image.restore(snapshot)
    print("restored pre-write snapshot of both partitions", file=sys.stderr)
    try:
        init_session(image, realm.device, realm.ca.public_key, cs_client=cs)
    except BlockedError as e:
        if e.reason == BlockedError.ROLLBACK_DETECTED:
            print("ROLLBACK DETECTED", file=sys.stderr)
        else:
            print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    except CsUnreachableError as e:
        print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    print("ROLLBACK ACCEPTED (no coordination service to remember the newer root)", file=sys.stderr)
    return EXIT_OK


def cmd_attack_crash(args) -> int:
    realm = ensure_realm(args.home)
    image = RsdImage.open(Path(args.image))
    session = init_session(image, realm.device, realm.ca.public_key)
    block = session.protected_read(0)
    session.protected_write(0, bytes([block[0] ^ 0xA5]) + block[1:])
    if args.point != "data":
        session.flush(stop_after=args.point)
    session.abandon()
    print(f"simulated unplug at crash point {args.point!r}", file=sys.stderr)
    try:
        session = init_session(image, realm.device, realm.ca.public_key)
    except (NotAuthorized, BlockedError) as e:
        print(f"BLOCKED: {e}", file=sys.stderr)
        return EXIT_FAIL
    try:
        session.protected_read(0)
    except TamperDetectedError:
        print("TAMPER DETECTED", file=sys.stderr)
        return EXIT_FAIL
    print("crash state went undetected", file=sys.stderr)
    return EXIT_OK


def cmd_cs_serve(args) -> int:
    host, _, port = args.listen.rpartition(":")
    store = CsStore(log_path=Path(args.state) if args.state else None)
    server = CsServer(store, host or "127.0.0.1", int(port), token=args.token)
    print(f"coordination service listening on {server.address[0]}:{server.address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        result = run_scenario(Path(args.scenario))
    except ScenarioParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_USAGE
    for line in result.log:
        print(line)
    if args.trace:
        Path(args.trace).write_text("\n".join(result.trace_lines) + "\n")
    print("PASS" if result.passed else f"FAIL: {result.failure}")
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_report(args) -> int:
    lines = Path(args.tracefile).read_text().splitlines()
    events = [TraceEvent.parse_line(line) for line in lines if line.strip()]
    print(f"{'time':>8}  {'port':>4}  {'direction':9}  {'event':16} detail")
    for e in events:
        print(f"{e.t:>8}  {e.port:>4}  {e.direction:9}  {e.variant:16} {e.summary}")
    counts: dict[str, int] = {}
    for e in events:
        counts[e.variant] = counts.get(e.variant, 0) + 1
    print("\nsummary:")
    print(f"  events: {len(events)}")
    for variant in sorted(counts):
        print(f"  {variant}: {counts[variant]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usbwarden", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--home",
        default=os.environ.get("USBWARDEN_HOME", ".usbwarden"),
        help="trust directory (CA + identities), created on first use",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("format", help="create an empty authorizable image")
    p.add_argument("out")
    p.add_argument("--blocks", type=int, required=True, help="host-visible secure blocks")
    p.add_argument("--bs", type=int, default=512, help="block size (512 or 4096)")
    p.add_argument("--id", default="RSD-0001", help="image identifier")
    p.add_argument("--shift", type=int, default=1)
    p.add_argument("--device-blocks", type=int, default=None, help="total device size; extra space becomes a plain partition")
    p.set_defaults(func=cmd_format)

    p = sub.add_parser("host-read", help="mediated read of one secure block")
    p.add_argument("--image", required=True)
    p.add_argument("--lba", type=int, required=True)
    p.add_argument("--hex", action="store_true", help="print hex instead of raw bytes")
    p.add_argument("--cs", help="coordination service host:port")
    p.add_argument("--token", default=DEFAULT_TOKEN)
    p.set_defaults(func=cmd_host_read)

    p = sub.add_parser("host-write", help="mediated write of one secure block")
    p.add_argument("--image", required=True)
    p.add_argument("--lba", type=int, required=True)
    p.add_argument("--data", help="hex, zero-padded to the block size")
    p.add_argument("--infile", help="file providing the block content")
    p.add_argument("--cs", help="coordination service host:port")
    p.add_argument("--token", default=DEFAULT_TOKEN)
    p.set_defaults(func=cmd_host_write)

    p = sub.add_parser("raw-write", help="unmediated write, as a regular machine would")
    p.add_argument("--image", required=True)
    p.add_argument("--lba", type=int, help="absolute physical block")
    p.add_argument("--secure", type=int, help="logical secure block (pre-shift)")
    p.add_argument("--data", help="hex, zero-padded")
    p.add_argument("--fill", help="fill byte, e.g. 0xEE")
    p.set_defaults(func=cmd_raw_write)

    attack = sub.add_parser("attack", help="run a canned attack and show the outcome")
    asub = attack.add_subparsers(dest="attack_kind", required=True)

    p = asub.add_parser("tamper", help="illegal-write then mediated read")
    p.add_argument("--image", required=True)
    p.add_argument("--lba", type=int, default=0, help="logical secure block to dirty")
    p.set_defaults(func=cmd_attack_tamper)

    p = asub.add_parser("rollback", help="snapshot, write, restore, reopen")
    p.add_argument("--image", required=True)
    p.add_argument("--cs", help="coordination service host:port")
    p.add_argument("--token", default=DEFAULT_TOKEN)
    p.set_defaults(func=cmd_attack_rollback)

    p = asub.add_parser("crash", help="torn write at a chosen point, then reopen")
    p.add_argument("--image", required=True)
    p.add_argument("--point", choices=("data", "nodes", "signature"), required=True)
    p.set_defaults(func=cmd_attack_crash)

    cs = sub.add_parser("cs", help="coordination service")
    csub = cs.add_subparsers(dest="cs_cmd", required=True)
    p = csub.add_parser("serve", help="serve the root registry over TCP")
    p.add_argument("--listen", default="127.0.0.1:7700")
    p.add_argument("--state", help="append-only log file for persistence")
    p.add_argument("--token", default=DEFAULT_TOKEN)
    p.set_defaults(func=cmd_cs_serve)

    p = sub.add_parser("run", help="execute a scenario script")
    p.add_argument("scenario")
    p.add_argument("--trace", help="write the event trace to this file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render an event-trace log")
    p.add_argument("tracefile")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
