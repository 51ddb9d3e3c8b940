"""Coordination service: the trusted registry mapping each image id to its
current root hash, plus revocation-list distribution.

The wire protocol is newline-delimited text over TCP so every exchange is
inspectable and bit-exact:

    AUTH <token>            ->  OK | ERR unauthenticated
    PUT <rsd_id> <64-hex>   ->  OK <version> | ERR <why>
    GET <rsd_id>            ->  ROOT <64-hex> <version> | UNKNOWN
    CRL                     ->  CRL <nbytes>\\n<raw bytes>

PUT requires a prior AUTH on the same connection (the stand-in for the
mutually-authenticated channel a deployment would run over TLS); reads are
open.  State is persisted to an append-only log replayed at startup.

CsStore is usable directly as an in-process client; CsClient speaks the
TCP protocol.  Both expose put_root / get_root / fetch_revocation_list.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .pki import RevocationList

DEFAULT_TOKEN = "let-me-in"


class CsUnreachableError(Exception):
    """The coordination service could not be reached."""


class CsAuthError(Exception):
    """The coordination service rejected the caller."""


@dataclass(frozen=True)
class RootRecord:
    root: bytes
    version: int


class CsStore:
    """Per-key versioned root registry with optional append-only persistence."""

    def __init__(self, log_path: Optional[Path] = None):
        self._lock = threading.Lock()
        self._roots: dict[str, RootRecord] = {}
        self._crl: Optional[RevocationList] = None
        self._log_path = Path(log_path) if log_path else None
        if self._log_path and self._log_path.exists():
            self._replay()

    def _replay(self) -> None:
        for line in self._log_path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "PUT" and len(parts) == 3:
                record = self._roots.get(parts[1])
                version = record.version + 1 if record else 1
                self._roots[parts[1]] = RootRecord(bytes.fromhex(parts[2]), version)
            elif parts[0] == "CRL" and len(parts) == 2:
                self._crl = RevocationList.from_bytes(bytes.fromhex(parts[1]))

    def _append_log(self, line: str) -> None:
        if self._log_path:
            with open(self._log_path, "a") as fh:
                fh.write(line + "\n")

    def put_root(self, rsd_id: str, root: bytes) -> int:
        if len(root) != 32:
            raise ValueError("root must be a 32-byte digest")
        if not rsd_id or any(c.isspace() for c in rsd_id):
            raise ValueError("rsd id must be nonempty without whitespace")
        with self._lock:
            record = self._roots.get(rsd_id)
            version = record.version + 1 if record else 1
            self._roots[rsd_id] = RootRecord(root, version)
            self._append_log(f"PUT {rsd_id} {root.hex()}")
            return version

    def get_root(self, rsd_id: str) -> Optional[RootRecord]:
        with self._lock:
            return self._roots.get(rsd_id)

    def set_revocation_list(self, rl: RevocationList) -> None:
        with self._lock:
            if self._crl is not None and rl.version <= self._crl.version:
                raise ValueError("revocation list version must increase")
            self._crl = rl
            self._append_log(f"CRL {rl.to_bytes().hex()}")

    def fetch_revocation_list(self) -> Optional[RevocationList]:
        with self._lock:
            return self._crl


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        store: CsStore = self.server.store
        token: str = self.server.token
        authed = False
        while True:
            line = self.rfile.readline()
            if not line:
                return
            parts = line.decode(errors="replace").split()
            if not parts:
                continue
            cmd = parts[0].upper()
            try:
                if cmd == "AUTH" and len(parts) == 2:
                    authed = parts[1] == token
                    self._reply("OK" if authed else "ERR unauthenticated")
                elif cmd == "PUT" and len(parts) == 3:
                    if not authed:
                        self._reply("ERR unauthenticated")
                        continue
                    root = bytes.fromhex(parts[2])
                    version = store.put_root(parts[1], root)
                    self._reply(f"OK {version}")
                elif cmd == "GET" and len(parts) == 2:
                    record = store.get_root(parts[1])
                    if record is None:
                        self._reply("UNKNOWN")
                    else:
                        self._reply(f"ROOT {record.root.hex()} {record.version}")
                elif cmd == "CRL" and len(parts) == 1:
                    rl = store.fetch_revocation_list()
                    raw = rl.to_bytes() if rl else b""
                    self.wfile.write(f"CRL {len(raw)}\n".encode() + raw)
                else:
                    self._reply("ERR bad command")
            except ValueError as e:
                self._reply(f"ERR {e}")

    def _reply(self, text: str) -> None:
        self.wfile.write((text + "\n").encode())


class CsServer:
    """Threaded TCP front end over a CsStore."""

    def __init__(self, store: CsStore, host: str = "127.0.0.1", port: int = 0, token: str = DEFAULT_TOKEN):
        self.store = store
        self._server = socketserver.ThreadingTCPServer((host, port), _Handler, bind_and_activate=True)
        self._server.daemon_threads = True
        self._server.store = store
        self._server.token = token
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._server.serve_forever()


class CsClient:
    """Stateless TCP client; one connection per call."""

    def __init__(self, host: str, port: int, token: Optional[str] = DEFAULT_TOKEN, timeout: float = 3.0):
        self.host = host
        self.port = port
        self.token = token
        self.timeout = timeout

    def _connect(self) -> socket.socket:
        try:
            return socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as e:
            raise CsUnreachableError(f"{self.host}:{self.port}: {e}") from e

    def _roundtrip(self, command: str, *, auth: bool = False, binary_reply: bool = False):
        with self._connect() as sock:
            fh = sock.makefile("rwb")
            try:
                if auth:
                    if self.token is None:
                        raise CsAuthError("no token configured")
                    fh.write(f"AUTH {self.token}\n".encode())
                    fh.flush()
                    if fh.readline().strip() != b"OK":
                        raise CsAuthError("token rejected")
                fh.write((command + "\n").encode())
                fh.flush()
                line = fh.readline().decode().strip()
                if not line:
                    raise CsUnreachableError("connection dropped")
                if binary_reply:
                    tag, _, count = line.partition(" ")
                    if tag != "CRL":
                        raise CsAuthError(line)
                    return fh.read(int(count))
                return line
            except socket.timeout as e:
                raise CsUnreachableError("timed out") from e

    def put_root(self, rsd_id: str, root: bytes) -> int:
        reply = self._roundtrip(f"PUT {rsd_id} {root.hex()}", auth=True)
        if not reply.startswith("OK "):
            raise CsAuthError(reply)
        return int(reply.split()[1])

    def get_root(self, rsd_id: str) -> Optional[RootRecord]:
        reply = self._roundtrip(f"GET {rsd_id}")
        if reply == "UNKNOWN":
            return None
        parts = reply.split()
        if len(parts) != 3 or parts[0] != "ROOT":
            raise CsUnreachableError(f"bad reply: {reply}")
        return RootRecord(bytes.fromhex(parts[1]), int(parts[2]))

    def fetch_revocation_list(self) -> Optional[RevocationList]:
        raw = self._roundtrip("CRL", binary_reply=True)
        return RevocationList.from_bytes(raw) if raw else None


class UnreachableCs:
    """Fault-injection stand-in: every call fails as if the service is down."""

    def put_root(self, rsd_id: str, root: bytes) -> int:
        raise CsUnreachableError("injected outage")

    def get_root(self, rsd_id: str):
        raise CsUnreachableError("injected outage")

    def fetch_revocation_list(self):
        raise CsUnreachableError("injected outage")
