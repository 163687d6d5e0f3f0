"""Jupyter kernel lifecycle and messaging-protocol client.

Speaks protocol version 5 over the five standard ZeroMQ channels (shell,
iopub, stdin, control, heartbeat) on loopback TCP. One handle drives one
kernel process; cells are executed one at a time, with the broadcast channel
pumped concurrently with the reply channel so outputs are never lost. Every
outgoing message is HMAC-signed and every incoming signature is verified;
mismatches are dropped.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import os
import secrets
import signal
import socket as socket_mod
import subprocess
import sys
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import zmq

from .notebook_model import ERROR, STREAM, CellOutput, DISPLAY_DATA, EXECUTE_RESULT

logger = logging.getLogger(__name__)

DELIMITER = b"<IDS|MSG>"
PROTOCOL_VERSION = "5.3"
DEFAULT_KERNEL_NAME = "python3"

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"
STATUS_KERNEL_DIED = "kernel_died"


class KernelNotFound(Exception):
    """No kernelspec directory matches the requested kernel name."""


class SpawnFailure(Exception):
    """The kernel process could not be started or died during startup."""


class StartupTimeout(Exception):
    """The kernel never answered a kernel_info round trip in time."""


@dataclass(frozen=True)
class KernelSpec:
    """A resolved ``kernel.json``: how to launch one kind of kernel."""

    name: str
    argv: tuple[str, ...]
    language: str
    resource_dir: Path
    interrupt_mode: str = "signal"
    env: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ConnectionInfo:
    """Contents of a Jupyter connection file."""

    ip: str
    shell_port: int
    iopub_port: int
    stdin_port: int
    control_port: int
    hb_port: int
    key: bytes
    transport: str = "tcp"
    signature_scheme: str = "hmac-sha256"

    def __post_init__(self):
        if self.transport != "tcp":
            raise ValueError(f"only tcp transport is supported, not {self.transport!r}")
        if self.signature_scheme != "hmac-sha256":
            raise ValueError(f"only hmac-sha256 signatures are supported, not {self.signature_scheme!r}")
        ports = (self.shell_port, self.iopub_port, self.stdin_port, self.control_port, self.hb_port)
        if len(set(ports)) != len(ports):
            raise ValueError("channel ports must be distinct")


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of executing one cell: final status plus collected outputs."""

    status: str
    outputs: tuple[CellOutput, ...] = ()
    ename: str | None = None
    evalue: str | None = None
    traceback: tuple[str, ...] = ()
    duration: float = 0.0


def sign_message(key: bytes, *frames: bytes) -> str:
    """HMAC-SHA256 over the serialized message frames, lowercase hex.

    An empty key means authentication is disabled and the signature is the
    empty string, as the protocol requires.
    """
    if not key:
        return ""
    mac = hmac.new(key, digestmod=hashlib.sha256)
    for frame in frames:
        mac.update(frame)
    return mac.hexdigest()


@dataclass(frozen=True)
class Message:
    idents: tuple[bytes, ...]
    header: dict
    parent_header: dict
    metadata: dict
    content: dict

    @property
    def msg_type(self) -> str:
        return self.header.get("msg_type", "")

    @property
    def parent_id(self) -> str:
        return self.parent_header.get("msg_id", "")


def pack_message(
    key: bytes, session: str, msg_type: str, content: dict, parent_header: dict | None = None
) -> tuple[str, list[bytes]]:
    """Build the wire frames for one message; returns (msg_id, frames)."""
    header = {
        "msg_id": uuid.uuid4().hex,
        "session": session,
        "username": "nbcheck",
        "date": datetime.now(timezone.utc).isoformat(),
        "msg_type": msg_type,
        "version": PROTOCOL_VERSION,
    }
    parts = [
        json.dumps(header).encode("utf-8"),
        json.dumps(parent_header or {}).encode("utf-8"),
        json.dumps({}).encode("utf-8"),
        json.dumps(content).encode("utf-8"),
    ]
    signature = sign_message(key, *parts).encode("ascii")
    return header["msg_id"], [DELIMITER, signature, *parts]


def unpack_message(frames: list[bytes], key: bytes) -> Message | None:
    """Parse received frames; returns None (and logs) for anything invalid.

    Invalid includes a missing delimiter, too few frames and, crucially, a
    signature that does not verify under ``key``.
    """
    try:
        delim_index = frames.index(DELIMITER)
    except ValueError:
        logger.warning("dropping message without delimiter frame")
        return None
    idents = tuple(frames[:delim_index])
    rest = frames[delim_index + 1 :]
    if len(rest) < 5:
        logger.warning("dropping truncated message (%d frames after delimiter)", len(rest))
        return None
    signature = rest[0]
    parts = rest[1:5]
    expected = sign_message(key, *parts).encode("ascii")
    if not hmac.compare_digest(signature, expected):
        logger.warning("dropping message with invalid signature")
        return None
    try:
        header, parent_header, metadata, content = (json.loads(p.decode("utf-8")) for p in parts)
    except (ValueError, UnicodeDecodeError):
        logger.warning("dropping message with undecodable frames")
        return None
    return Message(idents, header, parent_header, metadata, content)


def _kernel_search_dirs() -> list[Path]:
    """Standard Jupyter data directories, highest priority first."""
    dirs: list[Path] = []
    jupyter_path = os.environ.get("JUPYTER_PATH")
    if jupyter_path:
        dirs.extend(Path(p) for p in jupyter_path.split(os.pathsep) if p)
    data_dir = os.environ.get("JUPYTER_DATA_DIR")
    if data_dir:
        dirs.append(Path(data_dir))
    elif sys.platform == "darwin":
        dirs.append(Path.home() / "Library" / "Jupyter")
    else:
        xdg = os.environ.get("XDG_DATA_HOME") or str(Path.home() / ".local" / "share")
        dirs.append(Path(xdg) / "jupyter")
    dirs.append(Path(sys.prefix) / "share" / "jupyter")
    dirs.append(Path("/usr/local/share/jupyter"))
    dirs.append(Path("/usr/share/jupyter"))
    return dirs


def resolve_kernelspec(name: str, default: str = DEFAULT_KERNEL_NAME) -> KernelSpec:
    """Find ``kernels/<name>/kernel.json`` in the Jupyter directories.

    User-level locations are searched before system-level ones; an empty name
    falls back to ``default``.
    """
    name = name or default
    for base in _kernel_search_dirs():
        spec_file = base / "kernels" / name / "kernel.json"
        if not spec_file.is_file():
            continue
        try:
            data = json.loads(spec_file.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise KernelNotFound(f"unreadable kernelspec {spec_file}: {exc}") from None
        argv = data.get("argv")
        if not isinstance(argv, list) or not all(isinstance(a, str) for a in argv):
            raise KernelNotFound(f"kernelspec {spec_file} has no argv list")
        placeholders = sum("{connection_file}" in a for a in argv)
        if placeholders != 1:
            raise KernelNotFound(
                f"kernelspec {spec_file} must reference {{connection_file}} exactly once"
            )
        env = data.get("env") if isinstance(data.get("env"), dict) else {}
        return KernelSpec(
            name=name,
            argv=tuple(argv),
            language=data.get("language", ""),
            resource_dir=spec_file.parent,
            interrupt_mode=data.get("interrupt_mode", "signal"),
            env={str(k): str(v) for k, v in env.items()},
        )
    raise KernelNotFound(f"no kernelspec named {name!r} in {[str(d) for d in _kernel_search_dirs()]}")


def _pick_ports(count: int = 5) -> list[int]:
    """Reserve ``count`` distinct ephemeral loopback ports."""
    sockets = []
    try:
        for _ in range(count):
            sock = socket_mod.socket()
            sock.bind(("127.0.0.1", 0))
            sockets.append(sock)
        return [sock.getsockname()[1] for sock in sockets]
    finally:
        for sock in sockets:
            sock.close()


def write_connection_file(info: ConnectionInfo, path: Path) -> None:
    payload = {
        "transport": info.transport,
        "ip": info.ip,
        "shell_port": info.shell_port,
        "iopub_port": info.iopub_port,
        "stdin_port": info.stdin_port,
        "control_port": info.control_port,
        "hb_port": info.hb_port,
        "key": info.key.decode("ascii"),
        "signature_scheme": info.signature_scheme,
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def read_connection_file(path: Path) -> ConnectionInfo:
    data = json.loads(path.read_text(encoding="utf-8"))
    return ConnectionInfo(
        ip=data["ip"],
        shell_port=data["shell_port"],
        iopub_port=data["iopub_port"],
        stdin_port=data["stdin_port"],
        control_port=data["control_port"],
        hb_port=data["hb_port"],
        key=data["key"].encode("utf-8"),
        transport=data.get("transport", "tcp"),
        signature_scheme=data.get("signature_scheme", "hmac-sha256"),
    )


class KernelHandle:
    """Connected channels to one kernel. Confined to one thread at a time."""

    def __init__(
        self,
        info: ConnectionInfo,
        process: subprocess.Popen | None = None,
        connection_file: Path | None = None,
        interrupt_mode: str = "signal",
        interrupt_grace: float = 5.0,
    ):
        self.info = info
        self.process = process
        self.connection_file = connection_file
        self.interrupt_mode = interrupt_mode
        self.interrupt_grace = interrupt_grace
        self.session = uuid.uuid4().hex
        self.key = info.key
        self._closed = False

        self._ctx = zmq.Context()
        address = f"tcp://{info.ip}"
        self.shell = self._dealer(f"{address}:{info.shell_port}")
        self.control = self._dealer(f"{address}:{info.control_port}")
        self.stdin = self._dealer(f"{address}:{info.stdin_port}")
        self.iopub = self._ctx.socket(zmq.SUB)
        self.iopub.linger = 0
        self.iopub.setsockopt(zmq.SUBSCRIBE, b"")
        self.iopub.connect(f"{address}:{info.iopub_port}")
        self.hb = self._ctx.socket(zmq.REQ)
        self.hb.linger = 0
        self.hb.connect(f"{address}:{info.hb_port}")

        self._poller = zmq.Poller()
        for sock in (self.shell, self.iopub, self.stdin):
            self._poller.register(sock, zmq.POLLIN)

    def _dealer(self, endpoint: str) -> zmq.Socket:
        sock = self._ctx.socket(zmq.DEALER)
        sock.linger = 0
        sock.setsockopt(zmq.IDENTITY, self.session.encode("ascii"))
        sock.connect(endpoint)
        return sock

    def _send(self, sock: zmq.Socket, msg_type: str, content: dict, parent: dict | None = None) -> str:
        msg_id, frames = pack_message(self.key, self.session, msg_type, content, parent)
        sock.send_multipart(frames)
        return msg_id

    def _recv_all(self, sock: zmq.Socket):
        while True:
            try:
                frames = sock.recv_multipart(zmq.NOBLOCK)
            except zmq.Again:
                return
            msg = unpack_message(frames, self.key)
            if msg is not None:
                yield msg

    def _process_exited(self) -> bool:
        return self.process is not None and self.process.poll() is not None

    def execute(self, source: str, cell_timeout: float) -> ExecutionOutcome:
        """Run one cell and collect its broadcast outputs in arrival order.

        Completion requires both the execute reply and the kernel's return to
        idle for this request. Outputs from other requests are ignored; on a
        deadline the kernel is interrupted and, failing that, killed.
        """
        start = time.monotonic()
        deadline = start + cell_timeout
        msg_id = self._send(
            self.shell,
            "execute_request",
            {
                "code": source,
                "silent": False,
                "store_history": True,
                "user_expressions": {},
                "allow_stdin": False,
                "stop_on_error": False,
            },
        )

        outputs: list[CellOutput] = []
        pending_clear = False
        error_output: CellOutput | None = None
        reply_content: dict | None = None
        stdin_violation = False
        idle = False

        def note_output(out: CellOutput) -> None:
            nonlocal pending_clear
            if pending_clear:
                outputs.clear()
                pending_clear = False
            outputs.append(out)

        def handle_iopub(msg: Message) -> None:
            nonlocal idle, pending_clear, error_output
            if msg.parent_id != msg_id:
                return
            msg_type = msg.msg_type
            content = msg.content
            if msg_type == "status":
                if content.get("execution_state") == "idle":
                    idle = True
            elif msg_type == "stream":
                note_output(
                    CellOutput(
                        variant=STREAM,
                        stream_name=content.get("name", "stdout"),
                        text=_as_text(content.get("text", "")),
                    )
                )
            elif msg_type in ("execute_result", "display_data"):
                variant = EXECUTE_RESULT if msg_type == "execute_result" else DISPLAY_DATA
                data = content.get("data") or {}
                out = CellOutput(
                    variant=variant,
                    text=_as_text(data["text/plain"]) if "text/plain" in data else None,
                    image_png=_as_image(data.get("image/png")),
                    image_jpeg=_as_image(data.get("image/jpeg")),
                )
                note_output(out)
            elif msg_type == "error":
                out = CellOutput(
                    variant=ERROR,
                    ename=str(content.get("ename", "")),
                    evalue=str(content.get("evalue", "")),
                    traceback=tuple(str(line) for line in content.get("traceback", [])),
                )
                error_output = out
                note_output(out)
            elif msg_type == "clear_output":
                if content.get("wait"):
                    pending_clear = True
                else:
                    outputs.clear()
            # execute_input and other bookkeeping broadcasts are ignored

        while not (reply_content is not None and idle):
            if self._process_exited():
                return self._outcome(
                    STATUS_KERNEL_DIED, outputs, error_output, reply_content, stdin_violation, start
                )
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self._interrupt()
                if not self._drain_until_idle(msg_id, self.interrupt_grace):
                    self._kill()
                return self._outcome(
                    STATUS_TIMEOUT, outputs, error_output, reply_content, stdin_violation, start
                )
            events = dict(self._poller.poll(max(1, int(min(remaining, 0.1) * 1000))))
            if self.iopub in events:
                for msg in self._recv_all(self.iopub):
                    handle_iopub(msg)
            if self.shell in events:
                for msg in self._recv_all(self.shell):
                    if msg.msg_type == "execute_reply" and msg.parent_id == msg_id:
                        reply_content = msg.content
            if self.stdin in events:
                for msg in self._recv_all(self.stdin):
                    if msg.msg_type == "input_request":
                        # Validation is non-interactive: answer with an error
                        # so the kernel does not block (value kept for kernels
                        # that read it blindly), then mark the cell failed.
                        self._send(
                            self.stdin,
                            "input_reply",
                            {
                                "status": "error",
                                "ename": "StdinNotAllowed",
                                "evalue": "nbcheck runs notebooks non-interactively",
                                "value": "",
                            },
                            parent=msg.header,
                        )
                        stdin_violation = True

        return self._outcome(None, outputs, error_output, reply_content, stdin_violation, start)

    def _outcome(
        self,
        forced_status: str | None,
        outputs: list[CellOutput],
        error_output: CellOutput | None,
        reply_content: dict | None,
        stdin_violation: bool,
        start: float,
    ) -> ExecutionOutcome:
        duration = time.monotonic() - start
        ename = evalue = None
        traceback: tuple[str, ...] = ()
        if error_output is not None:
            ename, evalue, traceback = error_output.ename, error_output.evalue, error_output.traceback
        elif reply_content is not None and reply_content.get("status") == "error":
            ename = str(reply_content.get("ename", "")) or None
            evalue = str(reply_content.get("evalue", "")) or None
            traceback = tuple(str(line) for line in reply_content.get("traceback", []))
        elif stdin_violation:
            ename = "StdinNotAllowed"
            evalue = "cell requested input from stdin during non-interactive validation"

        if forced_status is not None:
            status = forced_status
        elif (
            error_output is not None
            or (reply_content is not None and reply_content.get("status") != "ok")
            or stdin_violation
        ):
            status = STATUS_ERROR
        else:
            status = STATUS_OK
        return ExecutionOutcome(
            status=status,
            outputs=tuple(outputs),
            ename=ename,
            evalue=evalue,
            traceback=traceback,
            duration=duration,
        )

    def _drain_until_idle(self, msg_id: str, grace: float) -> bool:
        deadline = time.monotonic() + grace
        while time.monotonic() < deadline:
            if self._process_exited():
                return False
            events = dict(self._poller.poll(50))
            if self.iopub in events:
                for msg in self._recv_all(self.iopub):
                    if (
                        msg.parent_id == msg_id
                        and msg.msg_type == "status"
                        and msg.content.get("execution_state") == "idle"
                    ):
                        return True
            if self.shell in events:
                list(self._recv_all(self.shell))
        return False

    def _interrupt(self) -> None:
        if self.process is not None and self.interrupt_mode == "signal":
            try:
                self.process.send_signal(signal.SIGINT)
            except OSError:
                pass
            return
        try:
            self._send(self.control, "interrupt_request", {})
        except zmq.ZMQError:
            pass

    def _kill(self) -> None:
        if self.process is None:
            return
        try:
            self.process.kill()
            self.process.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            pass

    def shutdown(self, grace: float = 5.0) -> None:
        """Polite shutdown request, then kill after ``grace``. Best effort."""
        if self._closed:
            return
        self._closed = True
        try:
            self._send(self.control, "shutdown_request", {"restart": False})
        except zmq.ZMQError:
            pass
        if self.process is not None and self.process.poll() is None:
            deadline = time.monotonic() + grace
            while time.monotonic() < deadline and self.process.poll() is None:
                time.sleep(0.05)
            if self.process.poll() is None:
                logger.warning("kernel did not shut down politely; killing it")
                try:
                    self.process.terminate()
                    self.process.wait(timeout=2)
                except (OSError, subprocess.TimeoutExpired):
                    self._kill()
        for sock in (self.shell, self.control, self.stdin, self.iopub, self.hb):
            try:
                sock.close(linger=0)
            except zmq.ZMQError:
                pass
        self._ctx.term()
        if self.connection_file is not None:
            try:
                self.connection_file.unlink(missing_ok=True)
            except OSError as exc:
                logger.warning("could not remove connection file: %s", exc)


def _as_text(value) -> str:
    if isinstance(value, list):
        return "".join(str(item) for item in value)
    return str(value)


def _as_image(value) -> bytes | None:
    if value is None:
        return None
    try:
        return base64.b64decode(_as_text(value).encode("ascii"), validate=False)
    except Exception:
        logger.warning("dropping undecodable image payload")
        return None


def wait_ready(handle: KernelHandle, timeout: float) -> None:
    """Confirm liveness with a kernel_info round trip.

    Requires both the shell reply and a broadcast message parented to one of
    our requests, which also proves the subscription is fully established
    before real cells run. Re-sends once a second until the deadline.
    """
    deadline = time.monotonic() + timeout
    sent: set[str] = set()
    have_reply = False
    have_iopub = False
    while time.monotonic() < deadline:
        if handle.process is not None:
            code = handle.process.poll()
            if code is not None:
                raise SpawnFailure(f"kernel exited with code {code} during startup")
        sent.add(handle._send(handle.shell, "kernel_info_request", {}))
        tick_deadline = min(deadline, time.monotonic() + 1.0)
        while time.monotonic() < tick_deadline:
            events = dict(handle._poller.poll(50))
            if handle.shell in events:
                for msg in handle._recv_all(handle.shell):
                    if msg.msg_type == "kernel_info_reply" and msg.parent_id in sent:
                        have_reply = True
            if handle.iopub in events:
                for msg in handle._recv_all(handle.iopub):
                    if msg.parent_id in sent:
                        have_iopub = True
            if have_reply and have_iopub:
                return
    raise StartupTimeout(f"kernel not ready within {timeout}s")


def connect_kernel(
    info: ConnectionInfo,
    process: subprocess.Popen | None = None,
    connection_file: Path | None = None,
    interrupt_mode: str = "signal",
    interrupt_grace: float = 5.0,
) -> KernelHandle:
    """Connect all five channels to an already-launched kernel."""
    return KernelHandle(
        info,
        process=process,
        connection_file=connection_file,
        interrupt_mode=interrupt_mode,
        interrupt_grace=interrupt_grace,
    )


def start_kernel(spec: KernelSpec, timeout: float = 60.0) -> KernelHandle:
    """Launch a kernel process and return a live, liveness-checked handle.

    Writes a fresh connection file with ephemeral ports and a random 32-byte
    key, substitutes it into the argv template, then confirms the kernel
    answers kernel_info within ``timeout``.
    """
    ports = _pick_ports()
    info = ConnectionInfo(
        ip="127.0.0.1",
        shell_port=ports[0],
        iopub_port=ports[1],
        stdin_port=ports[2],
        control_port=ports[3],
        hb_port=ports[4],
        key=secrets.token_hex(32).encode("ascii"),
    )
    fd, raw_path = tempfile.mkstemp(prefix="nbcheck-kernel-", suffix=".json")
    os.close(fd)
    connection_file = Path(raw_path)
    write_connection_file(info, connection_file)

    argv = [arg.replace("{connection_file}", str(connection_file)) for arg in spec.argv]
    env = dict(os.environ)
    env.update(spec.env)
    try:
        process = subprocess.Popen(
            argv,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            env=env,
        )
    except OSError as exc:
        connection_file.unlink(missing_ok=True)
        raise SpawnFailure(f"could not launch {argv[0]!r}: {exc}") from None

    handle = connect_kernel(
        info,
        process=process,
        connection_file=connection_file,
        interrupt_mode=spec.interrupt_mode,
    )
    try:
        wait_ready(handle, timeout)
    except StartupTimeout:
        handle.shutdown(grace=0.1)
        raise
    except SpawnFailure:
        handle.shutdown(grace=0.1)
        raise
    return handle
