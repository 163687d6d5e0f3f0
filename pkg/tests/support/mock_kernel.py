"""Scripted wire-protocol kernel for exercising the client without executing
anything.

Binds the five channel sockets on ephemeral loopback ports and answers
kernel_info like a real kernel. Each execute_request consumes the next queued
script: a list of steps saying exactly which broadcast frames to emit,
including deliberately hostile ones (bad signatures, foreign parent ids, a
missing return to idle). Framing is implemented here from scratch so the mock
cannot inherit a bug from the client under test.
"""

from __future__ import annotations

import datetime
import hashlib
import hmac
import json
import threading
import uuid

import zmq

from nbcheck.kernel_client import ConnectionInfo

DELIM = b"<IDS|MSG>"


class ScriptedKernel:
    """Plays back canned channel traffic, one script per execute request.

    Steps (tuples, first element is the step name):
      ("stream", name, text)            correctly signed stream output
      ("stream_bad_sig", name, text)    stream output with a corrupt signature
      ("stream_foreign", name, text)    stream output parented to another request
      ("result", text)                  execute_result with a text/plain payload
      ("display", data_dict)            display_data with a raw data dict
      ("error", ename, evalue)          error output
      ("clear", wait)                   clear_output
      ("input_request", prompt)         stdin prompt to the client
      ("reply", status)                 execute_reply on the shell channel
      ("idle",)                         status idle; omit to simulate a hang
    """

    def __init__(self, key: str = "scripted-mock-key"):
        self.key = key.encode("utf-8")
        self.session = uuid.uuid4().hex
        self.scripts: list[list[tuple]] = []
        self.executed_codes: list[str] = []
        self._stop = threading.Event()

        self._ctx = zmq.Context()
        self.shell = self._ctx.socket(zmq.ROUTER)
        self.control = self._ctx.socket(zmq.ROUTER)
        self.stdin = self._ctx.socket(zmq.ROUTER)
        self.iopub = self._ctx.socket(zmq.PUB)
        self.heartbeat = self._ctx.socket(zmq.REP)
        ports = {}
        for name, sock in (
            ("shell", self.shell),
            ("control", self.control),
            ("stdin", self.stdin),
            ("iopub", self.iopub),
            ("hb", self.heartbeat),
        ):
            sock.linger = 0
            ports[name] = sock.bind_to_random_port("tcp://127.0.0.1")
        self.info = ConnectionInfo(
            ip="127.0.0.1",
            shell_port=ports["shell"],
            iopub_port=ports["iopub"],
            stdin_port=ports["stdin"],
            control_port=ports["control"],
            hb_port=ports["hb"],
            key=self.key,
        )
        self._thread = threading.Thread(target=self._run, daemon=True)

    # -- wire helpers -----------------------------------------------------

    def _sign(self, parts: list[bytes]) -> bytes:
        mac = hmac.new(self.key, digestmod=hashlib.sha256)
        for part in parts:
            mac.update(part)
        return mac.hexdigest().encode("ascii")

    def _parts(self, msg_type: str, content: dict, parent: dict) -> list[bytes]:
        header = {
            "msg_id": uuid.uuid4().hex,
            "session": self.session,
            "username": "mock",
            "date": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "msg_type": msg_type,
            "version": "5.3",
        }
        return [
            json.dumps(header).encode(),
            json.dumps(parent).encode(),
            json.dumps({}).encode(),
            json.dumps(content).encode(),
        ]

    def _publish(self, msg_type: str, content: dict, parent: dict, corrupt_signature: bool = False) -> None:
        parts = self._parts(msg_type, content, parent)
        signature = b"0" * 64 if corrupt_signature else self._sign(parts)
        self.iopub.send_multipart([msg_type.encode(), DELIM, signature, *parts])

    def _reply(self, sock: zmq.Socket, idents: list[bytes], msg_type: str, content: dict, parent: dict) -> None:
        parts = self._parts(msg_type, content, parent)
        sock.send_multipart([*idents, DELIM, self._sign(parts), *parts])

    def _recv(self, sock: zmq.Socket):
        frames = sock.recv_multipart()
        idents = []
        while frames and frames[0] != DELIM:
            idents.append(frames.pop(0))
        if len(frames) < 6:
            return None, None
        header, parent, _meta, content = (json.loads(p) for p in frames[2:6])
        return idents, {"header": header, "parent": parent, "content": content}

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "ScriptedKernel":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
        for sock in (self.shell, self.control, self.stdin, self.iopub, self.heartbeat):
            sock.close(linger=0)
        self._ctx.term()

    def __enter__(self) -> "ScriptedKernel":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- behaviour ---------------------------------------------------------

    def _run(self) -> None:
        poller = zmq.Poller()
        poller.register(self.shell, zmq.POLLIN)
        poller.register(self.control, zmq.POLLIN)
        while not self._stop.is_set():
            events = dict(poller.poll(50))
            for sock in (self.shell, self.control):
                if sock not in events:
                    continue
                idents, msg = self._recv(sock)
                if msg is None:
                    continue
                msg_type = msg["header"].get("msg_type")
                if msg_type == "kernel_info_request":
                    parent = msg["header"]
                    self._publish("status", {"execution_state": "busy"}, parent)
                    self._reply(
                        sock,
                        idents,
                        "kernel_info_reply",
                        {"status": "ok", "protocol_version": "5.3", "implementation": "mock"},
                        parent,
                    )
                    self._publish("status", {"execution_state": "idle"}, parent)
                elif msg_type == "execute_request":
                    self.executed_codes.append(msg["content"].get("code", ""))
                    script = self.scripts.pop(0) if self.scripts else [("reply", "ok"), ("idle",)]
                    self._play(idents, msg["header"], script)
                elif msg_type == "shutdown_request":
                    self._reply(sock, idents, "shutdown_reply", {"status": "ok"}, msg["header"])
                elif msg_type == "interrupt_request":
                    self._reply(sock, idents, "interrupt_reply", {"status": "ok"}, msg["header"])

    def _play(self, idents: list[bytes], parent: dict, script: list[tuple]) -> None:
        self._publish("status", {"execution_state": "busy"}, parent)
        foreign_parent = {"msg_id": "foreign-" + uuid.uuid4().hex, "session": "elsewhere"}
        for step in script:
            kind = step[0]
            if kind == "stream":
                self._publish("stream", {"name": step[1], "text": step[2]}, parent)
            elif kind == "stream_bad_sig":
                self._publish("stream", {"name": step[1], "text": step[2]}, parent, corrupt_signature=True)
            elif kind == "stream_foreign":
                self._publish("stream", {"name": step[1], "text": step[2]}, foreign_parent)
            elif kind == "result":
                self._publish(
                    "execute_result",
                    {"execution_count": 1, "data": {"text/plain": step[1]}, "metadata": {}},
                    parent,
                )
            elif kind == "display":
                self._publish("display_data", {"data": step[1], "metadata": {}}, parent)
            elif kind == "error":
                self._publish(
                    "error", {"ename": step[1], "evalue": step[2], "traceback": []}, parent
                )
            elif kind == "clear":
                self._publish("clear_output", {"wait": step[1]}, parent)
            elif kind == "input_request":
                self._reply(self.stdin, idents, "input_request", {"prompt": step[1], "password": False}, parent)
            elif kind == "reply":
                content = {"status": step[1], "execution_count": 1}
                if step[1] == "error":
                    content.update({"ename": "MockError", "evalue": "scripted", "traceback": []})
                self._reply(self.shell, idents, "execute_reply", content, parent)
            elif kind == "idle":
                self._publish("status", {"execution_state": "idle"}, parent)
            else:
                raise AssertionError(f"unknown script step {kind!r}")
