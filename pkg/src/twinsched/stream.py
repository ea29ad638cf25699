"""Append-only event log between the cluster (producer) and the twin (consumer).

Backends:

* :class:`MemoryStream` -- in-process buffer, the default for closed-loop runs.
* :class:`FileStream` -- the same buffer mirrored to a newline-delimited JSON
  file; :meth:`FileStream.load` re-opens a recording for replay.
* :class:`SocketStreamReceiver` / :class:`SocketStreamSender` -- one JSON record
  per line over TCP, for producers living in another process.

Wire format, one object per line::

    {"offset":0,"ts":0,"kind":"submit","job":"17","nodes":4,"walltime":120}
"""

from __future__ import annotations

import json
import socket
import threading
import time
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

from .core import Event, EventKind, InvalidArgument, SchedError


class StreamError(SchedError):
    pass


class StreamClosed(StreamError):
    pass


class EndOfStream(StreamError):
    """Raised by a read past the last record of a closed stream."""


class StreamRecord(NamedTuple):
    offset: int
    event: Event


def encode_record(rec: StreamRecord) -> str:
    ev = rec.event
    obj = {"offset": rec.offset, "ts": ev.timestamp, "kind": ev.kind.value, "job": ev.job_id}
    if ev.kind is EventKind.SUBMIT:
        obj["nodes"] = int(ev.payload["nodes"])
        obj["walltime"] = int(ev.payload["walltime"])
    return json.dumps(obj, separators=(",", ":"))


def decode_record(line: str) -> StreamRecord:
    try:
        obj = json.loads(line)
        kind = EventKind(obj["kind"])
        payload = None
        if kind is EventKind.SUBMIT:
            payload = {"nodes": int(obj["nodes"]), "walltime": int(obj["walltime"])}
        extra = set(obj) - {"offset", "ts", "kind", "job", "nodes", "walltime"}
        if extra:
            raise InvalidArgument(f"unexpected fields {sorted(extra)}")
        return StreamRecord(int(obj["offset"]), Event(kind, int(obj["ts"]), str(obj["job"]), payload))
    except (ValueError, KeyError, TypeError) as exc:
        raise StreamError(f"malformed stream record {line!r}: {exc}") from exc


class MemoryStream:
    def __init__(self):
        self._records: list[StreamRecord] = []
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        with self._cond:
            return len(self._records)

    @property
    def closed(self) -> bool:
        return self._closed

    def append(self, event: Event) -> int:
        with self._cond:
            if self._closed:
                raise StreamClosed("append to a closed stream")
            if self._records and event.timestamp < self._records[-1].event.timestamp:
                raise StreamError(
                    f"event at t={event.timestamp} is older than the stream tail")
            rec = StreamRecord(len(self._records), event)
            self._write(rec)
            self._records.append(rec)
            self._cond.notify_all()
            return rec.offset

    def _write(self, rec: StreamRecord) -> None:
        pass

    def read_blocking(self, from_offset: int, timeout: float = 0.0) -> Optional[StreamRecord]:
        """Record at ``from_offset``, waiting up to ``timeout`` seconds.

        Returns ``None`` on timeout; raises :class:`EndOfStream` if the stream is
        closed and has nothing at that offset.
        """
        if from_offset < 0:
            raise InvalidArgument("offset must be non-negative")
        deadline = time.monotonic() + max(timeout, 0.0)
        with self._cond:
            while from_offset >= len(self._records):
                if self._closed:
                    raise EndOfStream(f"stream ended at offset {len(self._records)}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._records[from_offset]

    def records(self, from_offset: int = 0) -> Iterator[StreamRecord]:
        """Non-blocking iteration over what is currently in the log."""
        with self._cond:
            snap = self._records[from_offset:]
        return iter(snap)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class FileStream(MemoryStream):
    def __init__(self, path):
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")

    def _write(self, rec: StreamRecord) -> None:
        try:
            self._fh.write(encode_record(rec) + "\n")
            self._fh.flush()
        except (OSError, ValueError) as exc:
            raise StreamError(f"cannot write {self.path}: {exc}") from exc

    def close(self) -> None:
        super().close()
        if not self._fh.closed:
            self._fh.close()

    @staticmethod
    def load(path) -> MemoryStream:
        """Read a recording into a closed in-memory stream."""
        stream = MemoryStream()
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StreamError(f"cannot read {path}: {exc}") from exc
        for line in lines:
            if not line.strip():
                continue
            rec = decode_record(line)
            if rec.offset != len(stream):
                raise StreamError(f"{path}: offset gap at {len(stream)} (found {rec.offset})")
            stream.append(rec.event)
        stream.close()
        return stream


class SocketStreamReceiver(MemoryStream):
    """Listens on TCP and appends every line received from one producer.

    Offsets carried on the wire must be gap-free; the stream closes when the
    producer disconnects.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__()
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self.error: Optional[Exception] = None
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        try:
            conn, _ = self._server.accept()
            with conn, conn.makefile("r", encoding="utf-8", newline="\n") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = decode_record(line)
                    if rec.offset != len(self):
                        raise StreamError(f"offset gap: expected {len(self)}, got {rec.offset}")
                    self.append(rec.event)
        except Exception as exc:  # surfaced to the consumer via .error
            self.error = exc
        finally:
            self._server.close()
            self.close()

    def join(self, timeout: Optional[float] = None) -> None:
        self._thread.join(timeout)


class SocketStreamSender:
    """Producer side of the socket backend."""

    def __init__(self, address):
        self._sock = socket.create_connection(tuple(address))
        self._fh = self._sock.makefile("w", encoding="utf-8", newline="\n")
        self._next = 0
        self._lock = threading.Lock()

    def append(self, event: Event) -> int:
        with self._lock:
            if self._fh.closed:
                raise StreamClosed("sender is closed")
            rec = StreamRecord(self._next, event)
            try:
                self._fh.write(encode_record(rec) + "\n")
                self._fh.flush()
            except OSError as exc:
                raise StreamError(f"socket send failed: {exc}") from exc
            self._next += 1
            return rec.offset

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
                self._sock.close()
