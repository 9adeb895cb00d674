"""Simulated sensor network: UDP wire format, frame replay, and a collecting server.

Each sensor emits one packet per sniffing path per time instant. The
collector reassembles packets into complete e x f mutual matrices keyed by
timestamp, zero-filling paths that miss a reassembly deadline so that
downstream consumers always see full frames (gaps are flagged and counted).

Wire layout (little-endian):
    magic     4 bytes  b"PSKL"
    version   1 byte
    tx_id     6 bytes  transmitter MAC
    rx_id     6 bytes  receiver MAC
    seq       4 bytes  unsigned
    timestamp 8 bytes  unsigned milliseconds
    f         2 bytes  unsigned subcarrier count
    payload   f * 4 bytes  float32 subcarrier amplitudes
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .datamodel import CSIFrame, Dataset, SensingTopology

log = logging.getLogger(__name__)

MAGIC = b"PSKL"
VERSION = 1
DEFAULT_PORT = 5566

_HEADER = struct.Struct("<4sB6s6sIQH")
HEADER_SIZE = _HEADER.size  # 31 bytes


class EncodeError(ValueError):
    """Raised for frame fields that cannot be serialized."""


class DecodeError(ValueError):
    """Raised for malformed packets; `reason` names the first failing check."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def mac_to_bytes(mac: str) -> bytes:
    parts = mac.split(":")
    if len(parts) != 6:
        raise EncodeError(f"malformed MAC address {mac!r}")
    try:
        raw = bytes(int(p, 16) for p in parts)
    except ValueError as exc:
        raise EncodeError(f"malformed MAC address {mac!r}") from exc
    return raw


def bytes_to_mac(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


@dataclass(frozen=True)
class WireFrame:
    """One sniffing path's subcarriers at one instant, as sent on the wire."""

    tx_id: str
    rx_id: str
    sequence_no: int
    timestamp_ms: int
    payload: np.ndarray  # float32, length f

    def __post_init__(self) -> None:
        payload = np.asarray(self.payload, dtype=np.float32)
        if payload.ndim != 1 or payload.size == 0:
            raise EncodeError("payload must be a non-empty vector")
        payload.setflags(write=False)
        if self.tx_id == self.rx_id:
            raise EncodeError("sensors cannot sniff themselves (tx_id == rx_id)")
        object.__setattr__(self, "payload", payload)

    @property
    def f(self) -> int:
        return self.payload.size


def encode_frame(frame: WireFrame) -> bytes:
    """Bit-exact serialization; total length 31 + 4f bytes."""
    f = frame.f
    if f > 0xFFFF:
        raise EncodeError(f"subcarrier count {f} exceeds u16")
    if not 0 <= frame.sequence_no <= 0xFFFFFFFF:
        raise EncodeError(f"sequence_no {frame.sequence_no} exceeds u32")
    if not 0 <= frame.timestamp_ms <= 0xFFFFFFFFFFFFFFFF:
        raise EncodeError(f"timestamp_ms {frame.timestamp_ms} exceeds u64")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        mac_to_bytes(frame.tx_id),
        mac_to_bytes(frame.rx_id),
        frame.sequence_no,
        frame.timestamp_ms,
        f,
    )
    return header + frame.payload.astype("<f4").tobytes()


def decode_frame(data: bytes) -> WireFrame:
    """Parse one packet; rejects bad magic, version, lengths, and self-loops."""
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated", f"packet of {len(data)} bytes is shorter than the header")
    magic, version, tx_raw, rx_raw, seq, ts, f = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError("magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError("version", f"unsupported version {version}")
    expected = HEADER_SIZE + 4 * f
    if len(data) != expected:
        reason = "truncated" if len(data) < expected else "length"
        raise DecodeError(reason, f"expected {expected} bytes for f={f}, got {len(data)}")
    if f == 0:
        raise DecodeError("length", "empty payload")
    if tx_raw == rx_raw:
        raise DecodeError("self_loop", "tx_id equals rx_id")
    payload = np.frombuffer(data, dtype="<f4", count=f, offset=HEADER_SIZE)
    if not np.all(np.isfinite(payload)):
        raise DecodeError("payload", "non-finite subcarrier values")
    return WireFrame(
        tx_id=bytes_to_mac(tx_raw),
        rx_id=bytes_to_mac(rx_raw),
        sequence_no=seq,
        timestamp_ms=ts,
        payload=payload,
    )


@dataclass
class SendReport:
    frames_per_path: dict[tuple[str, str], int]
    samples_sent: int
    duration_s: float

    @property
    def frames_sent(self) -> int:
        return sum(self.frames_per_path.values())


def run_sensors(
    dataset: Dataset,
    rate_hz: float,
    endpoint: tuple[str, int],
    limit: int | None = None,
) -> SendReport:
    """Replay a dataset over UDP, one packet per path, paced at rate_hz.

    rate_hz <= 0 sends as fast as possible (loopback replay). The report
    counts frames sent per sniffing path.
    """
    topology = dataset.topology
    counts: dict[tuple[str, str], int] = {p: 0 for p in topology.paths}
    period = 1.0 / rate_hz if rate_hz > 0 else 0.0
    samples = dataset.samples[:limit] if limit is not None else dataset.samples
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        start = time.monotonic()
        for idx, sample in enumerate(samples):
            if period:
                target = start + idx * period
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            for path_idx, (tx, rx) in enumerate(topology.paths):
                frame = WireFrame(
                    tx_id=tx,
                    rx_id=rx,
                    sequence_no=sample.csi.sequence_no,
                    timestamp_ms=sample.csi.timestamp_ms,
                    payload=sample.csi.values[path_idx],
                )
                try:
                    sock.sendto(encode_frame(frame), endpoint)
                except OSError as exc:
                    raise ConnectionError(f"cannot send to {endpoint}: {exc}") from exc
                counts[(tx, rx)] += 1
        duration = time.monotonic() - start
    finally:
        sock.close()
    return SendReport(frames_per_path=counts, samples_sent=len(samples), duration_s=duration)


@dataclass
class CollectorStats:
    packets: int = 0
    decode_errors: int = 0
    unknown_path: int = 0
    duplicates: int = 0
    late_packets: int = 0
    frames_complete: int = 0
    frames_timeout: int = 0
    rows_zero_filled: int = 0

    def report(self) -> str:
        lines = ["collector statistics"]
        for key, value in vars(self).items():
            lines.append(f"  {key}: {value}")
        return "\n".join(lines)


@dataclass(frozen=True)
class CollectedFrame:
    """A reassembled frame; missing_paths lists zero-filled row indices."""

    frame: CSIFrame
    missing_paths: tuple[int, ...] = ()

    @property
    def complete(self) -> bool:
        return not self.missing_paths


@dataclass
class _Pending:
    deadline: float
    sequence_no: int
    rows: dict[int, np.ndarray] = field(default_factory=dict)


class Collector:
    """UDP ingestion server reassembling per-timestamp mutual matrices.

    One receive loop owns the reassembly table and feeds completed frames to
    a bounded queue (back-pressure blocks the loop, letting the kernel socket
    buffer absorb bursts). A frame is emitted when all e paths arrive or when
    timeout_ms elapses after its first packet, zero-filling absent rows.
    """

    def __init__(
        self,
        topology: SensingTopology,
        host: str = "127.0.0.1",
        port: int = 0,
        timeout_ms: int = 200,
        queue_size: int = 4096,
    ):
        self.topology = topology
        self.timeout_ms = timeout_ms
        self.stats = CollectorStats()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 21)
        self._sock.bind((host, port))
        self._sock.settimeout(0.01)
        self._queue: queue.Queue[CollectedFrame | None] = queue.Queue(maxsize=queue_size)
        self._pending: dict[int, _Pending] = {}
        self._emitted: set[int] = set()
        self._emitted_order: list[int] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> tuple[str, int]:
        addr = self._sock.getsockname()
        return (addr[0], addr[1])

    def start(self) -> "Collector":
        if self._thread is not None:
            raise RuntimeError("collector already started")
        self._thread = threading.Thread(target=self._run, name="csi-collector", daemon=True)
        self._thread.start()
        return self

    def _remember_emitted(self, ts: int) -> None:
        self._emitted.add(ts)
        self._emitted_order.append(ts)
        if len(self._emitted_order) > 65536:
            old = self._emitted_order[: len(self._emitted_order) // 2]
            self._emitted_order = self._emitted_order[len(old) :]
            self._emitted.difference_update(old)

    def _emit(self, ts: int, entry: _Pending) -> None:
        e, f = self.topology.e, self.topology.f
        values = np.zeros((e, f))
        missing = []
        for idx in range(e):
            row = entry.rows.get(idx)
            if row is None:
                missing.append(idx)
            else:
                values[idx] = row
        frame = CSIFrame(timestamp_ms=ts, values=values, sequence_no=entry.sequence_no)
        if missing:
            self.stats.frames_timeout += 1
            self.stats.rows_zero_filled += len(missing)
        else:
            self.stats.frames_complete += 1
        self._remember_emitted(ts)
        self._queue.put(CollectedFrame(frame=frame, missing_paths=tuple(missing)))

    def _expire(self, now: float) -> None:
        due = [ts for ts, entry in self._pending.items() if entry.deadline <= now]
        for ts in sorted(due):
            self._emit(ts, self._pending.pop(ts))

    def _handle(self, data: bytes) -> None:
        self.stats.packets += 1
        try:
            wire = decode_frame(data)
        except DecodeError as exc:
            self.stats.decode_errors += 1
            log.debug("dropping undecodable packet: %s", exc)
            return
        try:
            path_idx = self.topology.path_index(wire.tx_id, wire.rx_id)
        except KeyError:
            self.stats.unknown_path += 1
            return
        if wire.f != self.topology.f:
            self.stats.unknown_path += 1
            return
        ts = wire.timestamp_ms
        if ts in self._emitted:
            self.stats.late_packets += 1
            return
        entry = self._pending.get(ts)
        if entry is None:
            entry = _Pending(
                deadline=time.monotonic() + self.timeout_ms / 1000.0,
                sequence_no=wire.sequence_no,
            )
            self._pending[ts] = entry
        if path_idx in entry.rows:
            self.stats.duplicates += 1
            return
        entry.rows[path_idx] = wire.payload.astype(np.float64)
        if len(entry.rows) == self.topology.e:
            self._emit(ts, self._pending.pop(ts))

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self._sock.recvfrom(65535)
            except socket.timeout:
                self._expire(time.monotonic())
                continue
            except OSError:
                break
            self._handle(data)
            self._expire(time.monotonic())
        # flush: remaining partial frames are emitted zero-filled
        for ts in sorted(self._pending):
            self._emit(ts, self._pending.pop(ts))
        self._queue.put(None)

    def frames(self, timeout: float | None = None):
        """Yield collected frames until the collector stops and drains."""
        while True:
            try:
                item = self._queue.get(timeout=timeout)
            except queue.Empty:
                return
            if item is None:
                return
            yield item

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self._sock.close()

    def __enter__(self) -> "Collector":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def collect(
    topology: SensingTopology,
    host: str = "127.0.0.1",
    port: int = DEFAULT_PORT,
    timeout_ms: int = 200,
    stop_after: int | None = None,
    idle_timeout_s: float = 5.0,
) -> tuple[list[CollectedFrame], CollectorStats]:
    """Listen on an endpoint and reassemble frames until idle or a count is hit."""
    collector = Collector(topology, host=host, port=port, timeout_ms=timeout_ms)
    collector.start()
    frames: list[CollectedFrame] = []
    try:
        for item in collector.frames(timeout=idle_timeout_s):
            frames.append(item)
            if stop_after is not None and len(frames) >= stop_after:
                break
    finally:
        collector.stop()
        for item in collector.frames(timeout=0.1):
            frames.append(item)
            if stop_after is not None and len(frames) >= stop_after:
                break
    return frames, collector.stats


def replay_loopback(
    dataset: Dataset,
    rate_hz: float = 0.0,
    timeout_ms: int = 500,
) -> tuple[list[CollectedFrame], CollectorStats, SendReport]:
    """Replay a dataset through a loopback sensor->collector round trip.

    With no packet loss the collected matrices reproduce the dataset exactly
    (the generator stores float32-precision values, matching the wire).
    """
    with Collector(dataset.topology, port=0, timeout_ms=timeout_ms) as collector:
        report = run_sensors(dataset, rate_hz, collector.endpoint)
        expected = len(dataset)
        frames: list[CollectedFrame] = []
        deadline = time.monotonic() + 10.0 + timeout_ms / 1000.0
        for item in collector.frames(timeout=1.0):
            frames.append(item)
            if len(frames) >= expected or time.monotonic() > deadline:
                break
    frames.sort(key=lambda c: c.frame.timestamp_ms)
    return frames, collector.stats, report
