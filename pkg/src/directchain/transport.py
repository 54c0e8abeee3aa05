"""Bidirectional FIFO links between adjacent controllers.

A link drops everything in flight when it disconnects.  Every (re)connect
arms a latch that blocks application traffic until the two ends finish a
handshake; handshake frames are allowed through regardless.
"""

from __future__ import annotations

import enum
from collections import deque


class Direction(enum.IntEnum):
    FORWARD = 0   # upstream -> downstream
    BACKWARD = 1  # downstream -> upstream


class SendStatus(enum.Enum):
    ACCEPTED = "Accepted"
    NOT_CONNECTED = "NotConnected"


class Link:
    def __init__(self, name: str, upstream: str = "", downstream: str = "", latency=1):
        self.name = name
        self.upstream = upstream
        self.downstream = downstream
        # constant delay, or callable(now, payload) -> delay
        self.latency_model = latency
        self.connected = True
        self.handshake_required = False
        self._queues = (deque(), deque())
        self._last_due = [0, 0]
        self._seq = 0
        self.on_enqueue = None  # hook(due_time), used by the event loop
        self.sent = [0, 0]
        self.sent_bytes = [0, 0]
        self.dropped = 0

    @property
    def usable(self) -> bool:
        return self.connected and not self.handshake_required

    def __repr__(self):
        state = "up" if self.connected else "down"
        if self.handshake_required:
            state += "+latch"
        return f"Link({self.name}, {state})"

    def _delay(self, now, payload):
        lm = self.latency_model
        return lm(now, payload) if callable(lm) else lm

    def send(self, direction: Direction, payload: bytes, now=0, handshake=False, delay=None) -> SendStatus:
        if not self.connected or (self.handshake_required and not handshake):
            return SendStatus.NOT_CONNECTED
        if delay is None:
            delay = self._delay(now, payload)
        d = int(direction)
        due = max(now + delay, self._last_due[d])
        self._last_due[d] = due
        self._seq += 1
        self._queues[d].append((due, self._seq, payload))
        self.sent[d] += 1
        self.sent_bytes[d] += len(payload)
        if self.on_enqueue is not None:
            self.on_enqueue(due)
        return SendStatus.ACCEPTED

    def deliver_due(self, now) -> list:
        out = []
        for d in (0, 1):
            q = self._queues[d]
            while q and q[0][0] <= now:
                due, seq, payload = q.popleft()
                out.append((due, seq, Direction(d), payload))
        out.sort(key=lambda m: (m[0], m[1]))
        return [(direction, payload) for _, _, direction, payload in out]

    def next_due(self):
        heads = [q[0][0] for q in self._queues if q]
        return min(heads) if heads else None

    def queued(self, direction: Direction = Direction.FORWARD) -> list:
        """Payloads in flight in one direction, oldest first."""
        return [payload for _, _, payload in self._queues[int(direction)]]

    def pending(self) -> int:
        return len(self._queues[0]) + len(self._queues[1])

    def set_connected(self, state: bool) -> None:
        if not state:
            self.dropped += self.pending()
            for q in self._queues:
                q.clear()
            self._last_due = [0, 0]
        if state != self.connected or not state:
            # any change of connectivity (and any disconnect) re-arms the latch
            self.handshake_required = True
        self.connected = state

    def require_handshake(self) -> None:
        self.handshake_required = True

    def complete_handshake(self) -> None:
        if self.connected:
            self.handshake_required = False
