"""Communication paradigms over in-process workers.

Two styles are provided:

* one-sided: every subdomain owns a :class:`Window` with one slot per remote
  writer. Writers ``put`` a complete payload and ``flush``; the owner reads the
  latest complete payload with ``read_latest`` whenever it likes. Nobody waits
  for anybody.
* two-sided: :class:`Mailbox` queues per ordered pair, and ``exchange_sync``
  sends to every neighbour and then blocks until the iteration-tagged
  payload of every neighbour has arrived (the ``Isend``/``Irecv``/``Wait``
  pattern).

Slots hold immutable ``(payload, epoch)`` snapshots that are swapped in as a
whole, so readers always see a payload together with the epoch it was
written with.

:class:`Transport` is the interface the solver talks to; only the in-process
backend exists here, but a networked backend would implement the same
methods.
"""
from __future__ import annotations

import abc
import queue
import threading
import time

import numpy as np

from .errors import (
    BrokenRendezvousError,
    DeadlockSuspectedError,
    InvalidArgumentError,
    TagMismatchError,
)

__all__ = [
    "Window",
    "Mailbox",
    "FlagBoard",
    "RoundFlagBoard",
    "Transport",
    "InProcessTransport",
    "put",
    "flush",
    "read_latest",
    "exchange_sync",
]


def _frozen_copy(payload, length=None) -> np.ndarray:
    arr = np.array(payload, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError("payload must be 1-D")
    if length is not None and len(arr) != length:
        raise InvalidArgumentError(f"payload has length {len(arr)}, slot expects {length}")
    arr.flags.writeable = False
    return arr


class Window:
    """Remotely writable buffer owned by one subdomain.

    Parameters
    ----------
    owner : int
        Subdomain that reads the window.
    slot_lengths : dict[int, int]
        Fixed payload length for every writer allowed to put into it.
    """

    def __init__(self, owner: int, slot_lengths: dict[int, int]):
        self.owner = owner
        self.slot_lengths = dict(slot_lengths)
        self._slots = {w: (_frozen_copy(np.zeros(k)), 0) for w, k in self.slot_lengths.items()}
        self._locks = {w: threading.Lock() for w in self.slot_lengths}
        self.flush_count = {w: 0 for w in self.slot_lengths}

    @property
    def writers(self) -> list[int]:
        return sorted(self.slot_lengths)

    def _check_writer(self, writer):
        if writer not in self.slot_lengths:
            raise InvalidArgumentError(f"subdomain {writer} has no slot in the window of {self.owner}")

    def put(self, writer: int, payload) -> int:
        """Publish ``payload`` in ``writer``'s slot; returns the new epoch."""
        self._check_writer(writer)
        snapshot = _frozen_copy(payload, self.slot_lengths[writer])
        with self._locks[writer]:
            epoch = self._slots[writer][1] + 1
            self._slots[writer] = (snapshot, epoch)
        return epoch

    def flush(self, writer: int) -> None:
        # In-process puts are published before put() returns, so a flush has
        # nothing left to complete; it is still counted for metrics.
        self._check_writer(writer)
        self.flush_count[writer] += 1

    def read_latest(self, writer: int) -> tuple[np.ndarray, int]:
        """Most recent complete ``(payload, epoch)`` from ``writer``; epoch 0 means never written."""
        self._check_writer(writer)
        return self._slots[writer]

    def epoch(self, writer: int) -> int:
        return self.read_latest(writer)[1]


def put(w: Window, writer: int, payload) -> int:
    return w.put(writer, payload)


def flush(w: Window, writer: int) -> None:
    w.flush(writer)


def read_latest(w: Window, writer: int) -> tuple[np.ndarray, int]:
    return w.read_latest(writer)


class Mailbox:
    """FIFO queues for every ordered (sender, receiver) pair.

    ``sources[p]`` lists the subdomains ``p`` receives from; ``p`` may only
    send to subdomains that list it as a source.
    """

    def __init__(self, sources: dict[int, list[int]], timeout: float = 60.0, poll: float = 0.05):
        self.sources = {p: sorted(qs) for p, qs in sources.items()}
        self.timeout = timeout
        self.poll = poll
        self._queues = {(q, p): queue.SimpleQueue() for p, qs in self.sources.items() for q in qs}
        self._aborted = threading.Event()
        self.abort_reason = None

    def abort(self, reason: str = "aborted") -> None:
        self.abort_reason = reason
        self._aborted.set()

    @property
    def aborted(self) -> bool:
        return self._aborted.is_set()

    def send(self, sender: int, receiver: int, tag: int, payload) -> None:
        try:
            q = self._queues[(sender, receiver)]
        except KeyError:
            raise InvalidArgumentError(f"{receiver} does not receive from {sender}") from None
        q.put((tag, _frozen_copy(payload)))

    def recv(self, sender: int, receiver: int, tag: int) -> np.ndarray:
        q = self._queues[(sender, receiver)]
        deadline = time.monotonic() + self.timeout
        while True:
            if self._aborted.is_set():
                raise BrokenRendezvousError(
                    f"rendezvous broken while {receiver} waited for {sender}: {self.abort_reason}")
            try:
                got_tag, payload = q.get(timeout=self.poll)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise DeadlockSuspectedError(
                        f"{receiver} waited more than {self.timeout}s for iteration {tag} from {sender}"
                    ) from None
        if got_tag != tag:
            raise TagMismatchError(f"{receiver} expected iteration {tag} from {sender}, got {got_tag}")
        return payload


def exchange_sync(mb: Mailbox, me: int, iteration: int, outgoing: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Send ``outgoing[q]`` to each ``q`` and return every source's payload tagged ``iteration``."""
    for q, payload in outgoing.items():
        mb.send(me, q, iteration, payload)
    return {q: mb.recv(q, me, iteration) for q in mb.sources.get(me, [])}


class FlagBoard:
    """Per-subdomain detection flags with the same visibility contract as a window.

    Each subdomain publishes a convergence value (an int; 0 means "not
    converged", detectors may encode more in positive values) and a sticky
    global-termination flag. Every post bumps that entry's epoch.
    """

    def __init__(self, num_subdomains: int):
        self.num_subdomains = num_subdomains
        self._conv = [(0, 0)] * num_subdomains
        self._glob = [(False, 0)] * num_subdomains
        self._lock = threading.Lock()

    def post_converged(self, me: int, value: int) -> None:
        with self._lock:
            self._conv[me] = (int(value), self._conv[me][1] + 1)

    def post_global(self, me: int) -> None:
        with self._lock:
            if not self._glob[me][0]:
                self._glob[me] = (True, self._glob[me][1] + 1)

    def converged(self, q: int) -> int:
        return self._conv[q][0]

    def converged_epoch(self, q: int) -> tuple[int, int]:
        return self._conv[q]

    def is_global(self, q: int) -> bool:
        return self._glob[q][0]

    def all_global(self) -> bool:
        return all(flag for flag, _ in self._glob)


class RoundFlagBoard(FlagBoard):
    """Flag board with round (BSP) visibility: posts become visible at :meth:`commit`."""

    def __init__(self, num_subdomains: int):
        super().__init__(num_subdomains)
        self._pending_conv = {}
        self._pending_glob = set()

    def post_converged(self, me, value):
        with self._lock:
            self._pending_conv[me] = int(value)

    def post_global(self, me):
        with self._lock:
            self._pending_glob.add(me)

    def commit(self) -> None:
        with self._lock:
            for me, value in self._pending_conv.items():
                self._conv[me] = (value, self._conv[me][1] + 1)
            for me in self._pending_glob:
                if not self._glob[me][0]:
                    self._glob[me] = (True, self._glob[me][1] + 1)
            self._pending_conv.clear()
            self._pending_glob.clear()


class Transport(abc.ABC):
    """What the solver needs from a communication backend."""

    num_subdomains: int

    @abc.abstractmethod
    def put(self, target: int, writer: int, payload) -> int: ...

    @abc.abstractmethod
    def flush(self, target: int, writer: int) -> None: ...

    @abc.abstractmethod
    def read_latest(self, owner: int, writer: int) -> tuple[np.ndarray, int]: ...

    @abc.abstractmethod
    def exchange_sync(self, me: int, iteration: int, outgoing: dict) -> dict: ...

    @abc.abstractmethod
    def barrier(self, me: int) -> None:
        """Collective synchronisation; commits round-visible detection flags."""

    @abc.abstractmethod
    def abort(self, reason: str) -> None: ...

    @property
    @abc.abstractmethod
    def aborted(self) -> bool: ...


class InProcessTransport(Transport):
    """Shared-memory backend for worker threads of one process.

    ``recv_lengths[p][q]`` is the number of values ``p`` receives from ``q``;
    it sizes window slots and mailbox pairs alike.
    """

    def __init__(self, recv_lengths: dict[int, dict[int, int]], num_subdomains: int,
                 timeout: float = 60.0):
        self.num_subdomains = num_subdomains
        self.windows = [Window(p, recv_lengths.get(p, {})) for p in range(num_subdomains)]
        self.mailbox = Mailbox({p: list(recv_lengths.get(p, {})) for p in range(num_subdomains)},
                               timeout=timeout)
        self.flags = FlagBoard(num_subdomains)
        self.round_flags = RoundFlagBoard(num_subdomains)
        self.timeout = timeout
        self._barrier = threading.Barrier(num_subdomains, action=self.round_flags.commit)

    @classmethod
    def from_plans(cls, plans, timeout: float = 60.0):
        lengths = {pl.subdomain_id: {q: pl.payload_length(q) for q in pl.recv_from}
                   for pl in plans}
        return cls(lengths, len(plans), timeout=timeout)

    def put(self, target, writer, payload):
        return self.windows[target].put(writer, payload)

    def flush(self, target, writer):
        self.windows[target].flush(writer)

    def read_latest(self, owner, writer):
        return self.windows[owner].read_latest(writer)

    def exchange_sync(self, me, iteration, outgoing):
        return exchange_sync(self.mailbox, me, iteration, outgoing)

    def barrier(self, me):
        try:
            self._barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError:
            if self.mailbox.aborted:
                raise BrokenRendezvousError(f"barrier broken: {self.mailbox.abort_reason}") from None
            raise DeadlockSuspectedError(f"subdomain {me} timed out at the round barrier") from None

    def abort(self, reason):
        self.mailbox.abort(reason)
        self._barrier.abort()

    @property
    def aborted(self):
        return self.mailbox.aborted
