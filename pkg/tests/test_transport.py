import threading
import time

import numpy as np
import pytest

from ras_testbed.errors import (
    BrokenRendezvousError,
    DeadlockSuspectedError,
    InvalidArgumentError,
    TagMismatchError,
)
from ras_testbed.transport import (
    FlagBoard,
    InProcessTransport,
    Mailbox,
    RoundFlagBoard,
    Window,
    exchange_sync,
    flush,
    put,
    read_latest,
)


def run_threads(fns, timeout=30):
    errors = []

    def wrap(fn):
        try:
            fn()
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=wrap, args=(f,), daemon=True) for f in fns]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        assert not t.is_alive(), "worker hung"
    if errors:
        raise errors[0]


# --- windows -------------------------------------------------------------

def test_put_read_examples():
    w = Window(0, {1: 2})
    payload, epoch = read_latest(w, 1)
    assert epoch == 0 and payload.tolist() == [0, 0]
    assert put(w, 1, [1, 2]) == 1
    payload, epoch = read_latest(w, 1)
    assert (payload.tolist(), epoch) == ([1, 2], 1)
    put(w, 1, [3, 4])
    assert read_latest(w, 1)[0].tolist() == [3, 4] and w.epoch(1) == 2
    assert read_latest(w, 1) is read_latest(w, 1)


def test_put_validation():
    w = Window(0, {1: 2})
    with pytest.raises(InvalidArgumentError):
        put(w, 1, [1, 2, 3])
    with pytest.raises(InvalidArgumentError):
        put(w, 2, [1, 2])
    with pytest.raises(InvalidArgumentError):
        read_latest(w, 5)


def test_flush_semantics():
    w = Window(0, {1: 1})
    flush(w, 1)
    assert w.epoch(1) == 0 and w.flush_count[1] == 1
    put(w, 1, [7.0])
    flush(w, 1)
    assert read_latest(w, 1) == (pytest.approx([7.0]), 1)


def test_published_payload_is_a_snapshot():
    w = Window(0, {1: 3})
    buf = np.array([1.0, 2.0, 3.0])
    put(w, 1, buf)
    buf[:] = -1
    got, _ = read_latest(w, 1)
    assert got.tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        got[0] = 9


def test_no_torn_reads_and_monotone_epochs():
    n_puts, length = 100_000, 32
    w = Window(0, {1: length})
    stop = threading.Event()
    seen = {"reads": 0, "torn": 0, "regress": 0, "mid": 0}

    def writer():
        vec = np.empty(length)
        for k in range(1, n_puts + 1):
            vec.fill(k)
            put(w, 1, vec)
            flush(w, 1)
        stop.set()

    def reader():
        last = 0
        while True:
            done = stop.is_set()
            payload, epoch = read_latest(w, 1)
            seen["reads"] += 1
            seen["mid"] += 0 < epoch < n_puts
            if epoch and not (np.all(payload == payload[0]) and payload[0] == epoch):
                seen["torn"] += 1
            if epoch < last:
                seen["regress"] += 1
            last = epoch
            if done:
                break

    run_threads([writer, reader], timeout=60)
    assert seen["torn"] == 0 and seen["regress"] == 0
    assert read_latest(w, 1)[1] == n_puts
    assert seen["mid"] > 0, "reader never overlapped the writer"


def test_concurrent_writers_keep_separate_slots():
    n = 5_000
    w = Window(0, {1: 4, 2: 4})

    def writer(me):
        def go():
            for k in range(1, n + 1):
                put(w, me, np.full(4, me * 1e6 + k))
                flush(w, me)
        return go

    run_threads([writer(1), writer(2)])
    for me in (1, 2):
        payload, epoch = read_latest(w, me)
        assert epoch == n and np.all(payload == me * 1e6 + n)
        assert w.flush_count[me] == n


def test_one_sided_operations_do_not_wait():
    # a reader that never reads and a writer that never writes must not slow anyone down
    w = Window(0, {1: 8})
    t0 = time.perf_counter()
    for _ in range(2_000):
        put(w, 1, np.ones(8))
        read_latest(w, 1)
    assert time.perf_counter() - t0 < 5.0


# --- two-sided -----------------------------------------------------------

def path_mailbox(P, timeout=10.0):
    return Mailbox({p: [q for q in (p - 1, p + 1) if 0 <= q < P] for p in range(P)}, timeout=timeout)


def test_exchange_two_subdomains():
    mb = Mailbox({0: [1], 1: [0]})
    out = {}

    def worker(me):
        return lambda: out.__setitem__(me, exchange_sync(mb, me, 1, {1 - me: [float(me)]}))

    run_threads([worker(0), worker(1)])
    assert out[0][1].tolist() == [1.0] and out[1][0].tolist() == [0.0]


def test_exchange_without_neighbours():
    assert exchange_sync(Mailbox({0: []}), 0, 1, {}) == {}


def test_rendezvous_checksums_on_path():
    P, iters = 4, 100
    mb = path_mailbox(P)
    sums = {p: [] for p in range(P)}

    def worker(me):
        def go():
            nbrs = mb.sources[me]
            for k in range(1, iters + 1):
                got = exchange_sync(mb, me, k, {q: np.array([k, me, q], float) for q in nbrs})
                assert sorted(got) == nbrs
                for q, payload in got.items():
                    assert payload.tolist() == [k, q, me]
                sums[me].append(sum(payload[0] for payload in got.values()))
        return go

    run_threads([worker(p) for p in range(P)])
    for p in range(P):
        deg = len(mb.sources[p])
        assert sums[p] == [k * deg for k in range(1, iters + 1)]


def test_tag_mismatch_detected():
    mb = Mailbox({0: [1], 1: [0]})
    mb.send(1, 0, 3, [1.0])
    with pytest.raises(TagMismatchError):
        mb.recv(1, 0, 2)


def test_send_to_non_neighbour():
    with pytest.raises(InvalidArgumentError):
        Mailbox({0: [1], 1: [0], 2: []}).send(2, 0, 1, [1.0])


def test_timeout_reports_deadlock():
    mb = Mailbox({0: [1], 1: [0]}, timeout=0.2, poll=0.01)
    with pytest.raises(DeadlockSuspectedError):
        mb.recv(1, 0, 1)


def test_abort_breaks_rendezvous():
    mb = Mailbox({0: [1], 1: [0]}, timeout=10.0, poll=0.01)
    threading.Timer(0.1, mb.abort, args=("peer died",)).start()
    with pytest.raises(BrokenRendezvousError, match="peer died"):
        mb.recv(1, 0, 1)


# --- flags and the transport object -------------------------------------

def test_flag_board_epochs_and_sticky_global():
    fb = FlagBoard(2)
    fb.post_converged(0, 1)
    fb.post_converged(0, 0)
    assert fb.converged_epoch(0) == (0, 2)
    assert not fb.all_global()
    fb.post_global(0)
    fb.post_global(0)
    fb.post_global(1)
    assert fb.is_global(0) and fb.all_global()


def test_round_flag_board_commits():
    fb = RoundFlagBoard(2)
    fb.post_converged(1, 3)
    fb.post_global(1)
    assert fb.converged(1) == 0 and not fb.is_global(1)
    fb.commit()
    assert fb.converged(1) == 3 and fb.is_global(1)
    assert fb.converged_epoch(0) == (0, 0)


def test_transport_barrier_commits_round_flags():
    t = InProcessTransport({0: {1: 1}, 1: {0: 1}}, 2, timeout=10.0)
    seen = {}

    def worker(me):
        def go():
            t.round_flags.post_converged(me, 1)
            t.barrier(me)
            seen[me] = t.round_flags.converged(1 - me)
        return go

    run_threads([worker(0), worker(1)])
    assert seen == {0: 1, 1: 1}


def test_transport_abort_and_timeout():
    t = InProcessTransport({0: {}, 1: {}}, 2, timeout=10.0)
    threading.Timer(0.1, t.abort, args=("stop",)).start()
    with pytest.raises(BrokenRendezvousError):
        t.barrier(0)
    assert t.aborted
    t = InProcessTransport({0: {}, 1: {}}, 2, timeout=0.2)
    with pytest.raises(DeadlockSuspectedError):
        t.barrier(0)


def test_transport_windows_sized_from_lengths():
    t = InProcessTransport({0: {1: 3}, 1: {0: 2}}, 2)
    assert t.put(0, 1, [1, 2, 3]) == 1
    t.flush(0, 1)
    assert t.read_latest(0, 1)[0].tolist() == [1, 2, 3]
    with pytest.raises(InvalidArgumentError):
        t.put(1, 0, [1, 2, 3])
