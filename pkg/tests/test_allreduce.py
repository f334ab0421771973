"""Mesh allreduce tests: partitioning, the wire format, bit-exact
agreement with the serial mean over in-process and TCP transports, the
2N(N-1) message count, and robustness to workers racing ahead into the
next round.
"""

import threading
import time

import numpy as np
import pytest

from deeplstm.allreduce import (GATHER, SCATTER, AggregationError,
                                InProcessMesh, PieceMessage, SocketTransport,
                                decode_piece, encode_piece, mesh_allreduce,
                                partition)
from deeplstm.sync import model_average


# -------------------------------------------------------------- partition

def test_partition_by_hand():
    part = partition(10, 3)
    assert part.ranges == ((0, 4), (4, 7), (7, 10))
    assert part.length == 10


def test_partition_more_workers_than_elements():
    part = partition(3, 4)
    assert part.ranges == ((0, 1), (1, 2), (2, 3), (3, 3))


def test_partition_exact_split_and_piece():
    part = partition(8, 4)
    assert part.ranges == ((0, 2), (2, 4), (4, 6), (6, 8))
    v = np.arange(8.0)
    assert np.array_equal(part.piece(v, 2), [4.0, 5.0])


def test_partition_covers_everything_disjointly():
    for length in (0, 1, 7, 100, 101):
        for n in (1, 2, 3, 8):
            part = partition(length, n)
            covered = [i for lo, hi in part.ranges for i in range(lo, hi)]
            assert covered == list(range(length))
            sizes = [hi - lo for lo, hi in part.ranges]
            assert max(sizes) - min(sizes) <= 1


def test_partition_validation():
    with pytest.raises(ValueError):
        partition(10, 0)
    with pytest.raises(ValueError):
        partition(-1, 2)


# ------------------------------------------------------------- wire format

def test_piece_round_trip_bit_exact():
    payload = np.random.default_rng(0).standard_normal(13)
    for phase in (SCATTER, GATHER):
        msg = PieceMessage(3, 1, payload, phase)
        back = decode_piece(encode_piece(msg))
        assert back.sender == 3
        assert back.slot == 1
        assert back.phase == phase
        assert np.array_equal(back.payload, payload)


def test_piece_empty_payload():
    back = decode_piece(encode_piece(PieceMessage(0, 2, np.zeros(0), SCATTER)))
    assert back.payload.size == 0


def test_decode_rejects_malformed_frames():
    good = encode_piece(PieceMessage(1, 0, np.arange(3.0), GATHER))
    with pytest.raises(AggregationError):
        decode_piece(good[:10])                         # short header
    with pytest.raises(AggregationError):
        decode_piece(b"XXXX" + good[4:])                # bad magic
    with pytest.raises(AggregationError):
        decode_piece(good[:-8])                         # payload shorter than header says
    bad_phase = bytearray(good)
    bad_phase[4] = 9
    with pytest.raises(AggregationError):
        decode_piece(bytes(bad_phase))


def test_piece_message_rejects_unknown_phase():
    with pytest.raises(ValueError):
        PieceMessage(0, 0, np.zeros(1), "broadcast")


# -------------------------------------------------------- in-process mesh

def _threaded_allreduce(mesh, vectors, part, rounds=1, jitter=None):
    n = len(vectors)
    results = [[None] * rounds for _ in range(n)]
    errors = []

    def work(wid):
        try:
            ep = mesh.endpoint(wid)
            for r in range(rounds):
                if jitter is not None:
                    time.sleep(jitter(wid, r))
                results[wid][r] = mesh_allreduce(vectors[wid] + r, wid, part, ep)
        except Exception as exc:  # pragma: no cover - surfaced via assert
            errors.append((wid, exc))

    threads = [threading.Thread(target=work, args=(w,)) for w in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    assert not errors, errors
    return results


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_allreduce_bit_equals_serial_mean(n):
    rng = np.random.default_rng(n)
    length = 37  # deliberately not divisible by the worker counts
    vectors = [rng.standard_normal(length) for _ in range(n)]
    mesh = InProcessMesh(n, timeout=10.0)
    part = partition(length, n)
    results = _threaded_allreduce(mesh, vectors, part)
    expected = model_average(vectors)
    for wid in range(n):
        assert np.array_equal(results[wid][0], expected), f"worker {wid}"
    assert mesh.messages_sent == 2 * n * (n - 1)


def test_allreduce_message_count_scales_with_rounds():
    n, rounds = 4, 3
    rng = np.random.default_rng(17)
    vectors = [rng.standard_normal(10) for _ in range(n)]
    mesh = InProcessMesh(n, timeout=10.0)
    results = _threaded_allreduce(mesh, vectors, partition(10, n),
                                  rounds=rounds)
    for r in range(rounds):
        expected = model_average([v + r for v in vectors])
        for wid in range(n):
            assert np.array_equal(results[wid][r], expected)
    assert mesh.messages_sent == 2 * n * (n - 1) * rounds


def test_allreduce_survives_uneven_worker_speeds():
    # a fast worker can start round r+1 while a slow one is still gathering
    # round r; its early scatters must be held for the next call
    n, rounds = 4, 5
    rng = np.random.default_rng(23)
    vectors = [rng.standard_normal(9) for _ in range(n)]
    mesh = InProcessMesh(n, timeout=10.0)

    def jitter(wid, r):
        return 0.003 * ((wid + r) % n)

    results = _threaded_allreduce(mesh, vectors, partition(9, n),
                                  rounds=rounds, jitter=jitter)
    for r in range(rounds):
        expected = model_average([v + r for v in vectors])
        for wid in range(n):
            assert np.array_equal(results[wid][r], expected)


def test_allreduce_single_worker_copies():
    v = np.arange(5.0)
    mesh = InProcessMesh(1)
    out = mesh_allreduce(v, 0, partition(5, 1), mesh.endpoint(0))
    assert np.array_equal(out, v)
    assert out is not v
    assert mesh.messages_sent == 0


def test_allreduce_times_out_without_peers():
    mesh = InProcessMesh(2, timeout=0.2)
    with pytest.raises(AggregationError):
        mesh_allreduce(np.zeros(4), 0, partition(4, 2), mesh.endpoint(0))


def test_allreduce_length_mismatch():
    mesh = InProcessMesh(2)
    with pytest.raises(ValueError):
        mesh_allreduce(np.zeros(5), 0, partition(4, 2), mesh.endpoint(0))
    with pytest.raises(ValueError):
        mesh_allreduce(np.zeros(4), 2, partition(4, 2), mesh.endpoint(0))


# --------------------------------------------------------------- sockets

def _socket_allreduce(n, base_port, vectors, part, rounds=1):
    results = [[None] * rounds for _ in range(n)]
    errors = []
    barrier = threading.Barrier(n)

    def work(wid):
        ep = None
        try:
            ep = SocketTransport(wid, n, base_port, timeout=15.0)
            for r in range(rounds):
                results[wid][r] = mesh_allreduce(vectors[wid] + r, wid, part, ep)
            barrier.wait(timeout=15.0)  # keep sockets open until all finish
        except Exception as exc:  # pragma: no cover
            errors.append((wid, exc))
        finally:
            if ep is not None:
                ep.close()

    threads = [threading.Thread(target=work, args=(w,)) for w in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    assert not errors, errors
    return results


def test_socket_transport_matches_serial_mean():
    n = 3
    rng = np.random.default_rng(5)
    vectors = [rng.standard_normal(26) for _ in range(n)]
    results = _socket_allreduce(n, 29810, vectors, partition(26, n), rounds=2)
    for r in range(2):
        expected = model_average([v + r for v in vectors])
        for wid in range(n):
            assert np.array_equal(results[wid][r], expected)
