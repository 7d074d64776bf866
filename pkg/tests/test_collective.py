import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multirail.collective import (Algorithm, OpHandle, OperationAborted, UnboundBuffer, chunk_bounds,
                                  default_chunk_size, reference_allreduce, ring_allreduce, ring_chunked_allreduce,
                                  split_oversized)
from multirail.core import ReduceOp, RailProfile, Segment, covers_exactly, ring_volume
from multirail.transport import InMemoryNetwork, ProtocolError
from oracles import direct_sum, rel_err, ring_bytes

MB = 1 << 20


def run_ring(inputs, chunk_size=None, chunked=False, seqs=None, net=None, mfp=64 * 1024, segment=None):
    """One ring over in-memory channels; returns (outputs, per-rank payload bytes, errors)."""
    n = len(inputs)
    net = net or InMemoryNetwork(n, [RailProfile(0)])
    bufs = [np.array(x, dtype=np.float32) for x in inputs]
    errors = {}

    def rank(r):
        seg = segment or Segment(0, bufs[r].nbytes)
        h = OpHandle((seqs or [1] * n)[r], seg, 0, Algorithm.RING_CHUNKED if chunked else Algorithm.RING)
        buf = UnboundBuffer(bufs[r])
        chans = net.connection_set(r).rail(0)
        try:
            if chunked:
                ring_chunked_allreduce(h, buf, r, n, chans, chunk_size, max_frame_payload=mfp, recv_timeout=10)
            else:
                ring_allreduce(h, buf, r, n, chans, max_frame_payload=mfp, recv_timeout=10)
        except Exception as exc:
            errors[r] = exc
            for ch in chans.values():
                ch.close()

    ts = [threading.Thread(target=rank, args=(r,)) for r in range(n)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(60)
    sent = [net.connection_set(r).counters(0)["payload_bytes_sent"] for r in range(n)]
    return bufs, sent, errors


class TestRing:
    def test_two_ranks(self):
        out, _, err = run_ring([[1.0, 2.0], [1.0, 2.0]])
        assert not err
        for o in out:
            assert o.tolist() == [2.0, 4.0]

    def test_constant_rank_vectors(self):
        out, _, err = run_ring([np.full(1000, r, np.float32) for r in range(4)])
        assert not err and all((o == 6).all() for o in out)

    def test_random_megabyte_against_direct_sum(self):
        rng = np.random.default_rng(42)
        inputs = [rng.standard_normal(MB // 4).astype(np.float32) for _ in range(4)]
        want = direct_sum(inputs)
        out, _, err = run_ring(inputs)
        assert not err
        for o in out:
            assert rel_err(o, want) <= 1e-5

    @pytest.mark.parametrize("n", [2, 3, 4, 8])
    @pytest.mark.parametrize("size", [64 * 1024, 1 * MB + 12])
    def test_volume_accounting(self, n, size):
        rng = np.random.default_rng(n)
        inputs = [rng.standard_normal(size // 4).astype(np.float32) for _ in range(n)]
        _, sent, err = run_ring(inputs)
        assert not err
        for s in sent:
            assert abs(s - ring_volume(n, size)) <= 4 * 2 * (n - 1)   # one element per step of rounding

    def test_outputs_identical_on_every_rank_and_run(self):
        rng = np.random.default_rng(7)
        inputs = [rng.standard_normal(50_001).astype(np.float32) for _ in range(5)]
        a, _, _ = run_ring(inputs)
        b, _, _ = run_ring(inputs)
        for x in a + b:
            assert np.array_equal(x, a[0])

    def test_uneven_blocks(self):
        # 7 elements over 3 ranks: last block absorbs the remainder
        inputs = [np.arange(7, dtype=np.float32) * (r + 1) for r in range(3)]
        out, _, err = run_ring(inputs)
        assert not err
        assert out[0].tolist() == (np.arange(7) * 6).tolist()

    def test_only_its_segment_is_touched(self):
        inputs = [np.ones(100, np.float32) for _ in range(3)]
        out, _, err = run_ring(inputs, segment=Segment(40, 80))
        assert not err
        assert (out[0][10:30] == 3).all() and (out[0][:10] == 1).all() and (out[0][30:] == 1).all()

    def test_channel_down_aborts_with_progress(self):
        net = InMemoryNetwork(3, [RailProfile(0)])
        net.inject_close(0, 0, 1, at_frame=5)
        inputs = [np.ones(64 * 1024, np.float32) for _ in range(3)]
        _, _, err = run_ring(inputs, chunked=True, chunk_size=32 * 1024, net=net)
        assert err and all(isinstance(e, OperationAborted) for e in err.values())
        e = err[0]
        assert e.segment == Segment(0, 256 * 1024) and 0 <= e.completed_chunks < len(e.chunks)
        assert (e.pristine == 1).all()

    def test_mismatched_sequence_is_protocol_error(self):
        _, _, err = run_ring([np.ones(16, np.float32)] * 2, seqs=[1, 2])
        assert any(isinstance(getattr(e, "cause", e), ProtocolError) for e in err.values())


class TestChunked:
    def test_big_chunk_is_plain_ring(self):
        rng = np.random.default_rng(3)
        inputs = [rng.standard_normal(10_000).astype(np.float32) for _ in range(4)]
        plain, sent_p, _ = run_ring(inputs)
        net = InMemoryNetwork(4, [RailProfile(0)])
        chunked, sent_c, _ = run_ring(inputs, chunked=True, chunk_size=1 << 30, net=net)
        assert all(np.array_equal(a, b) for a, b in zip(plain, chunked))
        assert sent_p == sent_c
        frames = [net.connection_set(r).counters(0)["frames_sent"] for r in range(4)]
        assert frames == [2 * 3] * 4

    @given(st.integers(2, 6), st.integers(1, 20_000), st.integers(1, 8000))
    @settings(max_examples=25)
    def test_same_result_as_ring(self, n, elems, chunk_elems):
        rng = np.random.default_rng(elems)
        inputs = [rng.standard_normal(elems).astype(np.float32) for _ in range(n)]
        plain, _, e1 = run_ring(inputs)
        chunked, sent, e2 = run_ring(inputs, chunked=True, chunk_size=4 * chunk_elems)
        assert not e1 and not e2
        assert np.max(np.abs(plain[0].astype(np.float64) - chunked[0])) <= 1e-5 * max(1.0, np.abs(plain[0]).max())
        chunks = len(chunk_bounds(Segment(0, 4 * elems), 4 * chunk_elems))
        for s in sent:
            assert abs(s - ring_bytes(n, 4 * elems)) <= 4 * 2 * (n - 1) * chunks

    def test_default_chunk(self):
        assert default_chunk_size(64 * MB, 4) == 8 * MB
        assert default_chunk_size(100_000, 4) == 64 * 1024

    def test_chunk_bounds_cover(self):
        seg = Segment(400, 1_000_004)
        cs = chunk_bounds(seg, 65536)
        assert cs[0].offset == 400 and cs[-1].end == seg.end
        assert sum(c.length for c in cs) == seg.length
        assert all(c.length % 4 == 0 for c in cs)


class TestSplitOversized:
    def test_under_limit_is_one_packet(self):
        assert split_oversized(512 * MB) == [Segment(0, 512 * MB)]
        assert split_oversized(1 << 30) == [Segment(0, 1 << 30)]
        assert split_oversized(1) == [Segment(0, 1)]

    def test_one_and_a_half_gigabytes(self):
        segs = split_oversized(3 * (1 << 29))
        assert len(segs) == 6 and all(s.length == 256 * MB for s in segs)

    @given(st.integers(1, 1 << 36))
    def test_cover(self, payload):
        segs = split_oversized(payload)
        assert covers_exactly(segs, payload)
        if payload > 1 << 30:
            assert len(segs) == -(-payload // (256 * MB)) and all(s.length <= 256 * MB for s in segs)
        else:
            assert len(segs) == 1


def test_unbound_buffer_completion_and_bounds():
    buf = UnboundBuffer(np.zeros(16, np.float32))
    buf.bind(0, Segment(0, 32))
    buf.bind(1, Segment(32, 32))
    assert not buf.released
    buf.complete(0)
    buf.complete(1)
    assert buf.released and buf.completed == 2
    with pytest.raises(ValueError):
        buf.bind(2, Segment(60, 8))


def test_reference_allreduce():
    assert reference_allreduce([[1, 2], [3, 4]]).tolist() == [4.0, 6.0]
