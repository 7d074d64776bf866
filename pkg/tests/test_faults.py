import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multirail.core import ProtocolKind, RailProfile, Segment
from multirail.engine import ContextConfig
from multirail.faults import (Health, HealthMonitor, ReadmitRejected, UnrecoverableFailure, monitor,
                              orphaned_range, pack_status, select_target, unpack_status)
from multirail.launch import RankError, run_ranks
from multirail.transport import FileStore, InMemoryNetwork, InMemoryTransport, SocketTransport, rendezvous
from failover import failover_trial
from oracles import direct_sum, rel_err

RAILS = [RailProfile(0, ProtocolKind.TCP, 10, 1e9), RailProfile(1, ProtocolKind.TCP, 10, 1e9)]


# --- target selection and bookkeeping ---------------------------------------------

class TestTarget:
    def test_largest_survivor(self):
        assert select_target({0: 100, 1: 300, 2: 200}, {1}, [0, 1, 2]) == 2

    def test_tie_lowest_id(self):
        assert select_target({0: 5, 1: 5, 2: 5}, {0}, [0, 1, 2]) == 1

    def test_no_survivor(self):
        with pytest.raises(UnrecoverableFailure):
            select_target({0: 1}, {0}, [0])

    @given(st.dictionaries(st.integers(0, 7), st.integers(0, 1 << 30), min_size=2), st.data())
    def test_always_argmax(self, lengths, data):
        ids = sorted(lengths)
        failed = set(data.draw(st.lists(st.sampled_from(ids), max_size=len(ids) - 1)))
        t = select_target(lengths, failed, ids)
        alive = [r for r in ids if r not in failed]
        assert t in alive
        assert lengths[t] == max(lengths[r] for r in alive)
        assert t == min(r for r in alive if lengths[r] == lengths[t])


def test_orphaned_range():
    chunks = [Segment(0, 100), Segment(100, 100), Segment(200, 40)]
    assert orphaned_range(chunks, 0) == Segment(0, 240)
    assert orphaned_range(chunks, 2) == Segment(200, 40)
    assert orphaned_range(chunks, 3) is None


@given(st.sets(st.integers(0, 31)), st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1000)), max_size=8))
def test_status_round_trip(failed, progress):
    assert unpack_status(pack_status(failed, progress)) == (failed, progress)


# --- health monitor -------------------------------------------------------------------

def socket_pair_conns(tmp_path, world=2):
    store = FileStore(tmp_path / "rdv")
    out = [None] * world

    def go(r):
        out[r] = rendezvous(store, r, world, RAILS, shaped=False, timeout=10)
    ts = [threading.Thread(target=go, args=(r,)) for r in range(world)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    return out


def wait_for(cond, timeout):
    end = time.perf_counter() + timeout
    while time.perf_counter() < end:
        if cond():
            return True
        time.sleep(0.002)
    return cond()


class TestMonitor:
    def test_abrupt_socket_close_fails_fast(self, tmp_path):
        a, b = socket_pair_conns(tmp_path)
        ma, mb = monitor(a), monitor(b)
        try:
            t0 = time.perf_counter()
            b.channel(1, 0).close()
            assert wait_for(lambda: ma.status(1) is Health.FAILED, 1.0)
            assert time.perf_counter() - t0 <= 0.150
            assert ma.status(0) is Health.HEALTHY
            # sticky: the rest of the rail was closed, only readmission clears it
            time.sleep(0.1)
            assert ma.status(1) is Health.FAILED and ma.rails[1].failure_epoch == 1
        finally:
            ma.stop(), mb.stop(), a.close(), b.close()

    def test_silent_peer_fails_by_missed_heartbeats(self):
        net = InMemoryNetwork(2, RAILS)
        ma = monitor(net.connection_set(0))
        mb = monitor(net.connection_set(1))
        try:
            time.sleep(0.15)
            mb.pause_heartbeats(10)
            t0 = time.perf_counter()
            assert wait_for(lambda: ma.status(0) is Health.FAILED, 1.0)
            took = time.perf_counter() - t0
            assert took <= 0.150 + 0.05   # three missed intervals, counted from the last beat heard
            kinds = [(t.rail_id, t.new) for t in ma.transitions]
            assert (0, Health.SUSPECT) in kinds and kinds.index((0, Health.SUSPECT)) < kinds.index((0, Health.FAILED))
        finally:
            ma.stop(), mb.stop()

    def test_short_stall_recovers(self):
        net = InMemoryNetwork(2, RAILS)
        ma, mb = monitor(net.connection_set(0)), monitor(net.connection_set(1))
        try:
            time.sleep(0.1)
            mb.pause_heartbeats(0.06)
            time.sleep(0.3)
            assert ma.failed() == set()
            assert all(s.status is Health.HEALTHY for s in ma.rails.values())
        finally:
            ma.stop(), mb.stop()

    def test_suspect_then_healthy_transitions(self):
        net = InMemoryNetwork(2, RAILS)
        conns = net.connection_set(0)
        m = HealthMonitor(conns, interval=0.05)
        now = time.monotonic()
        for ch in conns.ordered():
            ch.last_heard = now
        m.check(now + 0.11)
        assert m.status(0) is Health.SUSPECT
        for ch in conns.ordered():
            ch.last_heard = now + 0.12
        m.check(now + 0.13)
        assert m.status(0) is Health.HEALTHY and m.failed() == set()
        assert [t.new for t in m.transitions if t.rail_id == 0] == [Health.SUSPECT, Health.HEALTHY]

    def test_healthy_run_has_no_transitions(self):
        net = InMemoryNetwork(2, RAILS)
        ma, mb = monitor(net.connection_set(0)), monitor(net.connection_set(1))
        time.sleep(0.3)
        ma.stop(), mb.stop()
        assert ma.transitions == [] and mb.transitions == []

    def test_readmit_rules(self):
        net = InMemoryNetwork(2, RAILS)
        m = HealthMonitor(net.connection_set(0), interval=0.05, readmit_after=0.05)
        with pytest.raises(ReadmitRejected):
            m.readmit(7)
        m._set(1, Health.SUSPECT)
        with pytest.raises(ReadmitRejected):
            m.readmit(1)
        m.fail(0, "test")
        with pytest.raises(ReadmitRejected):
            m.readmit(0)          # no fresh channels yet
        fresh = net.reconnect_rail(0)
        m.restore(0, fresh[0])
        assert m.status(0) is Health.FAILED
        time.sleep(0.06)
        for ch in fresh[0].values():
            ch.last_heard = time.monotonic()
        m.readmit(0)
        assert m.status(0) is Health.HEALTHY


# --- handoff inside live operations --------------------------------------------------

def inputs_for(world, elems, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(elems).astype(np.float32) for _ in range(world)]


class TestHandoff:
    def test_kill_rail_mid_operation(self):
        world, elems = 3, 1 << 16
        xs = inputs_for(world, elems)
        want = direct_sum(xs)

        def body(ctx):
            if ctx.rank == 1:
                ch = ctx.conns.channel(1, 2)
                ch.inject_close(ch.frames_sent + 3)
            x = xs[ctx.rank].copy()
            ctx.allreduce(x)
            return x, ctx.tickets, ctx.history[-1]

        out = run_ranks(body, world, RAILS, InMemoryTransport(), ContextConfig(measure_sync=False),
                        scheduler="fixed")
        for x, tickets, rec in out:
            assert rel_err(x, want) <= 1e-5
            assert len(tickets) == 1
            t = tickets[0]
            assert t.source_rail == 1 and t.target_rail == 0
            assert t.resume_delay is not None and t.resume_delay < 0.2
            assert Segment(0, elems * 2).end <= t.segment.offset + t.segment.length

    def test_failure_between_operations(self):
        world, elems = 2, 1 << 14
        xs = inputs_for(world, elems, 1)
        want = direct_sum(xs)
        ready = threading.Barrier(world)

        def body(ctx):
            x = xs[ctx.rank].copy()
            ctx.allreduce(x)
            if ctx.rank == 0:
                ctx.inject_failure(1)
            assert wait_for(lambda: ctx.monitor.status(1) is Health.FAILED, 1.0)
            ready.wait()
            y = xs[ctx.rank].copy()
            ctx.allreduce(y)          # learns of the failure in its closing status exchange
            z = xs[ctx.rank].copy()
            ctx.allreduce(z)
            return ctx.history, ctx.tickets, x, y, z

        out = run_ranks(body, world, RAILS, InMemoryTransport(), ContextConfig(measure_sync=False),
                        scheduler="fixed")
        half = Segment(elems * 2, elems * 2)
        for hist, tickets, x, y, z in out:
            # the idle rail's whole share moves over at once, nothing was partially reduced
            assert [(t.source_rail, t.target_rail, t.segment) for t in tickets] == [(1, 0, half)]
            assert hist[1].tickets == tickets
            assert [r for r, _ in hist[2].allocation] == [0] and hist[2].tickets == []
            for v in (x, y, z):
                assert rel_err(v, want) <= 1e-5

    def test_no_survivor_is_explicit_error(self):
        def body(ctx):
            if ctx.rank == 0:
                ctx.inject_failure(0)
            wait_for(lambda: ctx.monitor.status(0) is Health.FAILED, 1.0)
            ctx.allreduce(np.ones(1024, np.float32))

        with pytest.raises(RankError) as info:
            run_ranks(body, 2, RAILS[:1], InMemoryTransport(), ContextConfig(measure_sync=False), timeout=30)
        assert any(isinstance(e, UnrecoverableFailure) for e in info.value.errors.values())

    def test_restore_and_readmit_returns_split(self):
        world, elems = 2, 1 << 14
        xs = inputs_for(world, elems, 2)
        want = direct_sum(xs)
        transport = InMemoryTransport()
        cfg = ContextConfig(measure_sync=False, readmit_after=0.1)
        fresh = {}
        gate = threading.Barrier(world)

        def body(ctx):
            x = xs[ctx.rank].copy()
            ctx.allreduce(x)
            before = [r for r, _ in ctx.history[-1].allocation]
            if ctx.rank == 0:
                ctx.inject_failure(1)
            wait_for(lambda: ctx.monitor.status(1) is Health.FAILED, 1.0)
            gate.wait()
            ctx.allreduce(xs[ctx.rank].copy())
            ctx.allreduce(xs[ctx.rank].copy())
            during = [r for r, _ in ctx.history[-1].allocation]
            if ctx.rank == 0:
                fresh.update(transport.network.reconnect_rail(1))
            gate.wait()
            ctx.restore_rail(1, fresh[ctx.rank])
            gate.wait()
            # restored channels alone do not bring the rail back
            ctx.allreduce(xs[ctx.rank].copy())
            still = [r for r, _ in ctx.history[-1].allocation]
            time.sleep(0.2)
            ctx.readmit(1)
            y = xs[ctx.rank].copy()
            ctx.allreduce(y)
            after = ctx.history[-1].allocation
            return before, during, still, after, y

        out = run_ranks(body, world, RAILS, transport, cfg, scheduler="fixed")
        for before, during, still, after, y in out:
            assert before == [0, 1] and during == [0] and still == [0]
            assert after == [(0, Segment(0, elems * 2)), (1, Segment(elems * 2, elems * 2))]
            assert rel_err(y, want) <= 1e-5


@given(st.integers(0, 2**31))
@settings(max_examples=40)
def test_exactly_once_under_random_failure(seed):
    t = failover_trial(seed, heartbeat=None)
    assert t.ok, t.err
    assert t.tickets >= 1 and all(d < 0.2 for d in t.delays)


def test_shaped_failover_smoke(tmp_path):
    rails = [RailProfile(i, ProtocolKind.TCP, 50, 100e6, max_frame_payload=16 * 1024) for i in range(2)]
    for s in range(10):
        t = failover_trial(s, SocketTransport(FileStore(tmp_path / f"s{s}")), rails=rails, elems=1 << 15)
        assert t.ok and t.tickets >= 1 and max(t.delays) < 0.2
