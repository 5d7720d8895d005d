import itertools

import pytest
from hypothesis import given, settings, strategies as st

from segwatch.events import EventQueue
from segwatch.mesh import (MeshChannel, MeshEnvelope, MeshTopology, NoRoute, ReliabilityConfig,
                           TopologyEvent, UnknownElement, apply_topology_event, compute_routes,
                           mesh_send, reroutes, route_path)
from segwatch.sim.prng import SplitMix64


class Scripted:
    """RNG stand-in returning a fixed sequence of uniforms."""

    def __init__(self, draws):
        self.draws = list(draws)

    def next_float(self):
        return self.draws.pop(0)


class Never:
    def next_float(self):
        return 0.99999


def topo(edges, nodes=None, latency=1000, loss=0.0):
    t = MeshTopology()
    for n in sorted(nodes or {x for e in edges for x in e}):
        t.add_node(n, "relay")
    for a, b in edges:
        t.add_link(a, b, latency, loss)
    return t


def test_line():
    t = topo([("A", "B"), ("B", "C"), ("C", "D")])
    r = compute_routes(t)
    assert r["A", "D"] == "B" and len(route_path(r, "A", "D")) - 1 == 3
    t2, r2 = apply_topology_event(TopologyEvent("link_down", ("B", "C")), t)
    assert ("A", "D") not in r2
    with pytest.raises(NoRoute):
        route_path(r2, "A", "D")


def test_diamond_tie_break_and_failover():
    t = topo([("A", "C"), ("A", "B"), ("B", "D"), ("C", "D")])
    r = compute_routes(t)
    assert r["A", "D"] == "B"
    t2, r2 = apply_topology_event(TopologyEvent("node_down", ("B",)), t)
    assert route_path(r2, "A", "D") == ["A", "C", "D"]


def test_fail_and_restore_is_identity():
    t = topo([("A", "B"), ("B", "C"), ("A", "C")])
    t2, _ = apply_topology_event(TopologyEvent("link_down", ("A", "C")), t)
    t3, r3 = apply_topology_event(TopologyEvent("link_up", ("A", "C")), t2)
    assert r3 == compute_routes(t)


def test_leaf_failure_is_local():
    t = topo([("hub", "a"), ("hub", "b"), ("hub", "c")])
    before = compute_routes(t)
    _, after = apply_topology_event(TopologyEvent("node_down", ("c",)), t)
    assert after == {k: v for k, v in before.items() if "c" not in k}


def test_unknown_element():
    t = topo([("A", "B")])
    with pytest.raises(UnknownElement):
        apply_topology_event(TopologyEvent("node_down", ("Z",)), t)
    with pytest.raises(UnknownElement):
        apply_topology_event(TopologyEvent("link_down", ("A", "Z")), t)


def test_topology_validation():
    t = topo([("A", "B")])
    with pytest.raises(ValueError):
        t.add_link("A", "A", 1)
    with pytest.raises(ValueError):
        t.add_link("A", "B", 1, 1.0)
    with pytest.raises(UnknownElement):
        t.add_link("A", "Q", 1)


def brute_min_hops(nodes, edges, s, d):
    """Shortest simple path by enumerating permutations of intermediate nodes."""
    adj = {frozenset(e) for e in edges}
    others = [n for n in nodes if n not in (s, d)]
    for k in range(len(others) + 1):
        for mid in itertools.permutations(others, k):
            p = (s, *mid, d)
            if all(frozenset(h) in adj for h in zip(p, p[1:])):
                return k + 1
    return None


@st.composite
def graphs(draw, max_nodes=8):
    n = draw(st.integers(2, max_nodes))
    nodes = [f"n{i}" for i in range(n)]
    pairs = list(itertools.combinations(nodes, 2))
    edges = [p for p in pairs if draw(st.booleans())]
    return nodes, edges


@settings(max_examples=150, deadline=None)
@given(graphs())
def test_routes_match_brute_force(g):
    nodes, edges = g
    t = topo(edges, nodes)
    r = compute_routes(t)
    for s, d in itertools.permutations(nodes, 2):
        want = brute_min_hops(nodes, edges, s, d)
        if want is None:
            assert (s, d) not in r
            continue
        path = route_path(r, s, d)
        assert len(path) - 1 == want
        # next hop is the lowest-id neighbour lying on some shortest path
        best = min(n for n in t.neighbors(s)
                   if n == d or brute_min_hops(nodes, edges, n, d) == want - 1)
        assert r[s, d] == best


def env(kind="flow_batch", seq=0):
    return MeshEnvelope("A", "C", seq, kind, b"x", 100)


def test_send_latency_additive():
    t = topo([("A", "B")], latency=1000)
    t.add_node("C", "aggregator")
    t.add_link("B", "C", 2000)
    (ev,) = mesh_send(env(), t, compute_routes(t), Never())
    assert (ev.kind, ev.ts_us, ev.path) == ("deliver", 3100, ("A", "B", "C"))


def test_forced_drop_at_first_hop():
    t = topo([("A", "B"), ("B", "C")], loss=0.999)
    rng = Scripted([0.5])
    (ev,) = mesh_send(env(), t, compute_routes(t), rng)
    assert (ev.kind, ev.node) == ("drop", "B") and rng.draws == []


def test_replay_is_reproducible():
    t = topo([("A", "B"), ("B", "C")], loss=0.5)
    r = compute_routes(t)

    def trace(seed):
        rng = SplitMix64(seed)
        return [mesh_send(env(seq=i), t, r, rng)[0] for i in range(50)]

    got = trace(9)
    assert got == trace(9)
    # replay oracle: same stream, one draw per hop until the first drop
    rng = SplitMix64(9)
    for ev in got:
        if rng.next_float() < 0.5:
            assert (ev.kind, ev.node, ev.ts_us) == ("drop", "B", 1100)
        elif rng.next_float() < 0.5:
            assert (ev.kind, ev.node, ev.ts_us) == ("drop", "C", 2100)
        else:
            assert (ev.kind, ev.node, ev.ts_us) == ("deliver", "C", 2100)


def channel(draws, edges=(("A", "B"), ("B", "C")), loss=0.5, **kw):
    t = topo(list(edges), loss=loss)
    q = EventQueue()
    got, failed = [], []
    ch = MeshChannel(t, ReliabilityConfig(**kw), Scripted(draws), q,
                     on_deliver=got.append, on_failure=lambda e, n: failed.append((e, n)))
    return ch, q, got, failed


def test_happy_path():
    ch, q, got, failed = channel([], loss=0.0)
    ch.rng = Never()
    ch.send("A", "C", "flow_batch", b"p")
    q.run()
    assert len(got) == 1 and not failed and ch.pending() == 0
    assert ch.transmissions == 2  # data + ack
    assert [e["event"] for e in ch.log] == ["tx", "deliver", "tx", "ack"]


def test_retry_after_drop_delivers_once():
    # attempt 1 dropped on hop 1; attempt 2 passes both hops; ack passes both hops
    ch, q, got, failed = channel([0.1, 0.9, 0.9, 0.9, 0.9])
    ch.send("A", "C", "alarm_msg", b"p")
    q.run()
    assert [e.payload for e in got] == [b"p"]
    assert [e["event"] for e in ch.log].count("retry") == 1


def test_lost_ack_causes_duplicate_which_is_suppressed():
    # data ok, ack dropped, retry data ok, ack ok
    ch, q, got, failed = channel([0.9, 0.9, 0.1, 0.9, 0.9, 0.9, 0.9])
    ch.send("A", "C", "flow_batch", b"p")
    q.run()
    assert len(got) == 1 and not failed
    assert [e["event"] for e in ch.log].count("deliver") == 2


def test_exhaustion_fails_after_six_attempts():
    ch, q, got, failed = channel([0.0] * 6)
    ch.send("A", "C", "flow_batch", b"p")
    q.run()
    assert got == [] and len(failed) == 1 and failed[0][1] == 6
    assert [e["event"] for e in ch.log].count("tx") == 6
    assert ch.log[-1]["event"] == "fail" and ch.pending() == 0


def test_seq_monotone_per_pair():
    ch, q, got, _ = channel([], loss=0.0)
    ch.rng = Never()
    seqs = [ch.send("A", "C", "flow_batch", b"").seq for _ in range(3)]
    seqs += [ch.send("A", "B", "flow_batch", b"").seq]
    assert seqs == [0, 1, 2, 0]
    with pytest.raises(ValueError):
        ch.send("A", "C", "ack", b"")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 10))
def test_exactly_once_under_loss(seed, n):
    t = topo([("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")], loss=0.3)
    q = EventQueue()
    got, failed = [], []
    ch = MeshChannel(t, ReliabilityConfig(max_retries=50), SplitMix64(seed), q, got.append,
                     lambda e, k: failed.append(e))
    for i in range(n):
        ch.send("A", "C", "flow_batch", bytes([i]))
    q.run()
    assert not failed
    assert sorted(e.payload for e in got) == [bytes([i]) for i in range(n)]


def test_zero_loss_transmissions_equal_envelopes():
    t = topo([("A", "B"), ("B", "C")])
    q = EventQueue()
    ch = MeshChannel(t, ReliabilityConfig(), SplitMix64(1), q)
    for _ in range(7):
        ch.send("A", "C", "flow_batch", b"")
    q.run()
    data_tx = [e for e in ch.log if e["event"] == "tx" and e["kind"] != "ack"]
    assert len(data_tx) == 7


def test_reroute_counting():
    t = topo([("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")])
    q = EventQueue()
    ch = MeshChannel(t, ReliabilityConfig(), Never(), q)
    ch.send("A", "C", "flow_batch", b"")
    q.run()
    ch.apply(TopologyEvent("node_down", ("B",)))
    ch.send("A", "C", "flow_batch", b"")
    q.run()
    assert reroutes(ch.log) >= 1


def test_unreachable_send_retries_then_fails():
    t = topo([("A", "B")], nodes={"A", "B", "C"})
    q = EventQueue()
    failed = []
    ch = MeshChannel(t, ReliabilityConfig(max_retries=2), Never(), q,
                     on_failure=lambda e, k: failed.append(k))
    ch.send("A", "C", "flow_batch", b"")
    q.run()
    assert failed == [3]
