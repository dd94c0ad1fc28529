import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from mcmfhe.errors import InvalidConfig
from mcmfhe.mapping import MeshShape
from mcmfhe.nop import (
    HBM_EAST,
    HBM_WEST,
    HbmPort,
    LinkConfig,
    Network,
    WirePacket,
    build_network,
    hbm_stack_for,
    packet_trace_csv,
    route_xy,
)

PIPE = 3


def _net(dx=4, dy=4, bits=512, **kw):
    # 512 bits/cycle with 256-bit flits: two flits per cycle per link
    return Network(MeshShape(dx, dy), LinkConfig(bandwidth_bits=bits), **kw)


def _run_isolated(mesh, pkt, **kw):
    net = Network(mesh, LinkConfig(bandwidth_bits=512), **kw)
    net.inject(WirePacket(pkt.id, pkt.src, pkt.dst, pkt.flits), 0)
    net.drain()
    return net.delivered[0].latency


def test_grid_arithmetic():
    net = build_network(MeshShape(2, 2))
    assert len(net.routers) == 4 and len(net.links()) == 4
    assert len(build_network(MeshShape(4, 4)).links()) == 24


def test_link_bandwidth_from_bisection():
    link = LinkConfig(bisection_bytes_per_s=2e12)
    assert link.link_bytes_per_s(MeshShape(4, 4)) == pytest.approx(500e9)
    assert link.link_bytes_per_s(MeshShape(8, 8)) == pytest.approx(250e9)
    assert link.link_bytes_per_s(MeshShape(2, 2)) == pytest.approx(1e12)
    assert link.flits_for(8) == 1 and link.flits_for(9) == 2


def test_config_errors():
    with pytest.raises(InvalidConfig):
        LinkConfig(flit_bits=100)
    with pytest.raises(InvalidConfig):
        LinkConfig(bisection_bytes_per_s=0)
    with pytest.raises(InvalidConfig):
        HbmPort(bytes_per_s=-1)
    with pytest.raises(InvalidConfig):
        Network(MeshShape(2, 2), vcs=0)
    with pytest.raises(InvalidConfig):
        hbm_stack_for(MeshShape(2, 2), 0, stacks=3)


def test_route_xy_examples():
    assert route_xy((0, 0), (0, 0)) == []
    path = route_xy((0, 0), (2, 3))
    assert len(path) == 5
    assert path[:2] == [(1, 0), (2, 0)] and all(p[0] == 2 for p in path[2:])


def test_route_lengths_are_manhattan():
    pts = [(x, y) for x in range(4) for y in range(4)]
    for a, b in itertools.product(pts, pts):
        path = route_xy(a, b)
        assert len(path) == abs(a[0] - b[0]) + abs(a[1] - b[1])
        assert (path[-1] if path else a) == b
        steps = [a] + path
        assert all(abs(u[0] - v[0]) + abs(u[1] - v[1]) == 1 for u, v in zip(steps, steps[1:]))


@pytest.mark.parametrize("flits,hops", [(1, 1), (10, 1), (7, 3), (16, 6)])
def test_single_packet_hand_trace(flits, hops):
    # one flit per cycle leaves each stage; every router adds PIPE cycles
    mesh = MeshShape(4, 4)
    dst = {1: 1, 3: 3, 6: 15}[hops]
    net = _net()
    net.inject(WirePacket(0, 0, dst, flits), 5)
    net.drain()
    p = net.delivered[0]
    assert p.latency == (hops + 1) * PIPE + -(-flits // 2) - 1
    assert mesh.distance(0, dst) == hops


def test_disjoint_paths_do_not_interfere():
    mesh = MeshShape(4, 4)
    a = WirePacket(0, 0, 3, 20)
    b = WirePacket(1, 12, 15, 20)
    net = _net()
    net.inject(a, 0)
    net.inject(b, 0)
    net.drain()
    lat = {p.id: p.latency for p in net.delivered}
    assert lat[0] == _run_isolated(mesh, a) and lat[1] == _run_isolated(mesh, b)


def _link_ok(net):
    cap = max(net.rate, 1.0)
    for link, per_cycle in net.link_usage.items():
        rate = min(net.rate, net.hbm_rate) if link[0] == "hbm" else net.rate
        assert max(per_cycle.values()) <= cap + 1e-9
        cycles = sorted(per_cycle)
        total = 0
        for c in cycles:
            total += per_cycle[c]
            span = c - cycles[0] + 1
            assert total <= rate * span + max(rate, 1.0) + 1e-9


def test_opposing_flows_respect_link_bandwidth():
    net = _net(1, 2, record_links=True)
    for i in range(6):
        net.inject(WirePacket(2 * i, 0, 1, 40), 0)
        net.inject(WirePacket(2 * i + 1, 1, 0, 40), 0)
    net.drain()
    _link_ok(net)
    east = net.link_usage[((0, 0), "E")]
    span = max(east) - min(east) + 1
    assert sum(east.values()) / span <= net.rate + 1
    assert net.flits_out == net.flits_in == 480


def test_fractional_rate_bandwidth_ceiling():
    net = Network(MeshShape(2, 2), LinkConfig(bandwidth_bits=96 * 2, flit_bits=256), record_links=True)
    assert net.rate < 1
    for i in range(4):
        net.inject(WirePacket(i, 0, 3, 10), 0)
    net.drain()
    _link_ok(net)


def test_hbm_latency_and_stack():
    mesh = MeshShape(4, 4)
    assert hbm_stack_for(mesh, 0) == HBM_WEST and hbm_stack_for(mesh, 3) == HBM_EAST
    assert hbm_stack_for(mesh, 3, stacks=1) == HBM_WEST
    net = Network(mesh, LinkConfig(bandwidth_bits=512), HbmPort(bytes_per_s=1e12, base_latency=100))
    net.inject(WirePacket(0, HBM_WEST, 4 * 1 + 2, 8), 0)  # row 1, column 2: two hops east of the edge
    net.drain()
    assert net.delivered[0].latency == 100 + 3 * PIPE + 4 - 1


def test_hbm_stack_bandwidth_cap():
    # 64 bytes/cycle per stack is one 256-bit flit every half cycle, below the 2-flit links
    mesh = MeshShape(2, 2)
    net = Network(mesh, LinkConfig(bandwidth_bits=1024), HbmPort(bytes_per_s=16e9, base_latency=0), record_links=True)
    for i, dst in enumerate((0, 2)):
        net.inject(WirePacket(i, HBM_WEST, dst, 20), 0)
    net.drain()
    per_cycle = {}
    for link, usage in net.link_usage.items():
        if link[0] == "hbm":
            for c, n in usage.items():
                per_cycle[c] = per_cycle.get(c, 0) + n
    span = max(per_cycle) - min(per_cycle) + 1
    assert sum(per_cycle.values()) <= net.hbm_rate * span + 1


def test_inject_errors():
    net = _net()
    net.inject(WirePacket(0, 0, 1, 1), 3)
    with pytest.raises(ValueError):
        net.inject(WirePacket(0, 0, 2, 1), 3)
    with pytest.raises(ValueError):
        net.inject(WirePacket(1, 2, 2, 1), 3)
    with pytest.raises(ValueError):
        net.inject(WirePacket(2, 0, 2, 0), 3)
    net.drain()
    with pytest.raises(ValueError):
        net.inject(WirePacket(3, 0, 2, 1), 0)


def _random_schedule(seed, n_cores, n=60):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        src = rng.choice([HBM_WEST, HBM_EAST] + list(range(n_cores)))
        dst = rng.randrange(n_cores)
        if src == dst:
            dst = (dst + 1) % n_cores
        out.append((i, src, dst, rng.randint(1, 40), rng.randint(0, 200)))
    return out


def _play(mesh, sched, **kw):
    net = Network(mesh, LinkConfig(bandwidth_bits=384), HbmPort(base_latency=20), **kw)
    for pid, src, dst, flits, t in sorted(sched, key=lambda r: r[4]):
        net.run(until=t)
        net.inject(WirePacket(pid, src, dst, flits), t)
    net.drain(max_cycles=10**6)
    return net


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.sampled_from([(2, 2), (4, 4), (2, 4), (1, 4)]), st.integers(1, 4))
def test_drain_conservation_and_bounds(seed, shape, vcs):
    mesh = MeshShape(*shape)
    sched = _random_schedule(seed, mesh.n_cores)
    net = _play(mesh, sched, vcs=vcs, vc_depth=8, record_links=True)
    assert len(net.delivered) == len(sched)
    assert net.flits_in == net.flits_out
    _link_ok(net)
    rate = net.rate
    for p in net.delivered:
        if p.src >= 0:
            hops = mesh.distance(p.src, p.dst)
        else:
            x, y = mesh.coords(p.dst)
            hops = y if p.src == HBM_WEST else mesh.d_y - 1 - y
        base = 20 if p.src < 0 else 0
        assert p.latency >= base + (hops + 1) * PIPE + -(-p.flits // max(1, int(rate))) - 1


def test_determinism():
    mesh = MeshShape(4, 4)
    sched = _random_schedule(5, 16, 120)
    a, b = _play(mesh, sched), _play(mesh, sched)
    assert packet_trace_csv(a.delivered) == packet_trace_csv(b.delivered)
    assert a.stats() == b.stats()


def test_trace_csv_header():
    net = _net()
    net.inject(WirePacket(0, 0, 5, 3, phase="ntt"), 0)
    net.drain()
    lines = packet_trace_csv(net.delivered).splitlines()
    assert lines[0] == "id,src,dst,phase,inject,deliver,flits"
    assert lines[1].startswith("0,0,5,ntt,0,")
