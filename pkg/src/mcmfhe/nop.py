"""Cycle-level network-on-package: a 2D mesh of virtual-channel routers.

Flits are tracked as counts, not individually.  A packet's path is a chain
of stages: its source queue, one input virtual channel per router on the XY
route, and finally the ejection port.  Each cycle every link grants at most
its bandwidth worth of flits (a fractional rate accumulates in a token
bucket capped at one cycle's worth), round-robin over requesting packets.
A flit entering a router becomes eligible to leave ``pipeline`` cycles later,
so an uncontended packet of ``F`` flits over ``h`` hops with an integral
link rate ``B`` is delivered ``(h + 1) * pipeline + ceil(F / B) - 1``
cycles after injection.

Every cycle is computed from the state at its start (moves are applied
afterwards), which makes the result independent of iteration order.

Ports: ``N`` (x - 1), ``S`` (x + 1), ``W`` (y - 1), ``E`` (y + 1), ``L``.
HBM stack 0 feeds the west boundary port (``y = 0``) and stack 1 the east
boundary port (``y = d_y - 1``) of the router in the destination's row.
"""
from __future__ import annotations

import csv
import io
import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .errors import InvalidConfig
from .mapping import MeshShape

HBM_WEST = -1
HBM_EAST = -2
WORD_BITS = 32


@dataclass(frozen=True)
class LinkConfig:
    """Per-direction link bandwidth derived from the package bisection.

    A ``d_x x d_y`` mesh is cut across its longer side, which crosses
    ``min(d_x, d_y)`` links; a 1x1 package gets the whole bisection figure.
    """

    flit_bits: int = 256
    bisection_bytes_per_s: float = 2e12
    clock_hz: float = 1e9
    bandwidth_bits: float | None = None  # explicit per-link bits/cycle overrides the bisection

    def __post_init__(self):
        if self.flit_bits <= 0 or self.flit_bits % WORD_BITS:
            raise InvalidConfig("flit size must be a positive multiple of the 32-bit word")
        if self.clock_hz <= 0:
            raise InvalidConfig("clock must be positive")
        if self.bandwidth_bits is None and self.bisection_bytes_per_s <= 0:
            raise InvalidConfig("bisection bandwidth must be positive")
        if self.bandwidth_bits is not None and self.bandwidth_bits <= 0:
            raise InvalidConfig("link bandwidth must be positive")

    def link_bits_per_cycle(self, mesh: MeshShape) -> float:
        if self.bandwidth_bits is not None:
            return float(self.bandwidth_bits)
        crossing = min(mesh.d_x, mesh.d_y) if mesh.n_cores > 1 else 1
        return self.bisection_bytes_per_s * 8 / crossing / self.clock_hz

    def link_bytes_per_s(self, mesh: MeshShape) -> float:
        return self.link_bits_per_cycle(mesh) * self.clock_hz / 8

    def flits_per_cycle(self, mesh: MeshShape) -> float:
        return self.link_bits_per_cycle(mesh) / self.flit_bits

    def flits_for(self, elements: int) -> int:
        return -(-elements * WORD_BITS // self.flit_bits)


@dataclass(frozen=True)
class HbmPort:
    bytes_per_s: float = 500e9
    base_latency: int = 100

    def __post_init__(self):
        if self.bytes_per_s <= 0 or self.base_latency < 0:
            raise InvalidConfig("HBM bandwidth must be positive and latency non-negative")


@dataclass
class WirePacket:
    id: int
    src: int  # core id, or HBM_WEST / HBM_EAST
    dst: int
    flits: int
    phase: str = ""
    inject: int | None = None
    deliver: int | None = None

    @property
    def latency(self) -> int | None:
        if self.inject is None or self.deliver is None:
            return None
        return self.deliver - self.inject


def route_xy(src: tuple[int, int], dst: tuple[int, int]) -> list[tuple[int, int]]:
    """Coordinates visited after ``src``: x first, then y."""
    (x, y), (tx, ty) = src, dst
    hops = []
    while x != tx:
        x += 1 if tx > x else -1
        hops.append((x, y))
    while y != ty:
        y += 1 if ty > y else -1
        hops.append((x, y))
    return hops


def _direction(a, b) -> str:
    if b[0] == a[0] + 1:
        return "S"
    if b[0] == a[0] - 1:
        return "N"
    if b[1] == a[1] + 1:
        return "E"
    return "W"


_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}


def hbm_stack_for(mesh: MeshShape, dst: int, stacks: int = 2) -> int:
    """Nearest stack: west for the left half of the columns, east otherwise."""
    if stacks not in (1, 2):
        raise InvalidConfig(f"supported HBM stack counts are 1 and 2, got {stacks}")
    if stacks == 1:
        return HBM_WEST
    return HBM_WEST if mesh.coords(dst)[1] < mesh.d_y / 2 else HBM_EAST


class _Flow:
    """Per-packet stage state."""

    __slots__ = ("pkt", "links", "ports", "batches", "counts", "vc", "remaining", "first")

    def __init__(self, pkt: WirePacket, links, ports, ready: int):
        self.pkt = pkt
        self.links = links  # links[s]: link carrying stage s -> s + 1 (last = ejection)
        self.ports = ports  # ports[s]: (router, input port) of stage s, None for the source
        n = len(links)
        self.batches = [deque() for _ in range(n)]
        self.counts = [0] * n
        self.vc = [False] * n
        self.batches[0].append([ready, pkt.flits])
        self.counts[0] = pkt.flits
        self.remaining = pkt.flits
        self.first = 0  # earliest stage still holding flits; VCs before it are free


class Network:
    def __init__(self, mesh: MeshShape, link: LinkConfig | None = None, hbm: HbmPort | None = None,
                 vcs: int = 4, vc_depth: int = 64, pipeline: int = 3, record_links: bool = False):
        if vcs < 1 or vc_depth < 1 or pipeline < 1:
            raise InvalidConfig("vcs, vc_depth and pipeline must be positive")
        self.mesh = mesh
        self.link = link or LinkConfig()
        self.hbm = hbm or HbmPort()
        self.vcs = vcs
        self.vc_depth = vc_depth
        self.pipeline = pipeline
        self.rate = self.link.flits_per_cycle(mesh)
        self.hbm_rate = self.hbm.bytes_per_s / self.link.clock_hz * 8 / self.link.flit_bits
        self.now = 0
        self.flows: dict[int, _Flow] = {}
        self.delivered: list[WirePacket] = []
        self.vc_busy: dict[tuple, int] = {}
        self.tokens: dict[object, tuple[float, int]] = {}
        self.rr: dict[object, int] = {}
        self.flits_in = 0
        self.flits_out = 0
        self.record_links = record_links
        self.link_usage: dict[object, dict[int, int]] = {}
        self._events: list[tuple[int, int, int]] = []  # (ready cycle, packet id, stage)
        self._waiting: dict[object, set[tuple[int, int]]] = {}
        self._holding: dict[object, set[tuple[int, int]]] = {}  # waiting and owning the next VC
        self._down_port: dict[object, tuple] = {}

    # -- construction helpers -------------------------------------------------

    @property
    def routers(self) -> list[tuple[int, int]]:
        return [self.mesh.coords(c) for c in range(self.mesh.n_cores)]

    def links(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """Bidirectional neighbour links, each listed once."""
        out = []
        for x, y in self.routers:
            if x + 1 < self.mesh.d_x:
                out.append(((x, y), (x + 1, y)))
            if y + 1 < self.mesh.d_y:
                out.append(((x, y), (x, y + 1)))
        return out

    def _path(self, pkt: WirePacket):
        mesh = self.mesh
        dst = mesh.coords(pkt.dst)
        if pkt.src < 0:
            edge_y = 0 if pkt.src == HBM_WEST else mesh.d_y - 1
            start = (dst[0], edge_y)
            first_link = ("hbm", pkt.src, start)
            first_port = (start, "W" if pkt.src == HBM_WEST else "E")
        else:
            start = mesh.coords(pkt.src)
            first_link = ("inj", start)
            first_port = (start, "L")
        links, ports = [first_link], [None, first_port]
        cur = start
        for nxt in route_xy(start, dst):
            d = _direction(cur, nxt)
            links.append((cur, d))
            ports.append((nxt, _OPPOSITE[d]))
            cur = nxt
        links.append(("ej", cur))
        return links, ports

    # -- public API ------------------------------------------------------------

    def inject(self, pkt: WirePacket, cycle: int | None = None):
        cycle = self.now if cycle is None else cycle
        if cycle < self.now:
            raise ValueError(f"cannot inject at cycle {cycle} < current cycle {self.now}")
        if pkt.id in self.flows:
            raise ValueError(f"duplicate packet id {pkt.id}")
        if pkt.flits <= 0:
            raise ValueError("packet needs at least one flit")
        if pkt.src >= 0 and pkt.src == pkt.dst:
            raise ValueError("packet source equals destination")
        pkt.inject = cycle
        links, ports = self._path(pkt)
        ready = cycle + (self.hbm.base_latency if pkt.src < 0 else 0)
        self.flows[pkt.id] = _Flow(pkt, links, ports, ready)
        for lk, pt in zip(links, ports[1:]):
            self._down_port[lk] = pt
        heapq.heappush(self._events, (ready, pkt.id, 0))
        self.flits_in += pkt.flits

    @property
    def busy(self) -> bool:
        return bool(self.flows)

    def _capacity(self, link) -> float:
        if link[0] == "hbm":
            return min(self.rate, self.hbm_rate)
        return self.rate

    def _tokens(self, link) -> float:
        cap = self._capacity(link)
        limit = max(cap, 1.0)
        tok, last = self.tokens.get(link, (limit, self.now - 1))
        return min(limit, tok + cap * (self.now - last))

    def _next_ready(self) -> int | None:
        if self._waiting:
            return self.now
        return self._events[0][0] if self._events else None

    def step(self) -> list[WirePacket]:
        """Advance one cycle; returns packets whose last flit left this cycle."""
        now = self.now
        heap = self._events
        while heap and heap[0][0] <= now:
            _, pid, s = heapq.heappop(heap)
            f = self.flows.get(pid)
            if f is not None and f.counts[s]:
                self._waiting.setdefault(f.links[s], set()).add((pid, s))
                if s + 1 == len(f.batches) or f.vc[s + 1]:
                    self._holding.setdefault(f.links[s], set()).add((pid, s))
        moves = []
        stacks_used: dict[int, float] = {}
        for link in sorted(self._waiting, key=repr):
            port = self._down_port.get(link)
            if port is not None and self.vc_busy.get(port, 0) >= self.vcs:
                reqs = sorted(self._holding.get(link, ()))
            else:
                reqs = sorted(self._waiting[link])
            last = self.rr.get(link, -1)
            reqs = [r for r in reqs if r[0] > last] + [r for r in reqs if r[0] <= last]
            budget = self._tokens(link)
            spent = 0
            is_hbm = link[0] == "hbm"
            for pid, s in reqs:
                avail = math.floor(budget - spent)
                if avail <= 0:
                    break
                f = self.flows[pid]
                last_stage = s + 1 == len(f.batches)
                if not last_stage and not f.vc[s + 1] and self.vc_busy.get(f.ports[s + 1], 0) >= self.vcs:
                    continue
                ready = 0
                for t, n in f.batches[s]:
                    if t > now:
                        break
                    ready += n
                n = min(avail, ready)
                if is_hbm:
                    room = self._stack_tokens(link[1]) - stacks_used.get(link[1], 0)
                    n = min(n, math.floor(room))
                if not last_stage:
                    n = min(n, self.vc_depth - f.counts[s + 1])
                if n <= 0:
                    continue
                if not last_stage and not f.vc[s + 1]:
                    self.vc_busy[port] = self.vc_busy.get(port, 0) + 1
                    f.vc[s + 1] = True
                    self._holding.setdefault(link, set()).add((pid, s))
                spent += n
                if is_hbm:
                    stacks_used[link[1]] = stacks_used.get(link[1], 0) + n
                moves.append((f, s, n))
                self.rr[link] = pid
            if spent:
                self.tokens[link] = (budget - spent, now)
                if self.record_links:
                    self.link_usage.setdefault(link, {})[now] = spent
        for sid, used in stacks_used.items():
            tok = self._stack_tokens(sid)
            self.tokens[("stack", sid)] = (tok - used, now)

        done = []
        for f, s, n in moves:
            left = n
            b = f.batches[s]
            while left:
                head = b[0]
                take = min(left, head[1])
                head[1] -= take
                left -= take
                if head[1] == 0:
                    b.popleft()
            f.counts[s] -= n
            if not b or b[0][0] > now:
                self._unwait(f, s)
            if s + 1 < len(f.batches):
                f.batches[s + 1].append([now + self.pipeline, n])
                f.counts[s + 1] += n
                heapq.heappush(heap, (now + self.pipeline, f.pkt.id, s + 1))
            else:
                f.remaining -= n
                self.flits_out += n
        touched = {id(f): f for f, _, _ in moves}
        for f in touched.values():
            # a VC is freed once the tail flit has left it
            while f.first < len(f.counts) and f.counts[f.first] == 0:
                if f.vc[f.first]:
                    self._release(f, f.first)
                f.first += 1
            if f.remaining == 0:
                f.pkt.deliver = now
                done.append(f.pkt)
        for pkt in done:
            del self.flows[pkt.id]
            self.delivered.append(pkt)
        self.now += 1
        return done

    def _unwait(self, f: _Flow, s: int):
        link = f.links[s]
        for table in (self._waiting, self._holding):
            w = table.get(link)
            if w is not None:
                w.discard((f.pkt.id, s))
                if not w:
                    del table[link]
        if f.batches[s]:
            heapq.heappush(self._events, (f.batches[s][0][0], f.pkt.id, s))

    def _stack_tokens(self, sid: int) -> float:
        cap = self.hbm_rate
        limit = max(cap, 1.0)
        tok, last = self.tokens.get(("stack", sid), (limit, self.now - 1))
        return min(limit, tok + cap * (self.now - last))

    def _release(self, f: _Flow, s: int):
        port = f.ports[s]
        self.vc_busy[port] -= 1
        if not self.vc_busy[port]:
            del self.vc_busy[port]
        f.vc[s] = False

    def run(self, until: int | None = None) -> list[WirePacket]:
        """Step until a delivery happens, ``until`` is reached, or the network empties.

        Idle stretches (no flit eligible to move) are skipped in one jump.
        """
        while self.flows and (until is None or self.now < until):
            nxt = self._next_ready()
            if nxt is not None and nxt > self.now:
                self.now = nxt if until is None else min(nxt, until)
                continue
            done = self.step()
            if done:
                return done
        if until is not None and self.now < until:
            self.now = until
        return []

    def drain(self, max_cycles: int = 10**9) -> dict:
        start = self.now
        while self.flows:
            if self.now - start > max_cycles:
                raise RuntimeError("network failed to drain")
            self.run()
        return self.stats()

    def stats(self) -> dict:
        lat = [p.latency for p in self.delivered]
        span = max((p.deliver for p in self.delivered), default=0) - min(
            (p.inject for p in self.delivered), default=0)
        return {
            "packets": len(self.delivered),
            "flits": self.flits_out,
            "mean_latency": sum(lat) / len(lat) if lat else 0.0,
            "max_latency": max(lat, default=0),
            "throughput_flits_per_cycle": self.flits_out / (span + 1) if self.delivered else 0.0,
            "latencies": {p.id: (p.inject, p.deliver) for p in self.delivered},
        }


def build_network(mesh: MeshShape, link: LinkConfig | None = None, hbm: HbmPort | None = None,
                  **kwargs) -> Network:
    return Network(mesh, link, hbm, **kwargs)


TRACE_HEADER = ["id", "src", "dst", "phase", "inject", "deliver", "flits"]


def packet_trace_csv(packets) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for p in sorted(packets, key=lambda p: p.id):
        w.writerow([p.id, p.src, p.dst, p.phase, p.inject, p.deliver, p.flits])
    return buf.getvalue()
