"""Compile HE-op traces, lower them onto a core mesh and simulate.

Pipeline::

    compile(trace)          -> FlowGraph   (placement independent)
    lower(graph, placement) -> Program     (per-core work items and packets)
    simulate(program, ...)  -> SimReport   (event-driven, NoP co-stepped)

A flow-graph node is one primitive function over a set of limbs.  Every
(i)NTT is split into two halves around an Exchange node, and every BConv is
wrapped by an input and an output Exchange node; on a single core, or when
the mapping needs no traffic, those exchanges lower to nothing.
"""
from __future__ import annotations

import enum
import heapq
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import CapacityExceeded, MalformedTrace, MissingConstant, PlacementMismatch
from .keyswitch import KeySwitchParams, choose_bconv_strategy, limb_dup_benefit
from .mapping import (
    BConvStrategy,
    LogicalPacket,
    Phase,
    Placement,
    TransferLedger,
    bconv_packets,
    broadcast_overhead,
    ntt_exchange_packets,
)
from .nop import HbmPort, LinkConfig, Network, WirePacket, hbm_stack_for
from .rns import CkksParams
from .workload import HeOp, OpKind, expand_boot_segment, limbs_per_level

WORD_BYTES = 4


class NodeKind(str, enum.Enum):
    NTT = "NTT"
    INTT = "iNTT"
    BCONV = "BConv"
    AUTO = "Automorphism"
    EW = "ElementWise"
    EVK_LOAD = "EvkLoad"
    EVK_EXPAND = "EvkExpand"
    PT_LOAD = "PtLoad"
    EXCHANGE = "Exchange"


@dataclass
class Node:
    id: int
    kind: NodeKind
    limbs: tuple[int, ...]
    preds: tuple[int, ...]
    op: int
    attrs: dict = field(default_factory=dict)


@dataclass
class FlowGraph:
    nodes: list[Node]
    ops: list[HeOp]
    params: CkksParams
    beta: int | None = None

    def counts(self) -> Counter:
        return Counter(n.kind for n in self.nodes)

    def bconv_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind is NodeKind.BCONV]

    def to_networkx(self):
        import networkx as nx

        g = nx.DiGraph()
        for n in self.nodes:
            g.add_node(n.id, kind=n.kind.value, limbs=len(n.limbs), label=n.attrs.get("label", ""))
            for p in n.preds:
                g.add_edge(p, n.id)
        return g


class _Builder:
    def __init__(self, params: CkksParams, beta):
        self.params = params
        self.beta = beta
        self.nodes: list[Node] = []
        self.op = 0
        self.bconv_count = 0

    def add(self, kind, limbs, preds, **attrs) -> int:
        nid = len(self.nodes)
        preds = tuple(sorted(set(p for p in preds if p is not None)))
        self.nodes.append(Node(nid, NodeKind(kind), tuple(limbs), preds, self.op, attrs))
        return nid

    def transform(self, limbs, inverse, preds, polys=1) -> int:
        kind = NodeKind.INTT if inverse else NodeKind.NTT
        stages = self.params.log_n
        a = self.add(kind, limbs, preds, half=1, stages=stages // 2, polys=polys)
        x = self.add(NodeKind.EXCHANGE, limbs, [a], exchange="ntt", polys=polys)
        return self.add(kind, limbs, [x], half=2, stages=stages - stages // 2, polys=polys)

    def bconv(self, src, dst, preds, label) -> int:
        bid = self.bconv_count
        self.bconv_count += 1
        a = self.add(NodeKind.EXCHANGE, src, preds, exchange="bconv_in", bconv=bid, src=tuple(src), dst=tuple(dst))
        b = self.add(NodeKind.BCONV, dst, [a], bconv=bid, src=tuple(src), dst=tuple(dst), label=label)
        return self.add(NodeKind.EXCHANGE, dst, [b], exchange="bconv_out", bconv=bid, src=tuple(src), dst=tuple(dst))

    def ew(self, limbs, preds, ops_per_elem, polys=1, label="") -> int:
        return self.add(NodeKind.EW, limbs, preds, ops=ops_per_elem, polys=polys, label=label)

    def keyswitch(self, level: int, preds) -> list[int]:
        """Hybrid key-switching of one polynomial; returns the two output tails."""
        L, K = self.params.L, self.params.K
        ks = KeySwitchParams(level, K, self.beta)
        q = tuple(range(level))
        p = tuple(range(L, L + K))
        ext = q + p
        d = self.transform(q, True, preds)
        mac = None
        for k, digit in enumerate(ks.digits):
            dig = tuple(digit)
            others = tuple(g for g in ext if g not in dig)
            conv = self.bconv(dig, others, [d], f"modup{k}")
            ext_ntt = self.transform(ext, False, [conv, d])
            load = self.add(NodeKind.EVK_LOAD, ext, [], label=f"evk_b{k}")
            expand = self.add(NodeKind.EVK_EXPAND, ext, [], label=f"evk_a{k}")
            mac = self.ew(ext, [ext_ntt, load, expand, mac], 1, polys=2, label="evk_mac")
        tails = []
        for j in range(2):
            aux = self.transform(p, True, [mac])
            conv = self.bconv(p, q, [aux], f"moddown{j}")
            back = self.transform(q, False, [conv])
            tails.append(self.ew(q, [back, mac], 2, label="moddown_sub"))
        return tails

    def rescale(self, level: int, preds) -> list[int]:
        lpl = limbs_per_level(self.params)
        if level <= lpl:
            raise MalformedTrace(f"cannot rescale at level {level}")
        top = tuple(range(level - lpl, level))
        rest = tuple(range(level - lpl))
        tails = []
        for j in range(2):
            it = self.transform(top, True, preds)
            conv = self.bconv(top, rest, [it], f"rescale{j}")
            back = self.transform(rest, False, [conv])
            tails.append(self.ew(rest, [back] + list(preds), 2, label="rescale_sub"))
        return tails


def _expand(trace: list[HeOp], params: CkksParams) -> list[tuple[HeOp, bool]]:
    """Inline BootSegments; the flag marks the first op reading a raised input."""
    out = []
    for i, op in enumerate(trace):
        if op.kind is OpKind.BOOT:
            out.extend((x, j == 0) for j, x in enumerate(expand_boot_segment(op, params, seed=i)))
        else:
            out.append((op, False))
    return out


def compile(trace: list[HeOp], params: CkksParams, beta: int | None = None) -> FlowGraph:
    """Expand each HE op into its primitive-function recipe.

    Node counts per op (``b`` = digit count at that level):

    * HAdd: 1 ElementWise.  PAdd/PMult: PtLoad + ElementWise.
    * HMult: tensor EW, key-switching, final EW = ``25 + 9b`` nodes.
      Key-switching = iNTT (3) + per digit [BConv (3), NTT (3), EvkLoad,
      EvkExpand, MAC EW] + per output [iNTT (3), BConv (3), NTT (3), EW].
    * HRot: Automorphism + Exchange + key-switching + EW = ``26 + 9b``.
    * Rescale: per polynomial iNTT (3), BConv (3), NTT (3), EW = 20.
    """
    b = _Builder(params, beta)
    producer: dict[str, list[int]] = {}
    levels: dict[str, int] = {}
    expanded = _expand(trace, params)
    ops = [op for op, _ in expanded]
    for i, (op, raised) in enumerate(expanded):
        b.op = i
        if raised:
            for name in op.inputs:
                levels[name] = params.L
        if op.level > params.L:
            raise MalformedTrace(f"op {i} ({op.kind.value}) at level {op.level} exceeds L={params.L}")
        for name in op.inputs:
            if name in levels and levels[name] < op.level:
                raise MalformedTrace(
                    f"op {i} ({op.kind.value}) at level {op.level} reads {name!r} produced at level {levels[name]}"
                )
        preds = [t for name in op.inputs for t in producer.get(name, [])]
        q = tuple(range(op.level))
        if op.kind is OpKind.HADD:
            tails = [b.ew(q, preds, 1, polys=2, label="hadd")]
        elif op.kind in (OpKind.PADD, OpKind.PMULT):
            pt = b.add(NodeKind.PT_LOAD, q, [], label="plaintext")
            polys = 1 if op.kind is OpKind.PADD else 2
            tails = [b.ew(q, preds + [pt], 1, polys=polys, label=op.kind.value.lower())]
        elif op.kind is OpKind.HMULT:
            t = b.ew(q, preds, 5, label="tensor")
            ks = b.keyswitch(op.level, [t])
            tails = [b.ew(q, ks + [t], 2, label="relin_add")]
        elif op.kind is OpKind.HROT:
            a = b.add(NodeKind.AUTO, q, preds, polys=2, r=op.r)
            x = b.add(NodeKind.EXCHANGE, q, [a], exchange="auto", polys=2)
            ks = b.keyswitch(op.level, [x])
            tails = [b.ew(q, ks + [x], 1, label="rot_add")]
        elif op.kind is OpKind.RESCALE:
            tails = b.rescale(op.level, preds)
        else:
            raise MalformedTrace(f"unsupported op {op.kind}")
        producer[op.output] = tails
        levels[op.output] = op.level - (limbs_per_level(params) if op.kind is OpKind.RESCALE else 0)
    return FlowGraph(b.nodes, ops, params, beta)


# ---------------------------------------------------------------------------
# Lowering


class Fu(str, enum.Enum):
    NTTU = "nttu"
    BCONVU = "bconvu"
    EFU = "efu"
    AUTOU = "autou"
    PRNG = "prng"


@dataclass
class Item:
    """Schedulable unit: a compute micro-instruction, a packet or an HBM load."""

    id: int
    kind: str  # "compute" | "packet" | "load"
    node: int
    deps: tuple[int, ...]
    core: int = -1  # executing core (compute) or destination (packet/load)
    fu: Fu | None = None
    work: int = 0  # butterflies / MACs / ops / elements
    stages: int = 1
    reads: int = 0
    writes: int = 0
    src: int = -1
    elements: int = 0
    phase: str = ""


@dataclass
class Eq2Record:
    bconv: int
    label: str
    n_input: int
    n_output: int
    overhead: Fraction
    benefit: Fraction
    strategy: str
    element_hops: int
    elements: int


@dataclass
class Program:
    items: list[Item]
    packets: list[LogicalPacket]  # core to core
    loads: list[LogicalPacket]  # HBM to core
    placement: Placement
    eq2: list[Eq2Record]
    graph: FlowGraph

    def ledger(self) -> TransferLedger:
        mesh = self.placement.config.mesh
        led = TransferLedger.from_packets(self.packets, mesh)
        led.record_packets(self.loads, mesh)
        led.bconv_decisions = [(r.n_input, r.n_output, r.strategy) for r in self.eq2]
        return led


def lower(graph: FlowGraph, placement: Placement, duplication: str = "auto", hbm_stacks: int = 2) -> Program:
    """Map nodes to per-core items; materialise exchanges as packets.

    ``duplication`` is ``auto`` (per-BConv duplication benefit rule), ``on`` or
    ``off``.  Each item depends on the latest items of its predecessors on
    the same core; packets depend on the sender's data, and broadcast relays
    on the packet that brought the data to the relaying core.
    """
    params = graph.params
    if placement.N != params.N:
        raise PlacementMismatch(f"placement is for N={placement.N}, program uses N={params.N}")
    placed = set(placement.limbs)
    missing = sorted({g for n in graph.nodes for g in n.limbs} - placed)
    if missing:
        raise PlacementMismatch(f"graph references limbs the placement does not hold: {missing[:8]}")
    cfg = placement.config
    mesh = cfg.mesh
    m, c, S = placement.m, placement.c, placement.chunk_size
    n_cores = mesh.n_cores
    overhead = broadcast_overhead(cfg)
    duplication = str(getattr(duplication, "value", duplication)).lower()
    if duplication not in ("auto", "on", "off"):
        raise ValueError(f"duplication must be auto, on or off, not {duplication!r}")

    items: list[Item] = []
    packets: list[LogicalPacket] = []
    loads: list[LogicalPacket] = []
    eq2: list[Eq2Record] = []
    frontier: list[dict[int, tuple[int, ...]]] = []
    strategy_of: dict[int, BConvStrategy] = {}
    pending_scatter: dict[int, list[LogicalPacket]] = {}

    def deps_on(node: Node, core: int) -> tuple[int, ...]:
        out: set[int] = set()
        for p in node.preds:
            out.update(frontier[p].get(core, ()))
        return tuple(sorted(out))

    def owned(limbs) -> list[int]:
        cnt = [0] * m
        for g in limbs:
            cnt[g % m] += 1
        return cnt

    def new_item(**kw) -> Item:
        it = Item(id=len(items), **kw)
        items.append(it)
        return it

    for node in graph.nodes:
        fr: dict[int, tuple[int, ...]] = {}
        polys = node.attrs.get("polys", 1)
        cnt = owned(node.limbs)
        kind = node.kind
        if kind in (NodeKind.NTT, NodeKind.INTT, NodeKind.EW, NodeKind.AUTO, NodeKind.EVK_EXPAND):
            for core in range(n_cores):
                elems = cnt[cfg.block_of(core)] * S * polys
                if not elems:
                    fr[core] = deps_on(node, core)
                    continue
                if kind in (NodeKind.NTT, NodeKind.INTT):
                    stages = node.attrs["stages"]
                    it = new_item(kind="compute", node=node.id, deps=deps_on(node, core), core=core,
                                  fu=Fu.NTTU, work=elems // 2 * stages, stages=stages,
                                  reads=elems, writes=elems, elements=elems)
                elif kind is NodeKind.EW:
                    ops = node.attrs["ops"]
                    it = new_item(kind="compute", node=node.id, deps=deps_on(node, core), core=core,
                                  fu=Fu.EFU, work=elems * ops, reads=2 * elems * ops, writes=elems * ops,
                                  elements=elems)
                elif kind is NodeKind.AUTO:
                    it = new_item(kind="compute", node=node.id, deps=deps_on(node, core), core=core,
                                  fu=Fu.AUTOU, work=elems, reads=elems, writes=elems, elements=elems)
                else:
                    it = new_item(kind="compute", node=node.id, deps=deps_on(node, core), core=core,
                                  fu=Fu.PRNG, work=elems, writes=elems, elements=elems)
                fr[core] = (it.id,)
        elif kind is NodeKind.BCONV:
            src, dst = node.attrs["src"], node.attrs["dst"]
            strategy = strategy_of[node.attrs["bconv"]]
            n_in = len(src)
            out_cnt = owned(dst)
            for core in range(n_cores):
                blk = cfg.block_of(core)
                if strategy is BConvStrategy.DUPLICATE:
                    macs = n_in * S + n_in * out_cnt[blk] * S
                    outs = out_cnt[blk] * S
                else:
                    macs = (n_in + n_in * len(dst)) * S // m
                    outs = len(dst) * S // m
                if not macs:
                    fr[core] = deps_on(node, core)
                    continue
                it = new_item(kind="compute", node=node.id, deps=deps_on(node, core), core=core,
                              fu=Fu.BCONVU, work=macs, reads=macs, writes=outs, elements=outs)
                fr[core] = (it.id,)
        elif kind in (NodeKind.EVK_LOAD, NodeKind.PT_LOAD):
            for core in range(n_cores):
                elems = cnt[cfg.block_of(core)] * S
                if not elems:
                    continue
                lp = LogicalPacket(hbm_stack_for(mesh, core, hbm_stacks), core, elems, Phase.HBM_LOAD)
                loads.append(lp)
                it = new_item(kind="load", node=node.id, deps=(), core=core, src=lp.src,
                              elements=elems, phase=Phase.HBM_LOAD.value)
                fr[core] = (it.id,)
        elif kind is NodeKind.EXCHANGE:
            ex = node.attrs["exchange"]
            if ex in ("ntt", "auto"):
                phase = Phase.NTT_EXCHANGE if ex == "ntt" else Phase.AUTO_EXCHANGE
                pk = ntt_exchange_packets(placement, node.limbs, phase)
                if polys > 1:
                    pk = [replace(p, size=p.size * polys) for p in pk]
            elif ex == "bconv_in":
                bid = node.attrs["bconv"]
                src, dst = node.attrs["src"], node.attrs["dst"]
                if duplication == "on":
                    strategy = BConvStrategy.DUPLICATE
                elif duplication == "off":
                    strategy = BConvStrategy.REDISTRIBUTE
                else:
                    strategy = choose_bconv_strategy(len(src), len(dst), overhead)
                strategy_of[bid] = strategy
                allp = bconv_packets(placement, strategy, src, dst)
                pk = [p for p in allp if p.phase is not Phase.BCONV_SCATTER]
                pending_scatter[bid] = [p for p in allp if p.phase is Phase.BCONV_SCATTER]
                led = TransferLedger.from_packets(allp, mesh)
                eq2.append(Eq2Record(
                    bid, graph.nodes[node.id + 1].attrs.get("label", ""), len(src), len(dst), overhead,
                    limb_dup_benefit(len(src), len(dst), overhead), strategy.value,
                    led.core_element_hops, led.core_elements))
            else:
                pk = pending_scatter.pop(node.attrs["bconv"])
            packets.extend(pk)
            # one wire item per (src, dst) pair; broadcast relays keep one per tree
            groups: dict[tuple, Item] = {}
            group_of: list[Item] = []
            for p in pk:
                key = (p.src, p.dst, p.limb % m) if p.phase is Phase.BCONV_BROADCAST else (p.src, p.dst)
                it = groups.get(key)
                if it is None:
                    it = new_item(kind="packet", node=node.id, deps=(), core=p.dst, src=p.src,
                                  phase=p.phase.value)
                    groups[key] = it
                it.elements += p.size
                group_of.append(it)
            for p, it in zip(pk, group_of):
                # relays wait for the packet that brought the data, others for the sender
                extra = (group_of[p.parent].id,) if p.parent is not None else deps_on(node, p.src)
                it.deps = tuple(sorted(set(it.deps) | set(extra)))
            incoming: dict[int, set[int]] = {}
            for it in groups.values():
                incoming.setdefault(it.core, set()).add(it.id)
            for core in range(n_cores):
                fr[core] = tuple(sorted(set(deps_on(node, core)) | incoming.get(core, set())))
        else:
            raise MalformedTrace(f"cannot lower node kind {kind}")
        frontier.append(fr)
    return Program(items, packets, loads, placement, eq2, graph)


# ---------------------------------------------------------------------------
# Core model and simulation


@dataclass(frozen=True)
class CoreModel:
    """Per-core throughputs (per cycle).

    The NTT unit is fully pipelined across stages: it holds
    ``lanes * log2(N) / 2`` butterflies so one stage of a limb takes
    ``N / lanes`` cycles divided by the stage count.  Setting
    ``nttu_butterflies_per_lane`` overrides the per-lane butterfly count.
    Intermediate stages stay inside the unit, so an (i)NTT item reads and
    writes each element once.
    """

    lanes: int
    log_n: int
    nttu_butterflies_per_lane: float | None = None
    bconv_macs_per_lane: int = 12
    rf_reads_per_lane: int = 6
    rf_writes_per_lane: int = 6
    efu_scale: float = 1.0
    auto_scale: float = 1.0
    prng_scale: float = 1.0
    bconv_scale: float = 1.0

    @property
    def submodules(self) -> int:
        return max(1, self.lanes // 16)

    def throughput(self, fu: Fu) -> float:
        if fu is Fu.NTTU:
            per_lane = self.nttu_butterflies_per_lane
            if per_lane is None:
                per_lane = self.log_n / 2
            return self.lanes * per_lane
        if fu is Fu.BCONVU:
            return self.lanes * self.bconv_macs_per_lane * self.bconv_scale
        if fu is Fu.EFU:
            return self.lanes * self.efu_scale
        if fu is Fu.AUTOU:
            return self.lanes * self.auto_scale
        return self.lanes * self.prng_scale

    def duration(self, item: Item) -> int:
        tp = self.throughput(item.fu)
        if item.fu is Fu.NTTU:
            per_stage = item.work / item.stages
            cycles = item.stages * math.ceil(per_stage / tp)
        else:
            cycles = math.ceil(item.work / tp)
        rf = max(math.ceil(item.reads / (self.rf_reads_per_lane * self.lanes)),
                 math.ceil(item.writes / (self.rf_writes_per_lane * self.lanes)))
        return max(cycles, rf, 1)


@dataclass
class SimReport:
    total_cycles: int
    fu_busy: dict[str, int]
    utilization: dict[str, float]
    ledger: TransferLedger
    hbm_bytes: int
    counters: dict[str, int]
    eq2: list[dict]
    network: dict
    energy: float | None = None
    energy_breakdown: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "fu_busy": dict(sorted(self.fu_busy.items())),
            "utilization": dict(sorted(self.utilization.items())),
            "ledger": self.ledger.to_dict(),
            "hbm_bytes": self.hbm_bytes,
            "counters": dict(sorted(self.counters.items())),
            "eq2": self.eq2,
            "network": self.network,
            "energy": self.energy,
            "energy_breakdown": self.energy_breakdown,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        return cls(
            total_cycles=d["total_cycles"],
            fu_busy=d["fu_busy"],
            utilization=d["utilization"],
            ledger=TransferLedger.from_dict(d["ledger"]),
            hbm_bytes=d["hbm_bytes"],
            counters=d["counters"],
            eq2=d["eq2"],
            network=d["network"],
            energy=d.get("energy"),
            energy_breakdown=d.get("energy_breakdown"),
        )


@dataclass
class SimLog:
    start: dict[int, int] = field(default_factory=dict)
    end: dict[int, int] = field(default_factory=dict)
    wire: dict[int, WirePacket] = field(default_factory=dict)
    network: Network | None = None


def simulate(program: Program, core: CoreModel, link: LinkConfig | None = None,
             hbm: HbmPort | None = None, capacity_bytes: float = float("inf"),
             network_kwargs: dict | None = None, log: SimLog | None = None) -> SimReport:
    """Event-driven co-simulation of compute units and the network.

    A compute item starts when every dependency has finished and its unit
    on that core is idle (lowest id first).  Packets are injected as soon as
    their dependencies finish; a delivered packet's data is usable on the
    following cycle.  HBM loads are issued in program order per core while
    the bytes they pin stay within ``capacity_bytes``; a load is unpinned
    when all its direct consumers have finished.
    """
    items = program.items
    mesh = program.placement.config.mesh
    link = link or LinkConfig()
    net = Network(mesh, link, hbm, **(network_kwargs or {}))
    log = log if log is not None else SimLog()
    log.network = net

    n = len(items)
    indeg = [len(it.deps) for it in items]
    users: list[list[int]] = [[] for _ in range(n)]
    for it in items:
        for d in it.deps:
            users[d].append(it.id)
    finish = [None] * n
    load_queue: dict[int, list[int]] = {}
    for it in items:
        if it.kind == "load":
            b = it.elements * WORD_BYTES
            if b > capacity_bytes:
                raise CapacityExceeded(
                    f"load item {it.id} needs {b} bytes on core {it.core}, capacity is {capacity_bytes:.0f}")
            load_queue.setdefault(it.core, []).append(it.id)
    for q in load_queue.values():
        q.reverse()  # pop() yields program order
    pinned: dict[int, float] = {}
    consumers_left = {it.id: len(users[it.id]) for it in items if it.kind == "load"}

    fu_free: dict[tuple[int, Fu], int] = {}
    fu_ready: dict[tuple[int, Fu], list[int]] = {}
    fu_busy: Counter = Counter()
    events: list[tuple[int, int]] = []  # (finish time, item id) for compute items
    ready_packets: list[int] = []
    now = 0
    done = 0

    def mark_ready(i: int):
        it = items[i]
        if it.kind == "compute":
            heapq.heappush(fu_ready.setdefault((it.core, it.fu), []), i)
        elif it.kind == "packet":
            ready_packets.append(i)

    def issue_loads(core: int):
        q = load_queue.get(core)
        while q:
            it = items[q[-1]]
            b = it.elements * WORD_BYTES
            if pinned.get(core, 0) + b > capacity_bytes:
                break
            q.pop()
            pinned[core] = pinned.get(core, 0) + b
            ready_packets.append(it.id)

    def complete(i: int, t: int):
        nonlocal done
        finish[i] = t
        done += 1
        it = items[i]
        for d in it.deps:
            if items[d].kind == "load":
                consumers_left[d] -= 1
                if consumers_left[d] == 0:
                    pinned[items[d].core] -= items[d].elements * WORD_BYTES
                    issue_loads(items[d].core)
        if it.kind == "load" and consumers_left[i] == 0:
            pinned[it.core] -= it.elements * WORD_BYTES
            issue_loads(it.core)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                mark_ready(u)

    for it in items:
        if indeg[it.id] == 0 and it.kind != "load":
            mark_ready(it.id)
    for core_id in sorted(load_queue):
        issue_loads(core_id)

    while done < n:
        # start compute on idle units
        for key in sorted(fu_ready):
            heap = fu_ready[key]
            if heap and fu_free.get(key, 0) <= now:
                i = heapq.heappop(heap)
                dur = core.duration(items[i])
                log.start[i] = now
                fu_free[key] = now + dur
                fu_busy[key[1].value] += dur
                heapq.heappush(events, (now + dur, i))
        fu_ready = {k: v for k, v in fu_ready.items() if v}
        # inject ready packets
        if ready_packets:
            if not net.busy and net.now < now:
                net.now = now
            for i in sorted(ready_packets):
                it = items[i]
                wp = WirePacket(i, it.src, it.core, link.flits_for(it.elements), it.phase)
                net.inject(wp, max(now, net.now))
                log.start[i] = now
                log.wire[i] = wp
            ready_packets.clear()
        # advance time
        next_compute = events[0][0] if events else None
        if next_compute is None and not net.busy:
            raise RuntimeError(f"simulation stalled with {n - done} items pending")
        if net.busy:
            net.now = max(net.now, now)
            delivered = net.run(until=next_compute)
            now = net.now
            for wp in delivered:
                log.end[wp.id] = wp.deliver + 1
                complete(wp.id, wp.deliver + 1)
        else:
            now = next_compute
        while events and events[0][0] <= now:
            t, i = heapq.heappop(events)
            log.end[i] = t
            complete(i, t)

    total = max((f for f in finish if f is not None), default=0)
    n_cores = mesh.n_cores
    util = {fu.value: (fu_busy[fu.value] / (total * n_cores) if total else 0.0) for fu in Fu}
    ledger = program.ledger()
    counters = _counters(program, ledger)
    net_stats = net.stats()
    net_stats.pop("latencies")
    phase_cycles: Counter = Counter()
    for i, wp in log.wire.items():
        phase_cycles[wp.phase] += log.end[i] - log.start[i]
    net_stats["phase_cycles"] = dict(sorted(phase_cycles.items()))
    return SimReport(
        total_cycles=total,
        fu_busy={fu.value: fu_busy[fu.value] for fu in Fu},
        utilization=util,
        ledger=ledger,
        hbm_bytes=ledger.hbm_elements * WORD_BYTES,
        counters=counters,
        eq2=[_eq2_dict(r) for r in program.eq2],
        network={k: (round(v, 6) if isinstance(v, float) else v) for k, v in net_stats.items()},
    )


def _eq2_dict(r: Eq2Record) -> dict:
    return {
        "bconv": r.bconv,
        "label": r.label,
        "n_input": r.n_input,
        "n_output": r.n_output,
        "overhead": str(r.overhead),
        "eq2_benefit": str(r.benefit),
        "strategy": r.strategy,
        "element_hops": r.element_hops,
        "elements": r.elements,
    }


def _counters(program: Program, ledger: TransferLedger) -> dict[str, int]:
    c = Counter()
    for it in program.items:
        if it.kind != "compute":
            continue
        if it.fu is Fu.NTTU:
            c["butterflies"] += it.work
        elif it.fu is Fu.BCONVU:
            c["macs"] += it.work
        elif it.fu is Fu.EFU:
            c["ew_ops"] += it.work
        elif it.fu is Fu.AUTOU:
            c["auto_elements"] += it.work
        else:
            c["prng_words"] += it.work
        c["rf_accesses"] += it.reads + it.writes
    c["nop_word_hops"] = ledger.core_element_hops
    c["hbm_bytes"] = ledger.hbm_elements * WORD_BYTES
    for k in ("butterflies", "macs", "ew_ops", "auto_elements", "prng_words", "rf_accesses"):
        c.setdefault(k, 0)
    return dict(c)


ENERGY_TERMS = {
    "nop": ("nop_word_hops", "nop_per_word_hop"),
    "ntt": ("butterflies", "ntt_per_butterfly"),
    "bconv": ("macs", "bconv_per_mac"),
    "efu": ("ew_ops", "efu_per_op"),
    "auto": ("auto_elements", "auto_per_element"),
    "prng": ("prng_words", "prng_per_word"),
    "rf": ("rf_accesses", "rf_per_access"),
    "hbm": ("hbm_bytes", "hbm_per_byte"),
}


def energy_account(report: SimReport | dict, table: dict[str, float]) -> tuple[float, dict[str, float]]:
    """Linear energy model: counter times per-event constant, per term."""
    counters = report.counters if isinstance(report, SimReport) else report
    breakdown = {}
    for term, (counter, const) in ENERGY_TERMS.items():
        if const not in table:
            raise MissingConstant(const)
        breakdown[term] = counters.get(counter, 0) * float(table[const])
    return sum(breakdown.values()), breakdown


def audit_schedule(program: Program, log: SimLog) -> list[str]:
    """Items that started before a dependency finished (empty when valid)."""
    bad = []
    for it in program.items:
        s = log.start.get(it.id)
        if s is None or it.id not in log.end:
            bad.append(f"item {it.id} never ran")
            continue
        for d in it.deps:
            if log.end.get(d, math.inf) > s:
                bad.append(f"item {it.id} started at {s} before dependency {d} finished")
    return bad
