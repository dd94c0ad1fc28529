"""Data placement on a core mesh and the packet lists each phase must move.

Axis convention: a core is ``(x, y)`` with ``0 <= x < d_x`` and
``0 <= y < d_y``; its id is ``x * d_y + y``.  A block of ``b_h x b_w``
cores spans ``b_h`` values of x and ``b_w`` values of y.

* A *limb cluster* is one block.  Its members split every limb the block
  owns into equal coefficient chunks.
* A *coefficient cluster* is the set of cores sharing the same offset inside
  their blocks.  Its members hold the same coefficient chunk of disjoint
  limbs, so base conversion works inside a coefficient cluster.

Limb ``g`` (global prime index: q primes first, then p primes) is owned by
block ``g mod m`` where ``m`` is the number of blocks.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidBlock, InvalidShape
from .ntt import column_partition, row_partition


class BConvStrategy(enum.Enum):
    REDISTRIBUTE = "redistribute"
    DUPLICATE = "duplicate"


class Phase(str, enum.Enum):
    NTT_EXCHANGE = "NttExchange"
    BCONV_GATHER = "BConvGather"
    BCONV_BROADCAST = "BConvBroadcast"
    BCONV_SCATTER = "BConvScatter"
    AUTO_EXCHANGE = "AutoExchange"
    HBM_LOAD = "HbmLoad"


@dataclass(frozen=True)
class MeshShape:
    d_x: int
    d_y: int

    def __post_init__(self):
        if self.d_x < 1 or self.d_y < 1:
            raise InvalidShape(f"mesh dimensions must be positive, got {self.d_x}x{self.d_y}")

    @property
    def n_cores(self) -> int:
        return self.d_x * self.d_y

    def core_id(self, x: int, y: int) -> int:
        return x * self.d_y + y

    def coords(self, core: int) -> tuple[int, int]:
        return divmod(core, self.d_y)

    def distance(self, a: int, b: int) -> int:
        (ax, ay), (bx, by) = self.coords(a), self.coords(b)
        return abs(ax - bx) + abs(ay - by)


@dataclass(frozen=True)
class ClusterConfig:
    mesh: MeshShape
    b_h: int
    b_w: int

    def __post_init__(self):
        if self.b_h < 1 or self.b_w < 1:
            raise InvalidBlock("block dimensions must be positive")
        if self.mesh.d_x % self.b_h or self.mesh.d_y % self.b_w:
            raise InvalidBlock(
                f"block {self.b_h}x{self.b_w} does not divide mesh {self.mesh.d_x}x{self.mesh.d_y}"
            )

    @property
    def grid_x(self) -> int:
        return self.mesh.d_x // self.b_h

    @property
    def grid_y(self) -> int:
        return self.mesh.d_y // self.b_w

    @property
    def limb_cluster_size(self) -> int:
        """``c``: cores sharing each limb's coefficients."""
        return self.b_h * self.b_w

    @property
    def coeff_cluster_size(self) -> int:
        """``m``: cores sharing each coefficient's residues (= number of blocks)."""
        return self.grid_x * self.grid_y

    @property
    def n_limb_clusters(self) -> int:
        return self.coeff_cluster_size

    def block_of(self, core: int) -> int:
        x, y = self.mesh.coords(core)
        return (x // self.b_h) * self.grid_y + y // self.b_w

    def offset_of(self, core: int) -> int:
        x, y = self.mesh.coords(core)
        return (x % self.b_h) * self.b_w + y % self.b_w

    def member(self, block: int, offset: int) -> int:
        gx, gy = divmod(block, self.grid_y)
        ox, oy = divmod(offset, self.b_w)
        return self.mesh.core_id(gx * self.b_h + ox, gy * self.b_w + oy)

    def limb_cluster(self, block: int) -> list[int]:
        return [self.member(block, k) for k in range(self.limb_cluster_size)]

    def coefficient_cluster(self, offset: int) -> list[int]:
        return [self.member(b, offset) for b in range(self.coeff_cluster_size)]

    def notation(self) -> str:
        m = self.mesh
        return f"{m.d_x}x{m.d_y}-BK-{self.b_h}x{self.b_w}"

    def __str__(self):
        return self.notation()


_BK_RE = re.compile(r"^\s*(\d+)[xX](\d+)-BK-(\d+)[xX](\d+)\s*$")
_DW_RE = re.compile(r"^\s*(\d+)[xX](\d+)-DW\s*$")


def make_cluster_config(mesh: MeshShape, block: tuple[int, int]) -> ClusterConfig:
    return ClusterConfig(mesh, int(block[0]), int(block[1]))


def parse_mapping(text: str) -> ClusterConfig:
    """Parse ``DXxDY-BK-BHxBW`` or ``DXxDY-DW`` (= ``-BK-DXx1``)."""
    m = _BK_RE.match(text)
    if m:
        dx, dy, bh, bw = map(int, m.groups())
        return make_cluster_config(MeshShape(dx, dy), (bh, bw))
    m = _DW_RE.match(text)
    if m:
        dx, dy = map(int, m.groups())
        return make_cluster_config(MeshShape(dx, dy), (dx, 1))
    raise InvalidBlock(f"cannot parse mapping {text!r}; expected DXxDY-BK-BHxBW or DXxDY-DW")


def emit_mapping(config: ClusterConfig) -> str:
    return config.notation()


def validate_config(config: ClusterConfig | str, limb_cluster_cap: int | float = float("inf")) -> list[str]:
    """Return a list of violations (empty when the config is usable)."""
    if isinstance(config, str):
        try:
            config = parse_mapping(config)
        except InvalidBlock as exc:
            return [str(exc)]
    issues = []
    if config.n_limb_clusters > limb_cluster_cap:
        issues.append(
            f"{config.notation()} has {config.n_limb_clusters} limb clusters, cap is {limb_cluster_cap}"
        )
    return issues


# ---------------------------------------------------------------------------
# Placement


@dataclass(frozen=True)
class Placement:
    """Which core holds each (limb, chunk) tile.

    Limbs are identified by global prime index.  In the coefficient domain
    chunk ``k`` is row block ``k`` of the transform grid; in the evaluation
    domain it is column block ``k`` (see ``ntt.row_partition``).
    """

    config: ClusterConfig
    N: int
    limbs: tuple[int, ...]

    @property
    def c(self) -> int:
        return self.config.limb_cluster_size

    @property
    def m(self) -> int:
        return self.config.coeff_cluster_size

    @property
    def chunk_size(self) -> int:
        return self.N // self.c

    def owner_block(self, limb: int) -> int:
        return limb % self.m

    def core_of(self, limb: int, chunk: int) -> int:
        return self.config.member(self.owner_block(limb), chunk)

    def owner_core(self, limb: int, offset: int) -> int:
        return self.core_of(limb, offset)

    def tiles(self) -> dict[tuple[int, int], int]:
        return {(l, k): self.core_of(l, k) for l in self.limbs for k in range(self.c)}

    def limbs_owned(self) -> list[list[int]]:
        """Limbs per block (coefficient-cluster member)."""
        out = [[] for _ in range(self.m)]
        for l in self.limbs:
            out[self.owner_block(l)].append(l)
        return out

    def chunk_indices(self, chunk: int, evaluation: bool = False) -> np.ndarray:
        parts = column_partition(self.N, self.c) if evaluation else row_partition(self.N, self.c)
        return parts[chunk]

    def sub_chunk(self, chunk: int, part: int, evaluation: bool = False) -> np.ndarray:
        idx = self.chunk_indices(chunk, evaluation)
        size = len(idx) // self.m
        return idx[part * size : (part + 1) * size]

    def with_limbs(self, limbs: Iterable[int]) -> "Placement":
        return Placement(self.config, self.N, tuple(limbs))


def _check_shape(N: int, config: ClusterConfig):
    c = config.limb_cluster_size
    log_n = N.bit_length() - 1
    if N < 1 or N & (N - 1):
        raise InvalidShape(f"N={N} must be a power of two")
    sqrt_n = 1 << (log_n // 2)
    if log_n % 2 or sqrt_n % c:
        raise InvalidShape(f"limb cluster of {c} cores cannot split N={N} into row blocks")


def place_polynomial(ell: int | Sequence[int], N: int, config: ClusterConfig) -> Placement:
    """Limbs round-robin over blocks, coefficients split inside each block."""
    _check_shape(N, config)
    limbs = tuple(range(ell)) if isinstance(ell, int) else tuple(ell)
    return Placement(config, N, limbs)


# ---------------------------------------------------------------------------
# Packets


@dataclass(frozen=True)
class LogicalPacket:
    src: int
    dst: int
    size: int
    phase: Phase
    limb: int | None = None
    chunk: int | None = None
    part: int | None = None
    parent: int | None = None  # index of the packet that must arrive first (broadcast relay)
    batch: tuple[int, ...] = ()

    def __post_init__(self):
        if self.phase is not Phase.HBM_LOAD and self.src == self.dst:
            raise ValueError("core-to-core packet with src == dst")
        if self.size <= 0:
            raise ValueError("packet payload must be positive")


def packet_hops(p: LogicalPacket, mesh: MeshShape) -> int:
    return 0 if p.phase is Phase.HBM_LOAD else mesh.distance(p.src, p.dst)


def ntt_exchange_packets(placement: Placement, limbs: Iterable[int] | None = None,
                         phase: Phase = Phase.NTT_EXCHANGE) -> list[LogicalPacket]:
    """All-to-all inside each limb cluster, one exchange per batch of limbs.

    A batch is the set of limbs owned by one block; each ordered pair of
    cluster members exchanges ``|batch| * N / c^2`` elements.
    """
    c = placement.c
    if c == 1:
        return []
    limbs = placement.limbs if limbs is None else tuple(limbs)
    per = placement.N // (c * c)
    batches: dict[int, list[int]] = {}
    for l in limbs:
        batches.setdefault(placement.owner_block(l), []).append(l)
    out = []
    cfg = placement.config
    for block in sorted(batches):
        batch = tuple(batches[block])
        for s in range(c):
            for d in range(c):
                if s != d:
                    out.append(LogicalPacket(cfg.member(block, s), cfg.member(block, d),
                                             per * len(batch), phase, chunk=s, part=d, batch=batch))
    return out


def broadcast_tree(config: ClusterConfig, root_block: int) -> list[tuple[int, int]]:
    """Parent/child block pairs of the broadcast from ``root_block``.

    The root relays along its cluster-grid row (varying y), then every row
    member relays along its column (varying x).  Edges are listed so that a
    parent's incoming edge always precedes its outgoing ones.
    """
    gy = config.grid_y
    rx, ry = divmod(root_block, gy)
    edges = []
    for step in (1, -1):
        prev, y = ry, ry + step
        while 0 <= y < gy:
            edges.append((rx * gy + prev, rx * gy + y))
            prev, y = y, y + step
    for y in range(gy):
        for step in (1, -1):
            prev, x = rx, rx + step
            while 0 <= x < config.grid_x:
                edges.append((prev * gy + y, x * gy + y))
                prev, x = x, x + step
    return edges


def _as_limbs(spec, start: int = 0) -> tuple[int, ...]:
    return tuple(range(start, start + spec)) if isinstance(spec, int) else tuple(spec)


def bconv_packets(placement: Placement, strategy: BConvStrategy, n_input, n_output) -> list[LogicalPacket]:
    """Packets moving one base conversion's operands inside coefficient clusters.

    ``n_input``/``n_output`` are either limb counts (limbs numbered
    consecutively) or explicit global limb indices.

    Redistribute: each input limb's chunk is split into ``m`` parts and
    spread over the cluster (gather); every output limb's parts are then
    sent back to its owner (scatter).  Duplicate: each input chunk is relayed
    whole to every member along ``broadcast_tree``; outputs stay local.
    """
    strategy = BConvStrategy(strategy)
    cfg = placement.config
    m = placement.m
    if m == 1:
        return []
    inputs = _as_limbs(n_input)
    outputs = _as_limbs(n_output, len(inputs))
    S = placement.chunk_size
    if S % m:
        raise InvalidShape(f"chunk of {S} elements cannot be split over {m} cluster members")
    part = S // m
    out: list[LogicalPacket] = []
    for k in range(placement.c):
        if strategy is BConvStrategy.REDISTRIBUTE:
            for l in inputs:
                o = placement.owner_block(l)
                for b in range(m):
                    if b != o:
                        out.append(LogicalPacket(cfg.member(o, k), cfg.member(b, k), part,
                                                 Phase.BCONV_GATHER, l, k, b))
            for l in outputs:
                o = placement.owner_block(l)
                for b in range(m):
                    if b != o:
                        out.append(LogicalPacket(cfg.member(b, k), cfg.member(o, k), part,
                                                 Phase.BCONV_SCATTER, l, k, b))
        else:
            for l in inputs:
                arrived: dict[int, int] = {}
                for parent, child in broadcast_tree(cfg, placement.owner_block(l)):
                    out.append(LogicalPacket(cfg.member(parent, k), cfg.member(child, k), S,
                                             Phase.BCONV_BROADCAST, l, k, None, arrived.get(parent)))
                    arrived[child] = len(out) - 1
    return out


def _tree_traversals(config: ClusterConfig, root: int) -> int:
    d = config.mesh.distance
    return sum(d(config.member(p, 0), config.member(c, 0)) for p, c in broadcast_tree(config, root))


def _unicast_traversals(config: ClusterConfig, root: int) -> Fraction:
    d = config.mesh.distance
    m = config.coeff_cluster_size
    src = config.member(root, 0)
    return Fraction(sum(d(src, config.member(b, 0)) for b in range(m)), m)


def broadcast_overhead(config: ClusterConfig) -> Fraction:
    """Link traversals of a tree broadcast over those of an even split.

    Both are per element of one chunk and averaged over the possible
    owners.  Singleton clusters return 1.
    """
    m = config.coeff_cluster_size
    if m == 1:
        return Fraction(1)
    tree = sum(_tree_traversals(config, b) for b in range(m))
    even = sum(_unicast_traversals(config, b) for b in range(m))
    return Fraction(tree) / even


# ---------------------------------------------------------------------------
# Traffic accounting


@dataclass
class PhaseCount:
    packets: int = 0
    elements: int = 0
    element_hops: int = 0

    def add(self, other: "PhaseCount"):
        self.packets += other.packets
        self.elements += other.elements
        self.element_hops += other.element_hops


@dataclass
class TransferLedger:
    """Element counters per phase.

    ``elements`` counts payload once per packet; ``element_hops`` weights it
    by the XY route length, i.e. link traversals.
    """

    phases: dict[str, PhaseCount] = field(default_factory=dict)
    limbs_broadcast: int = 0
    limbs_unicast: int = 0
    bconv_decisions: list[tuple[int, int, str]] = field(default_factory=list)

    def record(self, phase: Phase | str, elements: int, hops: int, packets: int = 1):
        key = Phase(phase).value
        pc = self.phases.setdefault(key, PhaseCount())
        pc.packets += packets
        pc.elements += elements
        pc.element_hops += elements * hops

    def record_packets(self, packets: Iterable[LogicalPacket], mesh: MeshShape):
        seen_b: set = set()
        seen_u: set = set()
        for p in packets:
            self.record(p.phase, p.size, packet_hops(p, mesh))
            if p.phase is Phase.BCONV_BROADCAST:
                seen_b.add((p.limb, p.chunk))
            elif p.phase in (Phase.BCONV_GATHER, Phase.BCONV_SCATTER):
                seen_u.add((p.phase, p.limb, p.chunk))
        self.limbs_broadcast += len({l for l, _ in seen_b})
        self.limbs_unicast += len({(ph, l) for ph, l, _ in seen_u})
        return self

    @classmethod
    def from_packets(cls, packets: Iterable[LogicalPacket], mesh: MeshShape) -> "TransferLedger":
        return cls().record_packets(packets, mesh)

    def merge(self, other: "TransferLedger") -> "TransferLedger":
        out = TransferLedger()
        for src in (self, other):
            for k, v in src.phases.items():
                out.phases.setdefault(k, PhaseCount()).add(v)
        out.limbs_broadcast = self.limbs_broadcast + other.limbs_broadcast
        out.limbs_unicast = self.limbs_unicast + other.limbs_unicast
        out.bconv_decisions = self.bconv_decisions + other.bconv_decisions
        return out

    def get(self, phase: Phase | str) -> PhaseCount:
        return self.phases.get(Phase(phase).value, PhaseCount())

    @property
    def input_redistribution(self) -> int:
        return self.get(Phase.BCONV_GATHER).elements

    @property
    def output_redistribution(self) -> int:
        return self.get(Phase.BCONV_SCATTER).elements

    @property
    def core_elements(self) -> int:
        return sum(v.elements for k, v in self.phases.items() if k != Phase.HBM_LOAD.value)

    @property
    def core_element_hops(self) -> int:
        return sum(v.element_hops for k, v in self.phases.items() if k != Phase.HBM_LOAD.value)

    @property
    def hbm_elements(self) -> int:
        return self.get(Phase.HBM_LOAD).elements

    def to_dict(self) -> dict:
        return {
            "phases": {k: vars(v).copy() for k, v in sorted(self.phases.items())},
            "limbs_broadcast": self.limbs_broadcast,
            "limbs_unicast": self.limbs_unicast,
            "core_elements": self.core_elements,
            "core_element_hops": self.core_element_hops,
            "hbm_elements": self.hbm_elements,
            "bconv_decisions": [list(d) for d in self.bconv_decisions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferLedger":
        out = cls(limbs_broadcast=d["limbs_broadcast"], limbs_unicast=d["limbs_unicast"],
                  bconv_decisions=[tuple(x) for x in d.get("bconv_decisions", [])])
        for k, v in d["phases"].items():
            out.phases[k] = PhaseCount(**v)
        return out

    def __eq__(self, other):
        if not isinstance(other, TransferLedger):
            return NotImplemented
        return self.to_dict() == other.to_dict()
