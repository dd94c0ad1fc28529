"""Base conversion, hybrid key-switching and the limb-duplication rule.

``keyswitch`` executes the whole procedure on a simulated core mesh: every
tile lives in a per-core store, packets produced by ``mapping`` are the only
way data moves between cores, and reading a tile a core does not hold raises
``PlacementMismatch``.  Its result must be bit-identical to
``keyswitch_reference``, which runs the same arithmetic on whole
polynomials.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import BasisMismatch, DomainMismatch, InvalidParams, PlacementMismatch
from .mapping import (
    BConvStrategy,
    ClusterConfig,
    LogicalPacket,
    Phase,
    Placement,
    TransferLedger,
    bconv_packets,
    broadcast_overhead,
    ntt_exchange_packets,
    place_polynomial,
)
from .ntt import NttPlan, intt_multicore, intt_reference, ntt_multicore, ntt_reference
from .rns import Ciphertext, Domain, PrimeBasis, RnsPolynomial, mod_mul_rows

__all__ = [
    "BConvStrategy",
    "BConvTable",
    "EvalKey",
    "KeySwitchParams",
    "TransferLedger",
    "bconv",
    "bconv_output_limb_count",
    "choose_bconv_strategy",
    "keyswitch",
    "keyswitch_bconvs",
    "keyswitch_reference",
    "limb_dup_benefit",
    "make_bconv_table",
    "make_evk",
    "prng_evk_expand",
]


# ---------------------------------------------------------------------------
# Base conversion


@dataclass(frozen=True)
class BConvTable:
    """Constants for fast base conversion from ``source`` to ``target`` primes.

    ``matrix[j, i] = (Q / q_i) mod p_j`` and ``inv[i] = (Q / q_i)^-1 mod q_i``
    where ``Q`` is the product of the source primes.
    """

    source: tuple[int, ...]
    target: tuple[int, ...]
    matrix: np.ndarray
    inv: np.ndarray


def make_bconv_table(source: Sequence[int], target: Sequence[int]) -> BConvTable:
    source, target = tuple(source), tuple(target)
    if set(source) & set(target):
        raise BasisMismatch("source and target bases overlap")
    Q = 1
    for q in source:
        Q *= q
    hats = [Q // q for q in source]
    inv = np.array([pow(h % q, -1, q) for h, q in zip(hats, source)], dtype=np.uint64)
    matrix = np.array([[h % p for h in hats] for p in target], dtype=np.uint64).reshape(
        len(target), len(source)
    )
    return BConvTable(source, target, matrix, inv)


def _bconv_columns(res: np.ndarray, table: BConvTable) -> np.ndarray:
    """Base-convert a ``len(source) x n`` residue block to ``len(target) x n``."""
    scaled = mod_mul_rows(res, np.broadcast_to(table.inv[:, None], res.shape), table.source)
    out = np.zeros((len(table.target), res.shape[1]), dtype=np.uint64)
    for j, p in enumerate(table.target):
        pj = np.uint64(p)
        reduced = scaled % pj
        terms = mod_mul_rows(reduced, np.broadcast_to(table.matrix[j][:, None], reduced.shape),
                             [p] * len(table.source))
        acc = np.zeros(res.shape[1], dtype=np.uint64)
        for row in terms:
            acc = (acc + row) % pj
        out[j] = acc
    return out


def bconv(x: RnsPolynomial, table: BConvTable) -> RnsPolynomial:
    """Fast (approximate) base conversion of a coefficient-domain polynomial."""
    if x.domain is not Domain.COEFFICIENT:
        raise DomainMismatch("bconv requires the coefficient domain")
    if x.primes != table.source:
        raise BasisMismatch("polynomial primes differ from the table's source primes")
    return RnsPolynomial(x.basis, table.target, _bconv_columns(x.residues, table), Domain.COEFFICIENT)


# ---------------------------------------------------------------------------
# Decomposition and the duplication rule


@dataclass(frozen=True)
class KeySwitchParams:
    """``level`` input limbs, ``K`` auxiliary primes, ``beta`` digits.

    ``beta`` defaults to ``ceil(level / K)`` so each digit fits in the
    auxiliary base.  Digits are contiguous groups of ``ceil(level / beta)``
    limbs; the last may be smaller, and the effective digit count can be
    below the requested ``beta`` when the grouping leaves nothing over.
    """

    level: int
    K: int
    beta: int | None = None

    def __post_init__(self):
        if self.level < 1 or self.K < 1:
            raise InvalidParams("level and K must be positive")
        if self.beta is not None and self.beta < 1:
            raise InvalidParams("beta must be positive")

    @property
    def digit_size(self) -> int:
        beta = self.beta if self.beta is not None else -(-self.level // self.K)
        return -(-self.level // beta)

    @property
    def digits(self) -> list[range]:
        a = self.digit_size
        return [range(s, min(s + a, self.level)) for s in range(0, self.level, a)]

    @property
    def dnum(self) -> int:
        return len(self.digits)


def keyswitch_bconvs(params: KeySwitchParams) -> list[tuple[str, int, int]]:
    """``(label, n_input, n_output)`` for every BConv of one key-switching.

    One ModUp per digit (digit limbs to the rest of Q_l and P) and one
    ModDown per output polynomial (P to Q_l).
    """
    ell, K = params.level, params.K
    out = [(f"modup{k}", len(d), ell + K - len(d)) for k, d in enumerate(params.digits)]
    out += [("moddown0", K, ell), ("moddown1", K, ell)]
    return out


def bconv_output_limb_count(ell: int, beta: int, K: int) -> int:
    """Limbs produced by all BConvs of one key-switching.

    ModUp extends each of the ``b`` digits to ``ell + K`` limbs minus the
    ones it already holds, which totals ``b*(ell + K) - ell``; ModDown adds
    ``2*ell``.  Hence ``b*(ell + K) + ell`` with ``b`` the effective digit
    count.
    """
    b = KeySwitchParams(ell, K, beta).dnum
    return b * (ell + K) + ell


def limb_dup_benefit(n_input: int, n_output: int, overhead) -> Fraction:
    """Traffic saved by duplicating inputs, in units of one chunk's even split."""
    overhead = Fraction(overhead)
    if overhead < 1:
        raise InvalidParams("broadcast overhead must be at least 1")
    return Fraction(n_output) - Fraction(n_input) * (overhead - 1)


def choose_bconv_strategy(n_input: int, n_output: int, geometry) -> BConvStrategy:
    """Duplicate iff the benefit is strictly positive.

    ``geometry`` is a ``ClusterConfig`` or an already computed overhead.
    """
    overhead = broadcast_overhead(geometry) if isinstance(geometry, ClusterConfig) else geometry
    if limb_dup_benefit(n_input, n_output, overhead) > 0:
        return BConvStrategy.DUPLICATE
    return BConvStrategy.REDISTRIBUTE


# ---------------------------------------------------------------------------
# Evaluation keys


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, (bytes, bytearray)):
        if len(seed) != 32:
            raise InvalidParams("seed must be 32 bytes")
        return bytes(seed)
    return int(seed).to_bytes(32, "little")


def _uniform_limb(seed: bytes, index: int, q: int, N: int) -> np.ndarray:
    bits = q.bit_length()
    mask = np.uint64((1 << bits) - 1)
    out = np.empty(0, dtype=np.uint64)
    counter = 0
    while out.size < N:
        block = hashlib.shake_256(
            seed + index.to_bytes(4, "little") + counter.to_bytes(8, "little")
        ).digest(8 * N)
        words = np.frombuffer(block, dtype="<u4").astype(np.uint64) & mask
        out = np.concatenate([out, words[words < np.uint64(q)]])
        counter += 1
    return out[:N]


def prng_evk_expand(seed, shape: tuple[int, int], basis: PrimeBasis,
                    primes: Sequence[int] | None = None) -> RnsPolynomial:
    """Uniform residues from a SHAKE-256 counter stream with rejection sampling.

    Limb streams are keyed by the prime's global index, so any core can
    regenerate exactly the tiles it needs.
    """
    limbs, N = shape
    if N != basis.N:
        raise BasisMismatch(f"shape N={N} differs from basis N={basis.N}")
    primes = tuple(primes) if primes is not None else basis.primes[:limbs]
    if len(primes) != limbs:
        raise BasisMismatch("prime count differs from the requested limb count")
    sb = _seed_bytes(seed)
    rows = [_uniform_limb(sb, basis.global_index(q), q, N) for q in primes]
    return RnsPolynomial(basis, primes, np.array(rows).reshape(limbs, N), Domain.EVALUATION)


@dataclass
class EvalKey:
    """One ``(b, a)`` pair per digit over ``Q_l`` and ``P`` in the evaluation domain.

    ``a`` is seed-expandable; ``b`` must be loaded from memory.
    """

    pairs: list[tuple[RnsPolynomial, RnsPolynomial]]
    seeds: list[bytes] = field(default_factory=list)

    @property
    def primes(self) -> tuple[int, ...]:
        return self.pairs[0][0].primes


def make_evk(basis: PrimeBasis, params: KeySwitchParams, seed: int = 0) -> EvalKey:
    """Synthetic key material; only bit-exact reproducibility matters."""
    primes = basis.q_level(params.level) + basis.p_primes
    rng = np.random.default_rng(seed)
    pairs, seeds = [], []
    for k in range(params.dnum):
        s = hashlib.sha256(f"evk:{seed}:{k}".encode()).digest()
        a = prng_evk_expand(s, (len(primes), basis.N), basis, primes)
        b = RnsPolynomial.random(basis, primes, rng, Domain.EVALUATION)
        pairs.append((b, a))
        seeds.append(s)
    return EvalKey(pairs, seeds)


# ---------------------------------------------------------------------------
# Reference key-switching


def _ntt_rows(poly: RnsPolynomial, inverse: bool) -> RnsPolynomial:
    fn = intt_reference if inverse else ntt_reference
    rows = [fn(poly.residues[i], poly.basis.ctx(q)) for i, q in enumerate(poly.primes)]
    dom = Domain.COEFFICIENT if inverse else Domain.EVALUATION
    return poly.with_residues(np.array(rows, dtype=np.uint64).reshape(poly.residues.shape), dom)


def _p_inverse(basis: PrimeBasis, q_primes) -> np.ndarray:
    P = basis.product(basis.p_primes)
    return np.array([pow(P % q, -1, q) for q in q_primes], dtype=np.uint64)


def _check_inputs(poly: RnsPolynomial, evk: EvalKey, params: KeySwitchParams):
    basis = poly.basis
    if poly.primes != basis.q_level(params.level):
        raise BasisMismatch(f"input must hold the first {params.level} q-primes")
    want = basis.q_level(params.level) + basis.p_primes
    if len(evk.pairs) != params.dnum:
        raise BasisMismatch(f"evaluation key has {len(evk.pairs)} digits, need {params.dnum}")
    for b, a in evk.pairs:
        if b.primes != want or a.primes != want:
            raise BasisMismatch("evaluation key primes differ from Q_l + P")
        if b.domain is not Domain.EVALUATION or a.domain is not Domain.EVALUATION:
            raise DomainMismatch("evaluation key must be in the evaluation domain")


def keyswitch_reference(poly: RnsPolynomial, evk: EvalKey, params: KeySwitchParams) -> Ciphertext:
    """Single-core hybrid key-switching; output in the evaluation domain."""
    _check_inputs(poly, evk, params)
    basis = poly.basis
    q_primes = basis.q_level(params.level)
    ext_primes = q_primes + basis.p_primes
    d = _ntt_rows(poly, inverse=True) if poly.domain is Domain.EVALUATION else poly
    acc = [np.zeros((len(ext_primes), basis.N), dtype=np.uint64) for _ in range(2)]
    qcol = np.array(ext_primes, dtype=np.uint64)[:, None]
    for k, digit in enumerate(params.digits):
        dprimes = tuple(q_primes[i] for i in digit)
        others = tuple(p for p in ext_primes if p not in dprimes)
        conv = bconv(d.subset(dprimes), make_bconv_table(dprimes, others))
        full = np.empty_like(acc[0])
        for row, p in enumerate(ext_primes):
            full[row] = d.limb(p) if p in dprimes else conv.limb(p)
        full = _ntt_rows(RnsPolynomial(basis, ext_primes, full), inverse=False).residues
        b, a = evk.pairs[k]
        acc[0] = (acc[0] + mod_mul_rows(full, b.residues, ext_primes)) % qcol
        acc[1] = (acc[1] + mod_mul_rows(full, a.residues, ext_primes)) % qcol
    nq = len(q_primes)
    pinv = _p_inverse(basis, q_primes)
    outs = []
    for j in range(2):
        aux = _ntt_rows(RnsPolynomial(basis, basis.p_primes, acc[j][nq:], Domain.EVALUATION), inverse=True)
        down = _ntt_rows(bconv(aux, make_bconv_table(basis.p_primes, q_primes)), inverse=False)
        qc = qcol[:nq]
        diff = (acc[j][:nq] + qc - down.residues) % qc
        res = mod_mul_rows(diff, np.broadcast_to(pinv[:, None], diff.shape), q_primes)
        outs.append(RnsPolynomial(basis, q_primes, res, Domain.EVALUATION))
    return Ciphertext(outs[0], outs[1])


# ---------------------------------------------------------------------------
# Distributed execution


class _TileStore:
    """Per-core residue storage with presence masks."""

    def __init__(self, N: int):
        self.N = N
        self.cores: dict[int, dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]] = {}

    def put(self, core, tag, limb, idx, vals):
        slot = self.cores.setdefault(core, {}).get((tag, limb))
        if slot is None:
            slot = (np.zeros(self.N, dtype=np.uint64), np.zeros(self.N, dtype=bool))
            self.cores[core][(tag, limb)] = slot
        slot[0][idx] = vals
        slot[1][idx] = True

    def get(self, core, tag, limb, idx) -> np.ndarray:
        slot = self.cores.get(core, {}).get((tag, limb))
        if slot is None or not slot[1][idx].all():
            raise PlacementMismatch(f"core {core} does not hold {tag}[{limb}] at the requested indices")
        return slot[0][idx]


class _MeshExecutor:
    def __init__(self, basis: PrimeBasis, placement: Placement, strategy_mode: str, overhead):
        self.basis = basis
        self.pl = placement
        self.cfg = placement.config
        self.store = _TileStore(basis.N)
        self.ledger = TransferLedger()
        self.mode = strategy_mode
        self.overhead = overhead
        self.plan = NttPlan(basis.N, 1, placement.c)
        if placement.c > 1:
            self.plan.validate()

    def prime(self, g: int) -> int:
        return self.basis.primes[g]

    def layout(self, chunk: int, evaluation: bool) -> np.ndarray:
        return self.pl.chunk_indices(chunk, evaluation)

    def scatter_poly(self, tag: str, poly: RnsPolynomial):
        ev = poly.domain is Domain.EVALUATION
        for row, q in enumerate(poly.primes):
            g = self.basis.global_index(q)
            for k in range(self.pl.c):
                idx = self.layout(k, ev)
                self.store.put(self.pl.core_of(g, k), tag, g, idx, poly.residues[row][idx])

    def gather_poly(self, tag: str, limbs: Sequence[int], evaluation: bool) -> np.ndarray:
        out = np.zeros((len(limbs), self.basis.N), dtype=np.uint64)
        for row, g in enumerate(limbs):
            for k in range(self.pl.c):
                idx = self.layout(k, evaluation)
                out[row][idx] = self.store.get(self.pl.core_of(g, k), tag, g, idx)
        return out

    def transform(self, tag_in: str, tag_out: str, limbs: Sequence[int], inverse: bool):
        """Multi-core (i)NTT of each limb inside its limb cluster."""
        c = self.pl.c
        moved: dict[tuple[int, int], int] = {}
        for g in limbs:
            ctx = self.basis.ctx(self.prime(g))
            row = np.zeros(self.basis.N, dtype=np.uint64)
            for k in range(c):
                idx = self.layout(k, inverse)
                row[idx] = self.store.get(self.pl.core_of(g, k), tag_in, g, idx)
            res = (intt_multicore if inverse else ntt_multicore)(row, self.plan, ctx)
            for k, (idx, vals) in enumerate(zip(res.indices, res.parts)):
                self.store.put(self.pl.core_of(g, k), tag_out, g, idx, vals)
            for s, d, n in res.trace.records:
                key = (self.pl.core_of(g, s), self.pl.core_of(g, d))
                moved[key] = moved.get(key, 0) + n
        packets = ntt_exchange_packets(self.pl, limbs)
        expected: dict[tuple[int, int], int] = {}
        for p in packets:
            expected[(p.src, p.dst)] = expected.get((p.src, p.dst), 0) + p.size
        if moved != expected:
            raise PlacementMismatch("transform exchange differs from the planned packets")
        self.ledger.record_packets(packets, self.cfg.mesh)

    def copy_local(self, tag_in, tag_out, limbs, evaluation: bool):
        for g in limbs:
            for k in range(self.pl.c):
                idx = self.layout(k, evaluation)
                core = self.pl.core_of(g, k)
                self.store.put(core, tag_out, g, idx, self.store.get(core, tag_in, g, idx))

    def strategy(self, n_in: int, n_out: int) -> BConvStrategy:
        if self.mode == "on":
            s = BConvStrategy.DUPLICATE
        elif self.mode == "off":
            s = BConvStrategy.REDISTRIBUTE
        else:
            s = choose_bconv_strategy(n_in, n_out, self.overhead)
        self.ledger.bconv_decisions.append((n_in, n_out, s.value))
        return s

    def base_convert(self, tag_in: str, src: Sequence[int], tag_out: str, dst: Sequence[int]):
        """Coefficient-domain BConv inside every coefficient cluster."""
        pl, cfg, st = self.pl, self.cfg, self.store
        table = make_bconv_table([self.prime(g) for g in src], [self.prime(g) for g in dst])
        strategy = self.strategy(len(src), len(dst))
        packets = bconv_packets(pl, strategy, src, dst)
        if strategy is BConvStrategy.REDISTRIBUTE:
            self._run(packets, Phase.BCONV_GATHER, tag_in)
            for k in range(pl.c):
                for b in range(pl.m):
                    core = cfg.member(b, k)
                    idx = pl.sub_chunk(k, b)
                    block = np.array([st.get(core, tag_in, g, idx) for g in src])
                    conv = _bconv_columns(block, table)
                    for row, g in enumerate(dst):
                        st.put(core, tag_out, g, idx, conv[row])
            self._run(packets, Phase.BCONV_SCATTER, tag_out)
        else:
            self._run(packets, Phase.BCONV_BROADCAST, tag_in)
            for k in range(pl.c):
                idx = pl.chunk_indices(k)
                for b in range(pl.m):
                    mine = [r for r, g in enumerate(dst) if pl.owner_block(g) == b]
                    if not mine:
                        continue
                    core = cfg.member(b, k)
                    block = np.array([st.get(core, tag_in, g, idx) for g in src])
                    sub = BConvTable(table.source, tuple(table.target[r] for r in mine),
                                     table.matrix[mine], table.inv)
                    conv = _bconv_columns(block, sub)
                    for row, r in enumerate(mine):
                        st.put(core, tag_out, dst[r], idx, conv[row])
        self.ledger.record_packets(packets, cfg.mesh)

    def _run(self, packets: list[LogicalPacket], phase: Phase, tag: str):
        pl = self.pl
        for p in packets:
            if p.phase is not phase:
                continue
            if phase is Phase.BCONV_BROADCAST:
                idx = pl.chunk_indices(p.chunk)
            else:
                idx = pl.sub_chunk(p.chunk, p.part)
            self.store.put(p.dst, tag, p.limb, idx, self.store.get(p.src, tag, p.limb, idx))


def keyswitch(poly: RnsPolynomial, evk: EvalKey, params: KeySwitchParams,
              placement: Placement | ClusterConfig, duplication: str = "auto"):
    """Key-switch ``poly`` on a core mesh; returns ``(Ciphertext, TransferLedger)``.

    ``duplication`` is ``auto`` (per-BConv rule), ``on`` or ``off``.  The
    ledger's HbmLoad phase counts the ``b`` halves of the key (the ``a``
    halves are regenerated from seeds on each core).
    """
    _check_inputs(poly, evk, params)
    basis = poly.basis
    if isinstance(placement, ClusterConfig):
        placement = place_polynomial(len(basis.primes), basis.N, placement)
    if placement.N != basis.N:
        raise PlacementMismatch(f"placement is for N={placement.N}, polynomial has N={basis.N}")
    ex = _MeshExecutor(basis, placement, duplication.lower(), broadcast_overhead(placement.config))
    q_idx = list(range(params.level))
    p_idx = [basis.global_index(p) for p in basis.p_primes]
    ext_idx = q_idx + p_idx

    ex.scatter_poly("in", poly)
    if poly.domain is Domain.EVALUATION:
        ex.transform("in", "d", q_idx, inverse=True)
    else:
        ex.copy_local("in", "d", q_idx, evaluation=False)

    st, pl = ex.store, placement
    for k, digit in enumerate(params.digits):
        dig = list(digit)
        others = [g for g in ext_idx if g not in dig]
        tag = f"ext{k}"
        ex.base_convert("d", dig, tag, others)
        ex.copy_local("d", tag, dig, evaluation=False)
        ex.transform(tag, tag + "e", ext_idx, inverse=False)
        b, a = evk.pairs[k]
        for row, g in enumerate(ext_idx):
            q = np.uint64(ex.prime(g))
            for kk in range(pl.c):
                core = pl.core_of(g, kk)
                idx = pl.chunk_indices(kk, evaluation=True)
                x = st.get(core, tag + "e", g, idx)
                for j, half in enumerate((b, a)):
                    prod = mod_mul_rows(x[None, :], half.residues[row][idx][None, :], [int(q)])[0]
                    if k:
                        prod = (prod + st.get(core, f"acc{j}", g, idx)) % q
                    st.put(core, f"acc{j}", g, idx, prod)
                ex.ledger.record(Phase.HBM_LOAD, len(idx), 0)

    q_primes = basis.q_level(params.level)
    pinv = _p_inverse(basis, q_primes)
    outs = []
    for j in range(2):
        ex.transform(f"acc{j}", f"aux{j}", p_idx, inverse=True)
        ex.base_convert(f"aux{j}", p_idx, f"down{j}", q_idx)
        ex.transform(f"down{j}", f"down{j}e", q_idx, inverse=False)
        for g in q_idx:
            q = q_primes[g]
            for kk in range(pl.c):
                core = pl.core_of(g, kk)
                idx = pl.chunk_indices(kk, evaluation=True)
                diff = (st.get(core, f"acc{j}", g, idx) + np.uint64(q)
                        - st.get(core, f"down{j}e", g, idx)) % np.uint64(q)
                tile = mod_mul_rows(diff[None, :], np.full((1, len(idx)), pinv[g], dtype=np.uint64), [q])[0]
                st.put(core, f"out{j}", g, idx, tile)
        res = ex.gather_poly(f"out{j}", q_idx, evaluation=True)
        outs.append(RnsPolynomial(basis, q_primes, res, Domain.EVALUATION))
    return Ciphertext(outs[0], outs[1]), ex.ledger
