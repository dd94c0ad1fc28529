"""Negacyclic number-theoretic transforms.

All public transforms take and return limbs in natural order, with the
forward image defined as ``y[j] = sum_i x[i] * psi^(i*(2j+1)) mod q`` where
``psi`` is the prime's primitive 2N-th root.  Internally the radix-2 path
works in bit-reversed order.  Twiddles are held in Montgomery form so the
data itself never leaves standard form.

Three implementations are provided and must agree bit for bit:

* ``ntt_reference``: merged-twist Cooley-Tukey (forward) and
  Gentleman-Sande (inverse) butterflies.
* ``ntt_four_step``: sqrt(N) x sqrt(N) decomposition with the negacyclic
  twist folded into the inter-step twisting table.
* ``ntt_composable`` / ``ntt_multicore``: the same decomposition executed as
  a dataflow over submodules (and cores), each transforming a block of rows,
  followed by a perfect-shuffle transposition and the column transforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidPlan, NotSquare
from .rns import PrimeContext, is_power_of_two, mont_mul_vec

VALID_SUBMODULE_COUNTS = (1, 2, 4, 8, 16)
LANES_PER_SUBMODULE = 16


def butterfly_ntt(a: int, b: int, w: int, q: int) -> tuple[int, int]:
    bw = b * w % q
    return (a + bw) % q, (a - bw) % q


def butterfly_intt(a: int, b: int, w: int, q: int) -> tuple[int, int]:
    return (a + b) % q, (a - b) * w % q


@lru_cache(maxsize=None)
def bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


def _log2(n: int) -> int:
    return n.bit_length() - 1


# ---------------------------------------------------------------------------
# Twiddle tables


@dataclass(frozen=True)
class TwiddleTable:
    """Montgomery-form twiddles for one prime and one transform length."""

    q: int
    n: int
    forward: np.ndarray  # psi_n^brv(k), Montgomery form
    inverse: np.ndarray  # psi_n^-brv(k), Montgomery form
    inverse_last: np.ndarray  # inverse[1] * n^-1, Montgomery form (folded scaling)
    n_inv: np.uint64  # n^-1, Montgomery form

    def check(self) -> bool:
        q = np.uint64(self.q)
        return bool(np.all(self.forward < q) and np.all(self.inverse < q) and self.n_inv < q)


def twiddle_table(ctx: PrimeContext, n: int) -> TwiddleTable:
    def build():
        psi = ctx.root(n)
        psi_inv = pow(psi, -1, ctx.q)
        rev = bit_reverse_indices(n)
        fwd = ctx.to_mont_array(pow(psi, int(k), ctx.q) for k in rev)
        inv = ctx.to_mont_array(pow(psi_inv, int(k), ctx.q) for k in rev)
        n_inv = pow(n, -1, ctx.q)
        last = ctx.to_mont_array([pow(psi_inv, int(rev[1]), ctx.q) * n_inv % ctx.q]) if n > 1 else inv[:1]
        return TwiddleTable(ctx.q, n, fwd, inv, last, np.uint64(n_inv * ctx.mont.R % ctx.q))

    return ctx.cached(("twiddle", n), build)


def four_step_twist(ctx: PrimeContext, n: int) -> np.ndarray:
    """Twist table ``T[i1, j2]`` for a length-n four-step (Montgomery form).

    Merges the negacyclic inter-step factor ``psi_n^(i1*(2*j2+1))`` with the
    ``psi_n^(-n2*i1)`` pre-twist that turns the column step into a
    negacyclic transform of length n1.
    """
    def build():
        n1 = n2 = _isqrt_pow2(n)
        psi = ctx.root(n)
        i1 = np.arange(n1)[:, None]
        j2 = np.arange(n2)[None, :]
        expo = (i1 * (2 * j2 + 1) - n2 * i1) % (2 * n)
        powers = [pow(psi, e, ctx.q) for e in range(2 * n)]
        vals = np.array([[powers[e] for e in row] for row in expo.tolist()], dtype=object)
        fwd = np.array([[v * ctx.mont.R % ctx.q for v in row] for row in vals], dtype=np.uint64)
        inv = np.array(
            [[pow(int(v), -1, ctx.q) * ctx.mont.R % ctx.q for v in row] for row in vals],
            dtype=np.uint64,
        )
        return fwd, inv

    return ctx.cached(("twist", n), build)


def _isqrt_pow2(n: int) -> int:
    if not is_power_of_two(n) or _log2(n) % 2:
        raise NotSquare(f"{n} is not an even power of two")
    return 1 << (_log2(n) // 2)


# ---------------------------------------------------------------------------
# Radix-2 kernels (batched along the last axis)


def _mm(a, b, ctx):
    return mont_mul_vec(a, b, np.uint64(ctx.q), np.uint64(ctx.mont.q_neg_inv))


def _ct_forward(x: np.ndarray, ctx: PrimeContext) -> np.ndarray:
    """Natural-order input, natural-order output negacyclic NTT."""
    n = x.shape[-1]
    batch = x.shape[:-1]
    tab = twiddle_table(ctx, n)
    q = np.uint64(ctx.q)
    a = np.array(x, dtype=np.uint64).reshape(-1, n)
    m, t = 1, n
    while m < n:
        t //= 2
        v = a.reshape(-1, m, 2, t)
        w = tab.forward[m : 2 * m][None, :, None]
        u = v[:, :, 0, :]
        bw = _mm(v[:, :, 1, :], np.broadcast_to(w, u.shape), ctx)
        out = np.empty_like(v)
        out[:, :, 0, :] = (u + bw) % q
        out[:, :, 1, :] = (u + q - bw) % q
        a = out.reshape(-1, n)
        m *= 2
    a = a[:, bit_reverse_indices(n)]
    return a.reshape(*batch, n)


def _gs_inverse(y: np.ndarray, ctx: PrimeContext) -> np.ndarray:
    """Inverse of ``_ct_forward``; n^-1 is folded into the last stage."""
    n = y.shape[-1]
    batch = y.shape[:-1]
    tab = twiddle_table(ctx, n)
    q = np.uint64(ctx.q)
    a = np.array(y, dtype=np.uint64).reshape(-1, n)[:, bit_reverse_indices(n)]
    if n == 1:
        return a.reshape(*batch, n)
    t, m = 1, n
    while m > 1:
        h = m // 2
        v = a.reshape(-1, h, 2, t)
        u, w_in = v[:, :, 0, :], v[:, :, 1, :]
        s = (u + w_in) % q
        d = (u + q - w_in) % q
        out = np.empty_like(v)
        if h == 1:
            out[:, :, 0, :] = _mm(s, np.full_like(s, tab.n_inv), ctx)
            out[:, :, 1, :] = _mm(d, np.full_like(d, tab.inverse_last[0]), ctx)
        else:
            w = tab.inverse[h : 2 * h][None, :, None]
            out[:, :, 0, :] = s
            out[:, :, 1, :] = _mm(d, np.broadcast_to(w, d.shape), ctx)
        a = out.reshape(-1, n)
        t *= 2
        m = h
    return a.reshape(*batch, n)


def ntt_reference(limb, ctx: PrimeContext) -> np.ndarray:
    return _ct_forward(np.asarray(limb, dtype=np.uint64), ctx)


def intt_reference(limb, ctx: PrimeContext) -> np.ndarray:
    return _gs_inverse(np.asarray(limb, dtype=np.uint64), ctx)


# ---------------------------------------------------------------------------
# Four-step decomposition


def _negacyclic(x, ctx, depth, inverse=False):
    n = x.shape[-1]
    if depth > 0 and n >= 4 and _log2(n) % 2 == 0:
        return _four_step(x, ctx, depth - 1, inverse)
    return _gs_inverse(x, ctx) if inverse else _ct_forward(x, ctx)


def _four_step(x: np.ndarray, ctx: PrimeContext, depth: int = 0, inverse: bool = False) -> np.ndarray:
    """Length-n negacyclic (i)NTT as column step, twist, transpose, row step.

    Input index ``i = i1 + n1*i2`` and output index ``j = n2*j1 + j2``.
    Sub-transforms recurse ``depth`` more times before dropping to radix-2.
    """
    n = x.shape[-1]
    n1 = n2 = _isqrt_pow2(n)
    batch = x.shape[:-1]
    a = np.asarray(x, dtype=np.uint64).reshape(-1, n)
    tw_fwd, tw_inv = four_step_twist(ctx, n)
    if not inverse:
        rows = a.reshape(-1, n2, n1).transpose(0, 2, 1)  # [b, i1, i2]
        rows = _negacyclic(rows, ctx, depth)  # [b, i1, j2]
        rows = _mm(rows, np.broadcast_to(tw_fwd, rows.shape), ctx)
        cols = rows.transpose(0, 2, 1)  # [b, j2, i1]
        cols = _negacyclic(cols, ctx, depth)  # [b, j2, j1]
        out = cols.transpose(0, 2, 1).reshape(-1, n)
    else:
        cols = a.reshape(-1, n1, n2).transpose(0, 2, 1)  # [b, j2, j1]
        cols = _negacyclic(cols, ctx, depth, inverse=True)  # [b, j2, i1]
        rows = cols.transpose(0, 2, 1)  # [b, i1, j2]
        rows = _mm(rows, np.broadcast_to(tw_inv, rows.shape), ctx)
        rows = _negacyclic(rows, ctx, depth, inverse=True)  # [b, i1, i2]
        out = rows.transpose(0, 2, 1).reshape(-1, n)
    return out.reshape(*batch, n)


def ntt_four_step(limb, ctx: PrimeContext) -> np.ndarray:
    return _four_step(np.asarray(limb, dtype=np.uint64), ctx)


def intt_four_step(limb, ctx: PrimeContext) -> np.ndarray:
    return _four_step(np.asarray(limb, dtype=np.uint64), ctx, inverse=True)


# ---------------------------------------------------------------------------
# Perfect shuffle


def perfect_shuffle(seq: np.ndarray) -> np.ndarray:
    """Riffle the two halves: ``out[2i] = seq[i]``, ``out[2i+1] = seq[i + n/2]``.

    On addresses this is a one-bit left rotation.
    """
    seq = np.asarray(seq)
    n = seq.shape[0]
    if not is_power_of_two(n):
        raise ValueError("perfect shuffle needs a power-of-two length")
    out = np.empty_like(seq)
    out[0::2] = seq[: n // 2]
    out[1::2] = seq[n // 2 :]
    return out


def shuffle_transpose(buffer: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Transpose a row-major ``rows x cols`` buffer with log2(cols) perfect shuffles."""
    out = np.asarray(buffer)
    for _ in range(_log2(cols)):
        out = perfect_shuffle(out)
    return out


# ---------------------------------------------------------------------------
# Composable dataflow


@dataclass(frozen=True)
class NttPlan:
    """How a limb's transform is spread over submodules and cores."""

    N: int
    submodule_count: int = 1
    cores_cooperating: int = 1

    @property
    def fourth_root(self) -> int:
        return 1 << (_log2(self.N) // 4)

    @property
    def sqrt_n(self) -> int:
        return 1 << (_log2(self.N) // 2)

    @property
    def lanes_per_core(self) -> int:
        return self.submodule_count * LANES_PER_SUBMODULE

    @property
    def units(self) -> int:
        return self.submodule_count * self.cores_cooperating

    def validate(self) -> "NttPlan":
        if not is_power_of_two(self.N) or _log2(self.N) % 4:
            raise InvalidPlan(f"N={self.N} has no integral fourth root")
        if self.submodule_count not in VALID_SUBMODULE_COUNTS:
            raise InvalidPlan(f"submodule_count must be one of {VALID_SUBMODULE_COUNTS}")
        c = self.cores_cooperating
        if c < 1 or self.fourth_root % c:
            raise InvalidPlan(f"cores_cooperating={c} must divide {self.fourth_root}")
        if self.sqrt_n % self.units:
            raise InvalidPlan(
                f"{self.submodule_count} submodules x {c} cores do not divide {self.sqrt_n} rows"
            )
        return self


def valid_plans(N: int) -> list[NttPlan]:
    plans = []
    for c in range(1, (1 << (_log2(N) // 4)) + 1):
        for s in VALID_SUBMODULE_COUNTS:
            try:
                plans.append(NttPlan(N, s, c).validate())
            except InvalidPlan:
                pass
    return plans


@dataclass
class ExchangeTrace:
    """``(source, destination, element count)`` records of one redistribution."""

    level: str
    records: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def total_sent(self) -> int:
        return sum(r[2] for r in self.records)

    @property
    def total_received(self) -> int:
        return sum(r[2] for r in self.records)

    def sent_by(self, src: int) -> int:
        return sum(r[2] for r in self.records if r[0] == src)

    def received_by(self, dst: int) -> int:
        return sum(r[2] for r in self.records if r[1] == dst)

    def __len__(self):
        return len(self.records)


def _count_moves(src_owner: np.ndarray, dst_owner: np.ndarray, groups: int, level: str) -> ExchangeTrace:
    flat = src_owner.astype(np.int64) * groups + dst_owner.astype(np.int64)
    counts = np.bincount(flat.ravel(), minlength=groups * groups).reshape(groups, groups)
    trace = ExchangeTrace(level)
    for s in range(groups):
        for d in range(groups):
            if s != d and counts[s, d]:
                trace.records.append((s, d, int(counts[s, d])))
    return trace


def row_partition(N: int, parts: int) -> list[np.ndarray]:
    """Coefficient-domain indices held by each of ``parts`` units (row blocks)."""
    n1 = n2 = 1 << (_log2(N) // 2)
    per = n1 // parts
    grid = np.arange(N).reshape(n2, n1)  # grid[i2, i1] = i1 + n1*i2
    return [np.sort(grid[:, u * per : (u + 1) * per].ravel()) for u in range(parts)]


def column_partition(N: int, parts: int) -> list[np.ndarray]:
    """Evaluation-domain indices held by each unit after the shuffle (column blocks)."""
    n1 = n2 = 1 << (_log2(N) // 2)
    per = n2 // parts
    grid = np.arange(N).reshape(n1, n2)  # grid[j1, j2] = n2*j1 + j2
    return [np.sort(grid[:, u * per : (u + 1) * per].ravel()) for u in range(parts)]


def _composable(limb, plan: NttPlan, ctx: PrimeContext, inverse: bool):
    plan.validate()
    N = plan.N
    n1 = n2 = plan.sqrt_n
    U = plan.units
    x = np.asarray(limb, dtype=np.uint64)
    if x.shape != (N,):
        raise InvalidPlan(f"limb length {x.shape} does not match plan N={N}")
    tw_fwd, tw_inv = four_step_twist(ctx, N)
    rows_per = n1 // U
    unit_of_row = np.arange(n1) // rows_per  # unit owning row i1 / column j2

    if not inverse:
        grid = x.reshape(n2, n1).T  # [i1, i2]
        buffers = []
        for u in range(U):
            blk = grid[u * rows_per : (u + 1) * rows_per]
            blk = _negacyclic(blk, ctx, depth=1)  # row four-step on sqrt(N) points
            blk = _mm(blk, tw_fwd[u * rows_per : (u + 1) * rows_per], ctx)
            buffers.append(blk)
        stacked = np.concatenate(buffers, axis=0)  # [i1, j2] row-major
        shuffled = shuffle_transpose(stacked.ravel(), n1, n2).reshape(n2, n1)  # [j2, i1]
        src = np.repeat(unit_of_row, n2).reshape(n1, n2)
        dst = np.tile(unit_of_row, n1).reshape(n1, n2)
        outs = []
        for u in range(U):
            blk = shuffled[u * rows_per : (u + 1) * rows_per]
            outs.append(_negacyclic(blk, ctx, depth=1))  # [j2, j1]
        result = np.concatenate(outs, axis=0).T.reshape(N)
    else:
        grid = x.reshape(n1, n2).T  # [j2, j1]
        buffers = []
        for u in range(U):
            blk = grid[u * rows_per : (u + 1) * rows_per]
            blk = _negacyclic(blk, ctx, depth=1, inverse=True)  # [j2, i1]
            buffers.append(blk)
        stacked = np.concatenate(buffers, axis=0)
        shuffled = shuffle_transpose(stacked.ravel(), n2, n1).reshape(n1, n2)  # [i1, j2]
        src = np.repeat(unit_of_row, n1).reshape(n2, n1)
        dst = np.tile(unit_of_row, n2).reshape(n2, n1)
        outs = []
        for u in range(U):
            blk = shuffled[u * rows_per : (u + 1) * rows_per]
            blk = _mm(blk, tw_inv[u * rows_per : (u + 1) * rows_per], ctx)
            outs.append(_negacyclic(blk, ctx, depth=1, inverse=True))  # [i1, i2]
        result = np.concatenate(outs, axis=0).T.reshape(N)
    return result, src, dst


def ntt_composable(limb, plan: NttPlan, ctx: PrimeContext, inverse: bool = False):
    """Run the transform as a submodule dataflow; returns ``(row, trace)``.

    The trace lists elements crossing submodule boundaries during the
    mid-transform shuffle (units are numbered core-major when
    ``cores_cooperating > 1``).
    """
    result, src, dst = _composable(limb, plan, ctx, inverse)
    return result, _count_moves(src, dst, plan.units, "submodule")


def intt_composable(limb, plan: NttPlan, ctx: PrimeContext):
    return ntt_composable(limb, plan, ctx, inverse=True)


@dataclass
class MulticoreResult:
    parts: list[np.ndarray]
    indices: list[np.ndarray]
    trace: ExchangeTrace

    def assemble(self) -> np.ndarray:
        n = sum(len(i) for i in self.indices)
        out = np.empty(n, dtype=np.uint64)
        for idx, vals in zip(self.indices, self.parts):
            out[idx] = vals
        return out


def ntt_multicore(limb, plan: NttPlan, ctx: PrimeContext, inverse: bool = False) -> MulticoreResult:
    """Transform one limb with ``plan.cores_cooperating`` cores.

    Each core starts with a row block (coefficient domain for NTT) and ends
    with a column block; the only inter-core traffic is the exchange after
    the row step (before the column-to-row shuffle for iNTT).
    """
    result, src, dst = _composable(limb, plan, ctx, inverse)
    c, s = plan.cores_cooperating, plan.submodule_count
    trace = _count_moves(src // s, dst // s, c, "core")
    out_idx = row_partition(plan.N, c) if inverse else column_partition(plan.N, c)
    return MulticoreResult([result[i] for i in out_idx], out_idx, trace)


def intt_multicore(limb, plan: NttPlan, ctx: PrimeContext) -> MulticoreResult:
    return ntt_multicore(limb, plan, ctx, inverse=True)
