"""Exact word-sized RNS polynomial arithmetic.

Residues are stored as ``numpy.uint64`` arrays holding values below a prime
that fits in ``word_bits`` (at most 32) bits, so every product of two
residues fits in 64 bits without overflow.  Polynomials live in
``Z_q[X] / (X^N + 1)`` for each prime of the basis.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from functools import cached_property, reduce
from operator import mul
from typing import Sequence

import numpy as np

from .errors import BasisMismatch, DomainMismatch, InsufficientPrimes, InvalidParams

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin; exact for every n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class CkksParams:
    """Ring and basis dimensions: degree N, L q-primes, K p-primes."""

    N: int
    L: int
    K: int
    word_bits: int = 32
    scale_log2: int = 50

    def __post_init__(self):
        if not is_power_of_two(self.N) or self.N < 2:
            raise InvalidParams(f"N must be a power of two >= 2, got {self.N}")
        if self.L < 1 or self.K < 1:
            raise InvalidParams(f"need L >= 1 and K >= 1, got L={self.L}, K={self.K}")
        if not 2 <= self.word_bits <= 32:
            raise InvalidParams(f"word_bits must be in [2, 32], got {self.word_bits}")

    @property
    def log_n(self) -> int:
        return self.N.bit_length() - 1

    def is_default_profile(self) -> bool:
        return self.word_bits == 32 and 47 <= self.scale_log2 <= 55


# ---------------------------------------------------------------------------
# Montgomery arithmetic


@dataclass(frozen=True)
class MontgomeryContext:
    """Constants for word-level Montgomery reduction modulo an odd ``q``.

    The radix is ``R = 2**word_bits`` with ``q < R``.  ``q_neg_inv`` is
    ``-q^{-1} mod R`` so that ``t + m*q`` is divisible by R.
    """

    q: int
    word_bits: int = 32

    @cached_property
    def R(self) -> int:
        return 1 << self.word_bits

    @cached_property
    def mask(self) -> int:
        return self.R - 1

    @cached_property
    def q_neg_inv(self) -> int:
        return (-pow(self.q, -1, self.R)) % self.R

    @cached_property
    def r_mod_q(self) -> int:
        return self.R % self.q

    @cached_property
    def r2(self) -> int:
        return self.R * self.R % self.q

    def to_mont(self, a: int) -> int:
        return a * self.R % self.q

    def from_mont(self, a: int) -> int:
        return mont_mul(a, 1, self)


def mont_reduce(t: int, ctx: MontgomeryContext) -> int:
    """REDC: ``t * R^{-1} mod q`` for ``0 <= t < q*R``."""
    m = ((t & ctx.mask) * ctx.q_neg_inv) & ctx.mask
    u = (t + m * ctx.q) >> ctx.word_bits
    return u - ctx.q if u >= ctx.q else u


def mont_mul(a: int, b: int, ctx: MontgomeryContext) -> int:
    """Montgomery product ``a * b * R^{-1} mod q``."""
    return mont_reduce(a * b, ctx)


def modmul(a: int, b: int, ctx: MontgomeryContext) -> int:
    """Plain ``a * b mod q`` computed with two Montgomery products."""
    return mont_mul(mont_mul(a, b, ctx), ctx.r2, ctx)


def mont_mul_vec(a, b, q, q_neg_inv, word_bits: int = 32):
    """Vectorised Montgomery product on uint64 arrays.

    ``a`` and ``b`` hold values below ``q < 2**word_bits``; ``q`` and
    ``q_neg_inv`` broadcast against them.  The high half is assembled
    without forming ``t + m*q`` (which may exceed 64 bits): the low halves
    of ``t`` and ``m*q`` sum to either 0 or R, i.e. a carry iff ``t``'s low
    half is non-zero.
    """
    w = np.uint64(word_bits)
    mask = np.uint64((1 << word_bits) - 1)
    t = a * b
    lo = t & mask
    m = (lo * q_neg_inv) & mask
    u = (t >> w) + ((m * q) >> w) + (lo != 0).astype(np.uint64)
    return np.where(u >= q, u - q, u)


# ---------------------------------------------------------------------------
# Primes and bases


@dataclass
class PrimeContext:
    """Per-prime constants: Montgomery context and primitive 2N-th root ``psi``."""

    q: int
    N: int
    psi: int
    word_bits: int = 32
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.mont = MontgomeryContext(self.q, self.word_bits)
        self.psi_inv = pow(self.psi, -1, self.q)

    def root(self, n: int) -> int:
        """Primitive 2n-th root of unity for a length-n negacyclic transform."""
        if not is_power_of_two(n) or (2 * self.N) % (2 * n):
            raise InvalidParams(f"length {n} does not divide N={self.N}")
        return pow(self.psi, self.N // n, self.q)

    def to_mont_array(self, values) -> np.ndarray:
        return np.array([v * self.mont.R % self.q for v in values], dtype=np.uint64)

    def cached(self, key, builder):
        if key not in self._tables:
            self._tables[key] = builder()
        return self._tables[key]


def find_ntt_primes(N: int, count: int, word_bits: int = 32) -> list[int]:
    """Largest ``count`` primes below ``2**word_bits`` with ``q = 1 mod 2N``."""
    step = 2 * N
    top = (1 << word_bits) - 1
    q = top - (top - 1) % step
    found = []
    while q > step and len(found) < count:
        if is_prime(q):
            found.append(q)
        q -= step
    if len(found) < count:
        raise InsufficientPrimes(
            f"only {len(found)} primes = 1 mod {step} below 2^{word_bits}, need {count}"
        )
    return found


def find_primitive_root(q: int, order: int, rng: random.Random) -> int:
    """Random element of exact multiplicative ``order`` (a power of two)."""
    if (q - 1) % order:
        raise InvalidParams(f"{order} does not divide {q}-1")
    exponent = (q - 1) // order
    while True:
        cand = pow(rng.randrange(2, q - 1), exponent, q)
        if pow(cand, order // 2, q) == q - 1:
            return cand


@dataclass
class PrimeBasis:
    N: int
    q_primes: tuple[int, ...]
    p_primes: tuple[int, ...]
    contexts: dict[int, PrimeContext]
    word_bits: int = 32

    @property
    def primes(self) -> tuple[int, ...]:
        return self.q_primes + self.p_primes

    def ctx(self, prime: int) -> PrimeContext:
        return self.contexts[prime]

    def q_level(self, level: int) -> tuple[int, ...]:
        return self.q_primes[:level]

    def global_index(self, prime: int) -> int:
        """Position in ``q_primes + p_primes``; used for limb ownership."""
        return self.primes.index(prime)

    def product(self, primes: Sequence[int]) -> int:
        return reduce(mul, primes, 1)

    def fingerprint(self) -> bytes:
        parts = [self.N, self.word_bits, *self.q_primes, -1, *self.p_primes]
        parts += [self.contexts[p].psi for p in self.primes]
        return b",".join(str(v).encode() for v in parts)


def generate_basis(params: CkksParams, seed: int = 0) -> PrimeBasis:
    """Deterministic NTT-friendly basis: L q-primes then K p-primes.

    Primes come from a descending scan below ``2**word_bits``; the seed
    picks each prime's primitive 2N-th root.
    """
    primes = find_ntt_primes(params.N, params.L + params.K, params.word_bits)
    rng = random.Random(seed & 0xFFFFFFFFFFFFFFFF)
    contexts = {}
    for q in primes:
        psi = find_primitive_root(q, 2 * params.N, rng)
        contexts[q] = PrimeContext(q, params.N, psi, params.word_bits)
    return PrimeBasis(
        N=params.N,
        q_primes=tuple(primes[: params.L]),
        p_primes=tuple(primes[params.L :]),
        contexts=contexts,
        word_bits=params.word_bits,
    )


# ---------------------------------------------------------------------------
# Polynomials


class Domain(enum.Enum):
    COEFFICIENT = "coefficient"
    EVALUATION = "evaluation"


@dataclass
class RnsPolynomial:
    """``len(primes) x N`` residue matrix, one row (limb) per prime."""

    basis: PrimeBasis
    primes: tuple[int, ...]
    residues: np.ndarray
    domain: Domain = Domain.COEFFICIENT

    def __post_init__(self):
        self.primes = tuple(self.primes)
        self.residues = np.asarray(self.residues, dtype=np.uint64)
        if self.residues.shape != (len(self.primes), self.basis.N):
            raise BasisMismatch(
                f"residue shape {self.residues.shape} != ({len(self.primes)}, {self.basis.N})"
            )

    @property
    def N(self) -> int:
        return self.basis.N

    @property
    def moduli(self) -> np.ndarray:
        """Primes as a column vector for row-wise broadcasting."""
        return np.array(self.primes, dtype=np.uint64)[:, None]

    @classmethod
    def zeros(cls, basis, primes, domain=Domain.COEFFICIENT):
        return cls(basis, primes, np.zeros((len(primes), basis.N), dtype=np.uint64), domain)

    @classmethod
    def random(cls, basis, primes, rng: np.random.Generator, domain=Domain.COEFFICIENT):
        rows = [rng.integers(0, q, size=basis.N, dtype=np.uint64) for q in primes]
        return cls(basis, primes, np.array(rows, dtype=np.uint64).reshape(len(primes), basis.N), domain)

    @classmethod
    def from_integers(cls, basis, primes, coeffs: Sequence[int]):
        """Reduce big-integer coefficients into every prime of ``primes``."""
        if len(coeffs) != basis.N:
            raise BasisMismatch(f"expected {basis.N} coefficients, got {len(coeffs)}")
        rows = [[c % q for c in coeffs] for q in primes]
        return cls(basis, primes, np.array(rows, dtype=np.uint64).reshape(len(primes), basis.N))

    def limb(self, prime: int) -> np.ndarray:
        return self.residues[self.primes.index(prime)]

    def subset(self, primes: Sequence[int]) -> "RnsPolynomial":
        rows = [self.primes.index(p) for p in primes]
        return RnsPolynomial(self.basis, tuple(primes), self.residues[rows].copy(), self.domain)

    def with_residues(self, residues, domain=None) -> "RnsPolynomial":
        return RnsPolynomial(self.basis, self.primes, residues, domain or self.domain)

    def check_invariants(self) -> None:
        if np.any(self.residues >= self.moduli):
            raise BasisMismatch("residue outside [0, q)")

    def __eq__(self, other):
        if not isinstance(other, RnsPolynomial):
            return NotImplemented
        return (
            self.primes == other.primes
            and self.domain == other.domain
            and np.array_equal(self.residues, other.residues)
        )


@dataclass
class Ciphertext:
    c0: RnsPolynomial
    c1: RnsPolynomial

    def __post_init__(self):
        if self.c0.primes != self.c1.primes:
            raise BasisMismatch("ciphertext halves use different primes")
        if self.c0.domain != self.c1.domain:
            raise DomainMismatch("ciphertext halves are in different domains")

    @property
    def level(self) -> int:
        return len(self.c0.primes)


# ---------------------------------------------------------------------------
# Element-wise functions


class EwKind(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MULT = "mult"
    CONST_MULT = "const_mult"
    MULT_ACCUMULATE = "mult_accumulate"


def _mont_columns(primes):
    ctxs = [MontgomeryContext(q) for q in primes]
    q = np.array(primes, dtype=np.uint64)[:, None]
    qn = np.array([c.q_neg_inv for c in ctxs], dtype=np.uint64)[:, None]
    r2 = np.array([c.r2 for c in ctxs], dtype=np.uint64)[:, None]
    return q, qn, r2


def mod_mul_rows(a: np.ndarray, b: np.ndarray, primes) -> np.ndarray:
    """Row-wise ``a * b mod q_i`` through the Montgomery path."""
    q, qn, r2 = _mont_columns(primes)
    t = mont_mul_vec(a, b, q, qn)
    return mont_mul_vec(t, np.broadcast_to(r2, t.shape), q, qn)


def _check_pair(x: RnsPolynomial, y: RnsPolynomial):
    if x.basis is not y.basis or x.primes != y.primes:
        raise BasisMismatch("operands use different bases or active primes")
    if x.domain != y.domain:
        raise DomainMismatch(f"operand domains differ: {x.domain} vs {y.domain}")


def ew_op(kind: EwKind | str, x: RnsPolynomial, y, acc: RnsPolynomial | None = None) -> RnsPolynomial:
    """Per-residue modular arithmetic.

    ``y`` is a polynomial for Add/Sub/Mult/MultAccumulate and a sequence
    of per-prime scalars for ConstMult.  MultAccumulate returns
    ``acc + x*y`` (``acc`` defaults to zero).
    """
    kind = EwKind(kind)
    q = x.moduli
    if kind is EwKind.CONST_MULT:
        y = list(y)
        if len(y) != len(x.primes):
            raise BasisMismatch("need one constant per active prime")
        consts = np.array([int(c) % p for c, p in zip(y, x.primes)], dtype=np.uint64)
        prod = mod_mul_rows(x.residues, np.broadcast_to(consts[:, None], x.residues.shape), x.primes)
        return x.with_residues(prod)
    _check_pair(x, y)
    a, b = x.residues, y.residues
    if kind is EwKind.ADD:
        out = (a + b) % q
    elif kind is EwKind.SUB:
        out = (a + q - b) % q
    else:
        out = mod_mul_rows(a, b, x.primes)
        if kind is EwKind.MULT_ACCUMULATE and acc is not None:
            _check_pair(x, acc)
            out = (out + acc.residues) % q
    return x.with_residues(out)


# ---------------------------------------------------------------------------
# Automorphism


def galois_element(r: int, N: int) -> int:
    return pow(5, r, 2 * N)


def automorphism(x: RnsPolynomial, r: int) -> RnsPolynomial:
    """Apply ``X -> X^(5^r)`` over ``X^N + 1`` in the coefficient domain.

    Coefficient ``i`` lands at ``i * 5^r mod N``, negated when
    ``floor(i * 5^r / N)`` is odd.
    """
    if x.domain is not Domain.COEFFICIENT:
        raise DomainMismatch("automorphism requires the coefficient domain")
    if r < 0:
        raise InvalidParams("rotation amount must be non-negative")
    N = x.N
    g = galois_element(r, N)
    idx = np.arange(N, dtype=np.int64) * g
    dest = idx % N
    negate = (idx // N) % 2 == 1
    q = x.moduli
    src = x.residues
    vals = np.where(negate[None, :], (q - src) % q, src)
    out = np.empty_like(src)
    out[:, dest] = vals
    return x.with_residues(out)


# ---------------------------------------------------------------------------
# CRT oracle utilities


def crt_reconstruct(x: RnsPolynomial) -> list[int]:
    """Big-integer coefficients in ``[0, prod(primes))`` matching every residue."""
    if x.domain is not Domain.COEFFICIENT:
        raise DomainMismatch("CRT reconstruction expects coefficient domain")
    Q = reduce(mul, x.primes, 1)
    terms = []
    for q in x.primes:
        Qi = Q // q
        terms.append((Qi * pow(Qi, -1, q), q))
    out = []
    rows = [row.tolist() for row in x.residues]
    for j in range(x.N):
        out.append(sum(rows[i][j] * w for i, (w, _) in enumerate(terms)) % Q)
    return out
