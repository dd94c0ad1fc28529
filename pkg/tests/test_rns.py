import random

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from mcmfhe.errors import BasisMismatch, DomainMismatch, InsufficientPrimes, InvalidParams
from mcmfhe.rns import (
    CkksParams,
    Domain,
    EwKind,
    MontgomeryContext,
    PrimeBasis,
    RnsPolynomial,
    Ciphertext,
    automorphism,
    crt_reconstruct,
    ew_op,
    find_ntt_primes,
    generate_basis,
    is_prime,
    mod_mul_rows,
    modmul,
    mont_mul,
    mont_mul_vec,
)


def substitute(coeffs, k, N):
    """Oracle: evaluate a(X^k) mod X^N + 1 by direct substitution."""
    out = [0] * N
    for i, c in enumerate(coeffs):
        e = (i * k) % (2 * N)
        if e < N:
            out[e] += c
        else:
            out[e - N] -= c
    return out


def test_is_prime_matches_sympy():
    rng = random.Random(0)
    nums = [rng.randrange(2, 2**32) for _ in range(3000)] + list(range(0, 2000))
    for n in nums:
        assert is_prime(n) == sympy.isprime(n), n


def test_small_basis_congruence():
    basis = generate_basis(CkksParams(2**4, 2, 1), seed=1)
    assert len(set(basis.primes)) == 3
    assert all(q % 32 == 1 for q in basis.primes)


def test_default_basis_sixty_word_primes():
    basis = generate_basis(CkksParams(2**16, 48, 12), seed=0)
    assert len(basis.primes) == 60
    assert len(set(basis.primes)) == 60
    for q in basis.primes:
        assert q < 2**32 and q % (2**17) == 1
        assert sympy.isprime(q)
        psi = basis.ctx(q).psi
        assert pow(psi, 2**17, q) == 1 and pow(psi, 2**16, q) == q - 1


def test_insufficient_primes_matches_enumeration():
    # brute force: primes below 2^6 congruent to 1 mod 32
    candidates = [p for p in range(2, 64) if sympy.isprime(p) and p % 32 == 1]
    assert len(candidates) < 3
    with pytest.raises(InsufficientPrimes):
        generate_basis(CkksParams(2**4, 2, 1, word_bits=6))


def test_invalid_params():
    with pytest.raises(InvalidParams):
        CkksParams(12, 2, 1)
    with pytest.raises(InvalidParams):
        CkksParams(16, 0, 1)


def test_basis_deterministic():
    p = CkksParams(2**6, 4, 2)
    assert generate_basis(p, 5).fingerprint() == generate_basis(p, 5).fingerprint()
    assert generate_basis(p, 5).fingerprint() != generate_basis(p, 6).fingerprint()


def test_primes_descending_scan():
    primes = find_ntt_primes(2**10, 5)
    assert primes == sorted(primes, reverse=True)
    # nothing skipped: every prime = 1 mod 2N between the smallest found and 2^32
    step = 2**11
    expected = [q for q in range(primes[-1], 2**32, step) if sympy.isprime(q)]
    assert sorted(expected, reverse=True) == primes


def test_modmul_identities():
    for q in (97, 12289, find_ntt_primes(16, 1)[0]):
        ctx = MontgomeryContext(q)
        for x in (0, 1, 5, q - 1):
            assert modmul(0, x, ctx) == 0
            assert modmul(1, x, ctx) == x


def test_modmul_double_width_oracle():
    rng = random.Random(42)
    for bits in (8, 16, 24, 31, 32):
        for _ in range(2000):
            q = rng.randrange(3, 2**bits) | 1
            ctx = MontgomeryContext(q)
            a, b = rng.randrange(q), rng.randrange(q)
            assert modmul(a, b, ctx) == a * b % q
            assert mont_mul(a, b, ctx) == a * b * pow(2**32, -1, q) % q


def test_mont_mul_vec_matches_scalar():
    rng = np.random.default_rng(3)
    primes = find_ntt_primes(2**8, 4)
    q = np.array(primes, dtype=np.uint64)[:, None]
    qn = np.array([MontgomeryContext(p).q_neg_inv for p in primes], dtype=np.uint64)[:, None]
    a = np.array([rng.integers(0, p, 2500, dtype=np.uint64) for p in primes])
    b = np.array([rng.integers(0, p, 2500, dtype=np.uint64) for p in primes])
    got = mont_mul_vec(a, b, q, qn)
    for i, p in enumerate(primes):
        rinv = pow(2**32, -1, p)
        want = [int(x) * int(y) * rinv % p for x, y in zip(a[i], b[i])]
        assert got[i].tolist() == want
    prod = mod_mul_rows(a, b, primes)
    for i, p in enumerate(primes):
        assert prod[i].tolist() == [int(x) * int(y) % p for x, y in zip(a[i], b[i])]


@given(st.data())
def test_modmul_property(data):
    q = data.draw(st.integers(3, 2**32 - 1).filter(lambda v: v % 2))
    a = data.draw(st.integers(0, q - 1))
    b = data.draw(st.integers(0, q - 1))
    assert modmul(a, b, MontgomeryContext(q)) == a * b % q


def _single_prime_basis(q, N):
    from mcmfhe.rns import PrimeContext, find_primitive_root

    psi = find_primitive_root(q, 2 * N, random.Random(0)) if (q - 1) % (2 * N) == 0 else 1
    return PrimeBasis(N, (q,), (), {q: PrimeContext(q, N, psi)})


def test_ew_mult_small():
    basis = _single_prime_basis(97, 4)
    x = RnsPolynomial(basis, (97,), [[1, 2, 3, 4]])
    assert ew_op("mult", x, x).residues.tolist() == [[1, 4, 9, 16]]


def test_ew_add_identity_and_errors(basis_small, rng):
    x = RnsPolynomial.random(basis_small, basis_small.q_primes, rng)
    zero = RnsPolynomial.zeros(basis_small, basis_small.q_primes)
    assert ew_op(EwKind.ADD, x, zero) == x
    y = RnsPolynomial.random(basis_small, basis_small.q_primes[:3], rng)
    with pytest.raises(BasisMismatch):
        ew_op("add", x, y)
    with pytest.raises(DomainMismatch):
        ew_op("add", x, x.with_residues(x.residues, Domain.EVALUATION))
    with pytest.raises(BasisMismatch):
        ew_op("const_mult", x, [1, 2])


def test_ew_sub_const_mult_oracle(basis_small, rng):
    primes = basis_small.q_primes
    x = RnsPolynomial.random(basis_small, primes, rng)
    y = RnsPolynomial.random(basis_small, primes, rng)
    d = ew_op("sub", x, y)
    consts = [rng.integers(0, 2**40) for _ in primes]
    c = ew_op("const_mult", x, consts)
    for i, q in enumerate(primes):
        assert d.residues[i].tolist() == [(int(a) - int(b)) % q for a, b in zip(x.residues[i], y.residues[i])]
        assert c.residues[i].tolist() == [int(a) * int(consts[i]) % q for a in x.residues[i]]


def test_mult_accumulate_chain_equals_fold(basis_small, rng):
    primes = basis_small.q_primes
    xs = [RnsPolynomial.random(basis_small, primes, rng) for _ in range(4)]
    ys = [RnsPolynomial.random(basis_small, primes, rng) for _ in range(4)]
    acc = None
    for x, y in zip(xs, ys):
        acc = ew_op("mult_accumulate", x, y, acc)
    fold = RnsPolynomial.zeros(basis_small, primes)
    for x, y in zip(xs, ys):
        fold = ew_op("add", fold, ew_op("mult", x, y))
    assert acc == fold


def test_ciphertext_invariants(basis_small, rng):
    a = RnsPolynomial.random(basis_small, basis_small.q_primes, rng)
    b = RnsPolynomial.random(basis_small, basis_small.q_primes[:2], rng)
    with pytest.raises(BasisMismatch):
        Ciphertext(a, b)
    with pytest.raises(DomainMismatch):
        Ciphertext(a, a.with_residues(a.residues, Domain.EVALUATION))
    assert Ciphertext(a, a).level == len(basis_small.q_primes)


def test_automorphism_x_squared_n8():
    basis = generate_basis(CkksParams(8, 1, 1))
    q = basis.q_primes[0]
    x = RnsPolynomial.from_integers(basis, (q,), [0, 0, 1, 0, 0, 0, 0, 0])
    out = automorphism(x, 1)
    assert out.residues[0].tolist() == [0, 0, q - 1, 0, 0, 0, 0, 0]
    assert automorphism(x, 0) == x


def test_automorphism_rejects_evaluation(basis_small, rng):
    x = RnsPolynomial.random(basis_small, basis_small.q_primes, rng, Domain.EVALUATION)
    with pytest.raises(DomainMismatch):
        automorphism(x, 1)


@pytest.mark.parametrize("N", [8, 16, 32, 64])
def test_automorphism_composition_and_inverse(N):
    basis = generate_basis(CkksParams(N, 1, 1))
    q = basis.q_primes[0]
    rng = np.random.default_rng(N)
    x = RnsPolynomial.random(basis, (q,), rng)
    order = N // 2  # multiplicative order of 5 mod 2N
    for r1 in range(0, 2 * N, 3):
        for r2 in (1, 2, 5):
            assert automorphism(automorphism(x, r1), r2) == automorphism(x, r1 + r2)
        assert automorphism(automorphism(x, r1), (-r1) % order) == x
    g = [int(v) for v in x.residues[0]]
    for r in (1, 3, 7):
        want = [v % q for v in substitute(g, pow(5, r, 2 * N), N)]
        assert automorphism(x, r).residues[0].tolist() == want


def test_crt_examples():
    basis = _single_prime_basis(97, 4)
    x = RnsPolynomial(basis, (97,), [[1, 2, 3, 96]])
    assert crt_reconstruct(x) == [1, 2, 3, 96]
    b2 = PrimeBasis(4, (97, 193), (), {**basis.contexts, 193: _single_prime_basis(193, 4).contexts[193]})
    y = RnsPolynomial(b2, (97, 193), [[5, 0, 0, 0], [5, 0, 0, 0]])
    assert crt_reconstruct(y)[0] == 5


def test_crt_round_trip(basis_small, rng):
    x = RnsPolynomial.random(basis_small, basis_small.q_primes, rng)
    ints = crt_reconstruct(x)
    assert RnsPolynomial.from_integers(basis_small, basis_small.q_primes, ints) == x
    x.check_invariants()
