import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import direct_ntt, schoolbook_negacyclic
from mcmfhe.errors import InvalidPlan, NotSquare
from mcmfhe.ntt import (
    NttPlan,
    bit_reverse_indices,
    butterfly_intt,
    butterfly_ntt,
    column_partition,
    intt_composable,
    intt_four_step,
    intt_multicore,
    intt_reference,
    ntt_composable,
    ntt_four_step,
    ntt_multicore,
    ntt_reference,
    perfect_shuffle,
    row_partition,
    shuffle_transpose,
    twiddle_table,
    valid_plans,
)
from mcmfhe.rns import CkksParams, generate_basis


@pytest.fixture(scope="module")
def ctx256():
    b = generate_basis(CkksParams(2**8, 1, 1), seed=11)
    return b.ctx(b.q_primes[0])


def test_butterfly_examples():
    assert butterfly_ntt(3, 5, 2, 17) == (13, 10)
    assert butterfly_ntt(7, 0, 5, 17) == (7, 7)
    assert butterfly_intt(3, 5, 2, 17) == (8, 13)
    assert butterfly_intt(6, 6, 9, 17) == (12, 0)


@given(st.integers(3, 2**32 - 1), st.data())
def test_butterfly_oracle(q, data):
    a, b, w = (data.draw(st.integers(0, q - 1)) for _ in range(3))
    assert butterfly_ntt(a, b, w, q) == ((a + b * w) % q, (a - b * w) % q)
    assert butterfly_intt(a, b, w, q) == ((a + b) % q, (a - b) * w % q)


def test_bit_reverse():
    assert bit_reverse_indices(8).tolist() == [0, 4, 2, 6, 1, 5, 3, 7]


def test_twiddles_reduced(ctx256):
    t = twiddle_table(ctx256, 256)
    assert t.check() and len(t.forward) == 256


@pytest.mark.parametrize("N", [8, 16, 64, 256])
def test_reference_matches_direct_evaluation(N):
    b = generate_basis(CkksParams(N, 1, 1), seed=N)
    ctx = b.ctx(b.q_primes[0])
    rng = np.random.default_rng(N)
    x = rng.integers(0, ctx.q, N, dtype=np.uint64)
    assert ntt_reference(x, ctx).tolist() == direct_ntt(x.tolist(), ctx.q, ctx.psi)


@pytest.mark.parametrize("logn", range(3, 13))
def test_inverse_identity(logn):
    N = 2**logn
    b = generate_basis(CkksParams(N, 1, 1))
    ctx = b.ctx(b.q_primes[0])
    x = np.random.default_rng(logn).integers(0, ctx.q, (4, N), dtype=np.uint64)
    assert np.array_equal(intt_reference(ntt_reference(x, ctx), ctx), x)
    assert not ntt_reference(np.zeros(N, dtype=np.uint64), ctx).any()


@pytest.mark.parametrize("N", [16, 64, 256])
def test_convolution_theorem(N):
    b = generate_basis(CkksParams(N, 1, 1), seed=2)
    ctx = b.ctx(b.q_primes[0])
    rng = np.random.default_rng(N)
    x = rng.integers(0, ctx.q, N, dtype=np.uint64)
    y = rng.integers(0, ctx.q, N, dtype=np.uint64)
    prod = [int(u) * int(v) % ctx.q for u, v in zip(ntt_reference(x, ctx), ntt_reference(y, ctx))]
    got = intt_reference(np.array(prod, dtype=np.uint64), ctx)
    assert got.tolist() == schoolbook_negacyclic(x.tolist(), y.tolist(), ctx.q)


def test_linearity(ctx256):
    rng = np.random.default_rng(5)
    q = ctx256.q
    x, y = rng.integers(0, q, (2, 256), dtype=np.uint64)
    a, b = 12345, 678910
    lhs = ntt_reference(np.array([(a * int(u) + b * int(v)) % q for u, v in zip(x, y)], dtype=np.uint64), ctx256)
    X, Y = ntt_reference(x, ctx256), ntt_reference(y, ctx256)
    assert lhs.tolist() == [(a * int(u) + b * int(v)) % q for u, v in zip(X, Y)]


def test_four_step(ctx256):
    rng = np.random.default_rng(9)
    x = rng.integers(0, ctx256.q, 256, dtype=np.uint64)
    assert np.array_equal(ntt_four_step(x, ctx256), ntt_reference(x, ctx256))
    assert np.array_equal(intt_four_step(ntt_four_step(x, ctx256), ctx256), x)
    assert not ntt_four_step(np.zeros(256, dtype=np.uint64), ctx256).any()
    delta = np.zeros(256, dtype=np.uint64)
    delta[0] = 7
    assert set(ntt_four_step(delta, ctx256).tolist()) == {7}


def test_four_step_not_square():
    b = generate_basis(CkksParams(2**7, 1, 1))
    with pytest.raises(NotSquare):
        ntt_four_step(np.zeros(128, dtype=np.uint64), b.ctx(b.q_primes[0]))


def test_perfect_shuffle_transpose():
    a = np.arange(8)
    assert perfect_shuffle(a).tolist() == [0, 4, 1, 5, 2, 6, 3, 7]
    for rows, cols in [(4, 4), (16, 16), (8, 8)]:
        m = np.arange(rows * cols)
        assert shuffle_transpose(m, rows, cols).tolist() == m.reshape(rows, cols).T.ravel().tolist()


def test_valid_plan_enumeration():
    # s in {1,2,4,8,16}, c | N^(1/4), s*c | sqrt(N)
    for N, expected in [(2**8, 12), (2**12, 19), (2**16, 25)]:
        r4 = round(N ** 0.25)
        brute = [(s, c) for c in range(1, r4 + 1) for s in (1, 2, 4, 8, 16)
                 if r4 % c == 0 and round(N ** 0.5) % (s * c) == 0]
        assert len(brute) == expected
        assert sorted((p.submodule_count, p.cores_cooperating) for p in valid_plans(N)) == sorted(brute)
    with pytest.raises(InvalidPlan):
        NttPlan(2**8, 3).validate()
    with pytest.raises(InvalidPlan):
        NttPlan(2**8, 1, 3).validate()
    with pytest.raises(InvalidPlan):
        NttPlan(2**10).validate()


def test_composable_examples(ctx256):
    x = np.random.default_rng(1).integers(0, ctx256.q, 256, dtype=np.uint64)
    ref = ntt_reference(x, ctx256)
    out, trace = ntt_composable(x, NttPlan(256, 1), ctx256)
    assert np.array_equal(out, ref) and len(trace) == 0
    out, trace = ntt_composable(x, NttPlan(256, 2), ctx256)
    assert np.array_equal(out, ref) and trace.total_sent == 128
    for s in (1, 2, 4):
        out, trace = ntt_composable(x, NttPlan(256, s), ctx256)
        assert np.array_equal(out, ref)
        assert trace.total_sent == 256 * (s - 1) // s
        back, _ = intt_composable(out, NttPlan(256, s), ctx256)
        assert np.array_equal(back, x)


def test_multicore_examples(ctx256):
    x = np.random.default_rng(2).integers(0, ctx256.q, 256, dtype=np.uint64)
    ref = ntt_reference(x, ctx256)
    res = ntt_multicore(x, NttPlan(256, 1, 1), ctx256)
    assert len(res.trace) == 0 and np.array_equal(res.assemble(), ref)
    res = ntt_multicore(x, NttPlan(256, 1, 4), ctx256)
    assert np.array_equal(res.assemble(), ref)
    for core in range(4):
        assert res.trace.sent_by(core) == 48
        assert res.trace.received_by(core) == 48
    inv = intt_multicore(ref, NttPlan(256, 2, 2), ctx256)
    assert np.array_equal(inv.assemble(), x)


def test_partitions_cover():
    for parts in (1, 2, 4):
        for fn in (row_partition, column_partition):
            idx = np.concatenate(fn(256, parts))
            assert sorted(idx.tolist()) == list(range(256))


def test_multicore_trace_matches_index_map(ctx256):
    # coefficient j moves from the core holding its row block to the one holding its column block
    c = 4
    res = ntt_multicore(np.zeros(256, dtype=np.uint64), NttPlan(256, 1, c), ctx256)
    owner_in = np.empty(256, dtype=int)
    for k, idx in enumerate(row_partition(256, c)):
        owner_in[idx] = k
    assert res.trace.total_sent == 256 * (c - 1) // c
    assert res.trace.total_sent == res.trace.total_received
    assert {(s, d) for s, d, _ in res.trace.records} == {(s, d) for s in range(c) for d in range(c) if s != d}


def test_random_plans_equivalent():
    rng = random.Random(4)
    b = generate_basis(CkksParams(2**12, 1, 1), seed=1)
    ctx = b.ctx(b.q_primes[0])
    x = np.random.default_rng(3).integers(0, ctx.q, 2**12, dtype=np.uint64)
    ref = ntt_reference(x, ctx)
    for plan in rng.sample(valid_plans(2**12), 6):
        out, _ = ntt_composable(x, plan, ctx)
        assert np.array_equal(out, ref)
        assert np.array_equal(ntt_multicore(x, plan, ctx).assemble(), ref)
