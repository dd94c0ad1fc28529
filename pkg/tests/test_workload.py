import pytest
from hypothesis import given, strategies as st

from mcmfhe.errors import InvalidParams, MalformedTrace
from mcmfhe.rns import CkksParams
from mcmfhe.workload import (
    HeOp,
    OpKind,
    WORKLOADS,
    expand_boot_segment,
    format_trace,
    gen_workload,
    limbs_per_level,
    parse_trace,
)

P48 = CkksParams(2**12, 48, 12)


def test_boot_like_has_nine_rescales_per_segment():
    for segments in (1, 3):
        ops = gen_workload("BootLike", P48, segments=segments)
        boots = [i for i, op in enumerate(ops) if op.kind is OpKind.BOOT]
        assert len(boots) == segments
        bounds = boots + [len(ops)]
        for a, b in zip(bounds, bounds[1:]):
            assert sum(op.kind is OpKind.RESCALE for op in ops[a:b]) == 9


def test_boot_like_levels_descend():
    ops = gen_workload("BootLike", P48)
    levels = [op.level for op in ops if op.kind is OpKind.RESCALE]
    assert levels == sorted(levels, reverse=True)
    assert levels[-1] > limbs_per_level(P48)
    kinds = {op.kind for op in ops}
    assert {OpKind.HMULT, OpKind.HROT, OpKind.HADD, OpKind.RESCALE, OpKind.BOOT} <= kinds


def test_boot_segment_expansion():
    ops = gen_workload("BootLike", P48)
    body = expand_boot_segment(ops[0], P48)
    assert body[-1].output == ops[0].output
    assert body[0].level == P48.L
    assert all(op.kind is not OpKind.BOOT for op in body)
    assert body == expand_boot_segment(ops[0], P48)


def test_ks_micro_and_sweep_unit():
    (op,) = gen_workload("KsMicro", P48)
    assert op.kind is OpKind.HMULT and op.level == P48.L
    assert [o.kind for o in gen_workload("SweepUnit", P48)] == [
        OpKind.HMULT, OpKind.HROT, OpKind.HADD, OpKind.RESCALE]
    assert set(WORKLOADS) == {"BootLike", "KsMicro", "SweepUnit"}


def test_generators_deterministic():
    assert gen_workload("BootLike", P48, 2, seed=3) == gen_workload("BootLike", P48, 2, seed=3)
    with pytest.raises(InvalidParams):
        gen_workload("Nope", P48)
    with pytest.raises(InvalidParams):
        gen_workload("BootLike", CkksParams(2**12, 20, 4))


def test_parse_defaults_chain_previous_output():
    ops = parse_trace("""
        # comment line
        HMult level=10 in=a,b out=c
        HRot level=10 r=3
        Rescale level=10   # trailing comment
    """)
    assert ops[0].inputs == ("a", "b")
    assert ops[1].inputs == ("c",) and ops[1].r == 3
    assert ops[2].inputs == (ops[1].output,)


@pytest.mark.parametrize("text", [
    "Frobnicate level=3",
    "HAdd in=a,b",
    "HAdd level=x in=a,b",
    "HAdd level=3 in=a",
    "HRot level=3 in=a",
    "HMult level=0 in=a,b",
    "HAdd level=3 level=4 in=a,b",
    "HAdd level=3 junk in=a,b",
])
def test_malformed_traces(text):
    with pytest.raises(MalformedTrace):
        parse_trace(text)


def test_format_parse_round_trip_generated():
    for kind in WORKLOADS:
        ops = gen_workload(kind, P48)
        assert parse_trace(format_trace(ops)) == ops


_names = st.text("abcxyz0123.", min_size=1, max_size=5)


@st.composite
def _ops(draw):
    kind = draw(st.sampled_from(list(OpKind)))
    arity = 2 if kind in (OpKind.HMULT, OpKind.HADD) else 1
    r = draw(st.integers(1, 100)) if kind is OpKind.HROT else 0
    return HeOp(kind, draw(st.integers(1, 60)), tuple(draw(_names) for _ in range(arity)), draw(_names), r)


@given(st.lists(_ops(), max_size=12))
def test_format_parse_round_trip_property(ops):
    assert parse_trace(format_trace(ops)) == ops
