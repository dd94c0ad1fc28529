"""Homomorphic-operation traces: synthetic generators and a text format.

Trace file grammar, one operation per line (``#`` starts a comment)::

    <Kind> level=<int> [r=<int>] [in=<name>[,<name>]] [out=<name>]

``Kind`` is one of HMult, HAdd, PMult, PAdd, HRot, Rescale, BootSegment.
``r`` is required for HRot.  When ``in`` is omitted the operation consumes
the previous line's output; when ``out`` is omitted a fresh name is made.
"""
from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass

from .errors import InvalidParams, MalformedTrace
from .rns import CkksParams


class OpKind(str, enum.Enum):
    HMULT = "HMult"
    HADD = "HAdd"
    PMULT = "PMult"
    PADD = "PAdd"
    HROT = "HRot"
    RESCALE = "Rescale"
    BOOT = "BootSegment"


_ARITY = {
    OpKind.HMULT: 2,
    OpKind.HADD: 2,
    OpKind.PMULT: 1,
    OpKind.PADD: 1,
    OpKind.HROT: 1,
    OpKind.RESCALE: 1,
    OpKind.BOOT: 1,
}


@dataclass(frozen=True)
class HeOp:
    kind: OpKind
    level: int
    inputs: tuple[str, ...]
    output: str
    r: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        if self.level < 1:
            raise MalformedTrace(f"{self.kind.value}: level must be positive")
        if len(self.inputs) != _ARITY[self.kind]:
            raise MalformedTrace(
                f"{self.kind.value} takes {_ARITY[self.kind]} operand(s), got {len(self.inputs)}"
            )
        if self.kind is OpKind.HROT and self.r <= 0:
            raise MalformedTrace("HRot needs a positive rotation amount r")

    def to_line(self) -> str:
        parts = [self.kind.value, f"level={self.level}"]
        if self.kind is OpKind.HROT:
            parts.append(f"r={self.r}")
        parts.append("in=" + ",".join(self.inputs))
        parts.append(f"out={self.output}")
        return " ".join(parts)


def limbs_per_level(params: CkksParams) -> int:
    """Limbs dropped by one rescale: enough words to hold the scale."""
    return -(-params.scale_log2 // params.word_bits)


# ---------------------------------------------------------------------------
# Text format

_FIELD = re.compile(r"^(level|r|in|out)=(\S*)$")


def parse_trace(text: str) -> list[HeOp]:
    ops: list[HeOp] = []
    prev = "x0"
    fresh = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *fields = line.split()
        try:
            kind = OpKind(head)
        except ValueError:
            raise MalformedTrace(f"line {lineno}: unknown operation {head!r}") from None
        kv = {}
        for f in fields:
            m = _FIELD.match(f)
            if not m:
                raise MalformedTrace(f"line {lineno}: cannot parse field {f!r}")
            if m.group(1) in kv:
                raise MalformedTrace(f"line {lineno}: duplicate field {m.group(1)!r}")
            kv[m.group(1)] = m.group(2)
        if "level" not in kv:
            raise MalformedTrace(f"line {lineno}: missing level=")
        try:
            level = int(kv["level"])
            r = int(kv.get("r", "0"))
        except ValueError:
            raise MalformedTrace(f"line {lineno}: level and r must be integers") from None
        if "in" in kv:
            inputs = tuple(n for n in kv["in"].split(",") if n)
        else:
            inputs = (prev,) * _ARITY[kind]
        if "out" in kv and kv["out"]:
            out = kv["out"]
        else:
            fresh += 1
            out = f"t{fresh}"
        try:
            ops.append(HeOp(kind, level, inputs, out, r))
        except MalformedTrace as exc:
            raise MalformedTrace(f"line {lineno}: {exc}") from None
        prev = out
    return ops


def format_trace(ops: list[HeOp]) -> str:
    return "".join(op.to_line() + "\n" for op in ops)


# ---------------------------------------------------------------------------
# Generators

BOOT_LEVELS = (3, 8, 3)  # coefficient-to-slot, modular reduction, slot-to-coefficient
BSGS_ROTATIONS = 4


def boot_output_level(params: CkksParams, boot_levels=BOOT_LEVELS) -> int:
    return params.L - sum(boot_levels) * limbs_per_level(params)


def app_levels(params: CkksParams, boot_levels=BOOT_LEVELS) -> int:
    """Rescales available between two bootstraps (one level is kept as base)."""
    lpl = limbs_per_level(params)
    return (boot_output_level(params, boot_levels) - lpl) // lpl


class _Namer:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.n = 0

    def __call__(self) -> str:
        self.n += 1
        return f"{self.prefix}{self.n}"


def _linear_transform(ops, x, level, lpl, rng, name, kind_tag):
    """One baby-step/giant-step level: rotations, plaintext products, sum, rescale."""
    terms = []
    for _ in range(BSGS_ROTATIONS):
        rot = name()
        ops.append(HeOp(OpKind.HROT, level, (x,), rot, rng.randrange(1, 64)))
        prod = name()
        ops.append(HeOp(OpKind.PMULT, level, (rot,), prod))
        terms.append(prod)
    acc = terms[0]
    for t in terms[1:]:
        nxt = name()
        ops.append(HeOp(OpKind.HADD, level, (acc, t), nxt))
        acc = nxt
    out = name()
    ops.append(HeOp(OpKind.RESCALE, level, (acc,), out))
    return out, level - lpl


def expand_boot_segment(op: HeOp, params: CkksParams, seed: int = 0, boot_levels=BOOT_LEVELS) -> list[HeOp]:
    """Structural stand-in for one bootstrap, starting from the raised top level."""
    lpl = limbs_per_level(params)
    rng = random.Random(seed)
    name = _Namer(f"{op.output}.b")
    ops: list[HeOp] = []
    x, level = op.inputs[0], params.L
    cts, evalmod, stc = boot_levels
    for _ in range(cts):
        x, level = _linear_transform(ops, x, level, lpl, rng, name, "cts")
    for _ in range(evalmod):
        sq = name()
        ops.append(HeOp(OpKind.HMULT, level, (x, x), sq))
        acc = name()
        ops.append(HeOp(OpKind.PADD, level, (sq,), acc))
        x = name()
        ops.append(HeOp(OpKind.RESCALE, level, (acc,), x))
        level -= lpl
    for _ in range(stc):
        x, level = _linear_transform(ops, x, level, lpl, rng, name, "stc")
    if level < lpl:
        raise InvalidParams(f"L={params.L} is too small for the bootstrap recipe")
    last = ops[-1]
    ops[-1] = HeOp(last.kind, last.level, last.inputs, op.output, last.r)
    return ops


def gen_workload(kind: str, params: CkksParams, segments: int = 1, seed: int = 0) -> list[HeOp]:
    """Deterministic synthetic traces.

    * ``KsMicro``: one HMult at the top level (a single key-switching).
    * ``SweepUnit``: HMult, HRot, HAdd, Rescale at the top level.
    * ``BootLike``: per segment one BootSegment followed by the application
      levels it leaves (HMult, HRot, HAdd, Rescale each).
    """
    L = params.L
    if kind == "KsMicro":
        return [HeOp(OpKind.HMULT, L, ("x0", "x1"), "y")]
    if kind == "SweepUnit":
        return [
            HeOp(OpKind.HMULT, L, ("x0", "x1"), "t1"),
            HeOp(OpKind.HROT, L, ("t1",), "t2", 1),
            HeOp(OpKind.HADD, L, ("t1", "t2"), "t3"),
            HeOp(OpKind.RESCALE, L, ("t3",), "y"),
        ]
    if kind != "BootLike":
        raise InvalidParams(f"unknown workload {kind!r}")
    lpl = limbs_per_level(params)
    rng = random.Random(seed)
    n_app = app_levels(params)
    if n_app < 1:
        raise InvalidParams(f"L={params.L} leaves no application levels after bootstrapping")
    ops: list[HeOp] = []
    x = "x0"
    for s in range(segments):
        booted = f"s{s}.boot"
        ops.append(HeOp(OpKind.BOOT, L, (x,), booted))
        x, level = booted, boot_output_level(params)
        for i in range(n_app):
            p = f"s{s}.a{i}"
            ops.append(HeOp(OpKind.HMULT, level, (x, x), p + ".m"))
            ops.append(HeOp(OpKind.HROT, level, (p + ".m",), p + ".r", rng.randrange(1, 64)))
            ops.append(HeOp(OpKind.HADD, level, (p + ".m", p + ".r"), p + ".s"))
            ops.append(HeOp(OpKind.RESCALE, level, (p + ".s",), p + ".o"))
            x, level = p + ".o", level - lpl
    return ops


WORKLOADS = ("BootLike", "KsMicro", "SweepUnit")
