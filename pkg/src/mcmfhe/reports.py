"""Report serialisation: JSON run reports, CSV packet traces and sweep summaries.

All writers are deterministic: JSON keys are sorted and CSV rows follow a
fixed order, so identical runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .nop import TRACE_HEADER, packet_trace_csv
from .scheduler import SimReport

SCHEMA_VERSION = 1

SUMMARY_HEADER = [
    "point",
    "workload",
    "mapping",
    "cores",
    "lanes",
    "duplication",
    "status",
    "cycles",
    "elements_moved",
    "element_hops",
    "hbm_bytes",
    "energy",
    "speedup",
    "eq2_benefit",
    "error",
]

__all__ = ["RunReport", "SCHEMA_VERSION", "SUMMARY_HEADER", "TRACE_HEADER", "packet_trace_csv",
           "summary_csv", "write_text"]


@dataclass
class RunReport:
    spec: dict
    workload: str
    seed: int
    sim: SimReport
    derived: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "spec": self.spec,
            "workload": self.workload,
            "seed": self.seed,
            "sim": self.sim.to_dict(),
            "derived": self.derived,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["spec"], d["workload"], d["seed"], SimReport.from_dict(d["sim"]), d["derived"],
                   d["schema_version"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        return self.to_json() == other.to_json()


def derived_metrics(sim: SimReport) -> dict:
    led = sim.ledger
    return {
        "elements_moved": led.core_elements,
        "element_hops": led.core_element_hops,
        "hbm_elements": led.hbm_elements,
        "per_phase": {k: v.elements for k, v in sorted(led.phases.items())},
        "eq2_benefit": eq2_benefit_summary(sim),
    }


def eq2_benefit_summary(sim: SimReport) -> str:
    """Duplication benefit of each BConv of the first key-switching, ``;``-joined."""
    out = []
    for rec in sim.eq2:
        label = rec["label"]
        if label.startswith("modup") and out and any(x.startswith("moddown") for x in out):
            break
        if label.startswith(("modup", "moddown")):
            out.append(f"{label}={rec['eq2_benefit']}")
    return ";".join(out)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SUMMARY_HEADER, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SUMMARY_HEADER})
    return buf.getvalue()


def read_summary(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def write_text(path, text: str):
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
