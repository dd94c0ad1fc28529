"""Package configuration: flat dotted keys read from TOML, with env overrides.

Every key has a default; a file only lists what it changes.  Keys may be
written dotted (``core.lanes = 64``) or grouped under TOML tables
(``[core]`` then ``lanes = 64``); both flatten to the same key.  Unknown keys
are rejected.  An environment variable ``MCMFHE_<SECTION>__<KEY>`` (upper
case, ``.`` replaced by ``__``) overrides the file, e.g.
``MCMFHE_CORE__LANES=32``.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidBlock, InvalidConfig
from .mapping import ClusterConfig, emit_mapping, parse_mapping, validate_config
from .nop import HbmPort, LinkConfig
from .rns import CkksParams
from .scheduler import ENERGY_TERMS, CoreModel

ENV_PREFIX = "MCMFHE_"
TOTAL_LANES = 1024

# Relative per-event energies (arbitrary units; absolute values are not modelled).
DEFAULT_ENERGY = {
    "nop_per_word_hop": 8.0,
    "ntt_per_butterfly": 1.0,
    "bconv_per_mac": 0.5,
    "efu_per_op": 0.5,
    "auto_per_element": 0.2,
    "prng_per_word": 0.3,
    "rf_per_access": 0.1,
    "hbm_per_byte": 4.0,
}

DEFAULTS: dict[str, object] = {
    "package.mapping": "4x4-BK-2x2",
    "package.default_profile": True,
    "package.clock_hz": 1e9,
    "params.N": 4096,
    "params.L": 48,
    "params.K": 12,
    "params.beta": 0,
    "core.lanes": 64,
    "core.submodules": 0,
    "core.nttu_butterflies_per_lane": 0.0,
    "core.bconv_macs_per_lane": 12,
    "core.rf_reads_per_lane": 6,
    "core.rf_writes_per_lane": 6,
    "nop.bisection_bytes_per_s": 2e12,
    "nop.flit_bits": 256,
    "nop.vcs": 4,
    "nop.vc_depth": 64,
    "nop.pipeline": 3,
    "hbm.stacks": 2,
    "hbm.bytes_per_s": 500e9,
    "hbm.base_latency": 100,
    "rf.scratchpad_bytes": 256e6,
    "rf.aux_bytes": 16e6,
    "rf.prefetch_fraction": 0.5,
    "rf.scale_with_n": True,
    "schedule.duplication": "auto",
    "sweep.mappings": [],
    "sweep.duplication": [],
    "sweep.cores": [],
    **{f"energy.{k}": v for k, v in DEFAULT_ENERGY.items()},
}


def _flatten(d: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise InvalidConfig(f"{key}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise InvalidConfig(f"{key}: expected a string, got {value!r}")
    return value


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ=None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        match = {k.lower(): k for k in DEFAULTS}
        if key not in match:
            raise InvalidConfig(f"unknown config key {key!r} (from environment variable {name})")
        out[match[key]] = _parse_env_value(raw)
    return out


@dataclass
class PackageSpec:
    """Everything needed to build and simulate one package design."""

    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    # -- derived objects ------------------------------------------------------

    @property
    def cluster(self) -> ClusterConfig:
        return parse_mapping(self["package.mapping"])

    @property
    def params(self) -> CkksParams:
        return CkksParams(self["params.N"], self["params.L"], self["params.K"])

    @property
    def beta(self) -> int | None:
        return self["params.beta"] or None

    @property
    def n_cores(self) -> int:
        return self.cluster.mesh.n_cores

    def core_model(self) -> CoreModel:
        bpl = self["core.nttu_butterflies_per_lane"]
        return CoreModel(
            lanes=self["core.lanes"],
            log_n=self.params.log_n,
            nttu_butterflies_per_lane=bpl or None,
            bconv_macs_per_lane=self["core.bconv_macs_per_lane"],
            rf_reads_per_lane=self["core.rf_reads_per_lane"],
            rf_writes_per_lane=self["core.rf_writes_per_lane"],
        )

    def link(self) -> LinkConfig:
        return LinkConfig(self["nop.flit_bits"], self["nop.bisection_bytes_per_s"], self["package.clock_hz"])

    def hbm(self) -> HbmPort:
        return HbmPort(self["hbm.bytes_per_s"], self["hbm.base_latency"])

    def network_kwargs(self) -> dict:
        return {"vcs": self["nop.vcs"], "vc_depth": self["nop.vc_depth"], "pipeline": self["nop.pipeline"]}

    def prefetch_budget(self) -> float:
        """Per-core bytes that prefetched HBM data may pin in the scratchpad."""
        total = self["rf.scratchpad_bytes"] * self["rf.prefetch_fraction"]
        if self["rf.scale_with_n"]:
            total *= self["params.N"] / 2**16
        return total / self.n_cores

    def energy_table(self) -> dict[str, float]:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("energy.")}

    # -- checks ---------------------------------------------------------------

    def validate(self) -> list[str]:
        """Violations as readable strings naming the key (empty when valid)."""
        errs = []
        try:
            cfg = self.cluster
        except InvalidBlock as exc:
            return [f"package.mapping: {exc}"]
        errs += [f"package.mapping: {v}" for v in validate_config(cfg)]
        try:
            params = self.params
        except Exception as exc:
            errs.append(f"params: {exc}")
            params = None
        if params is not None and not errs:
            c = cfg.limb_cluster_size
            root = math.isqrt(params.N)
            if root * root != params.N or root % c:
                errs.append(f"package.mapping: limb cluster of {c} cores must divide sqrt(N)={root}")
        lanes = self["core.lanes"]
        if lanes < 16 or lanes > 256 or lanes % 16:
            errs.append(f"core.lanes: {lanes} must be a multiple of 16 between 16 and 256")
        sub = self["core.submodules"]
        if sub and sub * 16 != lanes:
            errs.append(f"core.submodules: {sub} submodules span {sub * 16} lanes, not core.lanes={lanes}")
        if self["package.default_profile"] and cfg.mesh.n_cores * lanes != TOTAL_LANES:
            errs.append(
                f"core.lanes: default profile needs cores x lanes = {TOTAL_LANES}, "
                f"got {cfg.mesh.n_cores} x {lanes}")
        for key in ("nop.bisection_bytes_per_s", "hbm.bytes_per_s", "package.clock_hz",
                    "rf.scratchpad_bytes", "rf.aux_bytes", "core.bconv_macs_per_lane",
                    "core.rf_reads_per_lane", "core.rf_writes_per_lane", "nop.vcs",
                    "nop.vc_depth", "nop.pipeline", "nop.flit_bits"):
            if self[key] <= 0:
                errs.append(f"{key}: must be positive")
        if self["nop.flit_bits"] % 32:
            errs.append("nop.flit_bits: must be a multiple of 32")
        if self["hbm.stacks"] not in (1, 2):
            errs.append("hbm.stacks: must be 1 or 2")
        if not 0 < self["rf.prefetch_fraction"] <= 1:
            errs.append("rf.prefetch_fraction: must be in (0, 1]")
        if self["params.beta"] < 0:
            errs.append("params.beta: must be >= 0 (0 picks ceil(L/K))")
        if str(self["schedule.duplication"]).lower() not in ("auto", "on", "off"):
            errs.append("schedule.duplication: must be auto, on or off")
        for d in self["sweep.duplication"]:
            if str(d).lower() not in ("auto", "on", "off"):
                errs.append(f"sweep.duplication: {d!r} is not auto, on or off")
        for n in self["sweep.cores"]:
            if not isinstance(n, int) or n < 1 or math.isqrt(n) ** 2 != n:
                errs.append(f"sweep.cores: {n!r} must be a square core count")
        for m in self["sweep.mappings"]:
            try:
                parse_mapping(m)
            except InvalidBlock as exc:
                errs.append(f"sweep.mappings: {exc}")
        for term, (_, const) in ENERGY_TERMS.items():
            if self[f"energy.{const}"] < 0:
                errs.append(f"energy.{const}: must be non-negative")
        return errs

    def check(self) -> "PackageSpec":
        errs = self.validate()
        if errs:
            raise InvalidConfig("; ".join(errs))
        return self

    # -- variants ---------------------------------------------------------------

    def replace(self, **changes) -> "PackageSpec":
        """Copy with dotted keys replaced; ``_`` in a keyword stands for ``.``
        only at the first position (``core_lanes`` -> ``core.lanes``)."""
        vals = dict(self.values)
        for k, v in changes.items():
            key = k if k in DEFAULTS else k.replace("_", ".", 1)
            if key not in DEFAULTS:
                raise InvalidConfig(f"unknown config key {key!r}")
            vals[key] = _coerce(key, v)
        return PackageSpec(vals)

    def with_items(self, items: dict[str, object]) -> "PackageSpec":
        vals = dict(self.values)
        for key, v in items.items():
            if key not in DEFAULTS:
                raise InvalidConfig(f"unknown config key {key!r}")
            vals[key] = _coerce(key, v)
        return PackageSpec(vals)

    def to_dict(self) -> dict[str, object]:
        return dict(sorted(self.values.items()))

    def to_toml(self) -> str:
        lines = []
        for k, v in sorted(self.values.items()):
            lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def loads(text: str, environ=None, source: str = "<config>") -> PackageSpec:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{source}: {exc}") from None
    items = _flatten(raw)
    for key in items:
        if key not in DEFAULTS:
            raise InvalidConfig(f"{source}: unknown config key {key!r}")
    items.update(env_overrides(environ))
    return PackageSpec().with_items(items)


def load(path, environ=None) -> PackageSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, environ, source=str(path))


def default_spec(environ=None) -> PackageSpec:
    return PackageSpec().with_items(env_overrides(environ))


def profile_for_cores(spec: PackageSpec, cores: int, mapping: str | None = None) -> PackageSpec:
    """Square package of ``cores`` cores with the lane budget split evenly.

    Without an explicit mapping, blocks of half the mesh side are used
    (``d x d-BK-d/2 x d/2``; a single core is ``1x1-BK-1x1``).
    """
    d = math.isqrt(cores)
    if d * d != cores:
        raise InvalidConfig(f"core count {cores} is not a square")
    if mapping is None:
        b = max(1, d // 2)
        mapping = emit_mapping(parse_mapping(f"{d}x{d}-BK-{b}x{b}"))
    return spec.with_items({"package.mapping": mapping, "core.lanes": TOTAL_LANES // cores})
