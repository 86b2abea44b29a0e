"""Feature extraction dispatch and the linear scoring model.

A program's score is the weighted sum of its extracted hardware features;
lower is better. Coefficients are per-architecture configuration data.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from . import asm as asm_mod
from . import cache as cache_mod
from . import ilp as ilp_mod
from . import ptx as ptx_mod
from .ir import LoopProgram, Schedule

CPU_FEATURES = ("n_fma", "n_vload", "n_vstore", "est_l1_movement", "ilp_cycles")
GPU_FEATURES = ("workload_per_thread", "sm_underuse", "warp_slack",
                "n_smem_ops_adjusted", "n_fma", "n_ld", "n_st")


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[tuple[str, float], ...]  # ordered (name, value) pairs

    @staticmethod
    def of(mapping: dict[str, float], order: tuple[str, ...]) -> "FeatureVector":
        missing = [k for k in order if k not in mapping]
        if missing:
            raise CostModelError(f"missing features: {missing}")
        vals = tuple((k, float(mapping[k])) for k in order)
        for k, v in vals:
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise CostModelError(f"feature {k} must be finite and >= 0, got {v}")
        return FeatureVector(vals)

    def as_dict(self) -> dict[str, float]:
        return dict(self.values)

    def __getitem__(self, key: str) -> float:
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    family: str  # "cpu" or "gpu"
    target: str  # mock emitter target
    dialect: str
    coefficients: dict
    cache: "cache_mod.CacheSpec | None" = None
    sched: "ilp_mod.SchedSpec | None" = None
    gpu: "ptx_mod.GpuSpec | None" = None

    def feature_order(self) -> tuple[str, ...]:
        return CPU_FEATURES if self.family == "cpu" else GPU_FEATURES

    def validate(self):
        missing = [f for f in self.feature_order() if f not in self.coefficients]
        if missing:
            raise CostModelError(f"arch {self.name!r} missing coefficients for {missing}")
        for k, v in self.coefficients.items():
            if v != v or v in (float("inf"), float("-inf")):
                raise CostModelError(f"coefficient {k} must be finite")


def load_arch(source: str) -> ArchSpec:
    """Load an ArchSpec from a builtin name (e.g. "x86-avx2") or a TOML path."""
    path = Path(source)
    if path.exists():
        data = tomli.loads(path.read_text())
    else:
        pkg = importlib.resources.files(__package__) / "archs" / f"{source}.toml"
        if not pkg.is_file():
            raise CostModelError(f"unknown arch {source!r}: not a file and not a builtin")
        data = tomli.loads(pkg.read_text())
    meta = data.get("meta", {})
    family = meta.get("family")
    if family not in ("cpu", "gpu"):
        raise CostModelError(f"arch family must be cpu|gpu, got {family!r}")
    cache_spec = None
    if "cache" in data:
        cap = int(data["cache"]["l1_capacity_bytes"]) // int(data["cache"].get("element_bytes", 4))
        cache_spec = cache_mod.CacheSpec(cap)
    sched = None
    if "ilp" in data:
        d = data["ilp"]
        sched = ilp_mod.SchedSpec(
            issue_width=int(d.get("issue_width", 4)),
            latency=d.get("latency", {}),
            default_latency=int(d.get("default_latency", 1)),
            units=d.get("units", {}),
        )
    gpu = None
    if "gpu" in data:
        d = data["gpu"]
        gpu = ptx_mod.GpuSpec(
            num_sms=int(d.get("num_sms", 80)),
            max_threads_per_sm=int(d.get("max_threads_per_sm", 2048)),
            registers_per_sm=int(d.get("registers_per_sm", 65536)),
            shared_mem_per_sm_bytes=int(d.get("shared_mem_per_sm_bytes", 98304)),
            instr_cost=d.get("instr_cost", None),
        )
    arch = ArchSpec(
        name=meta.get("name", source),
        family=family,
        target=meta.get("target", "cpu-x86" if family == "cpu" else "gpu-ptx"),
        dialect=meta.get("dialect", "x86-att" if family == "cpu" else "ptx"),
        coefficients={k: float(v) for k, v in data.get("coefficients", {}).items()},
        cache=cache_spec,
        sched=sched,
        gpu=gpu,
    )
    arch.validate()
    return arch


def extract_features(program: LoopProgram, code: str, arch: ArchSpec,
                     launch: "ptx_mod.KernelLaunch | None" = None,
                     diagnostics: list[str] | None = None) -> FeatureVector:
    """Run the family's analyzers over (IR, low-level code) and collect features."""
    if arch.family == "gpu":
        if launch is None:
            raise CostModelError("gpu feature extraction requires a kernel launch record")
        feats = ptx_mod.count_ptx(code, diagnostics)
        feats["workload_per_thread"] = ptx_mod.thread_cycles(code, arch.gpu, diagnostics)
        feats.update(ptx_mod.sm_occupancy_feature(launch, arch.gpu))
        feats.update(ptx_mod.warp_hiding_feature(launch, arch.gpu))
        feats.update(ptx_mod.smem_ops_feature(program))
        return FeatureVector.of(feats, GPU_FEATURES)
    if arch.cache is None or arch.sched is None:
        raise CostModelError(f"arch {arch.name!r} lacks [cache] or [ilp] configuration")
    cfg = asm_mod.parse_asm(code)
    matches = asm_mod.loop_map(program, cfg, diagnostics)
    feats = asm_mod.count_simd(program, cfg, matches, arch.target)
    feats.update(cache_mod.cache_feature(program, arch.cache))
    feats.update(ilp_mod.ilp_feature(cfg, matches, arch.sched, arch.dialect))
    return FeatureVector.of(feats, CPU_FEATURES)


def score(fv: FeatureVector, arch: ArchSpec) -> float:
    total = 0.0
    for name, value in fv.values:
        if name not in arch.coefficients:
            raise CostModelError(f"no coefficient for feature {name!r} in arch {arch.name!r}")
        total += arch.coefficients[name] * value
    return total


def rank(candidates: list[tuple[Schedule, FeatureVector]], arch: ArchSpec) -> list[int]:
    """Indices of candidates in ascending score order; ties keep input order."""
    scored = [(score(fv, arch), i) for i, (_, fv) in enumerate(candidates)]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [i for _, i in scored]


def fit_coefficients(rows: list[FeatureVector], latencies: list[float]) -> dict[str, float]:
    """Least-squares coefficients from measured (features, latency) pairs."""
    import numpy as np

    if not rows:
        raise CostModelError("no rows to fit")
    names = [k for k, _ in rows[0].values]
    x = np.array([[fv[k] for k in names] for fv in rows], dtype=float)
    y = np.array(latencies, dtype=float)
    sol, *_ = np.linalg.lstsq(x, y, rcond=None)
    return dict(zip(names, sol.tolist()))
