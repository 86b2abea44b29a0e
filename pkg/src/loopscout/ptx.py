"""PTX static analysis: loop trip recovery from register init/update maps,
per-thread instruction cycles, and GPU thread-level-parallelism features.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .asm import AsmError, BasicBlock, Cfg, parse_asm
from .ir import AccessNode, LoopNode, LoopProgram


@dataclass(frozen=True)
class GpuSpec:
    num_sms: int = 80
    max_threads_per_sm: int = 2048
    registers_per_sm: int = 65536
    shared_mem_per_sm_bytes: int = 98304
    warp_size: int = 32
    banks: int = 32
    instr_cost: dict = None  # opcode root -> cycles

    def __post_init__(self):
        object.__setattr__(self, "instr_cost", dict(self.instr_cost or DEFAULT_PTX_COSTS))
        for name in ("num_sms", "max_threads_per_sm", "registers_per_sm",
                     "shared_mem_per_sm_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# default per-opcode cycle costs; overridable from arch config
DEFAULT_PTX_COSTS = {
    "fma": 4, "mad": 4, "mul": 4, "add": 2, "sub": 2,
    "ld": 8, "st": 8, "mov": 1, "setp": 2, "bra": 2, "ret": 1, "bar": 2,
}


@dataclass(frozen=True)
class KernelLaunch:
    grid_blocks: int
    threads_per_block: int
    registers_per_thread: int
    shared_mem_per_block_bytes: int

    def __post_init__(self):
        for name in ("grid_blocks", "threads_per_block", "registers_per_thread"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.shared_mem_per_block_bytes < 0:
            raise ValueError("shared_mem_per_block_bytes must be >= 0")

    @staticmethod
    def from_json(data: dict) -> "KernelLaunch":
        return KernelLaunch(
            int(data["grid_blocks"]), int(data["threads_per_block"]),
            int(data["registers_per_thread"]),
            int(data.get("shared_mem_per_block", data.get("shared_mem_per_block_bytes", 0))),
        )


_PTXAS_RE = re.compile(r"Used\s+(\d+)\s+registers(?:,\s*(\d+)\s+bytes\s+smem)?", re.IGNORECASE)


def parse_ptxas_info(text: str) -> dict:
    """Extract register/shared-memory usage from `ptxas -v` style output."""
    m = _PTXAS_RE.search(text)
    if not m:
        raise AsmError("no 'Used N registers' line found in ptxas output")
    return {"registers_per_thread": int(m.group(1)),
            "shared_mem_per_block": int(m.group(2) or 0)}


@dataclass(frozen=True)
class PtxLoop:
    block: BasicBlock
    trip_count: int | None
    start_line: int  # loop region in source lines, inclusive
    end_line: int


def _imm(op: str) -> int | None:
    op = op.strip()
    if re.fullmatch(r"-?\d+", op):
        return int(op)
    return None


def loop_map_ptx(text: str, diagnostics: list[str] | None = None) -> list[PtxLoop]:
    """Recover loop blocks and trip counts from PTX text.

    Loop blocks are backward-branch targets. The trip count comes from the
    comparison register's initial value (last constant `mov` above the loop),
    its per-iteration additive delta inside the loop, and the `setp` bound,
    with the comparison operator deciding bound inclusivity.
    """
    cfg = parse_asm(text)
    loops: list[PtxLoop] = []
    back_edges = [(e.src, e.dst) for e in cfg.edges
                  if e.kind in ("jump", "cond-jump") and e.dst <= e.src]
    for src_idx, dst_idx in sorted(back_edges, key=lambda p: p[1]):
        target = cfg.blocks[dst_idx]
        src = cfg.blocks[src_idx]
        start_line, end_line = target.first_line, src.last_line
        trip = _loop_trip(cfg, target, src, start_line, end_line, diagnostics)
        loops.append(PtxLoop(target, trip, start_line, end_line))
    return loops


def _loop_trip(cfg: Cfg, target: BasicBlock, src: BasicBlock,
               start_line: int, end_line: int,
               diagnostics: list[str] | None) -> int | None:
    def diag(msg):
        if diagnostics is not None:
            diagnostics.append(msg)

    term = src.instructions[-1]
    pred = term.predicate
    setp = None
    for instr in reversed(src.instructions):
        if instr.mnemonic.lower().startswith("setp"):
            # bare "setp.lt reg, bound" has no predicate destination operand
            if len(instr.operands) == 2 or pred is None or (
                    instr.operands and instr.operands[0].lstrip("%!") == pred.lstrip("%!")):
                setp = instr
                break
    if setp is None or len(setp.operands) < 2:
        diag(f"loop at {target.label or target.index}: no setp/bra idiom")
        return None
    op = setp.mnemonic.split(".")[1] if "." in setp.mnemonic else "ne"
    if len(setp.operands) >= 3:
        reg = setp.operands[1].strip()
        bound = _imm(setp.operands[2])
    else:
        reg = setp.operands[0].strip()
        bound = _imm(setp.operands[1])
    if bound is None:
        diag(f"loop at {target.label or target.index}: non-immediate bound")
        return None

    init = None
    delta = 0
    nonlinear = False
    for b in cfg.blocks:
        for instr in b.instructions:
            mn = instr.mnemonic.lower()
            root = mn.split(".", 1)[0]
            ops = [o.strip() for o in instr.operands]
            if not ops or ops[0] != reg:
                continue
            if instr.line < start_line:
                if root == "mov":
                    v = _imm(ops[1]) if len(ops) > 1 else None
                    init = v if v is not None else init
            elif start_line <= instr.line <= end_line:
                if root in ("add", "sub") and len(ops) >= 3 and ops[1] == reg:
                    d = _imm(ops[2])
                    if d is None:
                        nonlinear = True
                    else:
                        delta += d if root == "add" else -d
                elif root in ("mul", "shl", "mad"):
                    nonlinear = True
                elif root == "mov":
                    nonlinear = True  # re-initialized inside the loop
    if nonlinear:
        diag(f"loop at {target.label or target.index}: non-linear induction register {reg}")
        return None
    if init is None or delta == 0:
        diag(f"loop at {target.label or target.index}: induction register {reg} not derivable")
        return None

    span = bound - init
    if op in ("lt", "gt"):
        trips = math.ceil(span / delta)
    elif op in ("le", "ge"):
        trips = math.floor(span / delta) + 1
    elif op == "ne":
        trips = span / delta
        trips = int(trips) if trips == int(trips) else None
    else:
        diag(f"loop at {target.label or target.index}: unsupported comparison {op!r}")
        return None
    if trips is None or trips <= 0:
        diag(f"loop at {target.label or target.index}: inconsistent bounds "
             f"(init {init}, delta {delta}, {op} {bound})")
        return None
    return trips


def _line_weights(loops: list[PtxLoop]) -> list[tuple[PtxLoop, int]]:
    return [(lp, lp.trip_count) for lp in loops]


def _weight_for_line(line: int, loops: list[PtxLoop]) -> int:
    w = 1
    for lp in loops:
        if lp.trip_count is not None and lp.start_line <= line <= lp.end_line:
            w *= lp.trip_count
    return w


def count_ptx(text: str, diagnostics: list[str] | None = None) -> dict[str, float]:
    """Trip-weighted significant PTX instruction counts (fma/ld/st)."""
    cfg = parse_asm(text)
    loops = loop_map_ptx(text, diagnostics)
    counts = {"n_fma": 0.0, "n_ld": 0.0, "n_st": 0.0}
    for b in cfg.blocks:
        for instr in b.instructions:
            mn = instr.mnemonic.lower()
            root = mn.split(".", 1)[0]
            if root in ("fma", "mad"):
                key = "n_fma"
            elif mn.startswith("ld"):
                key = "n_ld"
            elif mn.startswith("st"):
                key = "n_st"
            else:
                continue
            counts[key] += _weight_for_line(instr.line, loops)
    return counts


def thread_cycles(text: str, spec: GpuSpec, diagnostics: list[str] | None = None) -> float:
    """Trip-weighted sum of per-instruction cycle costs for one thread."""
    cfg = parse_asm(text)
    loops = loop_map_ptx(text, diagnostics)
    total = 0.0
    for b in cfg.blocks:
        for instr in b.instructions:
            root = instr.mnemonic.lower().split(".", 1)[0]
            cost = spec.instr_cost.get(root, 1)
            total += cost * _weight_for_line(instr.line, loops)
    return total


def sm_occupancy_feature(launch: KernelLaunch, spec: GpuSpec) -> dict[str, float]:
    """Penalty for leaving streaming multiprocessors without any thread block."""
    underuse = max(0, spec.num_sms - launch.grid_blocks) / spec.num_sms
    return {"sm_underuse": underuse}


def blocks_per_sm(launch: KernelLaunch, spec: GpuSpec) -> int:
    regs_per_block = launch.registers_per_thread * launch.threads_per_block
    by_regs = spec.registers_per_sm // regs_per_block if regs_per_block else spec.max_threads_per_sm
    by_smem = (spec.shared_mem_per_sm_bytes // launch.shared_mem_per_block_bytes
               if launch.shared_mem_per_block_bytes else spec.max_threads_per_sm)
    by_threads = spec.max_threads_per_sm // launch.threads_per_block
    return max(0, min(by_regs, by_smem, by_threads))


def warp_hiding_feature(launch: KernelLaunch, spec: GpuSpec) -> dict[str, float]:
    """Inverse of concurrently resident warps per SM; high means poor hiding."""
    warps = blocks_per_sm(launch, spec) * launch.threads_per_block / spec.warp_size
    return {"warp_slack": 1.0 / max(1.0, warps)}


# ---------------------------------------------------------------------------
# Shared-memory bank conflicts
# ---------------------------------------------------------------------------


def bank_conflict_factor(program: LoopProgram, access: AccessNode,
                         tid_var: str | None = None, banks: int = 32,
                         warp_size: int = 32) -> int:
    """Serialization factor of one shared-memory access for the first warp.

    Evaluates the word addresses of threads 0..31, maps them to banks, and
    returns the maximum number of *distinct* addresses hitting one bank
    (identical addresses broadcast and count once).
    """
    decl = program.tensor(access.tensor)
    strides = []
    size = 1
    for d in reversed(decl.dims):
        strides.append(size)
        size *= d
    strides = list(reversed(strides))
    if tid_var is None:
        tid_var = _default_tid_var(program, access)
    per_bank: dict[int, set[int]] = {}
    lanes = warp_size
    if tid_var is not None:
        extent = program.find_loop(tid_var).extent if any(
            lp.var == tid_var for lp in program.loops()) else warp_size
        lanes = min(warp_size, extent)
    for t in range(lanes):
        env = {v: 0 for e in access.index_exprs for v in e.variables()}
        if tid_var is not None:
            env[tid_var] = t
        linear = sum(e.evaluate(env) * s for e, s in zip(access.index_exprs, strides))
        word = linear * decl.elem_bytes // 4
        per_bank.setdefault(word % banks, set()).add(word)
    return max(len(addrs) for addrs in per_bank.values())


def _default_tid_var(program: LoopProgram, access: AccessNode) -> str | None:
    used = set().union(*(e.variables() for e in access.index_exprs)) if access.index_exprs else set()
    if "tid" in used:
        return "tid"
    # innermost parallel loop indexing the access stands in for the thread id
    candidate = None
    for lp in program.loops():
        if lp.parallel and lp.var in used:
            candidate = lp.var
    return candidate


def smem_ops_feature(program: LoopProgram) -> dict[str, float]:
    """Shared-memory operation count adjusted by per-access conflict factors."""
    adjusted = 0.0
    shared = {t.name for t in program.tensors if t.scope == "shared"}

    def walk(n, vol):
        nonlocal adjusted
        if isinstance(n, AccessNode):
            if n.tensor in shared:
                adjusted += vol * bank_conflict_factor(program, n)
            return
        factor = 1 if n.vector_width is not None else n.extent
        for c in n.children:
            walk(c, vol * factor)

    for n in program.body:
        walk(n, 1)
    return {"n_smem_ops_adjusted": adjusted}
