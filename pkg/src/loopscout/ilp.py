"""Basic-block instruction-level-parallelism cost via a simplified
out-of-order list scheduler.

True (RAW) dependencies delay a consumer until the producer's latency has
elapsed; false (WAR/WAW) dependencies only force issue order (prior issue
cycle + 1). Issue bandwidth is capped per cycle.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

from .asm import BasicBlock, Cfg, Instruction, LoopBlockMatch


@dataclass(frozen=True)
class SchedSpec:
    issue_width: int = 4
    latency: dict = None  # mnemonic-class -> cycles
    default_latency: int = 1
    units: dict = None  # optional mnemonic-class -> units per cycle

    def __post_init__(self):
        if self.issue_width < 1:
            raise ValueError("issue width must be >= 1")
        object.__setattr__(self, "latency", dict(self.latency or {}))
        object.__setattr__(self, "units", dict(self.units or {}))
        if any(v < 1 for v in self.latency.values()):
            raise ValueError("latencies must be >= 1")

    def latency_of(self, instr: Instruction) -> int:
        key = _latency_class(instr)
        return self.latency.get(key, self.default_latency)


def _latency_class(instr: Instruction) -> str:
    m = instr.mnemonic.lower()
    root = m.split(".", 1)[0]
    if m.startswith(("vfmadd", "vfnmadd", "vfmsub")) or root in ("fma", "fmla", "fmls"):
        return "fma"
    if m.startswith(("vmov", "ld", "vld")):
        return "load" if _mem_operand_index(instr) is not None else "move"
    if m.startswith(("st", "vst")):
        return "store"
    return root


_REG_RE = re.compile(r"%?[a-z][a-z0-9]*(?:\.[a-z0-9]+)*", re.IGNORECASE)


def _mem_operand_index(instr: Instruction) -> int | None:
    for i, op in enumerate(instr.operands):
        if "(" in op or "[" in op:
            return i
    return None


def _regs_in(op: str) -> list[str]:
    # strip addressing punctuation, keep register-like tokens
    toks = re.findall(r"[%$#]?[A-Za-z_][\w.]*", op)
    regs = []
    for t in toks:
        if t.startswith(("$", "#")):
            continue
        regs.append(t.split(".")[0].lstrip("%"))
    return regs


def _is_store(instr: Instruction) -> bool:
    m = instr.mnemonic.lower()
    if m.startswith(("st", "vst")):
        return True
    mem = _mem_operand_index(instr)
    if mem is None:
        return False
    # AT&T: destination last; a memory destination means a store
    return mem == len(instr.operands) - 1 and m.startswith(("vmov", "mov"))


def reg_effects(instr: Instruction, dialect: str) -> tuple[set[str], set[str]]:
    """(reads, writes) register/memory resources of an instruction.

    Memory operands add a ``mem:<base>`` resource; aliasing is conservative
    (all accesses through the same base register conflict).
    """
    reads: set[str] = set()
    writes: set[str] = set()
    m = instr.mnemonic.lower()
    root = m.split(".", 1)[0]
    if instr.predicate:
        reads.add(instr.predicate.lstrip("%").lstrip("!"))
    if not instr.operands or root in ("ret", "jmp", "bra", "b", "br") or root.startswith("j"):
        return reads, writes
    mem_idx = _mem_operand_index(instr)
    store = _is_store(instr)
    if dialect == "x86-att":
        dest_idx = len(instr.operands) - 1
    else:  # aarch64, ptx, generic: destination first (st is the exception)
        dest_idx = 0
        if m.startswith(("st", "vst")) and mem_idx is not None:
            dest_idx = mem_idx
    for i, op in enumerate(instr.operands):
        regs = _regs_in(op)
        is_mem = i == mem_idx
        if is_mem:
            base = regs[0] if regs else "abs"
            reads.update(regs)  # address computation reads the base
            if i == dest_idx and store:
                writes.add(f"mem:{base}")
            else:
                reads.add(f"mem:{base}")
            continue
        if i == dest_idx and root not in ("cmp", "cmpq", "test"):
            writes.update(regs)
            if m.startswith(("vfmadd", "fma", "fmla", "fmls", "add", "sub")) or root in ("add", "addq"):
                reads.update(regs)  # accumulator / read-modify-write destination
        else:
            reads.update(regs)
    return reads, writes


@dataclass(frozen=True)
class DepGraph:
    n: int
    true_edges: tuple[tuple[int, int], ...]  # RAW, (producer, consumer)
    false_edges: tuple[tuple[int, int], ...]  # WAR/WAW, (prior, latter)


def build_deps(block: BasicBlock, dialect: str = "generic") -> DepGraph:
    """Scan the block once and record RAW plus WAR/WAW pairs per resource."""
    instrs = block.instructions
    effects = [reg_effects(i, dialect) for i in instrs]
    true_edges: set[tuple[int, int]] = set()
    false_edges: set[tuple[int, int]] = set()
    last_write: dict[str, int] = {}
    last_reads: dict[str, list[int]] = {}
    for idx, (reads, writes) in enumerate(effects):
        for r in reads:
            if r in last_write:
                true_edges.add((last_write[r], idx))
        for w in writes:
            if w in last_write:
                false_edges.add((last_write[w], idx))  # WAW
            for rd in last_reads.get(w, ()):
                if rd != idx:
                    false_edges.add((rd, idx))  # WAR
        for w in writes:
            last_write[w] = idx
            last_reads[w] = []
        for r in reads:
            last_reads.setdefault(r, []).append(idx)
    false_edges -= true_edges
    return DepGraph(len(instrs), tuple(sorted(true_edges)), tuple(sorted(false_edges)))


def schedule_block(block: BasicBlock, spec: SchedSpec, dialect: str = "generic",
                   graph: DepGraph | None = None) -> int:
    """Greedy cycle-by-cycle issue; returns the completion cycle of the block."""
    g = graph if graph is not None else build_deps(block, dialect)
    if g.n == 0:
        return 0
    lat = [spec.latency_of(i) for i in block.instructions]
    raw_preds = [[] for _ in range(g.n)]
    order_preds = [[] for _ in range(g.n)]
    for p, c in g.true_edges:
        raw_preds[c].append(p)
    for p, c in g.false_edges:
        order_preds[c].append(p)
    issue = [-1] * g.n
    done = 0
    cycle = 0
    classes = [_latency_class(i) for i in block.instructions]
    while done < g.n:
        issued = 0
        unit_used: dict[str, int] = {}
        for i in range(g.n):  # program-order tie break
            if issue[i] >= 0 or issued >= spec.issue_width:
                continue
            ready_at = 0
            ok = True
            for p in raw_preds[i]:
                if issue[p] < 0:
                    ok = False
                    break
                ready_at = max(ready_at, issue[p] + lat[p])
            if ok:
                for p in order_preds[i]:
                    if issue[p] < 0:
                        ok = False
                        break
                    ready_at = max(ready_at, issue[p] + 1)
            if not ok or ready_at > cycle:
                continue
            cap = spec.units.get(classes[i])
            if cap is not None and unit_used.get(classes[i], 0) >= cap:
                continue
            issue[i] = cycle
            unit_used[classes[i]] = unit_used.get(classes[i], 0) + 1
            issued += 1
            done += 1
        cycle += 1
    return max(issue[i] + lat[i] for i in range(g.n))


def critical_path(block: BasicBlock, spec: SchedSpec, graph: DepGraph) -> int:
    """Longest RAW chain weighted by latencies (lower bound on the schedule)."""
    lat = [spec.latency_of(i) for i in block.instructions]
    finish = [0] * graph.n
    for i in range(graph.n):
        start = 0
        for p, c in graph.true_edges:
            if c == i:
                start = max(start, finish[p])
        finish[i] = start + lat[i]
    return max(finish, default=0)


def exhaustive_schedule(block: BasicBlock, spec: SchedSpec, dialect: str = "generic",
                        graph: DepGraph | None = None) -> int:
    """Minimal completion over all issue orders, same hazard rules.

    Brute force over permutations; any feasible schedule is reproduced by
    earliest-fit placement in its issue order, so the minimum is exact.
    Intended for blocks of <= 8 instructions.
    """
    g = graph if graph is not None else build_deps(block, dialect)
    if g.n == 0:
        return 0
    if g.n > 9:
        raise ValueError("exhaustive oracle limited to small blocks")
    lat = [spec.latency_of(i) for i in block.instructions]
    best = None
    for perm in itertools.permutations(range(g.n)):
        pos = {v: i for i, v in enumerate(perm)}
        # respect program-order encoding of deps: skip perms violating precedence
        if any(pos[p] > pos[c] for p, c in g.true_edges + g.false_edges):
            continue
        issue = {}
        slots: dict[int, int] = {}
        feasible = True
        for i in perm:
            ready = 0
            for p, c in g.true_edges:
                if c == i:
                    ready = max(ready, issue[p] + lat[p])
            for p, c in g.false_edges:
                if c == i:
                    ready = max(ready, issue[p] + 1)
            t = ready
            while slots.get(t, 0) >= spec.issue_width:
                t += 1
            issue[i] = t
            slots[t] = slots.get(t, 0) + 1
        if feasible:
            total = max(issue[i] + lat[i] for i in range(g.n))
            best = total if best is None else min(best, total)
    return best


def ilp_feature(cfg: Cfg, matches: list[LoopBlockMatch], spec: SchedSpec,
                dialect: str = "generic") -> dict[str, float]:
    """Sum over blocks of schedule cost times execution count."""
    exec_count = {m.block.index: m.enclosing_trip_product for m in matches}
    total = 0.0
    for b in cfg.blocks:
        if not b.instructions:
            continue
        total += schedule_block(b, spec, dialect) * exec_count.get(b.index, 1)
    return {"ilp_cycles": total}
