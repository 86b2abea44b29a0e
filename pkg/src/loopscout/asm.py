"""CFG construction from assembly/PTX text and IR-to-assembly loop mapping.

Loop body blocks are recognized as targets of backward jumps. Matching against
the IR walks loops in preorder and greedily pairs them with candidate blocks
whose compare immediate equals the loop's iteration count.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .ir import AccessNode, LoopNode, LoopProgram


class AsmError(ValueError):
    """Raised for malformed assembly input."""


_UNCOND = {"jmp", "b", "br", "bra", "ret"}
_COND_PREFIXES = ("j", "b.", "cb", "tb")


def _is_branch(mnemonic: str) -> bool:
    if mnemonic in _UNCOND:
        return True
    if mnemonic.startswith("j") and mnemonic != "jmp":
        return True
    return mnemonic.startswith(("b.", "cb", "tb"))


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[str, ...]
    klass: str  # simd-arith | simd-mem | scalar | control | other
    predicate: str | None = None
    line: int = 0

    @property
    def text(self) -> str:
        pred = f"@{self.predicate} " if self.predicate else ""
        return pred + self.mnemonic + (" " + ", ".join(self.operands) if self.operands else "")


def classify(mnemonic: str) -> str:
    m = mnemonic.lower()
    root = m.split(".", 1)[0]
    if m.startswith(("vfmadd", "vfnmadd", "vfmsub")) or root in ("fma", "fmla", "fmls"):
        return "simd-arith"
    if m.startswith(("vmov", "ld", "st", "vld", "vst")):
        return "simd-mem"
    if _is_branch(root) or root in ("call", "setp"):
        return "control"
    if root in ("mov", "movq", "add", "addq", "sub", "subq", "cmp", "cmpq", "xor",
                "xorq", "mul", "shl", "and", "or", "lea", "inc", "dec"):
        return "scalar"
    return "other"


def _split_operands(text: str) -> tuple[str, ...]:
    ops, depth, cur = [], 0, []
    for ch in text:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        ops.append(tail)
    return tuple(ops)


@dataclass(frozen=True)
class BasicBlock:
    index: int
    label: str | None
    instructions: tuple[Instruction, ...]
    first_line: int
    last_line: int


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str  # fallthrough | jump | cond-jump


@dataclass(frozen=True)
class Cfg:
    blocks: tuple[BasicBlock, ...]
    edges: tuple[Edge, ...]

    def label_block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise AsmError(f"no block labeled {label!r}")


_LABEL_RE = re.compile(r"^([.$A-Za-z_][\w.$]*):\s*(.*)$")


def parse_asm(text: str) -> Cfg:
    """Split assembler-style text into basic blocks and resolve branch edges.

    Labels end with ':'; '#' and '//' start comments; a trailing ';' on a line
    (PTX style) is ignored. Blocks split at labels and after control transfers.
    """
    raw: list[tuple[int, str | None, Instruction | None]] = []  # (line, label, instr)
    for lineno, line in enumerate(text.splitlines(), start=1):
        # '#' starts a comment unless it prefixes an immediate (aarch64 '#8')
        line = re.split(r"#(?![0-9-])", line, 1)[0]
        line = line.split("//", 1)[0]
        line = line.strip().rstrip(";").strip()
        if not line:
            continue
        m = _LABEL_RE.match(line)
        if m:
            raw.append((lineno, m.group(1), None))
            line = m.group(2).strip()
            if not line:
                continue
        predicate = None
        if line.startswith("@"):
            predicate, line = line.split(None, 1)
            predicate = predicate[1:]
        parts = line.split(None, 1)
        mnemonic = parts[0]
        operands = _split_operands(parts[1]) if len(parts) > 1 else ()
        instr = Instruction(mnemonic, operands, classify(mnemonic), predicate, lineno)
        raw.append((lineno, None, instr))
    if not any(i for _, _, i in raw):
        raise AsmError("empty assembly input")

    # split into blocks
    blocks: list[BasicBlock] = []
    cur: list[Instruction] = []
    cur_label: str | None = None
    cur_first = None

    def flush(last_line):
        nonlocal cur, cur_label, cur_first
        if cur or cur_label is not None:
            blocks.append(BasicBlock(len(blocks), cur_label, tuple(cur),
                                     cur_first if cur_first is not None else last_line, last_line))
        cur, cur_label, cur_first = [], None, None

    for lineno, label, instr in raw:
        if label is not None:
            flush(lineno - 1)
            cur_label = label
            cur_first = lineno
            continue
        if cur_first is None:
            cur_first = lineno
        cur.append(instr)
        root = instr.mnemonic.lower().split(".", 1)[0]
        if _is_branch(root) or instr.mnemonic.lower().startswith("b."):
            flush(lineno)
    flush(raw[-1][0])
    blocks = [b for b in blocks if b.instructions or b.label is not None]
    blocks = [BasicBlock(i, b.label, b.instructions, b.first_line, b.last_line)
              for i, b in enumerate(blocks)]

    labels = {b.label: b.index for b in blocks if b.label is not None}
    edges: list[Edge] = []
    for b in blocks:
        term = b.instructions[-1] if b.instructions else None
        fallthrough = True
        if term is not None:
            mn = term.mnemonic.lower()
            root = mn.split(".", 1)[0]
            if _is_branch(root):
                target = None
                for op in term.operands:
                    if op in labels:
                        target = op
                        break
                if root == "ret":
                    fallthrough = False
                else:
                    if target is None:
                        sym = term.operands[0] if term.operands else "<none>"
                        raise AsmError(f"jump to undefined label {sym!r} (line {term.line})")
                    uncond = mn in ("jmp", "b", "br") or (root == "bra" and term.predicate is None)
                    kind = "jump" if uncond else "cond-jump"
                    edges.append(Edge(b.index, labels[target], kind))
                    fallthrough = not uncond
        if fallthrough and b.index + 1 < len(blocks):
            edges.append(Edge(b.index, b.index + 1, "fallthrough"))
    return Cfg(tuple(blocks), tuple(edges))


def identify_loop_lbbs(cfg: Cfg) -> list[BasicBlock]:
    """Blocks targeted by a backward (cond-)jump, in textual order."""
    targets = sorted({e.dst for e in cfg.edges
                      if e.kind in ("jump", "cond-jump") and e.dst <= e.src})
    return [cfg.blocks[i] for i in targets]


def loop_bound_immediate(cfg: Cfg, block: BasicBlock) -> int | None:
    """Compare immediate of the backward branch targeting `block`.

    Looks at the source block of the backward edge: the cmp/setp paired with
    the terminating branch carries the loop bound as an immediate operand.
    """
    for e in cfg.edges:
        if e.dst != block.index or e.kind not in ("jump", "cond-jump") or e.dst > e.src:
            continue
        src = cfg.blocks[e.src]
        for instr in reversed(src.instructions):
            mn = instr.mnemonic.lower()
            if mn.startswith(("cmp", "setp")):
                for op in instr.operands:
                    imm = _immediate(op)
                    if imm is not None:
                        return imm
    return None


def _immediate(op: str) -> int | None:
    op = op.strip()
    if op.startswith(("$", "#")):
        op = op[1:]
    if re.fullmatch(r"-?\d+", op):
        return int(op)
    return None


@dataclass(frozen=True)
class LoopBlockMatch:
    loop: LoopNode
    block: BasicBlock
    trip_count: int
    enclosing_trip_product: int  # product of trips of this loop and matched ancestors


def preorder_loops(ir: LoopProgram) -> list[LoopNode]:
    """Loops that lower to backward branches (unrolled/vectorized ones are inlined)."""
    return [lp for lp in ir.loops() if not lp.unrolled and lp.vector_width is None]


def loop_map(ir: LoopProgram, cfg: Cfg, diagnostics: list[str] | None = None) -> list[LoopBlockMatch]:
    """Greedy in-order pairing of IR loops with loop body blocks.

    A pair matches when the block's loop-bound immediate equals the IR loop
    extent. The IR cursor advances only on a successful match.
    """
    for_loops = preorder_loops(ir)
    candidates = identify_loop_lbbs(cfg)
    # trip product for every loop, over matched ancestors (all branching loops here)
    trip_prod: dict[str, int] = {}

    def fill(n, prod):
        if isinstance(n, AccessNode):
            return
        here = prod
        if not n.unrolled and n.vector_width is None:
            here = prod * n.extent
            trip_prod[n.var] = here
        for c in n.children:
            fill(c, here)

    for n in ir.body:
        fill(n, 1)

    matched: list[LoopBlockMatch] = []
    matched_idx = 0
    for block in candidates:
        if matched_idx >= len(for_loops):
            if diagnostics is not None:
                diagnostics.append(f"unmatched loop block {block.label or block.index}")
            continue
        loop = for_loops[matched_idx]
        bound = loop_bound_immediate(cfg, block)
        if bound is not None and bound in (loop.extent, loop.extent * loop.step):
            matched.append(LoopBlockMatch(loop, block, loop.extent, trip_prod[loop.var]))
            matched_idx += 1
        elif diagnostics is not None:
            diagnostics.append(
                f"block {block.label or block.index} bound {bound} does not match loop "
                f"{loop.var!r} extent {loop.extent}"
            )
    if diagnostics is not None:
        for lp in for_loops[matched_idx:]:
            diagnostics.append(f"IR loop {lp.var!r} not matched to any block")
    return matched


# significant-instruction sets; extensible via ArchSpec config
SIGNIFICANT = {
    "cpu-x86": {"n_fma": ("vfmadd", "vfnmadd", "vfmsub"), "n_vmov": ("vmov",)},
    "cpu-aarch64": {"n_fma": ("fmla", "fmls"), "n_vload": ("ld",), "n_vstore": ("st",)},
}


def count_simd(ir: LoopProgram, cfg: Cfg, matches: list[LoopBlockMatch], target: str,
               significant: dict[str, tuple[str, ...]] | None = None) -> dict[str, float]:
    """Weighted significant-instruction counts over matched loop blocks.

    Each matched block's counts are multiplied by the product of all enclosing
    matched trip counts. x86 vmov direction (load vs store) is resolved from
    the memory operand position.
    """
    if significant is None:
        if target not in SIGNIFICANT:
            raise AsmError(f"unknown target {target!r}")
        significant = SIGNIFICANT[target]
    counts: dict[str, float] = {}
    if target == "cpu-x86":
        counts = {"n_fma": 0.0, "n_vload": 0.0, "n_vstore": 0.0}
    else:
        counts = {name: 0.0 for name in significant}
        counts.setdefault("n_fma", 0.0)
    for m in matches:
        weight = m.enclosing_trip_product
        for instr in m.block.instructions:
            mn = instr.mnemonic.lower()
            for feature, prefixes in significant.items():
                if mn.startswith(tuple(prefixes)):
                    if feature == "n_vmov":
                        # AT&T: memory operand in parens; source first, dest last
                        if instr.operands and "(" in instr.operands[0]:
                            counts["n_vload"] += weight
                        else:
                            counts["n_vstore"] += weight
                    else:
                        counts[feature] += weight
                    break
    return counts


def ir_simd_oracle(ir: LoopProgram) -> dict[str, float]:
    """Analytic IR-walk count of expected significant instructions.

    Mirrors the mock emitter's lowering: one load per load access, one fma plus
    one store per store access, weighted by iteration volume (vectorized loops
    contribute a factor of 1: one vector op covers the whole lane group).
    """
    counts = {"n_fma": 0.0, "n_vload": 0.0, "n_vstore": 0.0}

    def walk(n, vol):
        if isinstance(n, AccessNode):
            if n.kind == "load":
                counts["n_vload"] += vol
            else:
                counts["n_fma"] += vol
                counts["n_vstore"] += vol
            return
        factor = 1 if n.vector_width is not None else n.extent
        for c in n.children:
            walk(c, vol * factor)

    for n in ir.body:
        walk(n, 1)
    return counts
