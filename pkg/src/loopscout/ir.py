"""Loop-nest IR, schedule transformations, and the mock low-level code emitter.

A program is a tree of loop nodes and tensor-access leaves. Index expressions
are affine over the loop variables; a loop variable takes the values
``0, step, 2*step, ..., (extent-1)*step``.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field, replace


class ProgramError(ValueError):
    """Raised for malformed programs, schedules, or space descriptions."""


_TERM_RE = re.compile(r"^\s*(?:(\d+)\s*\*\s*)?([A-Za-z_][A-Za-z0-9_]*)\s*$")


@dataclass(frozen=True)
class AffineExpr:
    """Affine integer expression: sum of coef*var terms plus a constant."""

    terms: tuple[tuple[str, int], ...]  # sorted by var name, coef != 0
    const: int = 0

    @staticmethod
    def parse(text: str) -> "AffineExpr":
        coefs: dict[str, int] = {}
        const = 0
        # split into signed chunks: "4*i - j + 1" -> [("+","4*i"),("-","j"),("+","1")]
        chunks = re.findall(r"([+-]?)\s*([^+-]+)", text)
        if not chunks or not text.strip():
            raise ProgramError(f"empty affine expression: {text!r}")
        for sign, body in chunks:
            body = body.strip()
            if not body:
                raise ProgramError(f"malformed affine expression: {text!r}")
            s = -1 if sign == "-" else 1
            if re.fullmatch(r"\d+", body):
                const += s * int(body)
                continue
            m = _TERM_RE.match(body)
            if not m:
                raise ProgramError(f"non-affine or malformed term {body!r} in {text!r}")
            coef = s * int(m.group(1) or 1)
            var = m.group(2)
            coefs[var] = coefs.get(var, 0) + coef
        terms = tuple(sorted((v, c) for v, c in coefs.items() if c != 0))
        return AffineExpr(terms, const)

    def variables(self) -> frozenset[str]:
        return frozenset(v for v, _ in self.terms)

    def coef(self, var: str) -> int:
        for v, c in self.terms:
            if v == var:
                return c
        return 0

    def with_extra_term(self, var: str, coef: int) -> "AffineExpr":
        coefs = dict(self.terms)
        coefs[var] = coefs.get(var, 0) + coef
        return AffineExpr(tuple(sorted((v, c) for v, c in coefs.items() if c != 0)), self.const)

    def evaluate(self, env: dict[str, int]) -> int:
        return self.const + sum(c * env[v] for v, c in self.terms)

    def __str__(self) -> str:
        out = ""
        for v, c in self.terms:
            mag = v if abs(c) == 1 else f"{abs(c)}*{v}"
            if not out:
                out = mag if c > 0 else f"-{mag}"
            else:
                out += (" + " if c > 0 else " - ") + mag
        if self.const or not out:
            if not out:
                out = str(self.const)
            else:
                out += (" + " if self.const > 0 else " - ") + str(abs(self.const))
        return out


@dataclass(frozen=True)
class TensorDecl:
    name: str
    dims: tuple[int, ...]
    elem_bytes: int = 4
    scope: str = "global"  # "global" or "shared"

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class AccessNode:
    tensor: str
    kind: str  # "load" or "store"
    index_exprs: tuple[AffineExpr, ...]


@dataclass(frozen=True)
class LoopNode:
    var: str
    extent: int
    step: int = 1
    parallel: bool = False
    unrolled: bool = False
    vector_width: int | None = None
    children: tuple["LoopNode | AccessNode", ...] = ()


Node = "LoopNode | AccessNode"


@dataclass(frozen=True)
class LoopProgram:
    tensors: tuple[TensorDecl, ...]
    body: tuple["LoopNode | AccessNode", ...]

    def tensor(self, name: str) -> TensorDecl:
        for t in self.tensors:
            if t.name == name:
                return t
        raise ProgramError(f"unknown tensor {name!r}")

    def loops(self) -> list[LoopNode]:
        """All loop nodes in preorder (depth-first, textual order)."""
        out: list[LoopNode] = []

        def walk(n):
            if isinstance(n, LoopNode):
                out.append(n)
                for c in n.children:
                    walk(c)

        for n in self.body:
            walk(n)
        return out

    def find_loop(self, var: str) -> LoopNode:
        for lp in self.loops():
            if lp.var == var:
                return lp
        raise ProgramError(f"no loop named {var!r}")

    def iteration_volume(self) -> int:
        """Total number of innermost-body executions, summed over statements."""

        def walk(n, vol):
            if isinstance(n, AccessNode):
                return
            inner_vol = vol * n.extent
            if any(isinstance(c, AccessNode) for c in n.children):
                total_holder[0] += inner_vol
            for c in n.children:
                walk(c, inner_vol)

        total_holder = [0]
        for n in self.body:
            walk(n, 1)
        return total_holder[0]


# ---------------------------------------------------------------------------
# Parsing / serialization (canonical JSON form)
# ---------------------------------------------------------------------------


def _node_from_json(obj, bound: tuple[str, ...], tensors: dict[str, TensorDecl]):
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ProgramError(f"node must be a single-key object, got {obj!r}")
    if "loop" in obj:
        d = obj["loop"]
        var = d["var"]
        extent = int(d["extent"])
        step = int(d.get("step", 1))
        if extent <= 0 or step <= 0:
            raise ProgramError(f"loop {var!r}: extent and step must be positive")
        if var in bound:
            raise ProgramError(f"loop variable {var!r} shadows an enclosing loop")
        attrs = d.get("attrs", [])
        parallel = "parallel" in attrs
        unrolled = "unroll" in attrs
        vector_width = None
        for a in attrs:
            if isinstance(a, str) and a.startswith("vectorize:"):
                vector_width = int(a.split(":", 1)[1])
        if vector_width is not None and extent % vector_width != 0:
            raise ProgramError(f"loop {var!r}: vector width {vector_width} does not divide extent {extent}")
        children = tuple(
            _node_from_json(c, bound + (var,), tensors) for c in d.get("body", [])
        )
        return LoopNode(var, extent, step, parallel, unrolled, vector_width, children)
    if "access" in obj:
        d = obj["access"]
        name = d["tensor"]
        if name not in tensors:
            raise ProgramError(f"access to undeclared tensor {name!r}")
        kind = d["kind"]
        if kind not in ("load", "store"):
            raise ProgramError(f"access kind must be load|store, got {kind!r}")
        exprs = tuple(AffineExpr.parse(s) for s in d["idx"])
        if len(exprs) != tensors[name].rank:
            raise ProgramError(
                f"tensor {name!r} has rank {tensors[name].rank}, got {len(exprs)} indices"
            )
        for e in exprs:
            for v in e.variables():
                if v not in bound:
                    raise ProgramError(f"index variable {v!r} not bound by any enclosing loop")
        return AccessNode(name, kind, exprs)
    raise ProgramError(f"unknown node kind: {list(obj)!r}")


def parse_program(text: str) -> LoopProgram:
    """Parse the canonical JSON program form. See the repo README for the schema."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramError(f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ProgramError("top level must be an object")
    tensors = []
    for t in data.get("tensors", []):
        dims = tuple(int(x) for x in t["dims"])
        if any(d <= 0 for d in dims):
            raise ProgramError(f"tensor {t['name']!r}: dims must be positive")
        tensors.append(
            TensorDecl(t["name"], dims, int(t.get("elem_bytes", 4)), t.get("scope", "global"))
        )
    tmap = {t.name: t for t in tensors}
    if len(tmap) != len(tensors):
        raise ProgramError("duplicate tensor names")
    body = tuple(_node_from_json(n, (), tmap) for n in data.get("body", []))
    return LoopProgram(tuple(tensors), body)


def _node_to_json(n) -> dict:
    if isinstance(n, AccessNode):
        return {"access": {"tensor": n.tensor, "kind": n.kind, "idx": [str(e) for e in n.index_exprs]}}
    attrs = []
    if n.parallel:
        attrs.append("parallel")
    if n.unrolled:
        attrs.append("unroll")
    if n.vector_width is not None:
        attrs.append(f"vectorize:{n.vector_width}")
    d = {"var": n.var, "extent": n.extent, "step": n.step, "attrs": attrs,
         "body": [_node_to_json(c) for c in n.children]}
    return {"loop": d}


def serialize_program(p: LoopProgram) -> str:
    data = {
        "tensors": [
            {"name": t.name, "dims": list(t.dims), "elem_bytes": t.elem_bytes, "scope": t.scope}
            for t in p.tensors
        ],
        "body": [_node_to_json(n) for n in p.body],
    }
    return json.dumps(data, indent=2)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tile:
    loop: str
    factor: int


@dataclass(frozen=True)
class Reorder:
    order: tuple[str, ...]


@dataclass(frozen=True)
class Unroll:
    loop: str


@dataclass(frozen=True)
class Vectorize:
    loop: str
    width: int


@dataclass(frozen=True)
class Parallel:
    loop: str


Transform = "Tile | Reorder | Unroll | Vectorize | Parallel"


@dataclass(frozen=True)
class Schedule:
    transforms: tuple = ()

    def to_json(self) -> list:
        out = []
        for t in self.transforms:
            if isinstance(t, Tile):
                out.append({"tile": {"loop": t.loop, "factor": t.factor}})
            elif isinstance(t, Reorder):
                out.append({"reorder": list(t.order)})
            elif isinstance(t, Unroll):
                out.append({"unroll": {"loop": t.loop}})
            elif isinstance(t, Vectorize):
                out.append({"vectorize": {"loop": t.loop, "width": t.width}})
            elif isinstance(t, Parallel):
                out.append({"parallel": {"loop": t.loop}})
            else:
                raise ProgramError(f"unknown transform {t!r}")
        return out

    @staticmethod
    def from_json(data: list) -> "Schedule":
        ts = []
        for rec in data:
            if "tile" in rec:
                ts.append(Tile(rec["tile"]["loop"], int(rec["tile"]["factor"])))
            elif "reorder" in rec:
                ts.append(Reorder(tuple(rec["reorder"])))
            elif "unroll" in rec:
                ts.append(Unroll(rec["unroll"]["loop"]))
            elif "vectorize" in rec:
                ts.append(Vectorize(rec["vectorize"]["loop"], int(rec["vectorize"]["width"])))
            elif "parallel" in rec:
                ts.append(Parallel(rec["parallel"]["loop"]))
            else:
                raise ProgramError(f"unknown transform record {rec!r}")
        return Schedule(tuple(ts))


def _all_vars(p: LoopProgram) -> set[str]:
    return {lp.var for lp in p.loops()}


def _rewrite_exprs(node, var: str, inner_var: str):
    """Add `inner_var` alongside `var` in every access expression (tiling rewrite)."""
    if isinstance(node, AccessNode):
        new_exprs = []
        for e in node.index_exprs:
            c = e.coef(var)
            new_exprs.append(e.with_extra_term(inner_var, c) if c else e)
        return replace(node, index_exprs=tuple(new_exprs))
    return replace(node, children=tuple(_rewrite_exprs(c, var, inner_var) for c in node.children))


def _tile(p: LoopProgram, var: str, factor: int, mark_vector: bool = False) -> LoopProgram:
    target = p.find_loop(var)
    if factor < 1 or factor > target.extent:
        raise ProgramError(f"tile factor {factor} out of range for loop {var!r} (extent {target.extent})")
    names = _all_vars(p)
    inner_var = var + "_i"
    while inner_var in names:
        inner_var += "_"

    def walk(n):
        if isinstance(n, AccessNode):
            return n
        if n.var == var:
            children = tuple(_rewrite_exprs(c, var, inner_var) for c in n.children)
            inner = LoopNode(inner_var, factor, n.step,
                             vector_width=factor if mark_vector else None,
                             children=children)
            return LoopNode(var, math.ceil(n.extent / factor), n.step * factor,
                            parallel=n.parallel, unrolled=n.unrolled, children=(inner,))
        return replace(n, children=tuple(walk(c) for c in n.children))

    return replace(p, body=tuple(walk(n) for n in p.body))


def _reorder(p: LoopProgram, order: tuple[str, ...]) -> LoopProgram:
    if len(order) < 2:
        return p
    chain = [p.find_loop(v) for v in order]
    # the named loops must form a parent/child chain, in some permutation
    by_var = {lp.var: lp for lp in chain}

    def chain_ok(outer) -> list[LoopNode]:
        seq = [outer]
        cur = outer
        while len(seq) < len(order):
            loop_kids = [c for c in cur.children if isinstance(c, LoopNode)]
            nxt = [c for c in loop_kids if c.var in by_var]
            if len(nxt) != 1 or len(cur.children) != 1:
                raise ProgramError(f"reorder {order!r}: loops do not form a perfect nest chain")
            cur = nxt[0]
            seq.append(cur)
        return seq

    # identify current chain order by nesting depth
    depths = {}

    def depth_walk(n, d):
        if isinstance(n, LoopNode):
            if n.var in by_var:
                depths[n.var] = d
            for c in n.children:
                depth_walk(c, d + 1)

    for n in p.body:
        depth_walk(n, 0)
    if len(depths) != len(order):
        raise ProgramError(f"reorder {order!r}: missing loops")
    current = sorted(by_var, key=lambda v: depths[v])
    seq = chain_ok(by_var[current[0]])
    headers = [by_var[v] for v in order]

    def rebuild(i):
        inner_children = seq[-1].children
        node_children = inner_children if i == len(seq) - 1 else (rebuild(i + 1),)
        h = headers[i]
        return LoopNode(h.var, h.extent, h.step, h.parallel, h.unrolled, h.vector_width,
                        node_children)

    new_chain = rebuild(0)

    def walk(n):
        if isinstance(n, AccessNode):
            return n
        if n.var == seq[0].var:
            return new_chain
        return replace(n, children=tuple(walk(c) for c in n.children))

    return replace(p, body=tuple(walk(n) for n in p.body))


def _mark(p: LoopProgram, var: str, **kwargs) -> LoopProgram:
    p.find_loop(var)  # existence check

    def walk(n):
        if isinstance(n, AccessNode):
            return n
        if n.var == var:
            return replace(n, **kwargs)
        return replace(n, children=tuple(walk(c) for c in n.children))

    return replace(p, body=tuple(walk(n) for n in p.body))


def apply_schedule(p: LoopProgram, s: Schedule) -> LoopProgram:
    """Apply transforms in order; each must reference a loop that exists at that point."""
    for t in s.transforms:
        if isinstance(t, Tile):
            p = _tile(p, t.loop, t.factor)
        elif isinstance(t, Reorder):
            p = _reorder(p, t.order)
        elif isinstance(t, Unroll):
            p = _mark(p, t.loop, unrolled=True)
        elif isinstance(t, Vectorize):
            target = p.find_loop(t.loop)
            if target.extent % t.width != 0:
                raise ProgramError(
                    f"vectorize width {t.width} does not divide extent {target.extent} of {t.loop!r}"
                )
            p = _tile(p, t.loop, t.width, mark_vector=True)
        elif isinstance(t, Parallel):
            p = _mark(p, t.loop, parallel=True)
        else:
            raise ProgramError(f"unknown transform {t!r}")
    return p


# ---------------------------------------------------------------------------
# Schedule space enumeration
# ---------------------------------------------------------------------------


def enumerate_space(p: LoopProgram, space: dict) -> list[Schedule]:
    """Expand a space description into the full list of candidate schedules.

    Space description keys (all optional, at least one choice point required):
      - "tile": {loop: [factors...]}       factors must divide the loop extent
      - "reorder": [[var, ...], ...]       candidate permutations (chain reorder)
      - "vectorize": {loop: [widths...]}   0 means "no vectorization"
      - "unroll": [loop, ...]              each becomes an on/off choice
      - "parallel": [loop, ...]            each becomes an on/off choice
    """
    axes = space_axes(p, space)
    if not axes:
        raise ProgramError("empty schedule space")
    schedules = []
    seen = set()
    for combo in itertools.product(*(ax.choices for ax in axes)):
        transforms = []
        for choice in combo:
            transforms.extend(choice)
        s = Schedule(tuple(transforms))
        key = json.dumps(s.to_json())
        if key not in seen:
            seen.add(key)
            schedules.append(s)
    return schedules


@dataclass(frozen=True)
class SpaceAxis:
    """One independent choice point; each choice is a (possibly empty) transform tuple."""

    name: str
    choices: tuple[tuple, ...]


def space_axes(p: LoopProgram, space: dict) -> list[SpaceAxis]:
    axes: list[SpaceAxis] = []
    for loop, factors in sorted(space.get("tile", {}).items()):
        extent = p.find_loop(loop).extent
        for f in factors:
            if f < 1 or extent % f != 0:
                raise ProgramError(f"tile factor {f} is not a divisor of extent {extent} (loop {loop!r})")
        choices = tuple((Tile(loop, f),) for f in sorted(factors))
        axes.append(SpaceAxis(f"tile:{loop}", choices))
    perms = space.get("reorder", [])
    if perms:
        choices = tuple((Reorder(tuple(perm)),) for perm in perms)
        axes.append(SpaceAxis("reorder", choices))
    for loop, widths in sorted(space.get("vectorize", {}).items()):
        extent = p.find_loop(loop).extent
        ch = []
        for w in sorted(widths):
            if w == 0:
                ch.append(())
                continue
            if extent % w != 0:
                raise ProgramError(f"vector width {w} is not a divisor of extent {extent} (loop {loop!r})")
            ch.append((Vectorize(loop, w),))
        axes.append(SpaceAxis(f"vectorize:{loop}", tuple(ch)))
    for loop in sorted(space.get("unroll", [])):
        p.find_loop(loop)
        axes.append(SpaceAxis(f"unroll:{loop}", ((), (Unroll(loop),))))
    for loop in sorted(space.get("parallel", [])):
        p.find_loop(loop)
        axes.append(SpaceAxis(f"parallel:{loop}", ((), (Parallel(loop),))))
    return axes


# ---------------------------------------------------------------------------
# Mock code emitter
# ---------------------------------------------------------------------------

TARGETS = ("cpu-x86", "cpu-aarch64", "gpu-ptx")


def emit_mock_asm(p: LoopProgram, target: str) -> str:
    """Deterministically lower a program to mock assembly/PTX text.

    Every non-unrolled, non-vectorized loop gets a labeled body block and a
    backward conditional branch whose compare immediate is the loop extent.
    Innermost bodies lower each load to one vector load, and each store to one
    fused-multiply-add followed by one vector store. Unrolled loops are inlined
    extent times; vectorized loops are inlined once (one vector op per lane group).
    """
    if target not in TARGETS:
        raise ProgramError(f"unsupported target {target!r} (expected one of {TARGETS})")
    lines: list[str] = []
    label_counter = [0]
    vreg = [0]

    if target == "cpu-x86":
        counter_regs = ["%r8", "%r9", "%r10", "%r11", "%r12", "%r13", "%r14", "%r15"]
        base_regs = ["%rax", "%rbx", "%rcx", "%rdx", "%rsi", "%rdi"]
    elif target == "cpu-aarch64":
        counter_regs = ["x8", "x9", "x10", "x11", "x12", "x13", "x14", "x15"]
        base_regs = ["x0", "x1", "x2", "x3", "x4", "x5"]
    else:
        counter_regs = ["%r8", "%r9", "%r10", "%r11", "%r12", "%r13", "%r14", "%r15"]
        base_regs = ["%rd1", "%rd2", "%rd3", "%rd4", "%rd5", "%rd6"]

    tensor_base = {t.name: base_regs[i % len(base_regs)] for i, t in enumerate(p.tensors)}

    def emit_body(accesses: list[AccessNode]):
        loads = [a for a in accesses if a.kind == "load"]
        stores = [a for a in accesses if a.kind == "store"]
        load_regs = []
        for a in loads:
            r = vreg[0] % 16
            vreg[0] += 1
            base = tensor_base[a.tensor]
            if target == "cpu-x86":
                lines.append(f"    vmovups ({base}), %zmm{r}")
            elif target == "cpu-aarch64":
                lines.append(f"    ld1 {{v{r}.4s}}, [{base}]")
            else:
                lines.append(f"    ld.global.f32 %f{r}, [{base}]")
            load_regs.append(r)
        for j, a in enumerate(stores):
            acc = 16 + (j % 8)
            s1 = load_regs[(2 * j) % len(load_regs)] if load_regs else 0
            s2 = load_regs[(2 * j + 1) % len(load_regs)] if load_regs else 1
            base = tensor_base[a.tensor]
            if target == "cpu-x86":
                lines.append(f"    vfmadd231ps %zmm{s1}, %zmm{s2}, %zmm{acc}")
                lines.append(f"    vmovups %zmm{acc}, ({base})")
            elif target == "cpu-aarch64":
                lines.append(f"    fmla v{acc}.4s, v{s1}.4s, v{s2}.4s")
                lines.append(f"    st1 {{v{acc}.4s}}, [{base}]")
            else:
                lines.append(f"    fma.rn.f32 %f{acc}, %f{s1}, %f{s2}, %f{acc}")
                lines.append(f"    st.global.f32 [{base}], %f{acc}")

    def emit_node(n, depth: int):
        if isinstance(n, AccessNode):
            return  # handled by the enclosing loop's body pass
        accesses = [c for c in n.children if isinstance(c, AccessNode)]
        subloops = [c for c in n.children if isinstance(c, LoopNode)]
        if n.unrolled or n.vector_width is not None:
            copies = 1 if n.vector_width is not None else n.extent
            for _ in range(copies):
                if accesses:
                    emit_body(accesses)
                for c in subloops:
                    emit_node(c, depth)
            return
        ctr = counter_regs[depth % len(counter_regs)]
        lid = label_counter[0]
        label = f".LBB_{lid}" if target != "gpu-ptx" else f"$L_{lid}"
        label_counter[0] += 1
        if target == "cpu-x86":
            lines.append(f"    movq $0, {ctr}")
        elif target == "cpu-aarch64":
            lines.append(f"    mov {ctr}, #0")
        else:
            lines.append(f"    mov.u32 {ctr}, 0;")
        lines.append(f"{label}:")
        if accesses:
            emit_body(accesses)
        for c in subloops:
            emit_node(c, depth + 1)
        if target == "cpu-x86":
            lines.append(f"    addq $1, {ctr}")
            lines.append(f"    cmpq ${n.extent}, {ctr}")
            lines.append(f"    jne {label}")
        elif target == "cpu-aarch64":
            lines.append(f"    add {ctr}, {ctr}, #1")
            lines.append(f"    cmp {ctr}, #{n.extent}")
            lines.append(f"    b.ne {label}")
        else:
            pr = f"%p{lid}"
            lines.append(f"    add.s32 {ctr}, {ctr}, 1;")
            lines.append(f"    setp.lt.s32 {pr}, {ctr}, {n.extent};")
            lines.append(f"    @{pr} bra {label};")

    for n in p.body:
        emit_node(n, 0)
    lines.append("    ret" + (";" if target == "gpu-ptx" else ""))
    return "\n".join(lines) + "\n"
