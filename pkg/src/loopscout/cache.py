"""Per-loop-node data footprint and data movement estimation.

Footprints are computed bottom-up over the loop tree. Access index ranges are
modeled as strided intervals per tensor dimension; tensor footprints are box
cardinalities. A loop node whose single-iteration footprint fits in cache moves
each element once; otherwise each tensor either streams its full footprint
(when it is reusable across the loop's iterations) or re-moves its child
movement every iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .ir import AccessNode, AffineExpr, LoopNode, LoopProgram


@dataclass(frozen=True)
class CacheSpec:
    capacity_elements: int

    def __post_init__(self):
        if self.capacity_elements <= 0:
            raise ValueError("cache capacity must be positive")


@dataclass(frozen=True)
class StridedInterval:
    """Value set {lo, lo+g, ..., hi} when exact; an interval estimate otherwise."""

    lo: int
    hi: int
    stride: int  # 0 only for singletons
    count: int
    exact: bool

    @staticmethod
    def point(v: int) -> "StridedInterval":
        return StridedInterval(v, v, 0, 1, True)

    def shift(self, d: int) -> "StridedInterval":
        return StridedInterval(self.lo + d, self.hi + d, self.stride, self.count, self.exact)


def _si_sum(a: StridedInterval, b: StridedInterval) -> StridedInterval:
    if a.count == 1:
        return b.shift(a.lo)
    if b.count == 1:
        return a.shift(b.lo)
    lo, hi = a.lo + b.lo, a.hi + b.hi
    ga, gb = a.stride, b.stride
    g = math.gcd(ga, gb)
    if a.exact and b.exact:
        # fine/coarse covering: the coarse stride is a multiple of the fine one
        # and no larger than the fine set's span plus one step -> dense result
        fine, coarse = (a, b) if ga <= gb else (b, a)
        gf, gc = fine.stride, coarse.stride
        if gc % gf == 0 and gc <= gf * fine.count:
            return StridedInterval(lo, hi, gf, (hi - lo) // gf + 1, True)
    est = min((hi - lo) // g + 1 if g else 1, a.count * b.count)
    return StridedInterval(lo, hi, g, est, False)


def _si_union(a: StridedInterval, b: StridedInterval) -> StridedInterval:
    if a == b:
        return a
    lo, hi = min(a.lo, b.lo), max(a.hi, b.hi)
    if a.exact and b.exact and a.stride == b.stride and a.stride > 0 \
            and (a.lo - b.lo) % a.stride == 0:
        # same phase and stride: exact when the two runs overlap or abut
        gap_ok = a.lo <= b.hi + a.stride and b.lo <= a.hi + a.stride
        if gap_ok:
            return StridedInterval(lo, hi, a.stride, (hi - lo) // a.stride + 1, True)
    g = math.gcd(math.gcd(a.stride, b.stride), abs(a.lo - b.lo))
    est = min((hi - lo) // g + 1 if g else 1, a.count + b.count)
    return StridedInterval(lo, hi, g, est, False)


def expr_range(expr: AffineExpr, loop_info: dict[str, tuple[int, int]],
               expanded: frozenset[str]) -> StridedInterval:
    """Value set of `expr` with expanded variables ranging and others fixed at 0.

    `loop_info` maps var -> (extent, step).
    """
    acc = StridedInterval.point(expr.const)
    for var, coef in expr.terms:
        if var not in expanded:
            continue
        extent, step = loop_info[var]
        if extent == 1 or coef == 0:
            continue
        d = coef * step
        lo, hi = (0, d * (extent - 1)) if d > 0 else (d * (extent - 1), 0)
        acc = _si_sum(acc, StridedInterval(lo, hi, abs(d), extent, True))
    return acc


@dataclass
class TensorState:
    """Bottom-up per-tensor traversal state."""

    exprs: list[tuple[AffineExpr, ...]] = field(default_factory=list)
    dmov: int = 0
    reuse: bool = True


@dataclass(frozen=True)
class NodeCost:
    dfp: int
    dmov: int
    per_tensor_dmov: dict[str, int]
    per_tensor_reuse: dict[str, bool]
    inexact: bool


def tensor_footprint(accesses: list[tuple[AffineExpr, ...]],
                     loop_info: dict[str, tuple[int, int]],
                     expanded: frozenset[str]) -> tuple[int, bool]:
    """Box cardinality of the union of access footprints; (elements, exact?)."""
    rank = len(accesses[0])
    exact = True
    card = 1
    for d in range(rank):
        si = expr_range(accesses[0][d], loop_info, expanded)
        for acc in accesses[1:]:
            si = _si_union(si, expr_range(acc[d], loop_info, expanded))
        exact = exact and si.exact
        card *= si.count
    return card, exact


class CacheModel:
    def __init__(self, program: LoopProgram, cache: CacheSpec):
        self.program = program
        self.cache = cache
        self.loop_info = {lp.var: (lp.extent, lp.step) for lp in program.loops()}
        self.node_costs: dict[str, NodeCost] = {}  # keyed by loop var
        self.diagnostics: list[str] = []
        self._inexact = False

    def run(self) -> NodeCost:
        """Evaluate the whole tree; returns the virtual-root cost."""
        states: dict[str, TensorState] = {}
        total_dmov = 0
        total_dfp = 0
        per_dmov: dict[str, int] = {}
        per_reuse: dict[str, bool] = {}
        for n in self.program.body:
            cost, st = self._visit(n)
            total_dmov += cost.dmov
            total_dfp += cost.dfp
            for name, v in cost.per_tensor_dmov.items():
                per_dmov[name] = per_dmov.get(name, 0) + v
            per_reuse.update(cost.per_tensor_reuse)
        root = NodeCost(total_dfp, total_dmov, per_dmov, per_reuse, self._inexact)
        self.node_costs["<root>"] = root
        return root

    def _visit(self, node) -> tuple[NodeCost, dict[str, TensorState]]:
        if isinstance(node, AccessNode):
            st = TensorState(exprs=[node.index_exprs], dmov=1, reuse=True)
            cost = NodeCost(1, 1, {node.tensor: 1}, {node.tensor: True}, False)
            return cost, {node.tensor: st}
        return self._visit_loop(node)

    def _visit_loop(self, node: LoopNode) -> tuple[NodeCost, dict[str, TensorState]]:
        merged: dict[str, TensorState] = {}
        expanded_below: set[str] = set()

        def vars_below(n, acc):
            if isinstance(n, LoopNode):
                acc.add(n.var)
                for c in n.children:
                    vars_below(c, acc)

        for c in node.children:
            vars_below(c, expanded_below)
            cost, states = self._visit(c)
            for name, st in states.items():
                if name not in merged:
                    merged[name] = TensorState()
                m = merged[name]
                m.exprs.extend(st.exprs)
                m.dmov += st.dmov
                m.reuse = m.reuse and st.reuse

        below = frozenset(expanded_below)
        full = frozenset(expanded_below | {node.var})
        cap = self.cache.capacity_elements

        single_fp = 0
        full_fp: dict[str, int] = {}
        uses_var: dict[str, bool] = {}
        for name, st in merged.items():
            fp1, exact1 = tensor_footprint(st.exprs, self.loop_info, below)
            fpn, exactn = tensor_footprint(st.exprs, self.loop_info, full)
            if not (exact1 and exactn):
                self._inexact = True
                self.diagnostics.append(
                    f"inexact footprint for tensor {name!r} at loop {node.var!r}"
                )
            single_fp += fp1
            full_fp[name] = fpn
            uses_var[name] = any(e.coef(node.var) != 0 for exprs in st.exprs for e in exprs)

        # reuse across this loop's iterations requires the inter-use footprint
        # (one full iteration of this loop) to fit in cache
        if single_fp > cap:
            for name, st in merged.items():
                if not uses_var[name]:
                    st.reuse = False

        per_dmov: dict[str, int] = {}
        if single_fp <= cap:
            for name in merged:
                per_dmov[name] = full_fp[name]
        else:
            for name, st in merged.items():
                if st.reuse:
                    per_dmov[name] = full_fp[name]
                else:
                    per_dmov[name] = st.dmov * node.extent

        # a tensor whose working set no longer fits cannot be kept resident above
        for name, st in merged.items():
            if full_fp[name] > cap:
                st.reuse = False
            st.dmov = per_dmov[name]

        dfp = sum(full_fp.values())
        dmov = sum(per_dmov.values())
        cost = NodeCost(dfp, dmov, dict(per_dmov),
                        {n: s.reuse for n, s in merged.items()}, self._inexact)
        self.node_costs[node.var] = cost
        return cost, merged


def visit_node(program: LoopProgram, node, cache: CacheSpec) -> NodeCost:
    """Cost of a single (sub)tree node within `program`."""
    model = CacheModel(program, cache)
    cost, _ = model._visit(node)
    return cost


def analyze(program: LoopProgram, cache: CacheSpec) -> CacheModel:
    model = CacheModel(program, cache)
    model.run()
    return model


def cache_feature(program: LoopProgram, cache: CacheSpec) -> dict[str, float]:
    """Root data movement, in elements and bytes."""
    model = analyze(program, cache)
    root = model.node_costs["<root>"]
    elem_bytes = {t.name: t.elem_bytes for t in program.tensors}
    movement_bytes = sum(v * elem_bytes[n] for n, v in root.per_tensor_dmov.items())
    return {"est_l1_movement": float(root.dmov),
            "est_l1_movement_bytes": float(movement_bytes)}


# ---------------------------------------------------------------------------
# Trace oracles (independent of the model above; used by the test suite)
# ---------------------------------------------------------------------------


def address_trace(program: LoopProgram) -> list[int]:
    """Element-granularity address trace in execution order."""
    bases: dict[str, int] = {}
    offset = 0
    strides: dict[str, tuple[int, ...]] = {}
    for t in program.tensors:
        bases[t.name] = offset
        size = 1
        st = []
        for d in reversed(t.dims):
            st.append(size)
            size *= d
        strides[t.name] = tuple(reversed(st))
        offset += size
    trace: list[int] = []
    env: dict[str, int] = {}

    def walk(n):
        if isinstance(n, AccessNode):
            addr = bases[n.tensor]
            for e, s in zip(n.index_exprs, strides[n.tensor]):
                addr += e.evaluate(env) * s
            trace.append(addr)
            return
        for k in range(n.extent):
            env[n.var] = k * n.step
            for c in n.children:
                walk(c)
        del env[n.var]

    for n in program.body:
        walk(n)
    return trace


def lru_misses(trace: list[int], capacity_elements: int) -> int:
    """Fully associative LRU miss count over an element-granularity trace."""
    from collections import OrderedDict

    cache: OrderedDict[int, None] = OrderedDict()
    misses = 0
    for addr in trace:
        if addr in cache:
            cache.move_to_end(addr)
        else:
            misses += 1
            cache[addr] = None
            if len(cache) > capacity_elements:
                cache.popitem(last=False)
    return misses


def distinct_elements(trace: list[int]) -> int:
    return len(set(trace))
