"""Shared program builders and oracles for the test suite."""

from __future__ import annotations

import json
import random

from loopscout import parse_program
from loopscout.ir import LoopProgram


def acc(tensor, kind, idx):
    return {"access": {"tensor": tensor, "kind": kind, "idx": idx}}


def loop(var, extent, body, step=1, attrs=()):
    return {"loop": {"var": var, "extent": extent, "step": step,
                     "attrs": list(attrs), "body": body}}


def build(tensors, body) -> LoopProgram:
    return parse_program(json.dumps({"tensors": tensors, "body": body}))


def tensor(name, dims, elem_bytes=4, scope="global"):
    return {"name": name, "dims": list(dims), "elem_bytes": elem_bytes, "scope": scope}


def single_loop(extent=8, loads=1, stores=1) -> LoopProgram:
    body = [acc("A", "load", ["i"]) for _ in range(loads)]
    body += [acc("B", "store", ["i"]) for _ in range(stores)]
    n = max(extent, 1)
    return build([tensor("A", [n]), tensor("B", [n])], [loop("i", extent, body)])


def nested_loops(outer=4, inner=8) -> LoopProgram:
    n = outer * inner
    return build(
        [tensor("A", [n]), tensor("B", [n])],
        [loop("i", outer, [loop("j", inner, [
            acc("A", "load", [f"{inner}*i + j"]),
            acc("B", "store", [f"{inner}*i + j"]),
        ])])],
    )


def matmul(n=32) -> LoopProgram:
    return build(
        [tensor(t, [n, n]) for t in "ABC"],
        [loop("i", n, [loop("j", n, [loop("k", n, [
            acc("A", "load", ["i", "k"]),
            acc("B", "load", ["k", "j"]),
            acc("C", "load", ["i", "j"]),
            acc("C", "store", ["i", "j"]),
        ])])])],
    )


def two_mm(n=64, t=8) -> LoopProgram:
    """Fused and tiled two-matmul nest: C = A*B then E = C*D, i/j tiles fused."""
    first = loop("k", n, [loop("i1", t, [loop("j1", t, [
        acc("A", "load", ["i1 + it", "k"]),
        acc("B", "load", ["k", "j1 + jt"]),
        acc("C", "load", ["i1 + it", "j1 + jt"]),
        acc("C", "store", ["i1 + it", "j1 + jt"]),
    ])])])
    second = loop("l", n, [loop("i2", t, [loop("j2", t, [
        acc("C", "load", ["i2 + it", "j2 + jt"]),
        acc("D", "load", ["j2 + jt", "l"]),
        acc("E", "load", ["i2 + it", "l"]),
        acc("E", "store", ["i2 + it", "l"]),
    ])])])
    return build(
        [tensor(name, [n, n]) for name in "ABCDE"],
        [loop("it", n // t, [loop("jt", n // t, [first, second], step=t)], step=t)],
    )


def random_nest(rng: random.Random) -> tuple[LoopProgram, int]:
    """One random loop-nest fixture plus a cache capacity, for the trace oracles.

    Patterns are restricted to unit-coefficient and tiled-dense accesses so the
    box footprint is exact; total iterations stay below 2**16.
    """
    pattern = rng.choice(["stream", "transpose", "broadcast", "matmul", "interposed"])
    if pattern == "stream":
        n = rng.choice([64, 128, 256, 512])
        cap = rng.choice([n // 2, n, 2 * n])
        p = build([tensor("A", [n]), tensor("B", [n])],
                  [loop("i", n, [acc("A", "load", ["i"]), acc("B", "store", ["i"])])])
    elif pattern == "transpose":
        n = rng.choice([16, 24, 32])
        cap = rng.choice([n, n * n // 2, 2 * n * n])
        p = build([tensor("A", [n, n]), tensor("B", [n, n])],
                  [loop("i", n, [loop("j", n, [
                      acc("A", "load", ["i", "j"]),
                      acc("B", "store", ["j", "i"])])])])
    elif pattern == "broadcast":
        ni = rng.choice([8, 16])
        nj = rng.choice([64, 128, 256])
        cap = rng.choice([nj // 2, 2 * nj])
        p = build([tensor("A", [ni]), tensor("B", [nj]), tensor("C", [ni, nj])],
                  [loop("i", ni, [loop("j", nj, [
                      acc("A", "load", ["i"]),
                      acc("B", "load", ["j"]),
                      acc("C", "store", ["i", "j"])])])])
    elif pattern == "matmul":
        n = rng.choice([16, 24, 32])
        cap = rng.choice([n * 2, n * n // 2, n * n * 2])
        p = matmul(n)
    else:  # interposed: big streaming loop between two uses of a small tensor
        small = rng.choice([8, 16])
        big = rng.choice([256, 512])
        cap = rng.choice([big // 2, big // 4])
        p = build([tensor("A", [small]), tensor("B", [big])],
                  [loop("o", 4, [
                      loop("i", small, [acc("A", "load", ["i"])]),
                      loop("j", big, [acc("B", "load", ["j"])]),
                      loop("i2", small, [acc("A", "load", ["i2"])])])])
    return p, cap


BENCH_ARCH_TOML = """\
[meta]
name = "bench-x86"
family = "cpu"
target = "cpu-x86"
dialect = "x86-att"

[coefficients]
n_fma = 0.01
n_vload = 0.01
n_vstore = 0.01
est_l1_movement = 8.0
ilp_cycles = 1.0

[cache]
l1_capacity_bytes = 4096
element_bytes = 4

[ilp]
issue_width = 4
default_latency = 1

[ilp.latency]
fma = 4
load = 5
store = 4
move = 1
"""
