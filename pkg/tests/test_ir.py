import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import acc, build, loop, matmul, nested_loops, single_loop, tensor, two_mm
from loopscout import (ProgramError, Reorder, Schedule, Tile, Unroll, Vectorize,
                       apply_schedule, emit_mock_asm, enumerate_space,
                       parse_program, serialize_program)
from loopscout.ir import AffineExpr, Parallel, space_axes


class TestAffineExpr:
    def test_parse_and_str_round_trip(self):
        for text in ("i", "2*i + j", "4*i - j + 1", "3", "i + 0"):
            e = AffineExpr.parse(text)
            assert AffineExpr.parse(str(e)) == e

    def test_coefficients_and_const(self):
        e = AffineExpr.parse("4*i - j + 1")
        assert e.coef("i") == 4
        assert e.coef("j") == -1
        assert e.coef("k") == 0
        assert e.const == 1

    def test_evaluate(self):
        e = AffineExpr.parse("8*i + j")
        assert e.evaluate({"i": 3, "j": 5}) == 29

    def test_with_extra_term(self):
        e = AffineExpr.parse("2*i").with_extra_term("i_i", 2)
        assert e.evaluate({"i": 1, "i_i": 4}) == 10

    def test_rejects_products_of_variables(self):
        with pytest.raises(ProgramError):
            AffineExpr.parse("i*j")

    def test_rejects_empty(self):
        with pytest.raises(ProgramError):
            AffineExpr.parse("   ")


class TestParse:
    def test_round_trip(self):
        for p in (single_loop(), nested_loops(), matmul(8), two_mm(16, 4)):
            assert parse_program(serialize_program(p)) == p

    def test_two_mm_loop_order(self):
        p = two_mm()
        assert [lp.var for lp in p.loops()] == ["it", "jt", "k", "i1", "j1", "l", "i2", "j2"]

    def test_unbound_index_variable(self):
        with pytest.raises(ProgramError, match="not bound"):
            build([tensor("A", [8])], [loop("i", 8, [acc("A", "load", ["j"])])])

    def test_undeclared_tensor(self):
        with pytest.raises(ProgramError, match="undeclared"):
            build([], [loop("i", 8, [acc("A", "load", ["i"])])])

    def test_rank_mismatch(self):
        with pytest.raises(ProgramError, match="rank"):
            build([tensor("A", [8, 8])], [loop("i", 8, [acc("A", "load", ["i"])])])

    def test_shadowed_loop_variable(self):
        with pytest.raises(ProgramError, match="shadows"):
            build([tensor("A", [8])],
                  [loop("i", 8, [loop("i", 4, [acc("A", "load", ["i"])])])])

    def test_nonpositive_extent(self):
        with pytest.raises(ProgramError):
            build([tensor("A", [8])], [loop("i", 0, [acc("A", "load", ["i"])])])

    def test_duplicate_tensors(self):
        with pytest.raises(ProgramError, match="duplicate"):
            build([tensor("A", [8]), tensor("A", [4])], [])

    def test_empty_body_has_no_accesses(self):
        p = build([tensor("A", [8])], [loop("i", 8, [])])
        assert p.iteration_volume() == 0

    def test_syntax_error_position(self):
        with pytest.raises(ProgramError, match="line"):
            parse_program("{not json")

    def test_iteration_volume(self):
        assert matmul(8).iteration_volume() == 512
        assert nested_loops(4, 8).iteration_volume() == 32


class TestSchedule:
    def test_json_round_trip(self):
        s = Schedule((Tile("i", 4), Reorder(("j", "i")), Unroll("k"),
                      Vectorize("l", 8), Parallel("m")))
        assert Schedule.from_json(s.to_json()) == s

    def test_tile_splits_extent_and_rewrites_indices(self):
        p = single_loop(16)
        q = apply_schedule(p, Schedule((Tile("i", 4),)))
        outer = q.find_loop("i")
        inner = q.find_loop("i_i")
        assert (outer.extent, outer.step) == (4, 4)
        assert (inner.extent, inner.step) == (4, 1)
        a = [n for n in inner.children][0]
        assert str(a.index_exprs[0]) == "i + i_i"

    def test_identity_tile(self):
        q = apply_schedule(single_loop(16), Schedule((Tile("i", 16),)))
        assert q.find_loop("i").extent == 1
        assert q.find_loop("i_i").extent == 16

    def test_tile_factor_out_of_range(self):
        with pytest.raises(ProgramError):
            apply_schedule(single_loop(16), Schedule((Tile("i", 17),)))

    def test_reorder_identity_is_noop(self):
        p = matmul(8)
        assert apply_schedule(p, Schedule((Reorder(("i", "j", "k")),))) == p

    def test_reorder_permutes_chain(self):
        q = apply_schedule(matmul(8), Schedule((Reorder(("k", "j", "i")),)))
        assert [lp.var for lp in q.loops()] == ["k", "j", "i"]

    def test_reorder_missing_loop(self):
        with pytest.raises(ProgramError):
            apply_schedule(matmul(8), Schedule((Reorder(("i", "z")),)))

    def test_reorder_non_chain(self):
        p = two_mm(16, 4)  # k and l are siblings, not nested
        with pytest.raises(ProgramError):
            apply_schedule(p, Schedule((Reorder(("k", "l")),)))

    def test_vectorize_marks_inner_loop(self):
        q = apply_schedule(single_loop(16), Schedule((Vectorize("i", 4),)))
        assert q.find_loop("i_i").vector_width == 4
        assert q.find_loop("i").extent == 4

    def test_vectorize_width_must_divide(self):
        with pytest.raises(ProgramError):
            apply_schedule(single_loop(10), Schedule((Vectorize("i", 4),)))

    def test_unroll_and_parallel_mark(self):
        q = apply_schedule(nested_loops(), Schedule((Unroll("j"), Parallel("i"))))
        assert q.find_loop("j").unrolled
        assert q.find_loop("i").parallel

    def test_unknown_loop(self):
        with pytest.raises(ProgramError):
            apply_schedule(single_loop(), Schedule((Unroll("zzz"),)))

    @given(st.sampled_from([2, 4, 8]), st.permutations(["i", "j", "k"]))
    @settings(max_examples=25, deadline=None)
    def test_volume_preserved(self, factor, order):
        p = matmul(8)
        q = apply_schedule(p, Schedule((Reorder(tuple(order)), Tile(order[0], factor))))
        assert q.iteration_volume() == p.iteration_volume()


class TestSpace:
    def test_single_axis_count(self):
        scheds = enumerate_space(single_loop(16), {"tile": {"i": [2, 4, 8]}})
        assert len(scheds) == 3

    def test_two_axes_product(self):
        scheds = enumerate_space(nested_loops(4, 8), {"tile": {"i": [2, 4], "j": [2, 4]}})
        assert len(scheds) == 4

    def test_non_divisor_factor_rejected(self):
        with pytest.raises(ProgramError, match="divisor"):
            enumerate_space(single_loop(16), {"tile": {"i": [5]}})

    def test_empty_space_rejected(self):
        with pytest.raises(ProgramError, match="empty"):
            enumerate_space(single_loop(16), {})

    def test_vectorize_zero_means_off(self):
        scheds = enumerate_space(single_loop(16), {"vectorize": {"i": [0, 4]}})
        assert Schedule(()) in scheds and Schedule((Vectorize("i", 4),)) in scheds

    def test_on_off_axes(self):
        axes = space_axes(nested_loops(), {"unroll": ["j"], "parallel": ["i"]})
        assert [len(a.choices) for a in axes] == [2, 2]


class TestEmitter:
    def test_deterministic(self):
        p = two_mm(16, 4)
        for t in ("cpu-x86", "cpu-aarch64", "gpu-ptx"):
            assert emit_mock_asm(p, t) == emit_mock_asm(p, t)

    def test_unknown_target(self):
        with pytest.raises(ProgramError):
            emit_mock_asm(single_loop(), "riscv")

    def test_x86_single_loop_shape(self):
        code = emit_mock_asm(single_loop(8), "cpu-x86")
        assert code.count(".LBB_0:") == 1
        assert "vfmadd231ps" in code
        assert "cmpq $8" in code
        assert "jne .LBB_0" in code

    def test_aarch64_uses_neon_ops(self):
        code = emit_mock_asm(single_loop(8), "cpu-aarch64")
        assert "fmla" in code and "ld1" in code and "st1" in code
        assert "cmp x8, #8" in code

    def test_ptx_loop_idiom(self):
        code = emit_mock_asm(single_loop(8), "gpu-ptx")
        assert "setp.lt.s32 %p0, %r8, 8;" in code
        assert "@%p0 bra $L_0;" in code

    def test_no_loops_no_backward_jumps(self):
        p = build([tensor("A", [8])], [])
        code = emit_mock_asm(p, "cpu-x86")
        assert "jne" not in code and "jmp" not in code

    def test_unrolled_loop_is_inlined(self):
        q = apply_schedule(nested_loops(4, 8), Schedule((Unroll("j"),)))
        code = emit_mock_asm(q, "cpu-x86")
        assert code.count(".LBB_") == 2  # one label line + one jump, single loop
        assert code.count("vfmadd231ps") == 8

    def test_vectorized_loop_emitted_once(self):
        q = apply_schedule(single_loop(16), Schedule((Vectorize("i", 4),)))
        code = emit_mock_asm(q, "cpu-x86")
        assert code.count("vfmadd231ps") == 1
        assert "cmpq $4" in code
