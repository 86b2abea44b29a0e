"""Static-analysis cost modeling and schedule search for loop-nest tensor programs."""

from .ir import (AccessNode, AffineExpr, LoopNode, LoopProgram, Parallel,
                 ProgramError, Reorder, Schedule, TensorDecl, Tile, Unroll,
                 Vectorize, apply_schedule, emit_mock_asm, enumerate_space,
                 parse_program, serialize_program)
from .asm import (AsmError, Cfg, count_simd, identify_loop_lbbs, loop_map,
                  parse_asm)
from .cache import CacheSpec, analyze, cache_feature, visit_node
from .ilp import SchedSpec, build_deps, ilp_feature, schedule_block
from .ptx import (GpuSpec, KernelLaunch, bank_conflict_factor, loop_map_ptx,
                  sm_occupancy_feature, thread_cycles, warp_hiding_feature)
from .cost import (ArchSpec, FeatureVector, extract_features, fit_coefficients,
                   load_arch, rank, score)
from .es import EsParams, ThetaEncoding, es_step, evaluate_population, optimize

__version__ = "0.1.0"
