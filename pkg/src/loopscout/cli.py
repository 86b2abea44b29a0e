"""Command-line interface: analyze | rank | search | emit.

Exit codes: 0 success, 1 user/input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import cost as cost_mod
from . import es as es_mod
from .ir import (LoopProgram, ProgramError, Schedule, apply_schedule,
                 emit_mock_asm, parse_program)
from .ptx import KernelLaunch


class UserError(Exception):
    pass


@dataclass
class RunReport:
    program_id: str
    arch: str
    candidates: list  # [{"schedule": [...], "features": {...}, "score": float}]
    best_schedule: list | None
    diagnostics: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport(**json.loads(text))


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"file not found: {path}")
    return p.read_text()


def _load_program(path: str) -> LoopProgram:
    return parse_program(_read(path))


def _load_arch(name_or_path: str) -> cost_mod.ArchSpec:
    try:
        return cost_mod.load_arch(name_or_path)
    except cost_mod.CostModelError as e:
        raise UserError(str(e)) from e


def _load_launch(path: str | None) -> KernelLaunch | None:
    if path is None:
        return None
    return KernelLaunch.from_json(json.loads(_read(path)))


def _target_for(args, arch: cost_mod.ArchSpec) -> str:
    if getattr(args, "target", None):
        return {"x86": "cpu-x86", "aarch64": "cpu-aarch64", "ptx": "gpu-ptx"}[args.target]
    return arch.target


def _print_features(fv: cost_mod.FeatureVector, score: float, out):
    width = max(len(k) for k, _ in fv.values)
    for k, v in fv.values:
        print(f"  {k:<{width}}  {v:g}", file=out)
    print(f"  {'score':<{width}}  {score:g}", file=out)


def cmd_analyze(args) -> int:
    program = _load_program(args.program)
    arch = _load_arch(args.arch)
    target = _target_for(args, arch)
    if args.emit_only:
        sys.stdout.write(emit_mock_asm(program, target))
        return 0
    code = _read(args.code) if args.code else emit_mock_asm(program, target)
    launch = _load_launch(args.launch)
    diagnostics: list[str] = []
    fv = cost_mod.extract_features(program, code, arch, launch, diagnostics)
    score = cost_mod.score(fv, arch)
    report = RunReport(Path(args.program).stem, arch.name,
                       [{"schedule": [], "features": fv.as_dict(), "score": score}],
                       None, diagnostics)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(f"program {report.program_id} on {arch.name}:")
        _print_features(fv, score, sys.stdout)
        for d in diagnostics:
            print(f"  note: {d}")
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def cmd_rank(args) -> int:
    program = _load_program(args.program)
    arch = _load_arch(args.arch)
    launch = _load_launch(args.launch)
    sched_data = json.loads(_read(args.schedules))
    if not isinstance(sched_data, list) or not sched_data:
        raise UserError("schedules file must be a nonempty JSON list")
    schedules = [Schedule.from_json(rec) for rec in sched_data]

    def evaluate(s: Schedule):
        transformed = apply_schedule(program, s)
        code = emit_mock_asm(transformed, arch.target)
        fv = cost_mod.extract_features(transformed, code, arch, launch)
        return fv, cost_mod.score(fv, arch)

    errors: list = []
    results = es_mod.evaluate_population(schedules, evaluate, jobs=args.jobs, errors=errors)
    diagnostics = [f"candidate {i} failed: {e}" for i, e in errors]
    rows = [(score, i, fv) for i, r in enumerate(results) if r is not None
            for fv, score in [r]]
    rows.sort(key=lambda t: (t[0], t[1]))
    candidates = [{"schedule": schedules[i].to_json(), "features": fv.as_dict(), "score": score}
                  for score, i, fv in rows]
    report = RunReport(Path(args.program).stem, arch.name, candidates,
                       candidates[0]["schedule"] if candidates else None, diagnostics)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(f"{len(candidates)} candidates on {arch.name} (ascending score):")
        for c in candidates:
            print(f"  {c['score']:>14g}  {json.dumps(c['schedule'])}")
        for d in diagnostics:
            print(f"  note: {d}")
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def cmd_search(args) -> int:
    program = _load_program(args.program)
    arch = _load_arch(args.arch)
    launch = _load_launch(args.launch)
    space = json.loads(_read(args.space))
    params = es_mod.EsParams(alpha=args.alpha, sigma=args.sigma,
                             population=args.population, iterations=args.iterations,
                             seed=args.seed, rank_normalize=not args.no_rank_normalize)
    result = es_mod.optimize(program, space, arch, params, jobs=args.jobs, launch=launch)
    ranked = sorted(result.evaluated.items(), key=lambda kv: (kv[1], kv[0]))
    top = ranked[: args.top_k]
    candidates = [{"schedule": json.loads(k), "features": None, "score": s} for k, s in top]
    candidates[0]["features"] = result.best_features.as_dict()
    report = RunReport(Path(args.program).stem, arch.name, candidates,
                       result.best_schedule.to_json(), result.diagnostics)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(f"best score {result.best_score:g} after {result.evaluations} evaluations:")
        print(f"  {json.dumps(report.best_schedule)}")
        if args.top_k > 1:
            print(f"top {len(top)}:")
            for k, s in top:
                print(f"  {s:>14g}  {k}")
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.trace:
        with open(args.trace, "w") as f:
            f.write("iteration,best_score\n")
            for i, s in enumerate(result.trace):
                f.write(f"{i},{s:.17g}\n")
    return 0


def cmd_emit(args) -> int:
    program = _load_program(args.program)
    target = {"x86": "cpu-x86", "aarch64": "cpu-aarch64", "ptx": "gpu-ptx"}[args.target]
    code = emit_mock_asm(program, target)
    if args.out:
        Path(args.out).write_text(code)
    else:
        sys.stdout.write(code)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopscout",
                                 description="Static cost analysis and schedule search for loop-nest programs")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, launch=True):
        p.add_argument("--arch", required=True, help="builtin arch name or TOML path")
        p.add_argument("--json", action="store_true", help="JSON report to stdout")
        p.add_argument("--out", help="also write the JSON report to this path")
        p.add_argument("--jobs", type=int, default=os.cpu_count(),
                       help="parallel evaluation workers")
        if launch:
            p.add_argument("--launch", help="kernel launch record JSON (gpu archs)")

    p = sub.add_parser("analyze", help="extract features and score one program")
    p.add_argument("program")
    p.add_argument("--code", help="assembly/PTX file (mock emitter used when absent)")
    p.add_argument("--target", choices=["x86", "aarch64", "ptx"])
    p.add_argument("--emit-only", action="store_true", help="write mock code, no analysis")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rank", help="score and sort a list of schedules")
    p.add_argument("program")
    p.add_argument("schedules", help="JSON list of schedules")
    common(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("search", help="evolution-strategies search over a schedule space")
    p.add_argument("program")
    p.add_argument("space", help="JSON space description")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--population", type=int, default=32)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--no-rank-normalize", action="store_true")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--trace", help="write the per-iteration best-score CSV here")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("emit", help="emit mock assembly/PTX for a program")
    p.add_argument("program")
    p.add_argument("--target", choices=["x86", "aarch64", "ptx"], required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, ProgramError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
