"""Command line entry point: ``sgrocc <subcommand> [--config FILE] [--set key=value] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, SgrOccError
from .io import image_to_pgm, rows_to_csv, write_bytes, write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ACCEPTANCE = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgrocc", description="Semantic occupancy from posed depth on synthetic rooms.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file or packaged name (default: bench_room.json)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key; repeatable")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run-local", help="single-frame prediction and metrics")
    common(sp)
    sp.add_argument("--heatmap", action="store_true", help="also write the top-down gate-weight heatmap as PGM")
    common(sub.add_parser("run-embodied", help="stream the trajectory through the memory pool"))
    sp = sub.add_parser("ablate", help="one run per value of an ablation axis")
    sp.add_argument("axis")
    sp.add_argument("--embodied", action="store_true", help="use embodied runs instead of local ones")
    common(sp)
    sp = sub.add_parser("gradcheck", help="finite-difference checks of the analytic gradients")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--out")
    sp = sub.add_parser("check", help="run the acceptance suite")
    sp.add_argument("--only", type=int, action="append", metavar="N", help="run only criterion N; repeatable")
    return p


def _print_row(row: dict):
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def _heatmap(cfg, out: Path):
    from .lifter import gate_heatmap
    from .pipeline import _frame, _setup

    scene, K, poses, grid, _, _ = _setup(cfg)
    idx = cfg.camera.local_frame
    frame = _frame(cfg, scene, K, poses[idx], idx)
    bev = gate_heatmap(frame.feat.shape, frame.depth, K, poses[idx], cfg.gate(), grid.centers(), cfg.lift_mode(), cfg.samples())
    write_bytes(out / "gate_heatmap.pgm", image_to_pgm(bev.T))


def _run(args) -> int:
    from . import pipeline

    if args.command == "gradcheck":
        from .gradcheck import OPS, check_gradients

        reports = [check_gradients(op, args.trials) for op in OPS]
        for r in reports:
            _print_row(r.row())
        if args.out:
            write_text(Path(args.out) / "gradcheck.csv", rows_to_csv([r.row() for r in reports]))
        return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC

    if args.command == "check":
        from .acceptance import run_acceptance

        results = run_acceptance(args.only, echo=print)
        print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed")
        return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE

    cfg = load_config(args.config, args.set)
    out = Path(args.out) if args.out else (Path(cfg.output_dir) if cfg.output_dir else None)
    if args.command == "run-local":
        res = pipeline.run_local(cfg, out)
        _print_row(res.metrics_row())
        if args.heatmap:
            _heatmap(cfg, out or Path("."))
    elif args.command == "run-embodied":
        res = pipeline.run_embodied(cfg, out)
        _print_row({"frames": len(res.frames), "pool_size": len(res.pool), **res.metrics_row()})
    elif args.command == "ablate":
        runner = pipeline.run_embodied if args.embodied else pipeline.run_local
        for row in pipeline.run_ablation(cfg, args.axis, out, runner):
            _print_row(row)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, SgrOccError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
