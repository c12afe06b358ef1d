"""fsad-export: export-onnx and dump-features subcommands."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .dump import dump_features
from .errors import ExportError
from .export import ExportSpec, export_onnx


def _layer_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ExportError(f"--layers must be comma-separated integers, got {text!r}") from None


def _spec_from(args) -> ExportSpec:
    return ExportSpec(
        backbone=args.backbone,
        layer_indices=_layer_list(args.layers),
        resolution=args.resolution,
        out_path=getattr(args, "out", None),
        weights_path=args.weights,
        seed=args.seed,
    )


def cmd_export_onnx(args) -> int:
    path = export_onnx(_spec_from(args))
    print(f"wrote {path}")
    return 0


def cmd_dump_features(args) -> int:
    spec = _spec_from(args)
    plan = None
    if args.chains:
        from fsad import AugmentationPlan

        plan = AugmentationPlan()
    report = dump_features(
        args.dataset, spec, out_root=args.out_root, plan=plan
    )
    print(f"wrote {len(report.written)} feature files, {len(report.failures)} failures")
    for path, msg in report.failures:
        print(f"  failed {path}: {msg}", file=sys.stderr)
    return 0  # per-image failures do not fail the run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsad-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--backbone", default="vit-b/14")
        p.add_argument("--layers", default="3,4,5,6,7,8,9,10")
        p.add_argument("--resolution", type=int, default=392)
        p.add_argument("--weights", type=Path, default=None)
        p.add_argument("--seed", type=int, default=0)

    ex = sub.add_parser("export-onnx", help="write an ONNX model file")
    common(ex)
    ex.add_argument("--out", type=Path, required=True)
    ex.set_defaults(func=cmd_export_onnx)

    dp = sub.add_parser("dump-features", help="write .vadf sidecars for a dataset")
    common(dp)
    dp.add_argument("--dataset", type=Path, required=True)
    dp.add_argument("--out-root", type=Path, default=None,
                    help="mirror the tree here instead of writing next to images")
    dp.add_argument("--chains", action="store_true",
                    help="also write default-plan transform chains")
    dp.set_defaults(func=cmd_dump_features)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
