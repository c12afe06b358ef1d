"""Command-line front end: build-bank, detect, evaluate.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
Outputs are pure functions of (config, inputs, seed); repeated invocations
produce byte-identical files.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .bank import BankManifest, build_banks, load_bank, save_bank
from .config import AblationToggles, EngineConfig, effective_config_json, load_config
from .detect import detect_one, heatmap_payload, render_heatmap
from .errors import ConfigError, FsadError
from .evaluation import (
    EvalConfig,
    METRIC_NAMES,
    ingest_dataset,
    run_evaluation,
    sample_supports,
)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        if value < 1:
            raise ConfigError("--threads must be >= 1")
        return value
    env = os.environ.get("VAD_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"VAD_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("VAD_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _apply_ablation_flags(cfg: EngineConfig, args) -> EngineConfig:
    toggles = AblationToggles(
        support_aug=cfg.ablations.support_aug and not args.no_support_aug,
        pmvt=cfg.ablations.pmvt and not args.no_pmvt,
        cimb=cfg.ablations.cimb and not args.no_cimb,
    )
    return dataclasses.replace(cfg, ablations=toggles)


def cmd_build_bank(args) -> int:
    cfg = load_config(args.config)
    threads = _resolve_threads(args.threads)
    print("effective-config:", json.dumps(cfg.to_dict(), sort_keys=True))
    dataset = ingest_dataset(args.dataset, require_masks=False)
    supports = sample_supports(dataset, args.shots, args.seed)
    patch_bank, global_bank, manifest = build_banks(
        supports,
        plan=cfg.effective_plan(),
        fusion=cfg.fusion,
        backend=cfg.make_backend(),
        seed=args.seed,
        preprocess=cfg.preprocess,
        threads=threads,
    )
    save_bank(args.out, patch_bank, global_bank, manifest)
    views = len(patch_bank.view_indices)
    group0 = patch_bank.group_indices[0]
    for cat in patch_bank.categories:
        rows = patch_bank.cell(0, cat, group0).shape[0]
        print(
            f"{cat}: {rows} patch rows per view x {views} views "
            f"({patch_bank.support_counts[cat]} supports x "
            f"{patch_bank.augmentation_factor} variants)"
        )
    print(f"wrote {args.out}")
    return 0


def cmd_detect(args) -> int:
    patch_bank, global_bank, manifest = load_bank(args.bank)
    cfg = load_config(args.config)
    if args.config is not None:
        expected = BankManifest(
            backbone_id=manifest.backbone_id,
            preprocess=cfg.preprocess,
            fusion=cfg.fusion,
            plan=cfg.effective_plan(),
            shots=manifest.shots,
            seed=manifest.seed,
        )
        manifest.require_compatible(expected)
    result = detect_one(
        args.image,
        patch_bank=patch_bank,
        global_bank=global_bank,
        manifest=manifest,
        backend=cfg.make_backend(),
        eval_h=cfg.eval_resolution,
        eval_w=cfg.eval_resolution,
        use_category_routing=cfg.ablations.cimb,
    )
    print(
        json.dumps(
            {"category": result.category, "image_score": result.image_score},
            sort_keys=True,
        )
    )
    # score is already on stdout; artifact writes may still fail on their own
    try:
        png8, lo, hi = render_heatmap(result.map)
        if args.heatmap:
            from PIL import Image

            Path(args.heatmap).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(png8, mode="L").save(args.heatmap)
        if args.json:
            Path(args.json).parent.mkdir(parents=True, exist_ok=True)
            Path(args.json).write_text(
                json.dumps(heatmap_payload(result, lo, hi), indent=2, sort_keys=True)
                + "\n"
            )
    except OSError as e:
        print(f"error: could not write artifact: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    cfg = _apply_ablation_flags(load_config(args.config), args)
    threads = _resolve_threads(args.threads)
    print("effective-config:", json.dumps(cfg.to_dict(), sort_keys=True))
    eval_cfg = EvalConfig(
        dataset_root=Path(args.dataset),
        shots=args.shots,
        seeds=_parse_seeds(args.seeds),
        eval_resolution=cfg.eval_resolution,
        plan=cfg.effective_plan(),
        fusion=cfg.fusion,
        preprocess=cfg.preprocess,
        use_category_routing=cfg.ablations.cimb,
        threads=threads,
    )
    report = run_evaluation(eval_cfg, cfg.make_backend(), out_dir=args.out)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.json").write_text(effective_config_json(cfg))
    parts = [f"{m}={report.overall[m][0]:.3f}" for m in METRIC_NAMES if m in report.overall]
    print("mean", " ".join(parts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsad",
        description="Few-shot anomaly detection by nearest-neighbor patch search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bb = sub.add_parser("build-bank", help="sample supports and write a memory bank")
    bb.add_argument("--config", type=Path, default=None, help="JSON engine config")
    bb.add_argument("--dataset", type=Path, required=True)
    bb.add_argument("--shots", type=int, default=1)
    bb.add_argument("--seed", type=int, default=0)
    bb.add_argument("--out", type=Path, required=True)
    bb.add_argument("--threads", type=int, default=None)
    bb.set_defaults(func=cmd_build_bank)

    dt = sub.add_parser("detect", help="score one image against a bank")
    dt.add_argument("--bank", type=Path, required=True)
    dt.add_argument("--image", type=Path, required=True)
    dt.add_argument("--config", type=Path, default=None)
    dt.add_argument("--heatmap", type=Path, default=None, help="write a PNG heatmap")
    dt.add_argument("--json", type=Path, default=None, help="write a JSON score sidecar")
    dt.set_defaults(func=cmd_detect)

    ev = sub.add_parser("evaluate", help="run the multi-seed benchmark protocol")
    ev.add_argument("--config", type=Path, default=None)
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--shots", type=int, default=1)
    ev.add_argument("--seeds", type=str, default="0,1,2,3,4")
    ev.add_argument("--out", type=Path, default=None)
    ev.add_argument("--threads", type=int, default=None)
    ev.add_argument("--no-support-aug", action="store_true")
    ev.add_argument("--no-pmvt", action="store_true")
    ev.add_argument("--no-cimb", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except FsadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
