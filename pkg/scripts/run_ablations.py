#!/usr/bin/env python3
"""Ablation sweep: switch off support augmentation, multi-view transforms,
and category-indexed memory one at a time and compare against the full
pipeline. Each run writes its own report directory.
"""
import argparse
import tempfile
from pathlib import Path

from fsad.augment import AugmentationPlan, IDENTITY_VIEW
from fsad.evaluation import EvalConfig, METRIC_NAMES, run_evaluation
from fsad.features import FileFeatureBackend
from fsad.synthetic import SyntheticSpec, generate_dataset

RUNS = {
    "full": dict(),
    "no-support-aug": dict(support_aug=False),
    "no-pmvt": dict(pmvt=False),
    "no-cimb": dict(cimb=False),
}


def plan_for(support_aug=True, pmvt=True, cimb=True):
    base = AugmentationPlan()
    augs = base.support_augs if support_aug else frozenset()
    views = base.views if pmvt else (IDENTITY_VIEW,)
    return AugmentationPlan(support_augs=augs, views=views), cimb


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", type=Path, default=None)
    ap.add_argument("--shots", type=int, default=1)
    ap.add_argument("--seeds", type=str, default="0,1,2")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    if args.dataset is None:
        root = Path(tempfile.mkdtemp(prefix="fsad-ablate-"))
        print(f"generating synthetic dataset in {root}")
        generate_dataset(root, SyntheticSpec())
    else:
        root = args.dataset
    seeds = tuple(int(s) for s in args.seeds.split(","))

    results = {}
    for name, toggles in RUNS.items():
        plan, routing = plan_for(**toggles)
        cfg = EvalConfig(
            dataset_root=root, shots=args.shots, seeds=seeds,
            plan=plan, use_category_routing=routing,
        )
        out_dir = args.out / name if args.out else None
        results[name] = run_evaluation(cfg, FileFeatureBackend(), out_dir=out_dir)
        print(f"ran {name}")

    width = max(len(n) for n in RUNS) + 2
    print(f"\n{'run':<{width}}" + "".join(f"{m:>14}" for m in METRIC_NAMES))
    for name, report in results.items():
        cells = "".join(f"{report.overall[m][0]:>14.4f}" for m in METRIC_NAMES)
        print(f"{name:<{width}}{cells}")


if __name__ == "__main__":
    main()
