"""Dataset ingestion, ranking metrics, and the seeded few-shot protocol.

Metrics are implemented by hand because their tie rules are part of the
contract: AUROC follows the Mann-Whitney half-credit convention, average
precision pools tied scores into one threshold group, and the region-overlap
curve sweeps every distinct map value. Each has a brute-force oracle in the
test suite.

The protocol: per seed, sample K support images per category without
replacement using the portable engine PRNG, build one multi-category bank,
score every test image, and reduce to per-category metric rows. Means and
standard deviations aggregate over seeds (population formula); the overall
row macro-averages categories within each seed first.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .augment import AugmentationPlan
from .bank import build_banks
from .detect import detect_batch
from .errors import ConfigError, DatasetError, ShapeError
from .features import FeatureBackend, PreprocessSpec, load_image
from .fusion import FusionSpec
from .numerics import nearest_resize
from .rng import SplitMix64

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
METRIC_NAMES = ("image_auroc", "image_aupr", "pixel_auroc", "pro")

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class Sample:
    path: Path
    category: str
    is_anomalous: bool
    mask_path: Path | None = None


@dataclass
class CategorySamples:
    category: str
    train_normals: list[Path]
    tests: list[Sample]


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()
    )


def ingest_dataset(
    root: str | Path, layout: str = "mvtec", require_masks: bool = True
) -> dict[str, CategorySamples]:
    """Discover categories and test samples from an MVTec-style tree.

    <root>/<category>/train/good/*.png        support pool
    <root>/<category>/test/good/*.png         normal test images
    <root>/<category>/test/<defect>/*.png     anomalous test images, with
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
    """
    if layout != "mvtec":
        raise ConfigError(f"unknown dataset layout: {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    out: dict[str, CategorySamples] = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cat = cat_dir.name
        train = _images_in(cat_dir / "train" / "good")
        if not (cat_dir / "train" / "good").is_dir():
            continue
        if not train:
            log.warning("category %s has no support images; skipped", cat)
            continue
        tests: list[Sample] = []
        test_root = cat_dir / "test"
        for defect_dir in sorted(p for p in test_root.iterdir() if p.is_dir()) if test_root.is_dir() else []:
            images = _images_in(defect_dir)
            if defect_dir.name == "good":
                tests.extend(
                    Sample(path=p, category=cat, is_anomalous=False) for p in images
                )
                continue
            for p in images:
                mask = cat_dir / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
                if not mask.is_file():
                    if require_masks:
                        raise DatasetError(
                            f"anomalous sample {p} has no ground-truth mask at {mask}"
                        )
                    mask = None
                tests.append(
                    Sample(path=p, category=cat, is_anomalous=True, mask_path=mask)
                )
        if not tests:
            log.warning("category %s has no test samples", cat)
        out[cat] = CategorySamples(category=cat, train_normals=train, tests=tests)
    if not out:
        raise DatasetError(f"no categories found under {root}")
    return out


# --- ranking metrics ---

def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ in length")
    if s.size == 0:
        raise ValueError("no samples")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: ties between classes earn half credit."""
    s, y = _scores_labels(scores, labels)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("auroc needs both a positive and a negative sample")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    group_start = np.cumsum(counts) - counts
    midrank = group_start + (counts - 1) / 2.0 + 1.0
    rank_sum_pos = float(midrank[inverse][y].sum())
    u = rank_sum_pos - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP; tied scores form a single threshold group."""
    s, y = _scores_labels(scores, labels)
    pos_total = int(y.sum())
    if pos_total == 0:
        raise ValueError("average precision needs at least one positive")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    pos_per_group = np.bincount(inverse, weights=y.astype(np.float64))
    # unique() sorts ascending; walk thresholds from the highest score down
    order = np.arange(counts.size)[::-1]
    cum_n = np.cumsum(counts[order])
    cum_tp = np.cumsum(pos_per_group[order])
    precision = cum_tp / cum_n
    ap = float(np.sum(pos_per_group[order] * precision))
    return ap / pos_total


def _check_map_mask_pairs(maps, masks) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    if len(maps) == 0:
        raise ValueError("no maps given")
    ms, ks = [], []
    for i, (m, k) in enumerate(zip(maps, masks)):
        m = np.asarray(m, dtype=np.float64)
        k = np.asarray(k)
        if m.shape != k.shape or m.ndim != 2:
            raise ShapeError(
                f"pair {i}: map shape {m.shape} vs mask shape {k.shape}"
            )
        uniq = np.unique(k)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ShapeError(f"pair {i}: mask is not binary (values {uniq[:5]}...)")
        ms.append(m)
        ks.append(k.astype(bool))
    return ms, ks


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC over all pixels pooled across the whole test set."""
    ms, ks = _check_map_mask_pairs(maps, masks)
    scores = np.concatenate([m.ravel() for m in ms])
    labels = np.concatenate([k.ravel() for k in ks])
    return auroc(scores, labels)


def pro_score(
    maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3
) -> float:
    """Area under mean per-region overlap vs pooled FPR, up to fpr_limit.

    Ground-truth regions are 8-connected components. The threshold sweep
    visits every distinct map value; the curve starts at the empty
    prediction (0, 0) and is integrated by trapezoid, normalized by the
    limit.
    """
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    ms, ks = _check_map_mask_pairs(maps, masks)
    eight = np.ones((3, 3), dtype=int)
    comp_ids: list[np.ndarray] = []
    sizes: list[int] = []
    n_comps = 0
    for k in ks:
        labeled, n = ndimage.label(k, structure=eight)
        ids = labeled.astype(np.int64) - 1
        ids[ids >= 0] += n_comps
        comp_ids.append(ids)
        for c in range(n):
            sizes.append(int((labeled == c + 1).sum()))
        n_comps += n
    if n_comps == 0:
        raise ValueError("pro_score needs at least one positive region")
    values = np.concatenate([m.ravel() for m in ms])
    comps = np.concatenate([c.ravel() for c in comp_ids])
    is_neg = comps < 0
    n_neg = int(is_neg.sum())
    if n_neg == 0:
        return 1.0
    size_arr = np.asarray(sizes, dtype=np.float64)
    weight = np.where(is_neg, 0.0, 1.0 / (n_comps * size_arr[np.maximum(comps, 0)]))

    order = np.argsort(-values, kind="stable")
    v_sorted = values[order]
    ends = np.flatnonzero(np.diff(v_sorted))  # last index of each value group
    ends = np.concatenate([ends, [v_sorted.size - 1]])
    cum_fp = np.cumsum(is_neg[order].astype(np.float64))
    cum_cov = np.cumsum(weight[order])
    fprs = np.concatenate([[0.0], cum_fp[ends] / n_neg])
    covs = np.concatenate([[0.0], cum_cov[ends]])

    if fprs[-1] > fpr_limit:
        cut = int(np.searchsorted(fprs, fpr_limit, side="right"))
        x0, x1 = fprs[cut - 1], fprs[cut]
        y0, y1 = covs[cut - 1], covs[cut]
        y_at = y0 if x1 == x0 else y0 + (fpr_limit - x0) / (x1 - x0) * (y1 - y0)
        fprs = np.concatenate([fprs[:cut], [fpr_limit]])
        covs = np.concatenate([covs[:cut], [y_at]])
    area = float(_trapezoid(covs, fprs))
    return area / fpr_limit


# --- seeded protocol ---

@dataclass(frozen=True)
class EvalConfig:
    dataset_root: Path
    shots: int = 1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_resolution: int = 256
    metrics: tuple[str, ...] = METRIC_NAMES
    plan: AugmentationPlan = field(default_factory=AugmentationPlan)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    use_category_routing: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if len(self.seeds) == 0:
            raise ConfigError("at least one seed is required")
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ConfigError(f"unknown metric(s): {sorted(unknown)}")
        if self.eval_resolution < 1:
            raise ConfigError("eval_resolution must be positive")

    @property
    def wants_pixel_metrics(self) -> bool:
        return bool({"pixel_auroc", "pro"} & set(self.metrics))


@dataclass(frozen=True)
class EvalRow:
    category: str
    seed: int
    values: dict[str, float]  # metric name -> value


@dataclass
class EvalReport:
    rows: list[EvalRow]
    per_category: dict[str, dict[str, tuple[float, float]]]
    overall: dict[str, tuple[float, float]]
    metrics: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {"category": r.category, "seed": r.seed, **r.values} for r in self.rows
            ],
            "per_category": {
                cat: {m: {"mean": mv[0], "std": mv[1]} for m, mv in d.items()}
                for cat, d in self.per_category.items()
            },
            "overall": {
                m: {"mean": mv[0], "std": mv[1]} for m, mv in self.overall.items()
            },
        }


def load_mask(path: str | Path, eval_h: int, eval_w: int) -> np.ndarray:
    """Binary ground-truth mask at eval resolution (nearest-neighbor)."""
    raw = load_image(path)
    binary = (raw.max(axis=2) > 0.5).astype(np.uint8)
    return nearest_resize(binary, eval_h, eval_w)


def sample_supports(
    dataset: dict[str, CategorySamples], shots: int, seed: int
) -> dict[str, list[Path]]:
    """K supports per category, uniform without replacement, portable PRNG."""
    rng = SplitMix64(seed)
    out: dict[str, list[Path]] = {}
    for cat in sorted(dataset):
        pool = dataset[cat].train_normals
        if shots > len(pool):
            raise DatasetError(
                f"category {cat!r} has only {len(pool)} support images, "
                f"need {shots}"
            )
        picks = sorted(rng.sample(len(pool), shots))
        out[cat] = [pool[i] for i in picks]
    return out


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0))


def run_evaluation(
    cfg: EvalConfig, backend: FeatureBackend, out_dir: str | Path | None = None
) -> EvalReport:
    dataset = ingest_dataset(
        cfg.dataset_root, require_masks=cfg.wants_pixel_metrics
    )
    categories = sorted(c for c in dataset if dataset[c].tests)
    if not categories:
        raise DatasetError("no category has test samples")

    rows: list[EvalRow] = []
    for seed in cfg.seeds:
        supports = sample_supports(dataset, cfg.shots, seed)
        patch_bank, global_bank, manifest = build_banks(
            supports,
            plan=cfg.plan,
            fusion=cfg.fusion,
            backend=backend,
            seed=seed,
            preprocess=cfg.preprocess,
            threads=cfg.threads,
        )
        for cat in categories:
            samples = dataset[cat].tests
            results, failures = detect_batch(
                [s.path for s in samples],
                patch_bank=patch_bank,
                global_bank=global_bank,
                manifest=manifest,
                backend=backend,
                eval_h=cfg.eval_resolution,
                eval_w=cfg.eval_resolution,
                use_category_routing=cfg.use_category_routing,
                threads=cfg.threads,
            )
            if failures:
                raise DatasetError(
                    f"category {cat}: {len(failures)} image(s) failed, first: "
                    f"{failures[0].image}: {failures[0].error}"
                )
            values: dict[str, float] = {}
            labels = [s.is_anomalous for s in samples]
            scores = [r.image_score for r in results]
            try:
                if "image_auroc" in cfg.metrics:
                    values["image_auroc"] = auroc(scores, labels)
                if "image_aupr" in cfg.metrics:
                    values["image_aupr"] = average_precision(scores, labels)
                if cfg.wants_pixel_metrics:
                    res = cfg.eval_resolution
                    masks = [
                        load_mask(s.mask_path, res, res)
                        if s.is_anomalous
                        else np.zeros((res, res), np.uint8)
                        for s in samples
                    ]
                    maps = [r.map for r in results]
                    if "pixel_auroc" in cfg.metrics:
                        values["pixel_auroc"] = pixel_auroc(maps, masks)
                    if "pro" in cfg.metrics:
                        values["pro"] = pro_score(maps, masks)
            except ValueError as e:
                raise DatasetError(f"category {cat}, seed {seed}: {e}") from e
            rows.append(EvalRow(category=cat, seed=seed, values=values))

    rows.sort(key=lambda r: (r.category, r.seed))
    per_category = {
        cat: {
            m: _mean_std([r.values[m] for r in rows if r.category == cat])
            for m in cfg.metrics
        }
        for cat in categories
    }
    overall = {}
    for m in cfg.metrics:
        per_seed_macro = [
            float(
                np.mean([r.values[m] for r in rows if r.seed == seed])
            )
            for seed in cfg.seeds
        ]
        overall[m] = _mean_std(per_seed_macro)
    report = EvalReport(
        rows=rows, per_category=per_category, overall=overall, metrics=cfg.metrics
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv(report, out / "report.csv")
        (out / "report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
    return report


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "seed", *METRIC_NAMES])
        for r in report.rows:
            writer.writerow(
                [r.category, r.seed]
                + [
                    f"{r.values[m]:.10f}" if m in r.values else ""
                    for m in METRIC_NAMES
                ]
            )
