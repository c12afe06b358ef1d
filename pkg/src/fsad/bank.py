"""Category-indexed patch and global memory banks.

Building a bank walks every (support image, support augmentation, view)
combination once, fuses the resulting feature stacks, and appends the fused
rows to the matrix for that (view, category, group) cell. The global bank
keeps one unit-normalized class token per category, from one support chosen
by the build seed. Detection later retrieves the category whose stored token
is nearest in cosine distance, so a single bank can serve every category at
once.

Banks persist to a single ".vadb" file: a JSON header with the exact build
configuration, then the same little-endian tensor records the feature files
use. Loading refuses to proceed if the stored configuration disagrees with
the one detection is about to run with, which turns silent mismatches into
loud ones.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .augment import (
    AugmentationPlan,
    SupportAug,
    ViewKind,
    ViewTransform,
    apply_support_aug,
    apply_view,
)
from .errors import (
    BadMagicError,
    BankError,
    FsadError,
    ManifestMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .features import (
    ByteCursor,
    FeatureBackend,
    ImageSource,
    PreprocessSpec,
    extract_features,
    load_image,
    pack_tensor,
    preprocess_image,
    read_raw_tensors,
)
from .fusion import FusionScheme, FusionSpec, fuse_groups
from .numerics import l2_normalize_rows
from .rng import SplitMix64

BANK_MAGIC = b"VADB"
BANK_VERSION = 1


def _check_category_name(name: str) -> str:
    if not name or "/" in name:
        raise BankError(f"category name must be non-empty and slash-free: {name!r}")
    return name


@dataclass
class PatchBank:
    """matrices: (view_index, category, group_index) -> float32 matrix of unit rows."""
    matrices: dict[tuple[int, str, int], np.ndarray]
    support_counts: dict[str, int] = field(default_factory=dict)
    augmentation_factor: int = 1

    def __post_init__(self):
        widths: dict[tuple[str, int], int] = {}
        for (view, cat, group), m in self.matrices.items():
            m = np.ascontiguousarray(m, dtype=np.float32)
            if m.ndim != 2 or m.shape[0] < 1:
                raise BankError(
                    f"bank cell v{view}/{cat}/g{group} must be a non-empty matrix, "
                    f"got shape {m.shape}"
                )
            prev = widths.setdefault((cat, group), m.shape[1])
            if prev != m.shape[1]:
                raise BankError(
                    f"bank cell v{view}/{cat}/g{group} width {m.shape[1]} differs "
                    f"from other views ({prev})"
                )
            norms = np.linalg.norm(m.astype(np.float64), axis=1)
            if not np.all((np.abs(norms - 1.0) < 1e-3) | (norms == 0.0)):
                raise BankError(
                    f"bank cell v{view}/{cat}/g{group} has rows that are neither "
                    "unit-norm nor zero"
                )
            self.matrices[(view, cat, group)] = m

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({cat for _, cat, _ in self.matrices}))

    @property
    def view_indices(self) -> tuple[int, ...]:
        return tuple(sorted({v for v, _, _ in self.matrices}))

    @property
    def group_indices(self) -> tuple[int, ...]:
        return tuple(sorted({g for _, _, g in self.matrices}))

    def cell(self, view: int, category: str, group: int) -> np.ndarray:
        try:
            return self.matrices[(view, category, group)]
        except KeyError:
            raise BankError(
                f"bank has no cell for view {view}, category {category!r}, "
                f"group {group}"
            ) from None


@dataclass
class GlobalBank:
    tokens: dict[str, np.ndarray]  # category -> (D,) unit float32

    def __post_init__(self):
        dims = set()
        for cat, t in self.tokens.items():
            _check_category_name(cat)
            t = np.ascontiguousarray(t, dtype=np.float32).ravel()
            dims.add(t.shape[0])
            self.tokens[cat] = t
        if len(dims) > 1:
            raise BankError(f"global tokens disagree on dimension: {sorted(dims)}")

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted(self.tokens))


@dataclass(frozen=True)
class BankManifest:
    backbone_id: str
    preprocess: PreprocessSpec
    fusion: FusionSpec
    plan: AugmentationPlan
    shots: int
    seed: int

    def to_dict(self) -> dict:
        views = []
        for v in self.plan.views:
            d = {"kind": v.kind.value}
            if v.tau is not None:
                d["tau"] = v.tau
            views.append(d)
        return {
            "backbone_id": self.backbone_id,
            "preprocess": {
                "resize_to": self.preprocess.resize_to,
                "crop_to": self.preprocess.crop_to,
                "channel_mean": list(self.preprocess.channel_mean),
                "channel_std": list(self.preprocess.channel_std),
            },
            "fusion": {
                "scheme": self.fusion.scheme.value,
                "groups": [list(g) for g in self.fusion.groups],
            },
            "plan": {
                "support_augs": [a.value for a in self.plan.ordered_augs],
                "views": views,
            },
            "shots": self.shots,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BankManifest":
        pp = d["preprocess"]
        plan = d["plan"]
        return cls(
            backbone_id=str(d["backbone_id"]),
            preprocess=PreprocessSpec(
                resize_to=int(pp["resize_to"]),
                crop_to=int(pp["crop_to"]),
                channel_mean=tuple(pp["channel_mean"]),
                channel_std=tuple(pp["channel_std"]),
            ),
            fusion=FusionSpec(
                groups=tuple(tuple(g) for g in d["fusion"]["groups"]),
                scheme=FusionScheme(d["fusion"]["scheme"]),
            ),
            plan=AugmentationPlan(
                support_augs=frozenset(SupportAug(a) for a in plan["support_augs"]),
                views=tuple(
                    ViewTransform(ViewKind(v["kind"]), v.get("tau"))
                    for v in plan["views"]
                ),
            ),
            shots=int(d["shots"]),
            seed=int(d["seed"]),
        )

    def require_compatible(self, other: "BankManifest") -> None:
        """Fail loudly when a bank was built under a different configuration.

        shots and seed are provenance, not behavior, so they may differ.
        """
        mine, theirs = self.to_dict(), other.to_dict()
        differing = [
            k
            for k in ("backbone_id", "preprocess", "fusion", "plan")
            if mine[k] != theirs[k]
        ]
        if differing:
            raise ManifestMismatchError(
                "bank was built under a different configuration; "
                f"differing field(s): {', '.join(differing)}"
            )


def _pixels_for_chain(
    base: np.ndarray, aug_tag: str, view: ViewTransform
) -> np.ndarray:
    img = base
    if aug_tag:
        img = apply_support_aug(img, SupportAug(aug_tag))
    return apply_view(img, view)


def _chain_tags(aug_tag: str, view: ViewTransform) -> tuple[str, ...]:
    tags = []
    if aug_tag:
        tags.append(aug_tag)
    if view.kind is not ViewKind.IDENTITY:
        tags.append(view.tag())
    return tuple(tags)


def build_banks(
    supports: Mapping[str, Sequence[str | Path]],
    *,
    plan: AugmentationPlan,
    fusion: FusionSpec,
    backend: FeatureBackend,
    seed: int,
    preprocess: PreprocessSpec | None = None,
    threads: int = 1,
) -> tuple[PatchBank, GlobalBank, BankManifest]:
    """Extract, fuse, and store every support variant; pick global tokens.

    Work is parallelized over (category, image, augmentation) tasks but rows
    are merged in a fixed order, so the result is identical for any thread
    count.
    """
    if not supports:
        raise BankError("no support categories given")
    preprocess = preprocess if preprocess is not None else PreprocessSpec()
    categories = sorted(supports)
    for cat in categories:
        _check_category_name(cat)
        if len(supports[cat]) == 0:
            raise BankError(f"category {cat!r} has no support images")

    layer_indices = fusion.all_layers
    aug_tags = [""] + [a.value for a in plan.ordered_augs]

    tasks = [
        (cat, img_idx, Path(path), aug_tag)
        for cat in categories
        for img_idx, path in enumerate(supports[cat])
        for aug_tag in aug_tags
    ]

    base_cache: dict[str, np.ndarray] = {}

    def base_pixels(path: Path) -> np.ndarray:
        key = str(path)
        if key not in base_cache:
            base_cache[key] = preprocess_image(load_image(path), preprocess)
        return base_cache[key]

    def run_task(task):
        cat, img_idx, path, aug_tag = task
        per_view = []
        for view in plan.views:
            src = ImageSource(
                path=path,
                tags=_chain_tags(aug_tag, view),
                pixels=(
                    _pixels_for_chain(base_pixels(path), aug_tag, view)
                    if backend.needs_pixels
                    else None
                ),
            )
            try:
                stack = extract_features(backend, src, layer_indices)
            except FsadError as e:
                raise type(e)(f"{cat}: {path} [{'+'.join(src.tags) or 'base'}]: {e}") from e
            per_view.append((stack, fuse_groups(stack, fusion)))
        return per_view

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_task, tasks))
    else:
        results = [run_task(t) for t in tasks]

    backbone_ids = {
        stack.backbone_id for per_view in results for stack, _ in per_view
    }
    if len(backbone_ids) > 1:
        raise BankError(f"support features mix backbones: {sorted(backbone_ids)}")
    backbone_id = next(iter(backbone_ids))

    rows: dict[tuple[int, str, int], list[np.ndarray]] = {}
    for task, per_view in zip(tasks, results):
        cat = task[0]
        for view_idx, (_, fused_list) in enumerate(per_view):
            for fused in fused_list:
                rows.setdefault((view_idx, cat, fused.group_index), []).append(
                    fused.matrix
                )
    matrices = {
        key: np.ascontiguousarray(np.concatenate(parts, axis=0), dtype=np.float32)
        for key, parts in rows.items()
    }

    # One global token per category, support chosen by the build seed,
    # extracted plain (no augmentation, identity view).
    rng = SplitMix64(seed)
    tokens: dict[str, np.ndarray] = {}
    for cat in categories:
        paths = [Path(p) for p in supports[cat]]
        pick = rng.randrange(len(paths))
        path = paths[pick]
        src = ImageSource(
            path=path,
            tags=(),
            pixels=base_pixels(path) if backend.needs_pixels else None,
        )
        try:
            stack = extract_features(backend, src, layer_indices)
        except FsadError as e:
            raise type(e)(f"{cat}: {path} [global token]: {e}") from e
        tokens[cat] = l2_normalize_rows(stack.cls_token[None, :])[0]

    counts = {cat: len(supports[cat]) for cat in categories}
    shot_values = sorted(set(counts.values()))
    manifest = BankManifest(
        backbone_id=backbone_id,
        preprocess=preprocess,
        fusion=fusion,
        plan=plan,
        shots=shot_values[-1],
        seed=seed,
    )
    patch_bank = PatchBank(
        matrices=matrices,
        support_counts=counts,
        augmentation_factor=len(aug_tags),
    )
    return patch_bank, GlobalBank(tokens=tokens), manifest


def retrieve_category(cls_token: np.ndarray, bank: GlobalBank) -> str:
    """Category whose stored token has the smallest cosine distance.

    Ties go to the lexicographically smallest name.
    """
    if not bank.tokens:
        raise BankError("global bank is empty")
    q = np.asarray(cls_token, dtype=np.float32).ravel()
    some = next(iter(bank.tokens.values()))
    if q.shape[0] != some.shape[0]:
        raise ShapeError(
            f"query token dim {q.shape[0]} does not match bank dim {some.shape[0]}"
        )
    qn = l2_normalize_rows(q[None, :])[0].astype(np.float64)
    best_cat = None
    best_dot = -np.inf
    for cat in sorted(bank.tokens):
        d = float(np.dot(qn, bank.tokens[cat].astype(np.float64)))
        if d > best_dot:
            best_dot = d
            best_cat = cat
    return best_cat


def save_bank(
    path: str | Path, patch: PatchBank, global_bank: GlobalBank, manifest: BankManifest
) -> None:
    header = {
        "manifest": manifest.to_dict(),
        "provenance": {
            "support_counts": dict(sorted(patch.support_counts.items())),
            "augmentation_factor": patch.augmentation_factor,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    records = []
    for (view, cat, group) in sorted(patch.matrices):
        records.append(
            pack_tensor(
                f"patch/v{view}/{cat}/g{group}", patch.matrices[(view, cat, group)], "<f4"
            )
        )
    for cat in global_bank.categories:
        records.append(pack_tensor(f"global/{cat}", global_bank.tokens[cat], "<f4"))
    blob = (
        struct.pack("<4sH", BANK_MAGIC, BANK_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + struct.pack("<H", len(records))
        + b"".join(records)
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)


def load_bank(path: str | Path) -> tuple[PatchBank, GlobalBank, BankManifest]:
    p = Path(path)
    try:
        blob = p.read_bytes()
    except FileNotFoundError:
        raise BankError(f"bank file not found: {p}") from None
    except OSError as e:
        raise BankError(f"cannot read bank file {p}: {e}") from None
    cur = ByteCursor(blob, str(p))
    magic = cur.take(4)
    if magic != BANK_MAGIC:
        raise BadMagicError(f"{p}: bad magic {magic!r}, expected {BANK_MAGIC!r}")
    version = struct.unpack("<H", cur.take(2))[0]
    if version != BANK_VERSION:
        raise VersionError(f"{p}: unsupported bank version {version}")
    (header_len,) = struct.unpack("<I", cur.take(4))
    try:
        header = json.loads(cur.take(header_len).decode("utf-8"))
        manifest = BankManifest.from_dict(header["manifest"])
        provenance = header.get("provenance", {})
    except TruncatedFileError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise BankError(f"{p}: bad bank header: {e}") from None
    count = struct.unpack("<H", cur.take(2))[0]
    tensors = read_raw_tensors(cur, count)
    matrices: dict[tuple[int, str, int], np.ndarray] = {}
    tokens: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        parts = name.split("/")
        if parts[0] == "patch" and len(parts) == 4:
            try:
                view = int(parts[1].removeprefix("v"))
                group = int(parts[3].removeprefix("g"))
            except ValueError:
                raise BankError(f"{p}: malformed record name {name!r}") from None
            matrices[(view, parts[2], group)] = arr
        elif parts[0] == "global" and len(parts) == 2:
            tokens[parts[1]] = arr
        else:
            raise BankError(f"{p}: unexpected record {name!r}")
    if not matrices or not tokens:
        raise BankError(f"{p}: bank is missing patch or global records")
    patch = PatchBank(
        matrices=matrices,
        support_counts=dict(provenance.get("support_counts", {})),
        augmentation_factor=int(provenance.get("augmentation_factor", 1)),
    )
    return patch, GlobalBank(tokens=tokens), manifest
