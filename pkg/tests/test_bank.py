from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from fsad.augment import AugmentationPlan, SupportAug, ViewKind, ViewTransform, IDENTITY_VIEW
from fsad.bank import (
    BankManifest,
    GlobalBank,
    PatchBank,
    build_banks,
    load_bank,
    retrieve_category,
    save_bank,
)
from fsad.errors import (
    BadMagicError,
    BankError,
    ExtractorError,
    ManifestMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from fsad.features import (
    FeatureStack,
    ImageSource,
    InMemoryBackend,
    LayerFeatures,
    PreprocessSpec,
)
from fsad.fusion import FusionScheme, FusionSpec, nn_distance_map
from fsad.numerics import l2_normalize_rows
from fsad.rng import SplitMix64

INDICES = (3, 4)
DIM = 6


def stack_for_key(key: str, grid=4, dim=DIM, indices=INDICES) -> FeatureStack:
    rng = np.random.default_rng(zlib.crc32(key.encode()))
    layers = tuple(
        LayerFeatures(i, rng.normal(size=(grid, grid, dim)).astype(np.float32))
        for i in indices
    )
    return FeatureStack(
        layers=layers,
        cls_token=rng.normal(size=dim).astype(np.float32),
        backbone_id="testnet",
    )


def corpus_backend(supports, plan: AugmentationPlan, grid=4) -> InMemoryBackend:
    """Populate an in-memory backend with every transform chain a build touches."""
    be = InMemoryBackend()
    aug_tags = [""] + [a.value for a in plan.ordered_augs]
    for cat, paths in supports.items():
        for p in paths:
            chains = {()}
            for aug in aug_tags:
                for view in plan.views:
                    tags = tuple(
                        t
                        for t in (aug, view.tag() if view.kind is not ViewKind.IDENTITY else "")
                        if t
                    )
                    chains.add(tags)
            for tags in chains:
                src = ImageSource(path=Path(p), tags=tags)
                be.put(src, stack_for_key(f"{p}|{'+'.join(tags)}", grid=grid))
    return be


def tiny_plan() -> AugmentationPlan:
    return AugmentationPlan(
        support_augs=frozenset({SupportAug.ROT90}),
        views=(IDENTITY_VIEW, ViewTransform(ViewKind.YFLIP)),
    )


def build_tiny(supports=None, seed=0, threads=1, plan=None, fusion=None):
    supports = supports or {"bolt": ["a.png"], "cam": ["b.png", "c.png"]}
    plan = plan or tiny_plan()
    fusion = fusion or FusionSpec(groups=((3, 4),))
    be = corpus_backend(supports, plan)
    return build_banks(
        supports, plan=plan, fusion=fusion, backend=be, seed=seed, threads=threads
    )


class TestBuildBanks:
    def test_row_counting(self):
        plan = AugmentationPlan(
            support_augs=frozenset(
                {SupportAug.ROT90, SupportAug.ROT180, SupportAug.ROT270}
            ),
            views=(IDENTITY_VIEW,),
        )
        supports = {"screw": ["s.png"]}
        be = corpus_backend(supports, plan, grid=4)
        pb, gb, mf = build_banks(
            supports, plan=plan, fusion=FusionSpec(groups=((3, 4),)), backend=be, seed=0
        )
        # (1 original + 3 rotations) * 16 patches
        assert pb.cell(0, "screw", 0).shape == (64, DIM * 2)
        assert pb.augmentation_factor == 4
        assert pb.support_counts == {"screw": 1}

    def test_one_token_per_category(self):
        pb, gb, mf = build_tiny()
        assert gb.categories == ("bolt", "cam")
        assert all(t.shape == (DIM,) for t in gb.tokens.values())
        norms = [np.linalg.norm(t) for t in gb.tokens.values()]
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_view_and_group_keys(self):
        pb, _, _ = build_tiny(fusion=FusionSpec(groups=((3,), (4,))))
        assert pb.view_indices == (0, 1)
        assert pb.group_indices == (0, 1)
        assert set(pb.matrices) == {
            (v, c, g) for v in (0, 1) for c in ("bolt", "cam") for g in (0, 1)
        }

    def test_same_seed_bit_identical_and_thread_invariant(self, tmp_path):
        blobs = []
        for threads in (1, 4, 1):
            pb, gb, mf = build_tiny(seed=7, threads=threads)
            p = tmp_path / f"t{len(blobs)}.vadb"
            save_bank(p, pb, gb, mf)
            blobs.append(p.read_bytes())
        assert blobs[0] == blobs[1] == blobs[2]

    def test_global_pick_follows_seed(self):
        supports = {"bolt": ["a.png", "b.png", "c.png"], "cam": ["d.png", "e.png"]}
        plan = tiny_plan()
        be = corpus_backend(supports, plan)
        seed = 13
        _, gb, _ = build_banks(
            supports,
            plan=plan,
            fusion=FusionSpec(groups=((3, 4),)),
            backend=be,
            seed=seed,
        )
        rng = SplitMix64(seed)
        for cat in ("bolt", "cam"):
            pick = rng.randrange(len(supports[cat]))
            want = stack_for_key(f"{supports[cat][pick]}|").cls_token
            want = l2_normalize_rows(want[None, :])[0]
            np.testing.assert_allclose(gb.tokens[cat], want, atol=1e-6)

    def test_empty_category_rejected(self):
        with pytest.raises(BankError, match="cam"):
            build_tiny(supports={"bolt": ["a.png"], "cam": []})

    def test_slash_category_rejected(self):
        with pytest.raises(BankError, match="slash"):
            build_tiny(supports={"a/b": ["a.png"]})

    def test_extractor_failure_names_image(self):
        supports = {"bolt": ["a.png"]}
        plan = tiny_plan()
        be = corpus_backend(supports, plan)
        be._stacks.pop(("a.png", ("rot90", "yflip")))
        with pytest.raises(ExtractorError, match=r"bolt.*a\.png.*rot90\+yflip"):
            build_banks(
                supports,
                plan=plan,
                fusion=FusionSpec(groups=((3, 4),)),
                backend=be,
                seed=0,
            )

    def test_mixed_backbones_rejected(self):
        supports = {"bolt": ["a.png"]}
        plan = AugmentationPlan(support_augs=frozenset(), views=(IDENTITY_VIEW,))
        be = corpus_backend(supports, plan)
        odd = stack_for_key("a.png|")
        be.put(
            ImageSource(path=Path("a.png"), tags=()),
            FeatureStack(
                layers=odd.layers, cls_token=odd.cls_token, backbone_id="othernet"
            ),
        )
        supports2 = {"bolt": ["a.png"], "cam": ["b.png"]}
        be2 = corpus_backend({"cam": ["b.png"]}, plan)
        be2._stacks.update(be._stacks)
        with pytest.raises(BankError, match="mix"):
            build_banks(
                supports2,
                plan=plan,
                fusion=FusionSpec(groups=((3, 4),)),
                backend=be2,
                seed=0,
            )


class TestPatchBankInvariants:
    def test_non_unit_rows_rejected(self):
        with pytest.raises(BankError, match="unit"):
            PatchBank(matrices={(0, "a", 0): np.full((2, 3), 0.7, np.float32)})

    def test_zero_rows_allowed(self):
        m = np.zeros((2, 3), np.float32)
        m[0, 0] = 1.0
        PatchBank(matrices={(0, "a", 0): m})

    def test_cross_view_width_mismatch_rejected(self):
        good = np.eye(2, 3, dtype=np.float32)
        bad = np.eye(2, 4, dtype=np.float32)
        with pytest.raises(BankError, match="width"):
            PatchBank(matrices={(0, "a", 0): good, (1, "a", 0): bad})


class TestRetrieveCategory:
    def test_single_category(self):
        gb = GlobalBank(tokens={"only": np.array([1.0, 0.0], np.float32)})
        assert retrieve_category(np.array([0.3, -0.9], np.float32), gb) == "only"

    def test_larger_cosine_wins(self):
        gb = GlobalBank(
            tokens={
                "A": np.array([1.0, 0.0], np.float32),
                "B": np.array([0.0, 1.0], np.float32),
            }
        )
        assert retrieve_category(np.array([0.9, 0.1], np.float32), gb) == "A"
        assert retrieve_category(np.array([0.1, 0.9], np.float32), gb) == "B"

    def test_exact_match_among_many(self):
        rng = np.random.default_rng(0)
        tokens = {
            f"cat{i:02d}": l2_normalize_rows(rng.normal(size=(1, 8)).astype(np.float32))[0]
            for i in range(10)
        }
        gb = GlobalBank(tokens=dict(tokens))
        q = tokens["cat07"]
        dots = {c: float(np.dot(q, t)) for c, t in tokens.items()}
        assert max(dots, key=dots.get) == "cat07"
        assert retrieve_category(q, gb) == "cat07"

    def test_tie_breaks_lexicographically(self):
        t = np.array([1.0, 0.0], np.float32)
        gb = GlobalBank(tokens={"zeta": t.copy(), "alpha": t.copy()})
        assert retrieve_category(t, gb) == "alpha"

    def test_scale_invariance(self):
        gb = GlobalBank(
            tokens={
                "A": np.array([1.0, 0.0], np.float32),
                "B": np.array([0.6, 0.8], np.float32),
            }
        )
        q = np.array([0.9, 0.2], np.float32)
        assert retrieve_category(q, gb) == retrieve_category(q * 37.0, gb)

    def test_empty_bank_rejected(self):
        with pytest.raises(BankError):
            retrieve_category(np.array([1.0], np.float32), GlobalBank(tokens={}))

    def test_dim_mismatch_rejected(self):
        gb = GlobalBank(tokens={"a": np.array([1.0, 0.0], np.float32)})
        with pytest.raises(ShapeError):
            retrieve_category(np.array([1.0, 0.0, 0.0], np.float32), gb)


class TestSaveLoad:
    def test_round_trip_identity(self, tmp_path):
        pb, gb, mf = build_tiny(seed=3)
        p = tmp_path / "bank.vadb"
        save_bank(p, pb, gb, mf)
        pb2, gb2, mf2 = load_bank(p)
        assert mf2.to_dict() == mf.to_dict()
        assert set(pb2.matrices) == set(pb.matrices)
        for k in pb.matrices:
            assert np.array_equal(pb2.matrices[k], pb.matrices[k])
        assert set(gb2.tokens) == set(gb.tokens)
        for c in gb.tokens:
            assert np.array_equal(gb2.tokens[c], gb.tokens[c])
        assert pb2.support_counts == pb.support_counts
        assert pb2.augmentation_factor == pb.augmentation_factor

    def test_creates_missing_parent_dirs(self, tmp_path):
        pb, gb, mf = build_tiny(seed=3)
        p = tmp_path / "banks" / "nested" / "bank.vadb"
        save_bank(p, pb, gb, mf)
        assert load_bank(p)[2].to_dict() == mf.to_dict()

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bank.vadb"
        pb, gb, mf = build_tiny()
        save_bank(p, pb, gb, mf)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_bank(p)

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "bank.vadb"
        pb, gb, mf = build_tiny()
        save_bank(p, pb, gb, mf)
        blob = bytearray(p.read_bytes())
        blob[4:6] = struct.pack("<H", 2)
        p.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_bank(p)

    def test_truncation(self, tmp_path):
        p = tmp_path / "bank.vadb"
        pb, gb, mf = build_tiny()
        save_bank(p, pb, gb, mf)
        blob = p.read_bytes()
        for cut in (5, 9, 40, len(blob) - 3):
            p.write_bytes(blob[:cut])
            with pytest.raises(TruncatedFileError):
                load_bank(p)

    def test_missing_records_rejected(self, tmp_path):
        header = b'{"manifest":' + json_min() + b',"provenance":{}}'
        blob = (
            struct.pack("<4sH", b"VADB", 1)
            + struct.pack("<I", len(header))
            + header
            + struct.pack("<H", 0)
        )
        p = tmp_path / "empty.vadb"
        p.write_bytes(blob)
        with pytest.raises(BankError, match="missing"):
            load_bank(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BankError, match="not found"):
            load_bank(tmp_path / "ghost.vadb")


def json_min() -> bytes:
    mf = BankManifest(
        backbone_id="testnet",
        preprocess=PreprocessSpec(),
        fusion=FusionSpec(groups=((3, 4),)),
        plan=tiny_plan(),
        shots=1,
        seed=0,
    )
    import json

    return json.dumps(mf.to_dict()).encode()


class TestManifestGuard:
    def make(self, **kw):
        base = dict(
            backbone_id="testnet",
            preprocess=PreprocessSpec(),
            fusion=FusionSpec(groups=((3, 4),)),
            plan=tiny_plan(),
            shots=1,
            seed=0,
        )
        base.update(kw)
        return BankManifest(**base)

    def test_identical_passes(self):
        self.make().require_compatible(self.make())

    def test_shots_and_seed_may_differ(self):
        self.make().require_compatible(self.make(shots=5, seed=99))

    def test_fusion_difference_named(self):
        other = self.make(fusion=FusionSpec(groups=((3,), (4,))))
        with pytest.raises(ManifestMismatchError, match="fusion"):
            self.make().require_compatible(other)

    def test_plan_difference_named(self):
        other = self.make(
            plan=AugmentationPlan(support_augs=frozenset(), views=(IDENTITY_VIEW,))
        )
        with pytest.raises(ManifestMismatchError, match="plan"):
            self.make().require_compatible(other)

    def test_round_trip_dict(self):
        mf = self.make()
        assert BankManifest.from_dict(mf.to_dict()).to_dict() == mf.to_dict()


class TestScoreMonotonicity:
    def test_appending_rows_never_raises_scores(self):
        rng = np.random.default_rng(31)
        for _ in range(25):
            n_bank = int(rng.integers(1, 40))
            q = l2_normalize_rows(rng.normal(size=(9, 5)).astype(np.float32))
            bank = l2_normalize_rows(rng.normal(size=(n_bank, 5)).astype(np.float32))
            extra = l2_normalize_rows(rng.normal(size=(3, 5)).astype(np.float32))
            before = nn_distance_map(q, bank, 3, 3)
            after = nn_distance_map(q, np.vstack([bank, extra]), 3, 3)
            assert np.all(after <= before + 1e-7)
