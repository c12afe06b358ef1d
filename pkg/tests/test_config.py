"""JSON config schema: strict parsing, defaults, ablation toggles."""
from __future__ import annotations

import json

import pytest

from fsad.augment import AugmentationPlan, SupportAug, ViewKind
from fsad.config import (
    AblationToggles,
    EngineConfig,
    config_from_dict,
    effective_config_json,
    load_config,
)
from fsad.errors import ConfigError
from fsad.features import FileFeatureBackend
from fsad.fusion import FusionScheme


FULL_DOC = {
    "backend": "files",
    "model_path": None,
    "preprocess": {"resize_to": 448, "crop_to": 392},
    "fusion": {"scheme": "grouped", "groups": [[3, 4, 5], [6, 7]]},
    "support_augs": ["rot90", "rot270"],
    "views": [{"kind": "identity"}, {"kind": "posclamp", "tau": 0.4}],
    "ablations": {"support_aug": True, "pmvt": True, "cimb": False},
    "eval_resolution": 128,
}


class TestParsing:
    def test_empty_document_is_default_pipeline(self):
        cfg = config_from_dict({})
        assert cfg == EngineConfig()
        assert cfg.effective_plan() == AugmentationPlan()

    def test_none_path_is_default_pipeline(self):
        assert load_config(None) == EngineConfig()

    def test_full_document(self):
        cfg = config_from_dict(FULL_DOC)
        assert cfg.fusion.scheme is FusionScheme.GROUPED
        assert cfg.fusion.groups == ((3, 4, 5), (6, 7))
        assert cfg.support_augs == frozenset({SupportAug.ROT90, SupportAug.ROT270})
        assert cfg.views[1].kind is ViewKind.POSCLAMP and cfg.views[1].tau == 0.4
        assert not cfg.ablations.cimb
        assert cfg.eval_resolution == 128
        assert isinstance(cfg.make_backend(), FileFeatureBackend)

    def test_round_trip_through_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(FULL_DOC))
        assert load_config(p) == config_from_dict(FULL_DOC)

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="suport_augs"):
            config_from_dict({"suport_augs": ["rot90"]})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="preprocess"):
            config_from_dict({"preprocess": {"crop": 392}})

    def test_bad_view_kind_lists_options(self):
        with pytest.raises(ConfigError, match="identity"):
            config_from_dict({"views": [{"kind": "identity"}, {"kind": "sharpen"}]})

    def test_posclamp_requires_tau(self):
        with pytest.raises(ConfigError):
            config_from_dict({"views": [{"kind": "identity"}, {"kind": "posclamp"}]})

    def test_bad_support_aug_name(self):
        with pytest.raises(ConfigError, match="rot45"):
            config_from_dict({"support_augs": ["rot45"]})

    def test_onnx_backend_needs_model_path(self):
        with pytest.raises(ConfigError, match="model_path"):
            config_from_dict({"backend": "onnx"})

    def test_unknown_backend(self):
        with pytest.raises(ConfigError, match="backend"):
            config_from_dict({"backend": "torch"})

    def test_bool_is_not_an_integer(self):
        with pytest.raises(ConfigError, match="eval_resolution"):
            config_from_dict({"eval_resolution": True})

    def test_overlapping_fusion_groups_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"fusion": {"groups": [[3, 4], [4, 5]]}})

    def test_invalid_json_file(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.json")


class TestAblations:
    def test_support_aug_off_empties_plan(self):
        cfg = config_from_dict({"ablations": {"support_aug": False}})
        assert cfg.effective_plan().ordered_augs == ()
        # configured augs are remembered, just not applied
        assert cfg.support_augs == EngineConfig().support_augs

    def test_pmvt_off_keeps_identity_only(self):
        cfg = config_from_dict({"ablations": {"pmvt": False}})
        plan = cfg.effective_plan()
        assert len(plan.views) == 1 and plan.views[0].kind is ViewKind.IDENTITY

    def test_echo_marks_routing_state(self):
        cfg = config_from_dict({"ablations": {"cimb": False}})
        echo = json.loads(effective_config_json(cfg))
        assert echo["effective"]["category_routing"] is False

    def test_echo_is_byte_stable(self):
        cfg = config_from_dict(FULL_DOC)
        assert effective_config_json(cfg) == effective_config_json(cfg)
        echo = json.loads(effective_config_json(cfg))
        assert echo["effective"]["views"] == ["identity", "posclamp-0.4"]

    def test_toggles_default_on(self):
        assert AblationToggles() == AblationToggles(True, True, True)
