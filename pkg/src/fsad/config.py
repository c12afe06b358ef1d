"""Engine configuration: a single JSON document drives every pipeline knob.

The schema is strict on purpose. Unknown keys are rejected at every level so a
typo like "suport_augs" fails loudly instead of silently running the default
pipeline, and the fully resolved configuration can be echoed back for audit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .augment import (
    AugmentationPlan,
    IDENTITY_VIEW,
    SupportAug,
    ViewKind,
    ViewTransform,
    default_support_augs,
    default_views,
)
from .errors import ConfigError
from .features import (
    FeatureBackend,
    FileFeatureBackend,
    OnnxFeatureBackend,
    PreprocessSpec,
)
from .fusion import FusionScheme, FusionSpec

BACKENDS = ("files", "onnx")


@dataclass(frozen=True)
class AblationToggles:
    """Pipeline stages that can be switched off independently.

    support_aug: rotate/flip expansion of the support set
    pmvt: pseudo multi-view transforms at detection time
    cimb: category-indexed memory (off = search the union of all categories)
    """

    support_aug: bool = True
    pmvt: bool = True
    cimb: bool = True


@dataclass(frozen=True)
class EngineConfig:
    backend: str = "files"
    model_path: Path | None = None
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    support_augs: frozenset[SupportAug] = field(default_factory=default_support_augs)
    views: tuple[ViewTransform, ...] = field(default_factory=default_views)
    ablations: AblationToggles = field(default_factory=AblationToggles)
    eval_resolution: int = 256

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(
                f"backend must be one of {list(BACKENDS)}, got {self.backend!r}"
            )
        if self.backend == "onnx" and self.model_path is None:
            raise ConfigError("the onnx backend needs model_path")
        if self.eval_resolution < 1:
            raise ConfigError("eval_resolution must be positive")

    def effective_plan(self) -> AugmentationPlan:
        """Augmentation plan with the ablation toggles applied."""
        augs = self.support_augs if self.ablations.support_aug else frozenset()
        views = self.views if self.ablations.pmvt else (IDENTITY_VIEW,)
        return AugmentationPlan(support_augs=augs, views=views)

    def make_backend(self) -> FeatureBackend:
        if self.backend == "onnx":
            return OnnxFeatureBackend(model_path=self.model_path)
        return FileFeatureBackend()

    def to_dict(self) -> dict:
        """Fully resolved echo, suitable for audit and byte-stable re-emits."""
        plan = self.effective_plan()
        return {
            "backend": self.backend,
            "model_path": str(self.model_path) if self.model_path else None,
            "preprocess": {
                "resize_to": self.preprocess.resize_to,
                "crop_to": self.preprocess.crop_to,
            },
            "fusion": {
                "scheme": self.fusion.scheme.value,
                "groups": [list(g) for g in self.fusion.groups],
            },
            "support_augs": [a.value for a in SupportAug if a in self.support_augs],
            "views": [_view_dict(v) for v in self.views],
            "ablations": {
                "support_aug": self.ablations.support_aug,
                "pmvt": self.ablations.pmvt,
                "cimb": self.ablations.cimb,
            },
            "eval_resolution": self.eval_resolution,
            "effective": {
                "support_augs": [a.value for a in plan.ordered_augs],
                "views": [v.tag() for v in plan.views],
                "category_routing": self.ablations.cimb,
            },
        }


def _view_dict(v: ViewTransform) -> dict:
    d: dict[str, Any] = {"kind": v.kind.value}
    if v.tau is not None:
        d["tau"] = v.tau
    return d


def _require_keys(d: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _expect(value, types, where: str):
    if not isinstance(value, types):
        names = (
            "/".join(t.__name__ for t in types)
            if isinstance(types, tuple)
            else types.__name__
        )
        raise ConfigError(f"{where} must be {names}, got {type(value).__name__}")
    return value


def _expect_int(value, where: str) -> int:
    # bool is an int subtype in Python; JSON true/false is never a count here
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {type(value).__name__}")
    return value


def _parse_view(d, where: str) -> ViewTransform:
    _expect(d, dict, where)
    _require_keys(d, {"kind", "tau"}, where)
    if "kind" not in d:
        raise ConfigError(f"{where} needs a 'kind'")
    kind_s = _expect(d["kind"], str, f"{where}.kind")
    try:
        kind = ViewKind(kind_s)
    except ValueError:
        raise ConfigError(
            f"{where}.kind must be one of {[k.value for k in ViewKind]}, got {kind_s!r}"
        ) from None
    tau = d.get("tau")
    if tau is not None:
        tau = float(_expect(tau, (int, float), f"{where}.tau"))
    return ViewTransform(kind, tau=tau)


def config_from_dict(raw: Mapping) -> EngineConfig:
    _expect(raw, dict, "config")
    _require_keys(
        raw,
        {
            "backend",
            "model_path",
            "preprocess",
            "fusion",
            "support_augs",
            "views",
            "ablations",
            "eval_resolution",
        },
        "config",
    )
    kwargs: dict[str, Any] = {}
    if "backend" in raw:
        kwargs["backend"] = _expect(raw["backend"], str, "backend")
    if raw.get("model_path") is not None:
        kwargs["model_path"] = Path(_expect(raw["model_path"], str, "model_path"))

    if "preprocess" in raw:
        p = _expect(raw["preprocess"], dict, "preprocess")
        _require_keys(p, {"resize_to", "crop_to"}, "preprocess")
        defaults = PreprocessSpec()
        kwargs["preprocess"] = PreprocessSpec(
            resize_to=_expect_int(p.get("resize_to", defaults.resize_to), "preprocess.resize_to"),
            crop_to=_expect_int(p.get("crop_to", defaults.crop_to), "preprocess.crop_to"),
        )

    if "fusion" in raw:
        f = _expect(raw["fusion"], dict, "fusion")
        _require_keys(f, {"scheme", "groups"}, "fusion")
        scheme_s = f.get("scheme", FusionScheme.GROUPED.value)
        try:
            scheme = FusionScheme(_expect(scheme_s, str, "fusion.scheme"))
        except ValueError:
            raise ConfigError(
                f"fusion.scheme must be one of {[s.value for s in FusionScheme]}, "
                f"got {scheme_s!r}"
            ) from None
        fusion_kwargs: dict[str, Any] = {"scheme": scheme}
        if "groups" in f:
            groups = _expect(f["groups"], list, "fusion.groups")
            parsed = []
            for gi, g in enumerate(groups):
                g = _expect(g, list, f"fusion.groups[{gi}]")
                parsed.append(
                    tuple(
                        _expect_int(i, f"fusion.groups[{gi}][{j}]")
                        for j, i in enumerate(g)
                    )
                )
            fusion_kwargs["groups"] = tuple(parsed)
        kwargs["fusion"] = FusionSpec(**fusion_kwargs)

    if "support_augs" in raw:
        lst = _expect(raw["support_augs"], list, "support_augs")
        augs = set()
        for i, name in enumerate(lst):
            name = _expect(name, str, f"support_augs[{i}]")
            try:
                augs.add(SupportAug(name))
            except ValueError:
                raise ConfigError(
                    f"support_augs[{i}] must be one of "
                    f"{[a.value for a in SupportAug]}, got {name!r}"
                ) from None
        kwargs["support_augs"] = frozenset(augs)

    if "views" in raw:
        lst = _expect(raw["views"], list, "views")
        kwargs["views"] = tuple(
            _parse_view(v, f"views[{i}]") for i, v in enumerate(lst)
        )

    if "ablations" in raw:
        a = _expect(raw["ablations"], dict, "ablations")
        _require_keys(a, {"support_aug", "pmvt", "cimb"}, "ablations")
        kwargs["ablations"] = AblationToggles(
            support_aug=bool(_expect(a.get("support_aug", True), bool, "ablations.support_aug")),
            pmvt=bool(_expect(a.get("pmvt", True), bool, "ablations.pmvt")),
            cimb=bool(_expect(a.get("cimb", True), bool, "ablations.cimb")),
        )

    if "eval_resolution" in raw:
        kwargs["eval_resolution"] = _expect_int(raw["eval_resolution"], "eval_resolution")

    return EngineConfig(**kwargs)


def load_config(path: str | Path | None) -> EngineConfig:
    """Read a JSON config file; None means the default pipeline."""
    if path is None:
        return EngineConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def effective_config_json(cfg: EngineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
