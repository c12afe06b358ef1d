"""Image preprocessing, the feature-extractor boundary, and feature-file IO.

Images travel through the engine as float32 (H, W, 3) arrays with values in
[0, 1]; channel mean/std normalization happens inside the extractor step so
photometric transforms upstream see raw intensities. Patch features are
(grid_h, grid_w, dim) float32 grids per transformer layer plus one class
token, bundled as a FeatureStack.

Two interchangeable backends produce stacks: FileFeatureBackend reads
precomputed ".vadf" sidecar files (no pixel decoding at all), and
OnnxFeatureBackend runs an exported vision transformer. Either can be
swapped for an InMemoryBackend in tests.
"""
from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DatasetError,
    ExtractorError,
    FeatureFileError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .numerics import bilinear_resize

MAGIC = b"VADF"
FORMAT_VERSION = 1

# Constants the frozen backbones were trained with.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessSpec:
    resize_to: int = 448
    crop_to: int = 392
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.resize_to < 1 or self.crop_to < 1:
            raise ConfigError("resize_to and crop_to must be positive")
        if self.crop_to > self.resize_to:
            raise ConfigError(
                f"crop_to ({self.crop_to}) cannot exceed resize_to ({self.resize_to})"
            )


def default_preprocess() -> PreprocessSpec:
    return PreprocessSpec()


def layer_name(index: int) -> str:
    if not (0 <= index <= 99):
        raise ShapeError(f"layer index out of the two-digit naming range: {index}")
    return f"layer_{index:02d}"


@dataclass(frozen=True)
class LayerFeatures:
    layer_index: int
    values: np.ndarray  # (grid_h, grid_w, dim) float32

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeError(f"layer values must be (grid_h, grid_w, dim), got {v.shape}")
        layer_name(self.layer_index)
        object.__setattr__(self, "values", v)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def name(self) -> str:
        return layer_name(self.layer_index)


@dataclass(frozen=True)
class FeatureStack:
    layers: tuple[LayerFeatures, ...]
    cls_token: np.ndarray  # (dim,) float32
    backbone_id: str = "unknown"

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ShapeError("a feature stack needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        first = self.layers[0]
        for lf in self.layers[1:]:
            if (lf.grid_h, lf.grid_w, lf.dim) != (first.grid_h, first.grid_w, first.dim):
                raise ShapeError(
                    f"layer {lf.layer_index} shape {(lf.grid_h, lf.grid_w, lf.dim)} "
                    f"differs from layer {first.layer_index} "
                    f"{(first.grid_h, first.grid_w, first.dim)}"
                )
        idx = [lf.layer_index for lf in self.layers]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ShapeError(f"layer indices must strictly increase, got {idx}")
        cls = np.asarray(self.cls_token, dtype=np.float32).ravel()
        if cls.shape[0] != first.dim:
            raise ShapeError(
                f"cls token length {cls.shape[0]} does not match layer dim {first.dim}"
            )
        object.__setattr__(self, "cls_token", cls)

    @property
    def grid_h(self) -> int:
        return self.layers[0].grid_h

    @property
    def grid_w(self) -> int:
        return self.layers[0].grid_w

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def layer_indices(self) -> tuple[int, ...]:
        return tuple(lf.layer_index for lf in self.layers)


# --- image loading and preprocessing ---

def load_image(path: str | Path) -> np.ndarray:
    """Decode PNG/JPEG/BMP to float32 (H, W, 3) in [0, 1]."""
    from PIL import Image

    p = Path(path)
    try:
        with Image.open(p) as im:
            rgb = im.convert("RGB")
            a = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"image not found: {p}") from None
    except OSError as e:
        raise DatasetError(f"cannot decode image {p}: {e}") from None
    if a.size == 0:
        raise DatasetError(f"zero-size image: {p}")
    return (a.astype(np.float32) / 255.0).astype(np.float32)


def preprocess_image(raw: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Aspect-preserving resize (shorter side -> resize_to) then center crop.

    Output shape depends only on spec: (crop_to, crop_to, 3). Values stay
    in [0, 1]; mean/std normalization is deferred to the extractor step.
    """
    a = np.asarray(raw, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {a.shape}")
    h, w = a.shape[:2]
    if h < 1 or w < 1:
        raise ShapeError("empty image")
    if h <= w:
        new_h = spec.resize_to
        new_w = max(spec.resize_to, int(round(w * spec.resize_to / h)))
    else:
        new_w = spec.resize_to
        new_h = max(spec.resize_to, int(round(h * spec.resize_to / w)))
    resized = np.stack(
        [bilinear_resize(a[:, :, c], new_h, new_w) for c in range(3)], axis=2
    )
    top = (new_h - spec.crop_to) // 2
    left = (new_w - spec.crop_to) // 2
    out = resized[top:top + spec.crop_to, left:left + spec.crop_to, :]
    return np.ascontiguousarray(out, dtype=np.float32)


def normalize_chw(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Mean/std-normalize and reorder to (3, H, W) for model input."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {a.shape}")
    mean = np.asarray(spec.channel_mean, dtype=np.float32)
    std = np.asarray(spec.channel_std, dtype=np.float32)
    norm = (a - mean) / std
    return np.ascontiguousarray(norm.transpose(2, 0, 1), dtype=np.float32)


# --- extractor boundary ---

@dataclass(frozen=True)
class ImageSource:
    """What a backend needs to produce features for one (image, transform chain).

    tags name the transform chain applied to the stored image, in application
    order (support augmentation first, then view); identity steps are omitted.
    pixels are filled in by the caller only for backends that decode images.
    """
    path: Path | None = None
    tags: tuple[str, ...] = ()
    pixels: np.ndarray | None = None

    def key(self) -> tuple[str, tuple[str, ...]]:
        return (str(self.path) if self.path is not None else "", self.tags)


class FeatureBackend(Protocol):
    needs_pixels: bool

    def extract(self, source: ImageSource, layer_indices: Sequence[int]) -> FeatureStack:
        ...


def _validate_indices(layer_indices: Sequence[int]) -> tuple[int, ...]:
    idx = tuple(int(i) for i in layer_indices)
    if len(idx) == 0:
        raise ConfigError("layer_indices must be non-empty")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError(f"layer_indices must strictly increase, got {list(idx)}")
    for i in idx:
        layer_name(i)
    return idx


def extract_features(
    backend: FeatureBackend, source: ImageSource, layer_indices: Sequence[int]
) -> FeatureStack:
    """Run a backend and enforce the stack contract on what comes back."""
    idx = _validate_indices(layer_indices)
    stack = backend.extract(source, idx)
    if stack.layer_indices != idx:
        raise ExtractorError(
            f"backend returned layers {list(stack.layer_indices)}, wanted {list(idx)}"
        )
    return stack


def variant_path(image_path: str | Path, tags: Sequence[str]) -> Path:
    """Sidecar feature file for an image under a transform-tag chain.

    No tags: "name.vadf". With tags: "name.tag1+tag2.vadf".
    """
    p = Path(image_path)
    chain = [t for t in tags if t]
    stem = p.name[: -len(p.suffix)] if p.suffix else p.name
    suffix = f".{'+'.join(chain)}.vadf" if chain else ".vadf"
    return p.with_name(stem + suffix)


class FileFeatureBackend:
    """Serves stacks from precomputed sidecar files; never touches pixels."""

    needs_pixels = False

    def extract(self, source: ImageSource, layer_indices: Sequence[int]) -> FeatureStack:
        if source.path is None:
            raise ExtractorError("file backend needs an image path")
        path = variant_path(source.path, source.tags)
        stack = read_feature_file(path)
        have = {lf.layer_index: lf for lf in stack.layers}
        missing = [i for i in layer_indices if i not in have]
        if missing:
            raise ExtractorError(
                f"{path} lacks required layer(s) {missing}; has {sorted(have)}"
            )
        return FeatureStack(
            layers=tuple(have[i] for i in layer_indices),
            cls_token=stack.cls_token,
            backbone_id=stack.backbone_id,
        )


class InMemoryBackend:
    """Dict-backed stand-in for tests and synthetic pipelines."""

    needs_pixels = False

    def __init__(self):
        self._stacks: dict[tuple[str, tuple[str, ...]], FeatureStack] = {}

    def put(self, source: ImageSource, stack: FeatureStack) -> None:
        self._stacks[source.key()] = stack

    def extract(self, source: ImageSource, layer_indices: Sequence[int]) -> FeatureStack:
        try:
            stack = self._stacks[source.key()]
        except KeyError:
            raise ExtractorError(f"no stored features for {source.key()}") from None
        have = {lf.layer_index: lf for lf in stack.layers}
        missing = [i for i in layer_indices if i not in have]
        if missing:
            raise ExtractorError(f"stored stack lacks layer(s) {missing}")
        return FeatureStack(
            layers=tuple(have[i] for i in layer_indices),
            cls_token=stack.cls_token,
            backbone_id=stack.backbone_id,
        )


class OnnxFeatureBackend:
    """Runs an exported transformer; takes pre-normalized (3, H, W) input.

    The model contract: input "pixels" [1, 3, H, W] float32, outputs
    "layer_NN" [1, tokens, D] in row-major patch order plus "cls" [1, D].
    An explicit session object (anything with .run) may be injected, which
    keeps the engine testable where onnxruntime is unavailable.
    """

    needs_pixels = True

    def __init__(
        self,
        model_path: str | Path | None = None,
        *,
        session=None,
        preprocess: PreprocessSpec | None = None,
        backbone_id: str = "onnx",
    ):
        if session is None:
            if model_path is None:
                raise ConfigError("OnnxFeatureBackend needs a model path or a session")
            try:
                import onnxruntime  # type: ignore[import-not-found]
            except ImportError:
                raise ExtractorError(
                    "onnxruntime is not installed; install the 'onnx' extra to "
                    "run model inference, or use precomputed feature files"
                ) from None
            session = onnxruntime.InferenceSession(
                str(model_path), providers=["CPUExecutionProvider"]
            )
        self._session = session
        self._lock = threading.Lock()
        self.preprocess = preprocess if preprocess is not None else default_preprocess()
        self.backbone_id = backbone_id

    def extract(self, source: ImageSource, layer_indices: Sequence[int]) -> FeatureStack:
        if source.pixels is None:
            raise ExtractorError("onnx backend needs decoded pixels")
        names = [layer_name(i) for i in layer_indices] + ["cls"]
        get_outputs = getattr(self._session, "get_outputs", None)
        if callable(get_outputs):
            available = {o.name for o in get_outputs()}
            missing = [n for n in names if n not in available]
            if missing:
                raise ExtractorError(f"model does not expose output(s) {missing}")
        chw = normalize_chw(source.pixels, self.preprocess)
        with self._lock:
            outs = self._session.run(names, {"pixels": chw[None]})
        layers = []
        for idx, raw in zip(layer_indices, outs[:-1]):
            t = np.asarray(raw, dtype=np.float32)
            if t.ndim != 3 or t.shape[0] != 1:
                raise ExtractorError(
                    f"{layer_name(idx)}: expected [1, tokens, dim], got {t.shape}"
                )
            tokens = t.shape[1]
            g = math.isqrt(tokens)
            if g * g != tokens:
                raise ExtractorError(
                    f"{layer_name(idx)}: {tokens} tokens is not a square grid "
                    "(register tokens must be stripped at export time)"
                )
            layers.append(LayerFeatures(idx, t.reshape(g, g, t.shape[2])))
        cls = np.asarray(outs[-1], dtype=np.float32)
        if cls.ndim != 2 or cls.shape[0] != 1:
            raise ExtractorError(f"cls: expected [1, dim], got {cls.shape}")
        return FeatureStack(
            layers=tuple(layers), cls_token=cls[0], backbone_id=self.backbone_id
        )


# --- feature interchange files (.vadf) ---

def pack_tensor(name: str, arr: np.ndarray, dtype: str) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def write_feature_file(path: str | Path, stack: FeatureStack) -> None:
    records = []
    for lf in stack.layers:
        records.append(pack_tensor(lf.name, lf.values, "<f4"))
    records.append(pack_tensor("cls", stack.cls_token, "<f4"))
    meta = json.dumps({"backbone_id": stack.backbone_id}).encode("utf-8")
    records.append(pack_tensor("meta", np.frombuffer(meta, dtype=np.uint8), "u1"))
    blob = struct.pack("<4sHH", MAGIC, FORMAT_VERSION, len(records)) + b"".join(records)
    Path(path).write_bytes(blob)


class ByteCursor:
    def __init__(self, buf: bytes, where: str):
        self.buf = buf
        self.off = 0
        self.where = where

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.where}: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def u32s(self, n: int) -> tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n))


def read_raw_tensors(cur: ByteCursor, count: int) -> dict[str, np.ndarray]:
    """Shared record parser: name -> array (f32, or u8 for 'meta')."""
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = cur.take(cur.u16()).decode("utf-8")
        ndim = cur.u8()
        dims = cur.u32s(ndim)
        n_elem = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if name == "meta":
            payload = np.frombuffer(cur.take(n_elem), dtype=np.uint8)
        else:
            payload = np.frombuffer(cur.take(4 * n_elem), dtype="<f4")
        if name in tensors:
            raise FeatureFileError(f"{cur.where}: duplicate tensor name '{name}'")
        tensors[name] = payload.reshape(dims)
    return tensors


def _stack_from_tensors(tensors: dict[str, np.ndarray], where: str) -> FeatureStack:
    backbone_id = "unknown"
    if "meta" in tensors:
        try:
            meta = json.loads(bytes(tensors["meta"]).decode("utf-8"))
            backbone_id = str(meta.get("backbone_id", backbone_id))
        except (ValueError, UnicodeDecodeError) as e:
            raise FeatureFileError(f"{where}: bad metadata record: {e}") from None
    if "cls" not in tensors:
        raise FeatureFileError(f"{where}: missing required tensor 'cls'")
    cls = tensors["cls"]
    if cls.ndim != 1:
        raise FeatureFileError(f"{where}: 'cls' must be 1-D, got shape {cls.shape}")
    layers = []
    for name, arr in tensors.items():
        if not name.startswith("layer_"):
            continue
        try:
            idx = int(name[len("layer_"):])
        except ValueError:
            raise FeatureFileError(f"{where}: malformed layer name '{name}'") from None
        if arr.ndim != 3:
            raise FeatureFileError(f"{where}: '{name}' must be 3-D, got shape {arr.shape}")
        layers.append(LayerFeatures(idx, arr))
    if not layers:
        raise FeatureFileError(f"{where}: no layer tensors present")
    layers.sort(key=lambda lf: lf.layer_index)
    try:
        return FeatureStack(layers=tuple(layers), cls_token=cls, backbone_id=backbone_id)
    except ShapeError as e:
        raise FeatureFileError(f"{where}: {e}") from None


def read_feature_file(path: str | Path) -> FeatureStack:
    p = Path(path)
    try:
        blob = p.read_bytes()
    except FileNotFoundError:
        raise FeatureFileError(f"feature file not found: {p}") from None
    except OSError as e:
        raise FeatureFileError(f"cannot read feature file {p}: {e}") from None
    cur = ByteCursor(blob, str(p))
    magic = cur.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{p}: bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.u16()
    if version != FORMAT_VERSION:
        raise VersionError(f"{p}: unsupported version {version}, expected {FORMAT_VERSION}")
    tensors = read_raw_tensors(cur, cur.u16())
    return _stack_from_tensors(tensors, str(p))
