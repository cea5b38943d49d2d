"""Small multi-stage convolutional backbone with tapped feature maps.

Three stages of (conv3x3 + relu) x 2 followed by 2x2 max pooling leave the
shared feature map at stride 8 over 64x64 inputs. The classification network
adds one more 3x3 conv ("cam" tap), global average pooling, and a linear
classifier; its attention maps later supervise the localization network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"WSDL"
CHECKPOINT_VERSION = 1
_STAGE_TAG_PREFIX = "stage:"

VALID_TAPS = ("mid", "late", "cam")


@dataclass
class BackboneConfig:
    input_size: tuple = (64, 64)
    stage_channels: tuple = (16, 32, 64)
    convs_per_stage: int = 2
    cam_channels: int = 128
    num_classes: int = 8
    tap_levels: tuple = ("late", "cam")

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.stage_channels = tuple(self.stage_channels)
        self.tap_levels = tuple(self.tap_levels)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages")
        for name in self.tap_levels:
            if name not in VALID_TAPS:
                raise ValueError(f"unknown tap level {name!r}, valid: {VALID_TAPS}")
        down = 2 ** len(self.stage_channels)
        if self.input_size[0] % down or self.input_size[1] % down:
            raise ValueError(f"input {self.input_size} not divisible by total stride {down}")

    def tap_stride(self, name: str) -> int:
        n = len(self.stage_channels)
        if name == "mid":
            return 2 ** (n - 1)
        if name in ("late", "cam"):
            return 2 ** n
        raise ValueError(f"unknown tap level {name!r}")

    @property
    def grid_size(self) -> tuple:
        s = self.tap_stride("late")
        return (self.input_size[0] // s, self.input_size[1] // s)


@dataclass
class FeatureSet:
    taps: dict
    strides: dict
    cam_logits: Tensor | None = None
    cam_class_weights: np.ndarray | None = None


# ---------------------------------------------------------------------------
# parameters


def init_stage_params(config: BackboneConfig, rng: np.random.Generator,
                      dtype=np.float32) -> dict:
    """Shared convolutional stages: zero biases, fan-in scaled uniform weights."""
    params = {}
    in_ch = 3
    for s, out_ch in enumerate(config.stage_channels):
        for j in range(config.convs_per_stage):
            fan_in = in_ch * 9
            params[f"stages.{s}.conv{j}.weight"] = Tensor(
                ad.fan_in_uniform(rng, (out_ch, in_ch, 3, 3), fan_in, dtype), requires_grad=True)
            params[f"stages.{s}.conv{j}.bias"] = Tensor(
                np.zeros(out_ch, dtype=dtype), requires_grad=True)
            in_ch = out_ch
    return params


def init_maen_params(config: BackboneConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict:
    params = init_stage_params(config, rng, dtype)
    last = config.stage_channels[-1]
    cam = config.cam_channels
    params["cam.conv.weight"] = Tensor(
        ad.fan_in_uniform(rng, (cam, last, 3, 3), last * 9, dtype), requires_grad=True)
    params["cam.conv.bias"] = Tensor(np.zeros(cam, dtype=dtype), requires_grad=True)
    params["cam.fc.weight"] = Tensor(
        ad.fan_in_uniform(rng, (cam, config.num_classes), cam, dtype), requires_grad=True)
    params["cam.fc.bias"] = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward passes


def _check_images(images: Tensor, config: BackboneConfig):
    if images.ndim != 4 or images.shape[1] != 3:
        raise ad.ShapeError(f"expected images [N,3,H,W], got {images.shape}")
    if tuple(images.shape[2:]) != config.input_size:
        raise ad.ShapeError(
            f"image extent {tuple(images.shape[2:])} does not match config {config.input_size}")
    lo, hi = images.data.min(), images.data.max()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [0,1], got [{lo}, {hi}]")


def stage_forward(params: dict, images: Tensor, config: BackboneConfig) -> list:
    """Run the shared stages; returns one post-pool feature map per stage.

    Each sample's scalar mean is subtracted before the first conv: inputs
    arrive in [0,1] and their DC component otherwise swamps the relu gates
    during from-scratch training. A zero image is unchanged (mean zero).
    """
    _check_images(images, config)
    x = ad.center_mean(images)
    outputs = []
    for s in range(len(config.stage_channels)):
        for j in range(config.convs_per_stage):
            x = ad.relu(ad.conv2d(x, params[f"stages.{s}.conv{j}.weight"],
                                  params[f"stages.{s}.conv{j}.bias"], stride=1, pad=1))
        x = ad.max_pool2d(x)
        outputs.append(x)
    return outputs


def _collect_taps(stage_outputs: list, cam_map, config: BackboneConfig):
    taps, strides = {}, {}
    for name in config.tap_levels:
        if name == "mid":
            taps[name] = stage_outputs[-2]
        elif name == "late":
            taps[name] = stage_outputs[-1]
        elif name == "cam":
            if cam_map is None:
                raise ValueError("'cam' tap requested from a network without a cam head")
            taps[name] = cam_map
        strides[name] = config.tap_stride(name)
    return taps, strides


def maen_forward(params: dict, images: Tensor, config: BackboneConfig) -> FeatureSet:
    """Classification-network forward: taps plus cam logits."""
    stage_outputs = stage_forward(params, images, config)
    cam_map = ad.relu(ad.conv2d(stage_outputs[-1], params["cam.conv.weight"],
                                params["cam.conv.bias"], stride=1, pad=1))
    pooled = ad.global_avg_pool(cam_map)
    logits = ad.linear(pooled, params["cam.fc.weight"], params["cam.fc.bias"])
    taps, strides = _collect_taps(stage_outputs, cam_map, config)
    return FeatureSet(taps=taps, strides=strides, cam_logits=logits,
                      cam_class_weights=params["cam.fc.weight"].data)


def dln_forward(params: dict, images: Tensor, config: BackboneConfig) -> FeatureSet:
    """Localization-network forward: shared stages only, no cam head."""
    stage_outputs = stage_forward(params, images, config)
    levels = tuple(n for n in config.tap_levels if n != "cam")
    sub = FeatureSet(taps={}, strides={})
    for name in levels:
        sub.taps[name] = stage_outputs[-2] if name == "mid" else stage_outputs[-1]
        sub.strides[name] = config.tap_stride(name)
    sub.taps["late"] = stage_outputs[-1]
    sub.strides["late"] = config.tap_stride("late")
    return sub


def maen_classify(params: dict, images, config: BackboneConfig):
    """Predicted probabilities and classes; ties resolve to the lowest index."""
    with ad.no_grad():
        x = images if isinstance(images, Tensor) else Tensor(images)
        fs = maen_forward(params, x, config)
        probs = ad.softmax(fs.cam_logits).data
    return probs, probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int = CHECKPOINT_VERSION
    params: dict = field(default_factory=dict)  # name -> float32 ndarray
    stage_tag: str = ""


def params_to_checkpoint(params: dict, stage_tag: str) -> Checkpoint:
    table = {name: np.ascontiguousarray(t.data, dtype=np.float32) for name, t in params.items()}
    return Checkpoint(CHECKPOINT_VERSION, table, stage_tag)


def checkpoint_to_params(ckpt: Checkpoint, requires_grad: bool = True) -> dict:
    return {name: Tensor(arr.copy(), requires_grad=requires_grad)
            for name, arr in ckpt.params.items()}


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary layout: magic, version u32, entry count u32, then per entry
    name (u16 length + UTF-8), rank u8, dims u32 each, values as LE float32."""
    blobs = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version),
             struct.pack("<I", len(ckpt.params) + 1)]

    def entry(name, arr):
        raw = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    entry(_STAGE_TAG_PREFIX + ckpt.stage_tag, np.zeros((0,), dtype=np.float32))
    for name, arr in ckpt.params.items():
        entry(name, arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    version, count = take("<I")[0], take("<I")[0]
    ckpt = Checkpoint(version=version, params={}, stage_tag="")
    for _ in range(count):
        (name_len,) = take("<H")
        if off + name_len > len(data):
            raise ValueError(f"{path}: truncated checkpoint name")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if rank and 0 in dims:
            n = 0
        nbytes = 4 * n
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated checkpoint values for {name}")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(dims)
        off += nbytes
        if name.startswith(_STAGE_TAG_PREFIX):
            ckpt.stage_tag = name[len(_STAGE_TAG_PREFIX):]
        else:
            ckpt.params[name] = arr.copy()
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes in checkpoint")
    return ckpt


def clone_shared_weights(source: Checkpoint, target: Checkpoint,
                         shared_prefix: str = "stages.") -> Checkpoint:
    """New checkpoint whose shared stages are exact copies of ``source``.

    Non-shared (head) entries keep the freshly initialized values from
    ``target``. Shared names absent from the source are an error.
    """
    missing = [n for n in target.params if n.startswith(shared_prefix) and n not in source.params]
    if missing:
        raise KeyError(f"source checkpoint is missing shared parameters: {sorted(missing)}")
    table = {}
    for name, arr in target.params.items():
        src = source.params[name] if name.startswith(shared_prefix) else arr
        table[name] = src.copy()
    return Checkpoint(target.version, table, target.stage_tag)
